"""Hot memory-bound kernels (im2col / col2im / pooling / fused elementwise).

The math is defined by the plain-numpy reference implementations below;
when numba is importable the same loops run JIT-compiled, which is several
times faster on the feature-map sizes this engine works with. Both paths
produce identical values (same arithmetic, same tie-breaking).
"""

import numpy as np

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*a, **k):
        def deco(f):
            return f
        return deco


# ---- reference (and fallback) implementations --------------------------------

def _im2col_np(x, kh, kw, pad):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = h + 2 * pad - kh + 1
    ow = w + 2 * pad - kw + 1
    cols = np.empty((n, oh, ow, c, kh, kw), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, :, i, j] = x[:, :, i:i + oh, j:j + ow].transpose(0, 2, 3, 1)
    return cols.reshape(n * oh * ow, c * kh * kw)


def _col2im_np(dcols, n, c, h, w, kh, kw, pad):
    oh = h + 2 * pad - kh + 1
    ow = w + 2 * pad - kw + 1
    dcols = dcols.reshape(n, oh, ow, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + oh, j:j + ow] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:-pad, pad:-pad])
    return dxp


def _rows2nchw_bias_np(y2, bias, n, oh, ow):
    y = y2.reshape(n, oh, ow, -1) + bias
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def _nchw2rows_np(dy):
    return np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(-1, dy.shape[1])


def _maxpool_fwd_np(x):
    a = x[:, :, ::2, ::2]
    b = x[:, :, ::2, 1::2]
    c = x[:, :, 1::2, ::2]
    d = x[:, :, 1::2, 1::2]
    return np.maximum(np.maximum(a, b), np.maximum(c, d))


def _maxpool_bwd_np(x, dy):
    a = x[:, :, ::2, ::2]
    b = x[:, :, ::2, 1::2]
    c = x[:, :, 1::2, ::2]
    d = x[:, :, 1::2, 1::2]
    m1 = a >= b
    m2 = c >= d
    top_wins = np.maximum(a, b) >= np.maximum(c, d)
    dx = np.zeros_like(x)
    dx[:, :, ::2, ::2] = np.where(m1 & top_wins, dy, 0)
    dx[:, :, ::2, 1::2] = np.where(~m1 & top_wins, dy, 0)
    dx[:, :, 1::2, ::2] = np.where(m2 & ~top_wins, dy, 0)
    dx[:, :, 1::2, 1::2] = np.where(~m2 & ~top_wins, dy, 0)
    return dx


def _affine4d_np(x, scale, shift):
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def _scale4d_np(dy, scale):
    return dy * scale[None, :, None, None]


def _relu_bwd_np(dy, y):
    return dy * (y > 0)


# ---- JIT versions --------------------------------------------------------------

@njit(cache=True)
def _im2col_jit(x, kh, kw, pad, cols):
    n, c, h, w = x.shape
    oh = h + 2 * pad - kh + 1
    ow = w + 2 * pad - kw + 1
    for ni in range(n):
        for oy in range(oh):
            y0 = oy - pad
            for ox in range(ow):
                row = (ni * oh + oy) * ow + ox
                x0 = ox - pad
                col = 0
                if 0 <= y0 and y0 + kh <= h and 0 <= x0 and x0 + kw <= w:
                    # interior pixel: no bounds checks in the inner loops
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                cols[row, col] = x[ni, ci, y0 + i, x0 + j]
                                col += 1
                else:
                    for ci in range(c):
                        for i in range(kh):
                            y = y0 + i
                            for j in range(kw):
                                xj = x0 + j
                                if 0 <= y < h and 0 <= xj < w:
                                    cols[row, col] = x[ni, ci, y, xj]
                                else:
                                    cols[row, col] = 0.0
                                col += 1


@njit(cache=True)
def _col2im_jit(dcols, kh, kw, pad, dx):
    n, c, h, w = dx.shape
    oh = h + 2 * pad - kh + 1
    ow = w + 2 * pad - kw + 1
    for ni in range(n):
        for oy in range(oh):
            y0 = oy - pad
            for ox in range(ow):
                row = (ni * oh + oy) * ow + ox
                x0 = ox - pad
                col = 0
                if 0 <= y0 and y0 + kh <= h and 0 <= x0 and x0 + kw <= w:
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                dx[ni, ci, y0 + i, x0 + j] += dcols[row, col]
                                col += 1
                else:
                    for ci in range(c):
                        for i in range(kh):
                            y = y0 + i
                            for j in range(kw):
                                xj = x0 + j
                                if 0 <= y < h and 0 <= xj < w:
                                    dx[ni, ci, y, xj] += dcols[row, col]
                                col += 1


@njit(cache=True)
def _rows2nchw_bias_jit(y2, bias, y):
    n, cout, oh, ow = y.shape
    for ni in range(n):
        for oy in range(oh):
            for ox in range(ow):
                row = (ni * oh + oy) * ow + ox
                for co in range(cout):
                    y[ni, co, oy, ox] = y2[row, co] + bias[co]


@njit(cache=True)
def _nchw2rows_jit(dy, out):
    n, cout, oh, ow = dy.shape
    for ni in range(n):
        for co in range(cout):
            for oy in range(oh):
                for ox in range(ow):
                    out[(ni * oh + oy) * ow + ox, co] = dy[ni, co, oy, ox]


@njit(cache=True)
def _maxpool_fwd_jit(x, y):
    n, c, h2, w2 = y.shape
    for ni in range(n):
        for ci in range(c):
            for i in range(h2):
                for j in range(w2):
                    a = x[ni, ci, 2 * i, 2 * j]
                    b = x[ni, ci, 2 * i, 2 * j + 1]
                    cc = x[ni, ci, 2 * i + 1, 2 * j]
                    d = x[ni, ci, 2 * i + 1, 2 * j + 1]
                    m = a
                    if b > m:
                        m = b
                    if cc > m:
                        m = cc
                    if d > m:
                        m = d
                    y[ni, ci, i, j] = m


@njit(cache=True)
def _maxpool_bwd_jit(x, dy, dx):
    # one sequential write pass: zeros everywhere except the window winner
    n, c, h2, w2 = dy.shape
    for ni in range(n):
        for ci in range(c):
            for i in range(h2):
                for j in range(w2):
                    a = x[ni, ci, 2 * i, 2 * j]
                    b = x[ni, ci, 2 * i, 2 * j + 1]
                    cc = x[ni, ci, 2 * i + 1, 2 * j]
                    d = x[ni, ci, 2 * i + 1, 2 * j + 1]
                    # first maximum in row-major window order wins
                    k = 0
                    best = a
                    if b > best:
                        best = b
                        k = 1
                    if cc > best:
                        best = cc
                        k = 2
                    if d > best:
                        k = 3
                    g = dy[ni, ci, i, j]
                    dx[ni, ci, 2 * i, 2 * j] = g if k == 0 else 0.0
                    dx[ni, ci, 2 * i, 2 * j + 1] = g if k == 1 else 0.0
                    dx[ni, ci, 2 * i + 1, 2 * j] = g if k == 2 else 0.0
                    dx[ni, ci, 2 * i + 1, 2 * j + 1] = g if k == 3 else 0.0


@njit(cache=True)
def _affine4d_jit(x, scale, shift, y):
    n, c, h, w = x.shape
    for ni in range(n):
        for ci in range(c):
            s = scale[ci]
            t = shift[ci]
            for i in range(h):
                for j in range(w):
                    y[ni, ci, i, j] = x[ni, ci, i, j] * s + t


@njit(cache=True)
def _scale4d_jit(dy, scale, out):
    n, c, h, w = dy.shape
    for ni in range(n):
        for ci in range(c):
            s = scale[ci]
            for i in range(h):
                for j in range(w):
                    out[ni, ci, i, j] = dy[ni, ci, i, j] * s


@njit(cache=True)
def _relu_bwd_jit(dy, y, out):
    f = dy.reshape(-1)
    g = y.reshape(-1)
    o = out.reshape(-1)
    for i in range(f.size):
        o[i] = f[i] if g[i] > 0 else 0.0


# ---- public entry points ---------------------------------------------------------

def im2col(x, kh, kw, pad):
    """Images (n,c,h,w) -> patch matrix (n*(h+2p-kh+1)*(w+2p-kw+1), c*kh*kw).

    Zero padding is applied implicitly while gathering patches.
    """
    if HAVE_NUMBA:
        n, c, h, w = x.shape
        oh = h + 2 * pad - kh + 1
        ow = w + 2 * pad - kw + 1
        cols = np.empty((n * oh * ow, c * kh * kw), dtype=x.dtype)
        _im2col_jit(np.ascontiguousarray(x), kh, kw, pad, cols)
        return cols
    return _im2col_np(x, kh, kw, pad)


def col2im(dcols, n, c, h, w, kh, kw, pad):
    """Adjoint of im2col, accumulating straight into an unpadded (n,c,h,w) buffer."""
    if HAVE_NUMBA:
        dx = np.zeros((n, c, h, w), dtype=dcols.dtype)
        _col2im_jit(np.ascontiguousarray(dcols), kh, kw, pad, dx)
        return dx
    return _col2im_np(dcols, n, c, h, w, kh, kw, pad)


def rows2nchw_bias(y2, bias, n, oh, ow):
    """GEMM output (n*oh*ow, cout) + bias -> contiguous (n, cout, oh, ow)."""
    if HAVE_NUMBA:
        y = np.empty((n, y2.shape[1], oh, ow), dtype=y2.dtype)
        _rows2nchw_bias_jit(np.ascontiguousarray(y2), bias.astype(y2.dtype, copy=False), y)
        return y
    return _rows2nchw_bias_np(y2, bias, n, oh, ow)


def nchw2rows(dy):
    """(n, cout, oh, ow) -> (n*oh*ow, cout), the layout GEMMs expect."""
    if HAVE_NUMBA:
        n, cout, oh, ow = dy.shape
        out = np.empty((n * oh * ow, cout), dtype=dy.dtype)
        _nchw2rows_jit(np.ascontiguousarray(dy), out)
        return out
    return _nchw2rows_np(dy)


def maxpool_fwd(x):
    if HAVE_NUMBA:
        n, c, h, w = x.shape
        y = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
        _maxpool_fwd_jit(np.ascontiguousarray(x), y)
        return y
    return _maxpool_fwd_np(x)


def maxpool_bwd(x, dy):
    if HAVE_NUMBA:
        dx = np.empty_like(x)
        _maxpool_bwd_jit(np.ascontiguousarray(x), np.ascontiguousarray(dy), dx)
        return dx
    return _maxpool_bwd_np(x, dy)


def affine4d(x, scale, shift):
    """Per-channel x*scale+shift on (n,c,h,w); one fused pass."""
    if HAVE_NUMBA and x.flags.c_contiguous:
        y = np.empty_like(x)
        _affine4d_jit(x, scale.astype(x.dtype, copy=False),
                      shift.astype(x.dtype, copy=False), y)
        return y
    return _affine4d_np(x, scale, shift)


def scale4d(dy, scale):
    """Per-channel dy*scale on (n,c,h,w)."""
    if HAVE_NUMBA and dy.flags.c_contiguous:
        out = np.empty_like(dy)
        _scale4d_jit(dy, scale.astype(dy.dtype, copy=False), out)
        return out
    return _scale4d_np(dy, scale)


def relu_bwd(dy, y):
    """dy where y > 0 else 0, without boolean temporaries."""
    if HAVE_NUMBA and dy.flags.c_contiguous and y.flags.c_contiguous \
            and dy.shape == y.shape:
        out = np.empty_like(dy)
        _relu_bwd_jit(dy, y, out)
        return out
    return _relu_bwd_np(dy, y)
