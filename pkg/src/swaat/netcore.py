"""Minimal neural-network engine with hand-derived backward passes.

Layers operate on numpy arrays: images as (n, C, H, W), features as (n, F).
Default precision is float64 so gradient checks and averaging tests can use
tight tolerances; float32 is available for speed.

Conventions:
  - ReLU derivative at 0 is defined as 0.
  - BatchNorm uses eps=1e-5 in the denominator; Train mode normalizes with
    batch statistics, Eval mode with running statistics.
  - Trainable parameters flatten in canonical order: layer order, weight
    before bias, gamma before beta. BN running statistics are state, not
    parameters, and are never part of the flat vector.
"""

import numpy as np

from . import _kernels

BN_EPS = 1e-5

TRAIN = "train"
EVAL = "eval"


class NetworkError(ValueError):
    pass


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NetworkError(f"non-finite values in {where}")


class Layer:
    """Base layer: no parameters, identity-ish contract."""

    def params(self):
        return []

    def set_params(self, arrays):
        assert not arrays

    def forward(self, x, mode, update_stats=True):
        raise NotImplementedError

    def backward(self, dy, cache, mode):
        """Returns (dx, [param grads in params() order])."""
        raise NotImplementedError

    def out_shape(self, in_shape):
        return in_shape

    def describe(self):
        return type(self).__name__


class Dense(Layer):
    def __init__(self, n_in, n_out, rng, dtype=np.float64):
        scale = np.sqrt(2.0 / n_in)
        self.w = (rng.standard_normal((n_in, n_out)) * scale).astype(dtype)
        self.b = np.zeros(n_out, dtype=dtype)

    def params(self):
        return [self.w, self.b]

    def set_params(self, arrays):
        self.w, self.b = arrays

    def forward(self, x, mode, update_stats=True):
        return x @ self.w + self.b, x

    def backward(self, dy, cache, mode):
        x = cache
        dw = x.T @ dy
        db = dy.sum(axis=0)
        dx = dy @ self.w.T
        return dx, [dw, db]

    def out_shape(self, in_shape):
        return (self.w.shape[1],)

    def describe(self):
        return f"Dense({self.w.shape[0]},{self.w.shape[1]})"


def _im2col(x, kh, kw, pad):
    """(n,c,h,w) -> (n*oh*ow, c*kh*kw) so the convolution is one GEMM."""
    n, c, h, w = x.shape
    oh = h + 2 * pad - kh + 1
    ow = w + 2 * pad - kw + 1
    return _kernels.im2col(x, kh, kw, pad), (oh, ow)


def _col2im(dcols, x_shape, kh, kw, pad):
    """Adjoint of _im2col: scatter-add (n*oh*ow, c*kh*kw) back to image layout."""
    n, c, h, w = x_shape
    return _kernels.col2im(dcols, n, c, h, w, kh, kw, pad)


class Conv2d(Layer):
    """3x3-style stride-1 convolution with symmetric zero padding."""

    def __init__(self, c_in, c_out, ksize, pad, rng, dtype=np.float64):
        fan_in = c_in * ksize * ksize
        scale = np.sqrt(2.0 / fan_in)
        self.w = (rng.standard_normal((c_out, c_in, ksize, ksize)) * scale).astype(dtype)
        self.b = np.zeros(c_out, dtype=dtype)
        self.ksize = ksize
        self.pad = pad

    def params(self):
        return [self.w, self.b]

    def set_params(self, arrays):
        self.w, self.b = arrays

    def forward(self, x, mode, update_stats=True):
        n = x.shape[0]
        k = self.ksize
        cols, (oh, ow) = _im2col(x, k, k, self.pad)
        wm = self.w.reshape(self.w.shape[0], -1)
        y = _kernels.rows2nchw_bias(cols @ wm.T, self.b, n, oh, ow)
        return y, (cols, x.shape)

    @staticmethod
    def _dy2d(dy):
        return _kernels.nchw2rows(dy)

    def backward(self, dy, cache, mode):
        cols, x_shape = cache
        c_out = dy.shape[1]
        dy2 = self._dy2d(dy)
        dwm = dy2.T @ cols
        db = dy2.sum(axis=0)
        dcols = dy2 @ self.w.reshape(c_out, -1)
        dx = _col2im(dcols, x_shape, self.ksize, self.ksize, self.pad)
        return dx, [dwm.reshape(self.w.shape), db]

    def out_shape(self, in_shape):
        c, h, w = in_shape
        o = h + 2 * self.pad - self.ksize + 1
        return (self.w.shape[0], o, w + 2 * self.pad - self.ksize + 1)

    def describe(self):
        return f"Conv2d({self.w.shape[1]},{self.w.shape[0]},k{self.ksize},p{self.pad})"


class BatchNorm(Layer):
    """Per-channel (4-D input) or per-feature (2-D input) batch normalization.

    Running statistics are non-trainable state; they are excluded from
    flatten() and can be overwritten wholesale by recalibration.
    """

    def __init__(self, n_features, dtype=np.float64, momentum=0.1):
        self.gamma = np.ones(n_features, dtype=dtype)
        self.beta = np.zeros(n_features, dtype=dtype)
        self.running_mean = np.zeros(n_features, dtype=dtype)
        self.running_var = np.ones(n_features, dtype=dtype)
        self.momentum = momentum

    def params(self):
        return [self.gamma, self.beta]

    def set_params(self, arrays):
        self.gamma, self.beta = arrays

    @staticmethod
    def _axes(x):
        return (0, 2, 3) if x.ndim == 4 else (0,)

    @staticmethod
    def _expand(v, x):
        return v[None, :, None, None] if x.ndim == 4 else v[None, :]

    def forward(self, x, mode, update_stats=True):
        axes = self._axes(x)
        if mode == TRAIN:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if update_stats:
                m = self.momentum
                self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(x.dtype)
                self.running_var = ((1 - m) * self.running_var + m * var).astype(x.dtype)
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (x - self._expand(mean, x)) * self._expand(inv_std, x)
            y = self._expand(self.gamma, x) * xhat + self._expand(self.beta, x)
            return y, (xhat, inv_std, mode)
        # eval: two fused per-channel affine passes; xhat is recomputed lazily
        inv_std = 1.0 / np.sqrt(self.running_var + BN_EPS)
        scale = (self.gamma * inv_std).astype(x.dtype)
        shift = (self.beta - self.running_mean * self.gamma * inv_std).astype(x.dtype)
        if x.ndim == 4:
            y = _kernels.affine4d(x, scale, shift)
        else:
            y = x * scale + shift
        return y, (x, inv_std, mode)

    def _scale_dy(self, dy, inv_std):
        scale = (self.gamma * inv_std).astype(dy.dtype)
        if dy.ndim == 4:
            return _kernels.scale4d(dy, scale)
        return dy * scale

    def backward(self, dy, cache, mode):
        xhat, inv_std, fwd_mode = cache
        axes = self._axes(dy)
        if fwd_mode == EVAL:
            x = xhat
            xhat = (x - self._expand(self.running_mean, x)) * self._expand(inv_std, x)
            dgamma = (dy * xhat).sum(axis=axes)
            dbeta = dy.sum(axis=axes)
            return self._scale_dy(dy, inv_std), [dgamma, dbeta]
        dgamma = (dy * xhat).sum(axis=axes)
        dbeta = dy.sum(axis=axes)
        m = dy.shape[0] if dy.ndim == 2 else dy.shape[0] * dy.shape[2] * dy.shape[3]
        dxhat = dy * self._expand(self.gamma, dy)
        term = dxhat - self._expand(dxhat.sum(axis=axes) / m, dy) \
            - xhat * self._expand((dxhat * xhat).sum(axis=axes) / m, dy)
        return term * self._expand(inv_std, dy), [dgamma, dbeta]

    def describe(self):
        return f"BatchNorm({self.gamma.shape[0]})"


class ReLU(Layer):
    """max(x, 0); derivative at 0 is defined as 0."""

    def forward(self, x, mode, update_stats=True):
        y = np.maximum(x, 0)
        return y, y

    def backward(self, dy, cache, mode):
        return _kernels.relu_bwd(np.ascontiguousarray(dy), cache), []


class MaxPool(Layer):
    """2x2 max pooling with stride 2; the first maximum (row-major) wins ties."""

    def forward(self, x, mode, update_stats=True):
        return _kernels.maxpool_fwd(x), x

    def backward(self, dy, cache, mode):
        return _kernels.maxpool_bwd(cache, dy), []

    def out_shape(self, in_shape):
        c, h, w = in_shape
        return (c, h // 2, w // 2)


class Flatten(Layer):
    def forward(self, x, mode, update_stats=True):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, mode):
        return dy.reshape(cache), []

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch.

    Returns (loss, dlogits, per_example_loss); dlogits is the gradient of the
    mean loss.
    """
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    per_example = logsumexp - z[np.arange(n), labels]
    p = softmax(logits)
    p[np.arange(n), labels] -= 1.0
    return float(per_example.mean()), p / n, per_example


class Network:
    """Ordered layer stack with a flattenable trainable-parameter vector."""

    def __init__(self, layers, input_shape, descriptor, dtype=np.float64):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.descriptor = descriptor
        self.dtype = np.dtype(dtype)

    # ---- forward / backward -------------------------------------------------

    def forward(self, x, mode=EVAL, update_stats=True, upto=None):
        """Run the stack; returns (output, cache list).

        `upto` stops before layer index `upto` and returns that layer's input
        (used by BN recalibration).
        """
        if tuple(x.shape[1:]) != self.input_shape:
            raise NetworkError(f"input shape {x.shape[1:]} != {self.input_shape}")
        x = np.ascontiguousarray(x, dtype=self.dtype)
        caches = []
        stop = len(self.layers) if upto is None else upto
        for layer in self.layers[:stop]:
            x, cache = layer.forward(x, mode, update_stats=update_stats)
            caches.append(cache)
        _check_finite(x, "forward activations")
        return x, caches

    def backward_from(self, dlogits, caches, mode=EVAL):
        """Backpropagate an arbitrary output gradient.

        Returns (flat parameter gradient, input gradient).
        """
        grads = [None] * len(self.layers)
        dy = dlogits
        for i in range(len(self.layers) - 1, -1, -1):
            dy, pgrads = self.layers[i].backward(dy, caches[i], mode)
            grads[i] = pgrads
        parts = []
        for pg in grads:
            parts.extend(g.ravel() for g in pg)
        flat = np.concatenate(parts) if parts else np.zeros(0, dtype=self.dtype)
        return flat.astype(self.dtype, copy=False), dy

    def loss_backward(self, logits, caches, labels, mode=EVAL):
        """Cross-entropy loss + full backward pass.

        Returns (flat param grad, input grad, mean loss).
        """
        loss, dlogits, _ = softmax_cross_entropy(logits, labels)
        gflat, dx = self.backward_from(dlogits.astype(self.dtype), caches, mode)
        return gflat, dx, loss

    def input_grad(self, x, labels, mode=EVAL):
        """Gradient of mean cross-entropy wrt the input, plus per-example loss."""
        logits, caches = self.forward(x, mode, update_stats=False)
        loss, dlogits, per_ex = softmax_cross_entropy(logits, labels)
        _, dx = self.backward_from(dlogits.astype(self.dtype), caches, mode)
        return dx, per_ex, logits

    # ---- parameter plumbing -------------------------------------------------

    def param_arrays(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def num_params(self):
        return sum(p.size for p in self.param_arrays())

    def flatten(self):
        arrays = self.param_arrays()
        if not arrays:
            return np.zeros(0, dtype=self.dtype)
        return np.concatenate([a.ravel() for a in arrays])

    def unflatten(self, v):
        v = np.asarray(v)
        if v.size != self.num_params():
            raise NetworkError(f"flat vector length {v.size} != {self.num_params()}")
        pos = 0
        for layer in self.layers:
            arrays = layer.params()
            new = []
            for a in arrays:
                chunk = v[pos:pos + a.size].reshape(a.shape).astype(self.dtype)
                new.append(chunk)
                pos += a.size
            layer.set_params(new)

    def bn_layers(self):
        return [(i, l) for i, l in enumerate(self.layers) if isinstance(l, BatchNorm)]

    def bn_state(self):
        """Running statistics in layer order: [(mean, var), ...]."""
        return [(l.running_mean.copy(), l.running_var.copy()) for _, l in self.bn_layers()]

    def set_bn_state(self, state):
        bns = self.bn_layers()
        if len(state) != len(bns):
            raise NetworkError("BN state count mismatch")
        for (mean, var), (_, l) in zip(state, bns):
            l.running_mean = np.asarray(mean, dtype=self.dtype).copy()
            l.running_var = np.asarray(var, dtype=self.dtype).copy()

    def clone(self):
        import copy
        return copy.deepcopy(self)

    def predict(self, x):
        logits, _ = self.forward(x, EVAL, update_stats=False)
        return logits.argmax(axis=1)


# ---- presets ----------------------------------------------------------------

PRESETS = ("linear", "mlp-tiny", "mlp-small", "cnn-small")


def make_net(arch, input_shape=(1, 28, 28), classes=10, dtype=np.float64, seed=0):
    """Build a preset architecture with seeded He initialization."""
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    d = c * h * w
    if arch == "linear":
        layers = [Flatten(), Dense(d, classes, rng, dtype)]
    elif arch == "mlp-tiny":
        layers = [Flatten(), Dense(d, 32, rng, dtype), ReLU(),
                  Dense(32, classes, rng, dtype)]
    elif arch == "mlp-small":
        layers = [Flatten(), Dense(d, 256, rng, dtype), BatchNorm(256, dtype),
                  ReLU(), Dense(256, classes, rng, dtype)]
    elif arch == "cnn-small":
        layers = [
            Conv2d(c, 16, 3, 1, rng, dtype), BatchNorm(16, dtype), ReLU(), MaxPool(),
            Conv2d(16, 32, 3, 1, rng, dtype), BatchNorm(32, dtype), ReLU(), MaxPool(),
            Flatten(), Dense(32 * (h // 4) * (w // 4), classes, rng, dtype),
        ]
    else:
        raise NetworkError(f"unknown architecture {arch!r}")
    desc = f"{arch};in={c}x{h}x{w};classes={classes};dtype={np.dtype(dtype).name}"
    return Network(layers, input_shape, desc, dtype)


def net_from_descriptor(desc):
    """Rebuild an (uninitialized-weights) network from a checkpoint descriptor."""
    parts = desc.split(";")
    arch = parts[0]
    kv = dict(p.split("=", 1) for p in parts[1:] if "=" in p)
    c, h, w = (int(t) for t in kv["in"].split("x"))
    classes = int(kv["classes"])
    dtype = np.dtype(kv.get("dtype", "float64"))
    return make_net(arch, (c, h, w), classes, dtype)


# ---- gradient checking ------------------------------------------------------

def grad_check(net, x, y, tolerance=1e-4, step=1e-5):
    """Central finite-difference check of the full parameter gradient.

    Returns a report dict with per-parameter-block max relative error and an
    overall pass flag. Intended for small nets (P <= 1e4).
    """
    x = np.asarray(x, dtype=net.dtype)
    mode = TRAIN
    logits, caches = net.forward(x, mode, update_stats=False)
    analytic, _, _ = net.loss_backward(logits, caches, y, mode)

    theta0 = net.flatten()
    numeric = np.empty_like(theta0)

    def loss_at(v):
        net.unflatten(v)
        lg, _ = net.forward(x, mode, update_stats=False)
        loss, _, _ = softmax_cross_entropy(lg, y)
        return loss

    for i in range(theta0.size):
        v = theta0.copy()
        v[i] = theta0[i] + step
        lp = loss_at(v)
        v[i] = theta0[i] - step
        lm = loss_at(v)
        numeric[i] = (lp - lm) / (2 * step)
    net.unflatten(theta0)

    rel = np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), 1e-6)
    # per-block breakdown, in canonical flatten order
    blocks = []
    pos = 0
    for li, layer in enumerate(net.layers):
        for a in layer.params():
            blk = rel[pos:pos + a.size]
            blocks.append({
                "layer": li,
                "kind": layer.describe(),
                "size": int(a.size),
                "max_rel_err": float(blk.max()) if a.size else 0.0,
            })
            pos += a.size
    max_err = float(rel.max()) if rel.size else 0.0
    return {
        "max_rel_err": max_err,
        "tolerance": tolerance,
        "passed": bool(max_err < tolerance),
        "blocks": blocks,
    }


# ---- input-gradient-only backward (attack fast path) -------------------------

def _backward_input(layer, dy, cache, mode):
    """dx only, skipping parameter-gradient work where that saves time."""
    if isinstance(layer, Dense):
        return dy @ layer.w.T
    if isinstance(layer, Conv2d):
        cols, x_shape = cache
        dy2 = Conv2d._dy2d(dy)
        dcols = dy2 @ layer.w.reshape(dy.shape[1], -1)
        return _col2im(dcols, x_shape, layer.ksize, layer.ksize, layer.pad)
    if isinstance(layer, BatchNorm) and cache[2] == EVAL:
        _, inv_std, _ = cache
        return layer._scale_dy(dy, inv_std)
    return layer.backward(dy, cache, mode)[0]


def input_grad_only(net, x, labels, mode=EVAL):
    """Gradient of mean cross-entropy wrt the input, without parameter grads.

    Returns (dx, per_example_loss, logits).
    """
    logits, caches = net.forward(x, mode, update_stats=False)
    _, dlogits, per_ex = softmax_cross_entropy(logits, labels)
    dy = dlogits.astype(net.dtype)
    for i in range(len(net.layers) - 1, -1, -1):
        dy = _backward_input(net.layers[i], dy, caches[i], mode)
    return dy, per_ex, logits


def input_grad_from(net, x, dout_fn, mode=EVAL):
    """Input gradient for an arbitrary output gradient.

    `dout_fn(logits) -> dlogits`; used by CW and ensemble-targeted attacks.
    Returns (dx, logits).
    """
    logits, caches = net.forward(x, mode, update_stats=False)
    dy = np.asarray(dout_fn(logits), dtype=net.dtype)
    for i in range(len(net.layers) - 1, -1, -1):
        dy = _backward_input(net.layers[i], dy, caches[i], mode)
    return dy, logits
