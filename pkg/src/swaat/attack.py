"""White-box attack suite: FGSM, PGD (l-inf / l2 / unconstrained), CW-l2.

All attacks run the model in evaluation mode (running BN statistics) and
respect the pixel box [0,1]. Norm-bounded attacks additionally project onto
the epsilon ball around the clean input after every step.
"""

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import netcore
from .netcore import EVAL, softmax_cross_entropy

LINF = "linf"
L2 = "l2"
UNCONSTRAINED = "unconstrained"


class AttackError(ValueError):
    pass


@dataclass
class AttackConfig:
    norm: str = LINF
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    steps: int = 10
    random_init: bool = True

    def __post_init__(self):
        if self.norm not in (LINF, L2, UNCONSTRAINED):
            raise AttackError(f"unknown norm {self.norm!r}")
        if math.isinf(self.epsilon):
            self.norm = UNCONSTRAINED
        if self.norm == UNCONSTRAINED:
            self.epsilon = math.inf
        elif self.epsilon < 0:
            raise AttackError("epsilon must be >= 0")
        if self.alpha <= 0:
            raise AttackError("alpha must be > 0")
        if self.steps < 1:
            raise AttackError("steps must be >= 1")
        if self.norm != UNCONSTRAINED and self.alpha > 2 * self.epsilon and self.epsilon > 0:
            warnings.warn("alpha > 2*epsilon: a single step always saturates the ball")


@dataclass
class CWConfig:
    c: float = 0.2
    kappa: float = 0.0
    lr: float = 0.01
    steps: int = 100

    def __post_init__(self):
        if self.c <= 0:
            raise AttackError("c must be > 0")
        if self.kappa < 0:
            raise AttackError("kappa must be >= 0")
        if self.steps < 1:
            raise AttackError("steps must be >= 1")


# ---- projections -----------------------------------------------------------

def _project(x_adv, x0, cfg):
    if cfg.norm == LINF:
        x_adv = np.clip(x_adv, x0 - cfg.epsilon, x0 + cfg.epsilon)
    elif cfg.norm == L2:
        delta = (x_adv - x0).reshape(len(x_adv), -1)
        norms = np.linalg.norm(delta, axis=1)
        scale = np.ones_like(norms)
        over = norms > cfg.epsilon
        scale[over] = cfg.epsilon / norms[over]
        x_adv = x0 + (delta * scale[:, None]).reshape(x0.shape)
    return np.clip(x_adv, 0.0, 1.0)


def _random_start(x0, cfg, rng):
    if cfg.norm == LINF:
        delta = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape)
    elif cfg.norm == L2:
        d = x0[0].size
        direction = rng.standard_normal(x0.shape).reshape(len(x0), -1)
        direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-12)
        radius = cfg.epsilon * rng.random(len(x0)) ** (1.0 / d)
        delta = (direction * radius[:, None]).reshape(x0.shape)
    else:
        return x0.copy()
    return _project(x0 + delta, x0, cfg)


def _ascent_step(x, grad, cfg):
    if cfg.norm == LINF:
        return x + cfg.alpha * np.sign(grad)
    if cfg.norm == L2:
        g = grad.reshape(len(grad), -1)
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        # zero gradient: no movement this step
        direction = np.where(norms > 0, g / np.maximum(norms, 1e-30), 0.0)
        return x + cfg.alpha * direction.reshape(x.shape)
    # unconstrained: sign steps like l-inf; only the [0,1] box constrains the
    # iterate. Raw-gradient steps stall on confident models (the cross-entropy
    # gradient vanishes), which would make the attack useless as a masking probe.
    return x + cfg.alpha * np.sign(grad)


def pgd_core(grad_fn, x0, cfg, rng=None, dtype=np.float64):
    """Iterated ascent with projection; grad_fn(x) -> gradient of the attack loss.

    Deterministic given (grad_fn, x0, cfg, rng state). `dtype` is the working
    precision; float64 keeps the projection tight to ~1e-16, float32 (used for
    speed in float32 training runs) to ~1e-7.
    """
    x0 = np.asarray(x0, dtype=dtype)
    if cfg.random_init and rng is not None and cfg.norm != UNCONSTRAINED:
        x = _random_start(x0, cfg, rng).astype(dtype)
    else:
        x = x0.copy()
    for _ in range(cfg.steps):
        grad = grad_fn(x)
        if not np.all(np.isfinite(grad)):
            raise AttackError("non-finite attack gradient")
        x = _project(_ascent_step(x, grad, cfg), x0, cfg).astype(dtype, copy=False)
    return x


def _ce_grad_fn(net, y):
    def fn(x):
        dx, _, _ = netcore.input_grad_only(net, x, y, EVAL)
        return dx
    return fn


def pgd(net, x, y, cfg, rng=None):
    """Projected gradient descent on cross-entropy; returns the final iterate."""
    dtype = net.dtype if net.dtype == np.float32 else np.float64
    return pgd_core(_ce_grad_fn(net, y), x, cfg, rng, dtype)


def fgsm(net, x, y, epsilon):
    """Single sign-gradient step of size epsilon, clipped to [0,1]."""
    if epsilon == 0:
        return np.asarray(x, dtype=np.float64).copy()
    cfg = AttackConfig(norm=LINF, epsilon=epsilon, alpha=epsilon, steps=1,
                       random_init=False)
    return pgd(net, x, y, cfg, rng=None)


# ---- Carlini-Wagner l2 -------------------------------------------------------

_ATANH_CLIP = 1 - 1e-6


def cw_l2(net, x, y, cfg):
    """Fixed-penalty CW-l2 over tanh-reparameterized pixels.

    Minimizes ||x'-x||_2^2 + c * max(Z_y - max_{j!=y} Z_j, -kappa) by plain
    gradient descent; returns the best iterate by objective (the unperturbed
    input counts as the initial iterate).
    """
    x0 = np.asarray(x, dtype=np.float64)
    n = len(x0)
    idx = np.arange(n)
    w = np.arctanh(np.clip(2 * x0 - 1, -_ATANH_CLIP, _ATANH_CLIP))

    best_obj = np.full(n, np.inf)
    best_x = x0.copy()

    def margin_and_dlogits(logits):
        z_y = logits[idx, y]
        masked = logits.copy()
        masked[idx, y] = -np.inf
        j_star = masked.argmax(axis=1)
        margin = z_y - masked[idx, j_star]
        active = margin > -cfg.kappa
        dlogits = np.zeros_like(logits)
        dlogits[idx, y] = np.where(active, cfg.c, 0.0)
        dlogits[idx, j_star] -= np.where(active, cfg.c, 0.0)
        return margin, dlogits

    for _ in range(cfg.steps + 1):
        xp = (np.tanh(w) + 1.0) / 2.0
        logits, caches = net.forward(xp, EVAL, update_stats=False)
        margin, dlogits = margin_and_dlogits(np.asarray(logits, dtype=np.float64))
        dist = ((xp - x0).reshape(n, -1) ** 2).sum(axis=1)
        obj = dist + cfg.c * np.maximum(margin, -cfg.kappa)

        improved = obj < best_obj
        best_obj[improved] = obj[improved]
        best_x[improved] = xp[improved]

        # gradient wrt x', then chain through the tanh map
        dy = dlogits.astype(net.dtype)
        for li in range(len(net.layers) - 1, -1, -1):
            dy = netcore._backward_input(net.layers[li], dy, caches[li], EVAL)
        dxp = np.asarray(dy, dtype=np.float64) + 2.0 * (xp - x0)
        w = w - cfg.lr * dxp * (1.0 - np.tanh(w) ** 2) / 2.0

    return best_x


# ---- attack spec strings ------------------------------------------------------

def _num(s):
    if s in ("inf", "infinity"):
        return math.inf
    return float(Fraction(s))


def parse_attack_spec(spec):
    """Parse a CLI attack spec like "pgd:linf:eps=8/255:alpha=2/255:steps=10:rand=1".

    Returns ("pgd", AttackConfig) / ("fgsm", epsilon) / ("cw", CWConfig) /
    ("natural", None).
    """
    parts = spec.strip().split(":")
    kind = parts[0].lower()
    kv = {}
    norm = None
    for p in parts[1:]:
        if "=" in p:
            k, v = p.split("=", 1)
            kv[k.strip()] = v.strip()
        else:
            norm = p.strip().lower()
    try:
        if kind == "natural":
            return "natural", None
        if kind == "fgsm":
            return "fgsm", _num(kv["eps"])
        if kind == "pgd":
            cfg = AttackConfig(
                norm=norm or LINF,
                epsilon=_num(kv.get("eps", "inf" if norm == UNCONSTRAINED else "8/255")),
                alpha=_num(kv.get("alpha", "2/255")),
                steps=int(kv.get("steps", "10")),
                random_init=kv.get("rand", "1") not in ("0", "false", "no"),
            )
            return "pgd", cfg
        if kind == "cw":
            cfg = CWConfig(
                c=_num(kv.get("c", "0.2")),
                kappa=_num(kv.get("kappa", "0")),
                lr=_num(kv.get("lr", "0.01")),
                steps=int(kv.get("steps", "100")),
            )
            return "cw", cfg
    except (KeyError, ValueError, ZeroDivisionError) as e:
        raise AttackError(f"bad attack spec {spec!r}: {e}") from e
    raise AttackError(f"unknown attack kind {kind!r} in {spec!r}")


def run_attack(net, x, y, spec, rng=None):
    """Generate adversarial examples for a parsed or textual attack spec."""
    if isinstance(spec, str):
        kind, cfg = parse_attack_spec(spec)
    else:
        kind, cfg = spec
    if kind == "natural":
        return np.asarray(x, dtype=np.float64).copy()
    if kind == "fgsm":
        return fgsm(net, x, y, cfg)
    if kind == "pgd":
        return pgd(net, x, y, cfg, rng)
    if kind == "cw":
        return cw_l2(net, x, y, cfg)
    raise AttackError(f"unknown attack kind {kind!r}")
