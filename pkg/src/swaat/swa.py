"""Sliding-window weight aggregation and batch-norm recalibration.

Two aggregator modes:
  - "recurrence" (default): theta_swa <- (w-1)/w * theta_swa + theta/w with
    w = min(i, window). This is a cumulative mean until the window fills and
    an exponential average afterwards.
  - "exact_sma": keeps a ring of the last `window` snapshots and reports
    their exact arithmetic mean. During the cumulative phase it applies the
    same recurrence as above, so the two modes agree bitwise until the ring
    is full.

Aggregated vectors are stored in float64 regardless of the network dtype.
"""

from collections import deque

import numpy as np

from . import attack as attack_mod
from .netcore import EVAL, BatchNorm


class AggregatorError(ValueError):
    pass


RECURRENCE = "recurrence"
EXACT_SMA = "exact_sma"


class WeightAggregator:
    def __init__(self, window, mode=RECURRENCE, theta=None, count=0):
        if window < 1:
            raise AggregatorError("window must be >= 1")
        if mode not in (RECURRENCE, EXACT_SMA):
            raise AggregatorError(f"unknown aggregator mode {mode!r}")
        self.window = int(window)
        self.mode = mode
        self.count = int(count)          # total updates seen
        self.theta_swa = None if theta is None else np.asarray(theta, dtype=np.float64).copy()
        self.ring = deque(maxlen=self.window) if mode == EXACT_SMA else None

    @property
    def w(self):
        return min(self.count, self.window)

    def update(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if self.theta_swa is not None and theta.shape != self.theta_swa.shape:
            raise AggregatorError("snapshot length mismatch")
        self.count += 1
        if self.mode == EXACT_SMA:
            self.ring.append(theta.copy())
            if len(self.ring) < self.window or self.count == self.window:
                # cumulative phase: identical recurrence to the other mode
                self._recurrence_step(theta)
            else:
                self.theta_swa = np.mean(np.stack(self.ring), axis=0)
        else:
            self._recurrence_step(theta)

    def _recurrence_step(self, theta):
        w = self.w
        if self.theta_swa is None or w == 1:
            self.theta_swa = theta.copy()
        else:
            self.theta_swa = ((w - 1) / w) * self.theta_swa + theta / w

    def state(self):
        return {"mode": self.mode, "window": self.window, "count": self.count}


def swap_in(agg, net):
    """Replace the net's trainable parameters with the aggregated vector.

    BN running statistics are left untouched (and therefore stale until
    adjust_bn runs). The aggregator itself is not reset.
    """
    if agg.count < 1 or agg.theta_swa is None:
        raise AggregatorError("aggregator is empty")
    net.unflatten(agg.theta_swa.astype(net.dtype))


NATURAL = "natural"
ADVERSARIAL = "adversarial"


def adjust_bn(net, dataset, mode=NATURAL, attack_cfg=None, batch_size=250, rng=None):
    """Recompute every BN layer's running statistics from the full dataset.

    Statistics are the exact (momentum-free) per-channel mean and population
    variance of each BN layer's input, computed layer by layer in evaluation
    mode so that earlier, already-recalibrated BN layers feed later ones.

    mode "natural" uses the images as-is; "adversarial" first generates PGD
    examples against the current network (with its current statistics).
    """
    if len(dataset) == 0:
        raise AggregatorError("empty dataset")
    images = dataset.images
    if mode == ADVERSARIAL:
        if attack_cfg is None:
            raise AggregatorError("adversarial recalibration needs an attack config")
        parts = []
        for start in range(0, len(dataset), batch_size):
            sl = slice(start, start + batch_size)
            parts.append(attack_mod.pgd(net, images[sl], dataset.labels[sl],
                                        attack_cfg, rng))
        images = np.concatenate(parts)
    elif mode != NATURAL:
        raise AggregatorError(f"unknown recalibration mode {mode!r}")

    for layer_idx, bn in net.bn_layers():
        total = 0
        s1 = None
        s2 = None
        for start in range(0, len(images), batch_size):
            xb = images[start:start + batch_size]
            pre, _ = net.forward(xb, EVAL, update_stats=False, upto=layer_idx)
            axes = BatchNorm._axes(pre)
            cnt = pre.size // pre.shape[1]
            b1 = pre.sum(axis=axes, dtype=np.float64)
            b2 = (pre.astype(np.float64) ** 2).sum(axis=axes)
            s1 = b1 if s1 is None else s1 + b1
            s2 = b2 if s2 is None else s2 + b2
            total += cnt
        mean = s1 / total
        var = np.maximum(s2 / total - mean ** 2, 0.0)
        bn.running_mean = mean.astype(net.dtype)
        bn.running_var = var.astype(net.dtype)
