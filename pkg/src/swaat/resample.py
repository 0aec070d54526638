"""Per-epoch data resampling policies: BOOT, HEM-N, OHEM.

Hard examples carry a relative sampling weight of `hard_multiplier` (default
3) versus 1 for everything else; the resampled epoch always has the original
dataset length.
"""

import numpy as np

from . import attack as attack_mod
from .data import BatchPlan, sample_with_replacement

NONE = "none"
BOOT = "boot"
HEM = "hem"
OHEM = "ohem"


class PolicyError(ValueError):
    pass


class ResamplingPolicy:
    def __init__(self, kind=NONE, period=1, hard_multiplier=3.0):
        if kind not in (NONE, BOOT, HEM, OHEM):
            raise PolicyError(f"unknown policy kind {kind!r}")
        if kind == HEM and period < 1:
            raise PolicyError("HEM period must be >= 1")
        self.kind = kind
        self.period = int(period)
        self.hard_multiplier = float(hard_multiplier)
        self.hard_set = set()
        self._pending = set()
        self.mark_count = 0  # number of expensive mining passes performed

    # ---- hard-example mining -------------------------------------------------

    def should_mine(self, epoch_index):
        """True if HEM mining runs at the end of this (0-based) epoch."""
        return self.kind == HEM and epoch_index % self.period == 0

    def mark_hem(self, net, dataset, attack_cfg, rng=None, batch_size=250):
        """Mark ids whose attacked version the current net misclassifies."""
        hard = []
        for start in range(0, len(dataset), batch_size):
            sl = slice(start, start + batch_size)
            x_adv = attack_mod.pgd(net, dataset.images[sl], dataset.labels[sl],
                                   attack_cfg, rng)
            pred = net.predict(x_adv)
            wrong = pred != dataset.labels[sl]
            hard.extend(int(i) for i in dataset.ids[sl][wrong])
        self.hard_set = set(hard)
        self.mark_count += 1

    # ---- online marking --------------------------------------------------------

    def begin_epoch(self):
        self._pending = set()

    def record_misclassified(self, ids):
        self._pending.update(int(i) for i in ids)

    def end_epoch_ohem(self):
        if self.kind == OHEM:
            self.hard_set = self._pending
            self._pending = set()

    # ---- epoch plans ------------------------------------------------------------

    def weights(self, n):
        w = np.ones(n)
        if self.hard_set:
            w[np.fromiter(self.hard_set, dtype=np.int64)] = self.hard_multiplier
        return w

    def epoch_plan(self, dataset, batch_size, rng):
        n = len(dataset)
        if self.kind == NONE:
            ordering = rng.permutation(n)
        elif self.kind == BOOT:
            ordering = sample_with_replacement(n, np.ones(n), rng)
        else:
            ordering = sample_with_replacement(n, self.weights(n), rng)
        return BatchPlan(ordering, batch_size)

    def dump_hard_set(self, path):
        with open(path, "w") as f:
            for i in sorted(self.hard_set):
                f.write(f"{i}\n")

    def describe(self):
        if self.kind == HEM:
            return f"hem:{self.period}"
        return self.kind


def parse_policy_spec(spec):
    """Parse "none" | "boot" | "hem:N" | "ohem"."""
    spec = spec.strip().lower()
    if spec in (NONE, BOOT, OHEM):
        return ResamplingPolicy(spec)
    if spec == HEM:
        return ResamplingPolicy(HEM, period=1)
    if spec.startswith("hem:"):
        try:
            return ResamplingPolicy(HEM, period=int(spec.split(":", 1)[1]))
        except ValueError as e:
            raise PolicyError(f"bad HEM period in {spec!r}") from e
    raise PolicyError(f"unknown policy spec {spec!r}")
