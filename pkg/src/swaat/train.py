"""Training loops: PGD-AT baseline and the averaged-weight variant.

Optimizer is SGD with momentum and weight decay. The learning-rate schedule
is piecewise constant: base_lr, divided by 10 at 50% and 75% of the overall
protocol length (configurable). When averaging is enabled the schedule value
is multiplied by the window size M.

Every attack batch is generated in evaluation mode from the exact parameter
snapshot that the following SGD step updates.
"""

import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import attack as attack_mod
from . import checkpoint as ckpt_mod
from .netcore import TRAIN, EVAL
from .resample import ResamplingPolicy, OHEM, HEM, parse_policy_spec
from .swa import WeightAggregator, swap_in, adjust_bn, NATURAL


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class SwaatOptions:
    enabled: bool = False
    window_epochs: int = 4                  # M
    lr_multiplier: float = None             # defaults to M
    policy: str = "none"
    bn_mode: str = NATURAL
    aggregator_mode: str = "recurrence"
    swap_every_epochs: int = 1              # >1 delays the swap; total -> single terminal swap

    def __post_init__(self):
        if self.lr_multiplier is None:
            self.lr_multiplier = float(self.window_epochs)


@dataclass
class TrainConfig:
    epochs: int = 30                        # epochs executed by this run
    total_epochs: int = None                # schedule horizon; defaults to start+epochs
    start_epoch: int = 0                    # warm-start offset into the schedule
    batch_size: int = 250
    base_lr: float = 0.1
    lr_decay_factor: float = 0.1
    lr_decay_epochs: tuple = None           # defaults to 50% / 75% of total
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    eval_every: int = 1
    eval_max_examples: int = None           # cap per-epoch eval set; None = full
    attack: attack_mod.AttackConfig = field(default_factory=attack_mod.AttackConfig)
    eval_attack: attack_mod.AttackConfig = None
    swaat: SwaatOptions = field(default_factory=SwaatOptions)
    debug_coupling: bool = False

    def __post_init__(self):
        if self.total_epochs is None:
            self.total_epochs = self.start_epoch + self.epochs
        if self.lr_decay_epochs is None:
            self.lr_decay_epochs = (self.total_epochs // 2,
                                    (3 * self.total_epochs) // 4)


def lr_at(cfg, epoch):
    """Schedule value at an absolute epoch index, including the window multiplier."""
    lr = cfg.base_lr
    for boundary in sorted(cfg.lr_decay_epochs):
        if epoch >= boundary:
            lr *= cfg.lr_decay_factor
    if cfg.swaat.enabled:
        lr *= cfg.swaat.lr_multiplier
    return lr


@dataclass
class RunRecord:
    epochs: list = field(default_factory=list)   # one dict per epoch
    best_epoch: int = -1
    best_adv_acc: float = -1.0
    best_checkpoint: bytes = None
    last_checkpoint: bytes = None
    swap_events: int = 0
    policy_mark_count: int = 0
    wall_clock: float = 0.0

    def log_epoch(self, entry):
        self.epochs.append(entry)

    def trailing_mean(self, k=5, key="adv_acc"):
        vals = [e[key] for e in self.epochs if e.get(key) is not None]
        if not vals:
            return None
        return float(np.mean(vals[-k:]))

    def recompute_best(self, key="adv_acc"):
        """Best pointer from the log alone (self-consistency check)."""
        best_e, best_v = -1, -1.0
        for e in self.epochs:
            v = e.get(key)
            if v is not None and v > best_v:
                best_e, best_v = e["epoch"], v
        return best_e, best_v

    def to_json(self):
        return {
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "best_adv_acc": self.best_adv_acc,
            "trailing5_adv_acc": self.trailing_mean(5),
            "swap_events": self.swap_events,
            "policy_mark_count": self.policy_mark_count,
            "wall_clock": self.wall_clock,
        }


class SGD:
    def __init__(self, p_count, momentum, weight_decay):
        self.velocity = np.zeros(p_count)
        self.momentum = momentum
        self.weight_decay = weight_decay

    def step(self, theta, grad, lr):
        g = grad.astype(np.float64) + self.weight_decay * theta
        self.velocity = self.momentum * self.velocity + g
        return theta - lr * self.velocity


def evaluate(net, dataset, attack_cfg=None, rng=None, batch_size=250, max_examples=None):
    """Accuracy, optionally under attack. Deterministic given the rng state."""
    n = len(dataset) if max_examples is None else min(len(dataset), max_examples)
    correct = 0
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        x = dataset.images[start:stop]
        y = dataset.labels[start:stop]
        if attack_cfg is not None:
            x = attack_mod.pgd(net, x, y, attack_cfg, rng)
        correct += int((net.predict(x) == y).sum())
    return correct / n


def _theta_hash(theta):
    return hashlib.sha256(np.ascontiguousarray(theta).tobytes()).hexdigest()


def _train_step(net, opt, x, y, lr, cfg, attack_rng):
    """One coupled iteration: attack the snapshot, then one SGD step on it."""
    if cfg.debug_coupling:
        pre_hash = _theta_hash(net.flatten())
    x_adv = attack_mod.pgd(net, x, y, cfg.attack, attack_rng)
    if cfg.debug_coupling:
        assert _theta_hash(net.flatten()) == pre_hash, "attack decoupled from snapshot"
    logits, caches = net.forward(x_adv.astype(net.dtype), TRAIN, update_stats=True)
    gflat, _, loss = net.loss_backward(logits, caches, y, TRAIN)
    if not math.isfinite(loss):
        raise TrainingDiverged(f"non-finite training loss {loss!r}")
    theta = opt.step(net.flatten().astype(np.float64), gflat, lr)
    net.unflatten(theta.astype(net.dtype))
    pred = logits.argmax(axis=1)
    return loss, pred


def _epoch_eval(net, test_ds, cfg, eval_rng):
    cap = cfg.eval_max_examples
    nat = evaluate(net, test_ds, None, None, cfg.batch_size, cap)
    adv = evaluate(net, test_ds, cfg.eval_attack, eval_rng, cfg.batch_size, cap) \
        if cfg.eval_attack is not None else nat
    return nat, adv


def _maybe_track_best(record, net, agg, epoch, adv_acc):
    record.last_checkpoint = ckpt_mod.dumps(net, agg)
    if adv_acc > record.best_adv_acc:
        record.best_adv_acc = adv_acc
        record.best_epoch = epoch
        record.best_checkpoint = record.last_checkpoint


def train_pgd_at(net, train_ds, test_ds, cfg, run_dir=None, attack_enabled=True):
    """PGD-AT baseline; with attack_enabled=False this is standard training."""
    t0 = time.time()
    root = np.random.default_rng(cfg.seed)
    data_rng, attack_rng, eval_rng = root.spawn(3)
    opt = SGD(net.num_params(), cfg.momentum, cfg.weight_decay)
    record = RunRecord()

    for local_epoch in range(cfg.epochs):
        epoch = cfg.start_epoch + local_epoch
        lr = lr_at(cfg, epoch)
        perm = data_rng.permutation(len(train_ds))
        losses = []
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            x, y = train_ds.images[idx], train_ds.labels[idx]
            if attack_enabled:
                loss, _ = _train_step(net, opt, x, y, lr, cfg, attack_rng)
            else:
                logits, caches = net.forward(x.astype(net.dtype), TRAIN)
                gflat, _, loss = net.loss_backward(logits, caches, y, TRAIN)
                if not math.isfinite(loss):
                    raise TrainingDiverged(f"non-finite training loss {loss!r}")
                theta = opt.step(net.flatten().astype(np.float64), gflat, lr)
                net.unflatten(theta.astype(net.dtype))
            losses.append(loss)

        entry = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)),
                 "nat_acc": None, "adv_acc": None}
        if (local_epoch + 1) % cfg.eval_every == 0 or local_epoch == cfg.epochs - 1:
            nat, adv = _epoch_eval(net, test_ds, cfg, eval_rng)
            entry["nat_acc"], entry["adv_acc"] = nat, adv
            _maybe_track_best(record, net, None, epoch, adv)
        record.log_epoch(entry)
        _write_epoch_log(run_dir, entry)

    record.wall_clock = time.time() - t0
    _finalize_run_dir(run_dir, record)
    return record


def train_swaat(net, train_ds, test_ds, cfg, run_dir=None, warm_agg=None):
    """Averaged-weight adversarial training with per-epoch swap-in.

    Per iteration: coupled PGD batch, SGD step, aggregator update. At epoch
    boundaries (every swap_every_epochs): swap the averaged weights in,
    recalibrate BN, evaluate, refresh the mining policy and draw the next
    epoch's plan.
    """
    t0 = time.time()
    sw = cfg.swaat
    root = np.random.default_rng(cfg.seed)
    data_rng, attack_rng, eval_rng, policy_rng, bn_rng = root.spawn(5)
    opt = SGD(net.num_params(), cfg.momentum, cfg.weight_decay)
    record = RunRecord()

    k = math.ceil(len(train_ds) / cfg.batch_size)  # iterations per epoch
    window = max(1, sw.window_epochs * k)
    agg = warm_agg if warm_agg is not None else \
        WeightAggregator(window, sw.aggregator_mode)
    policy = parse_policy_spec(sw.policy)

    # first epoch trains on the whole dataset in random order; plans draw from
    # the data stream so a degenerate window reduces exactly to train_pgd_at
    plan = ResamplingPolicy("none").epoch_plan(train_ds, cfg.batch_size, data_rng)

    for local_epoch in range(cfg.epochs):
        epoch = cfg.start_epoch + local_epoch
        lr = lr_at(cfg, epoch)
        losses = []
        policy.begin_epoch()
        for idx in plan.batches():
            x, y = train_ds.images[idx], train_ds.labels[idx]
            loss, pred = _train_step(net, opt, x, y, lr, cfg, attack_rng)
            losses.append(loss)
            if policy.kind == OHEM:
                policy.record_misclassified(train_ds.ids[idx][pred != y])
            agg.update(net.flatten())

        entry = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)),
                 "nat_acc": None, "adv_acc": None, "policy": policy.describe(),
                 "hard_count": len(policy.hard_set), "swapped": False}

        if (local_epoch + 1) % sw.swap_every_epochs == 0 or local_epoch == cfg.epochs - 1:
            swap_in(agg, net)
            adjust_bn(net, train_ds, sw.bn_mode, cfg.attack,
                      cfg.batch_size, bn_rng)
            record.swap_events += 1
            entry["swapped"] = True

        if (local_epoch + 1) % cfg.eval_every == 0 or local_epoch == cfg.epochs - 1:
            nat, adv = _epoch_eval(net, test_ds, cfg, eval_rng)
            entry["nat_acc"], entry["adv_acc"] = nat, adv
            _maybe_track_best(record, net, agg, epoch, adv)

        # policy refresh after evaluation, then the next epoch's plan
        if policy.should_mine(local_epoch):
            policy.mark_hem(net, train_ds, cfg.attack, policy_rng, cfg.batch_size)
        policy.end_epoch_ohem()
        entry["hard_count"] = len(policy.hard_set)
        record.log_epoch(entry)
        _write_epoch_log(run_dir, entry)
        if run_dir and policy.kind in (HEM, OHEM):
            policy.dump_hard_set(os.path.join(run_dir, f"hardset_epoch_{epoch}.txt"))
        plan = policy.epoch_plan(train_ds, cfg.batch_size, data_rng)

    record.policy_mark_count = policy.mark_count
    record.wall_clock = time.time() - t0
    _finalize_run_dir(run_dir, record)
    return record


# ---- run directory -------------------------------------------------------------

def _write_epoch_log(run_dir, entry):
    if run_dir:
        with open(os.path.join(run_dir, "log.jsonl"), "a") as f:
            f.write(json.dumps(entry) + "\n")


def _finalize_run_dir(run_dir, record):
    if not run_dir:
        return
    if record.best_checkpoint is not None:
        with open(os.path.join(run_dir, "best.ckpt"), "wb") as f:
            f.write(record.best_checkpoint)
    if record.last_checkpoint is not None:
        with open(os.path.join(run_dir, "last.ckpt"), "wb") as f:
            f.write(record.last_checkpoint)
    with open(os.path.join(run_dir, "record.json"), "w") as f:
        json.dump(record.to_json(), f, indent=2)
    with open(os.path.join(run_dir, "series.csv"), "w") as f:
        f.write("epoch,lr,train_loss,nat_acc,adv_acc\n")
        for e in record.epochs:
            f.write(f"{e['epoch']},{e['lr']},{e['train_loss']},"
                    f"{e.get('nat_acc')},{e.get('adv_acc')}\n")
