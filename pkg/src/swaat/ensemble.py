"""Late ensembles and the member-vs-whole attack-target experiment."""

import numpy as np

from . import attack as attack_mod
from . import netcore
from .netcore import EVAL, softmax

MEAN_PROB = "mean_prob"
MEAN_LOGIT = "mean_logit"
MAJORITY = "majority"

WHOLE = "whole"


class EnsembleError(ValueError):
    pass


class Ensemble:
    def __init__(self, members, combine=MEAN_PROB):
        if not members:
            raise EnsembleError("ensemble needs at least one member")
        if combine not in (MEAN_PROB, MEAN_LOGIT, MAJORITY):
            raise EnsembleError(f"unknown combine rule {combine!r}")
        shapes = {m.input_shape for m in members}
        if len(shapes) != 1:
            raise EnsembleError("members disagree on input shape")
        self.members = list(members)
        self.combine = combine

    def member_logits(self, x):
        return [np.asarray(m.forward(x, EVAL, update_stats=False)[0], dtype=np.float64)
                for m in self.members]

    def predict_scores(self, x):
        """Combined scores: mean probabilities, mean logits, or vote counts."""
        logits = self.member_logits(x)
        if self.combine == MEAN_PROB:
            return np.mean([softmax(z) for z in logits], axis=0)
        if self.combine == MEAN_LOGIT:
            return np.mean(logits, axis=0)
        votes = np.zeros_like(logits[0])
        for z in logits:
            votes[np.arange(len(z)), z.argmax(axis=1)] += 1
        return votes

    def predict(self, x):
        # np.argmax breaks ties toward the lowest class index
        return self.predict_scores(x).argmax(axis=1)


def _ensemble_grad_fn(ensemble, y):
    """Input gradient of cross-entropy on the combined (differentiable) output."""
    if ensemble.combine == MAJORITY:
        raise EnsembleError("majority voting is not differentiable")
    members = ensemble.members
    l = len(members)
    idx = None

    def fn(x):
        fwd = [m.forward(x, EVAL, update_stats=False) for m in members]
        logits = [np.asarray(lg, dtype=np.float64) for lg, _ in fwd]
        n = len(x)
        rows = np.arange(n)
        dx_total = np.zeros(np.asarray(x).shape)
        if ensemble.combine == MEAN_LOGIT:
            zbar = np.mean(logits, axis=0)
            _, dzbar, _ = netcore.softmax_cross_entropy(zbar, y)
            per_member = [dzbar / l] * l
        else:  # MEAN_PROB: loss = -log(mean prob of true class)
            probs = [softmax(z) for z in logits]
            pbar = np.mean(probs, axis=0)
            dpbar = np.zeros_like(pbar)
            dpbar[rows, y] = -1.0 / (n * pbar[rows, y])
            per_member = []
            for p in probs:
                inner = (p * dpbar).sum(axis=1, keepdims=True)
                per_member.append((p * (dpbar - inner)) / l)
        for (lg, caches), m, dz in zip(fwd, members, per_member):
            dy = dz.astype(m.dtype)
            for li in range(len(m.layers) - 1, -1, -1):
                dy = netcore._backward_input(m.layers[li], dy, caches[li], EVAL)
            dx_total += np.asarray(dy, dtype=np.float64)
        return dx_total

    return fn


def ensemble_loss(ensemble, x, y):
    """Mean cross-entropy of the combined output (differentiable rules only)."""
    scores = ensemble.predict_scores(x)
    if ensemble.combine == MEAN_PROB:
        n = len(x)
        return float(-np.log(np.maximum(scores[np.arange(n), y], 1e-300)).mean())
    loss, _, _ = netcore.softmax_cross_entropy(scores, y)
    return loss


def attack_target(ensemble, x, y, target, cfg, rng=None):
    """PGD against one member (target=int) or the combined output (target="whole")."""
    if target == WHOLE:
        grad_fn = _ensemble_grad_fn(ensemble, y)
        return attack_mod.pgd_core(grad_fn, x, cfg, rng)
    member = ensemble.members[int(target)]
    return attack_mod.pgd(member, x, y, cfg, rng)


# ---- member-vs-whole training experiment ----------------------------------------

def disagreement_matrix(members, x):
    preds = [m.predict(x) for m in members]
    l = len(members)
    mat = np.zeros((l, l))
    for i in range(l):
        for j in range(l):
            mat[i, j] = float((preds[i] != preds[j]).mean())
    return mat


def dilemma_experiment(train_ds, test_ds, l=3, arch="mlp-tiny", epochs=5,
                       batch_size=100, lr=0.05, attack_cfg=None, seed=0,
                       eval_attack=None):
    """Train l members three ways and compare robustness and diversity.

    (a) member-coupled: each member trains on attacks against itself;
    (b) whole-coupled: every member trains on attacks against the ensemble;
    (c) a single compute-matched model trained with per-iteration weight
        averaging and per-epoch swap-in (l*epochs epochs).

    Returns a JSON-serializable report.
    """
    from . import train as train_mod
    from .swa import WeightAggregator, swap_in, adjust_bn

    attack_cfg = attack_cfg or attack_mod.AttackConfig(epsilon=0.1, alpha=0.025,
                                                       steps=5)
    eval_attack = eval_attack or attack_cfg

    def fresh_members():
        return [netcore.make_net(arch, train_ds.input_shape, train_ds.classes,
                                 seed=seed + 1000 + i) for i in range(l)]

    def sgd_epochs(members, target_mode, n_epochs):
        rng = np.random.default_rng(seed)
        opts = [train_mod.SGD(m.num_params(), 0.9, 5e-4) for m in members]
        ens = Ensemble(members, MEAN_PROB)
        for _ in range(n_epochs):
            perm = rng.permutation(len(train_ds))
            for start in range(0, len(perm), batch_size):
                idx = perm[start:start + batch_size]
                x, y = train_ds.images[idx], train_ds.labels[idx]
                for mi, (m, opt) in enumerate(zip(members, opts)):
                    tgt = WHOLE if target_mode == WHOLE else mi
                    x_adv = attack_target(ens, x, y, tgt, attack_cfg, rng)
                    logits, caches = m.forward(x_adv.astype(m.dtype), netcore.TRAIN)
                    g, _, _ = m.loss_backward(logits, caches, y, netcore.TRAIN)
                    m.unflatten(opt.step(m.flatten().astype(np.float64), g, lr)
                                .astype(m.dtype))
        return ens

    def report_mode(ens):
        nat = float((ens.predict(test_ds.images) == test_ds.labels).mean())
        rng = np.random.default_rng(seed + 7)
        if ens.combine == MAJORITY:
            x_adv = test_ds.images
        else:
            x_adv = attack_target(ens, test_ds.images, test_ds.labels, WHOLE,
                                  eval_attack, rng)
        robust = float((ens.predict(x_adv) == test_ds.labels).mean())
        member_nat = [float((m.predict(test_ds.images) == test_ds.labels).mean())
                      for m in ens.members]
        return {
            "natural_acc": nat,
            "robust_acc": robust,
            "member_natural_acc": member_nat,
            "disagreement": disagreement_matrix(ens.members, test_ds.images).tolist(),
        }

    report = {}
    ens_a = sgd_epochs(fresh_members(), "member", epochs)
    report["member_coupled"] = report_mode(ens_a)
    ens_b = sgd_epochs(fresh_members(), WHOLE, epochs)
    report["whole_coupled"] = report_mode(ens_b)

    # compute-matched single model with weight averaging
    net = netcore.make_net(arch, train_ds.input_shape, train_ds.classes, seed=seed + 1000)
    rng = np.random.default_rng(seed)
    opt = train_mod.SGD(net.num_params(), 0.9, 5e-4)
    k = max(1, len(train_ds) // batch_size)
    agg = WeightAggregator(max(1, 4 * k))
    for _ in range(l * epochs):
        perm = rng.permutation(len(train_ds))
        for start in range(0, len(perm), batch_size):
            idx = perm[start:start + batch_size]
            x, y = train_ds.images[idx], train_ds.labels[idx]
            x_adv = attack_mod.pgd(net, x, y, attack_cfg, rng)
            logits, caches = net.forward(x_adv.astype(net.dtype), netcore.TRAIN)
            g, _, _ = net.loss_backward(logits, caches, y, netcore.TRAIN)
            net.unflatten(opt.step(net.flatten().astype(np.float64), g, lr)
                          .astype(net.dtype))
            agg.update(net.flatten())
        swap_in(agg, net)
        if net.bn_layers():
            adjust_bn(net, train_ds, "natural", attack_cfg, batch_size, rng)
    single = Ensemble([net], MEAN_PROB)
    report["weight_averaged"] = report_mode(single)
    report["config"] = {
        "members": l, "arch": arch, "epochs": epochs, "seed": seed,
        "attack": vars(attack_cfg),
    }
    return report
