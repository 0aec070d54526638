"""Command-line front end.

Subcommands: train, eval, attack, adjust-bn, dilemma, obfuscation-check,
synth-data. Configuration is a sectioned key-value file (INI syntax); any
value can be overridden on the command line with --section.key=value.
The environment variable SWAAT_SEED overrides the configured seed.

Exit codes: 0 success, 1 internal error, 2 user/config error.
"""

import argparse
import configparser
import hashlib
import json
import math
import os
import sys
import time

import numpy as np

from . import attack as attack_mod
from . import checkpoint as ckpt_mod
from . import data as data_mod
from . import ensemble as ens_mod
from . import netcore
from . import swa as swa_mod
from . import train as train_mod

SCHEMA_VERSION = 1


class UsageError(Exception):
    pass


# ---- config handling -------------------------------------------------------

KNOWN_SECTIONS = {"data", "net", "train", "swaat", "attack", "eval"}


def load_config(path, overrides):
    cp = configparser.ConfigParser()
    if path:
        if not os.path.exists(path):
            raise UsageError(f"config file not found: {path}")
        cp.read(path)
    for ov in overrides:
        if not ov.startswith("--") or "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise UsageError(f"bad override {ov!r} (expected --section.key=value)")
        key, value = ov[2:].split("=", 1)
        section, name = key.split(".", 1)
        if section not in KNOWN_SECTIONS:
            raise UsageError(f"unknown config section {section!r}")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, name, value)
    return cp


def cfg_get(cp, section, key, default=None, cast=str):
    if cp.has_option(section, key):
        raw = cp.get(section, key)
        if cast is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        return cast(raw)
    return default


def config_hash(cp):
    blob = json.dumps({s: dict(cp.items(s)) for s in cp.sections()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _seed_from(cp):
    env = os.environ.get("SWAAT_SEED")
    if env is not None:
        return int(env)
    return cfg_get(cp, "train", "seed", 0, int)


def _load_dataset(cp, section="data"):
    images = cfg_get(cp, section, "images")
    labels = cfg_get(cp, section, "labels")
    if not images or not labels:
        raise UsageError("config [data] must set images= and labels= paths")
    if not os.path.exists(images) or not os.path.exists(labels):
        raise UsageError(f"dataset files missing: {images}, {labels}")
    return data_mod.load_idx(images, labels)


def _parse_attack_cfg(spec):
    kind, cfg = attack_mod.parse_attack_spec(spec)
    if kind != "pgd":
        raise UsageError(f"training/eval attack must be a pgd spec, got {spec!r}")
    return cfg


# ---- subcommands --------------------------------------------------------------

def cmd_train(args):
    cp = load_config(args.config, args.overrides)
    seed = _seed_from(cp)
    train_ds = _load_dataset(cp)
    test_images = cfg_get(cp, "data", "test_images")
    test_labels = cfg_get(cp, "data", "test_labels")
    if test_images and test_labels:
        test_ds = data_mod.load_idx(test_images, test_labels)
    else:
        test_ds = train_ds

    arch = cfg_get(cp, "net", "arch", "cnn-small")
    dtype = np.dtype(cfg_get(cp, "net", "dtype", "float64"))

    swaat = train_mod.SwaatOptions(
        enabled=cfg_get(cp, "swaat", "enabled", False, bool),
        window_epochs=cfg_get(cp, "swaat", "window", 4, int),
        policy=cfg_get(cp, "swaat", "policy", "none"),
        bn_mode=cfg_get(cp, "swaat", "bn_mode", "natural"),
        aggregator_mode=cfg_get(cp, "swaat", "aggregator", "recurrence"),
        swap_every_epochs=cfg_get(cp, "swaat", "swap_every", 1, int),
    )
    lrm = cfg_get(cp, "swaat", "lr_multiplier")
    if lrm is not None:
        swaat.lr_multiplier = float(lrm)

    tc = train_mod.TrainConfig(
        epochs=cfg_get(cp, "train", "epochs", 30, int),
        total_epochs=cfg_get(cp, "train", "total_epochs", None,
                             lambda v: int(v) if v else None),
        start_epoch=cfg_get(cp, "train", "start_epoch", 0, int),
        batch_size=cfg_get(cp, "train", "batch_size", 250, int),
        base_lr=cfg_get(cp, "train", "base_lr", 0.1, float),
        seed=seed,
        eval_every=cfg_get(cp, "train", "eval_every", 1, int),
        eval_max_examples=cfg_get(cp, "train", "eval_max_examples", None,
                                  lambda v: int(v) if v else None),
        attack=_parse_attack_cfg(cfg_get(cp, "attack", "train",
                                         "pgd:linf:eps=8/255:alpha=2/255:steps=10:rand=1")),
        eval_attack=_parse_attack_cfg(cfg_get(cp, "attack", "eval",
                                              "pgd:linf:eps=8/255:alpha=2/255:steps=20:rand=1")),
        swaat=swaat,
    )

    run_dir = args.run_dir or f"runs/run_{int(time.time())}"
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.ini"), "w") as f:
        cp.write(f)

    warm = cfg_get(cp, "train", "warm_start")
    if warm:
        if not os.path.exists(warm):
            raise UsageError(f"warm-start checkpoint missing: {warm}")
        net, _ = ckpt_mod.load(warm)
    else:
        net = netcore.make_net(arch, train_ds.input_shape, train_ds.classes,
                               dtype, seed)

    if swaat.enabled:
        record = train_mod.train_swaat(net, train_ds, test_ds, tc, run_dir)
    else:
        record = train_mod.train_pgd_at(net, train_ds, test_ds, tc, run_dir)
    print(f"run dir: {run_dir}")
    print(f"best epoch {record.best_epoch}: adv acc {record.best_adv_acc:.4f}")
    return 0


def _eval_report(net, dataset, specs, seed, model_checksum, cfg_hash):
    t0 = time.time()
    rng = np.random.default_rng(seed)
    nat = train_mod.evaluate(net, dataset)
    attacks = {}
    for spec in specs:
        kind, cfg = attack_mod.parse_attack_spec(spec)
        correct = 0
        for start in range(0, len(dataset), 250):
            sl = slice(start, start + 250)
            x_adv = attack_mod.run_attack(net, dataset.images[sl],
                                          dataset.labels[sl], (kind, cfg), rng)
            correct += int((net.predict(x_adv) == dataset.labels[sl]).sum())
        attacks[spec] = correct / len(dataset)
    return {
        "schema_version": SCHEMA_VERSION,
        "model_checksum": model_checksum,
        "natural_acc": nat,
        "attack_acc": attacks,
        "wall_clock": time.time() - t0,
        "seed": seed,
        "config_hash": cfg_hash,
    }


def _print_report_table(report):
    rows = [("natural", report["natural_acc"])]
    rows += sorted(report["attack_acc"].items())
    width = max(len(r[0]) for r in rows)
    print(f"{'attack':<{width}}  accuracy")
    for name, acc in rows:
        print(f"{name:<{width}}  {acc:8.4f}")


def cmd_eval(args):
    net, _ = ckpt_mod.load(args.checkpoint)
    dataset = data_mod.load_idx(args.images, args.labels)
    if dataset.input_shape != net.input_shape:
        raise UsageError(f"dataset shape {dataset.input_shape} does not match "
                         f"checkpoint input {net.input_shape}")
    seed = int(os.environ.get("SWAAT_SEED", args.seed))
    report = _eval_report(net, dataset, args.attacks, seed,
                          ckpt_mod.file_checksum(args.checkpoint),
                          hashlib.sha256(" ".join(args.attacks).encode()).hexdigest()[:16])
    _print_report_table(report)
    if args.out:
        with open(args.out, "w") as f:
            json.dump(report, f, indent=2)
    else:
        print(json.dumps(report))
    return 0


def cmd_attack(args):
    net, _ = ckpt_mod.load(args.checkpoint)
    dataset = data_mod.load_idx(args.images, args.labels)
    seed = int(os.environ.get("SWAAT_SEED", args.seed))
    rng = np.random.default_rng(seed)
    kind, cfg = attack_mod.parse_attack_spec(args.spec)
    parts = []
    for start in range(0, len(dataset), 250):
        sl = slice(start, start + 250)
        parts.append(attack_mod.run_attack(net, dataset.images[sl],
                                           dataset.labels[sl], (kind, cfg), rng))
    adv = data_mod.Dataset(np.concatenate(parts), dataset.labels, dataset.classes)
    data_mod.write_idx(adv, args.out_images, args.out_labels)
    print(f"wrote {len(adv)} adversarial examples to {args.out_images}")
    return 0


def cmd_adjust_bn(args):
    net, agg = ckpt_mod.load(args.checkpoint)
    dataset = data_mod.load_idx(args.images, args.labels)
    attack_cfg = _parse_attack_cfg(args.attack) if args.mode == "adversarial" else None
    rng = np.random.default_rng(int(os.environ.get("SWAAT_SEED", args.seed)))
    swa_mod.adjust_bn(net, dataset, args.mode, attack_cfg, rng=rng)
    ckpt_mod.save(args.out, net, agg)
    print(f"recalibrated BN stats written to {args.out}")
    return 0


def cmd_synth_data(args):
    ds = data_mod.synth_dataset(args.seed, args.n, args.classes, args.difficulty)
    data_mod.write_idx(ds, args.images, args.labels)
    print(f"wrote {args.n} synthetic examples to {args.images}")
    return 0


def cmd_dilemma(args):
    train_ds = data_mod.load_idx(args.images, args.labels)
    test_ds = data_mod.load_idx(args.test_images, args.test_labels)
    report = ens_mod.dilemma_experiment(train_ds, test_ds, l=args.members,
                                        epochs=args.epochs, seed=args.seed)
    out = json.dumps(report, indent=2)
    if args.out:
        with open(args.out, "w") as f:
            f.write(out)
    print(out)
    return 0


def obfuscation_verdict(net, dataset, epsilon=8 / 255, alpha=2 / 255, seed=0,
                        batch_size=250, rng=None):
    """Gradient-masking sanity checks.

    FLAG when (a) many-step PGD looks *better* than few-step by more than 2
    points, or (b) unconstrained ascent leaves more than 1% accuracy.
    """
    rng = rng or np.random.default_rng(seed)

    def acc(cfg):
        return train_mod.evaluate(net, dataset, cfg, rng, batch_size)

    pgd10 = acc(attack_mod.AttackConfig(epsilon=epsilon, alpha=alpha, steps=10))
    pgd100 = acc(attack_mod.AttackConfig(epsilon=epsilon, alpha=alpha, steps=100))
    unconstrained = acc(attack_mod.AttackConfig(
        norm=attack_mod.UNCONSTRAINED, epsilon=math.inf, alpha=0.05, steps=100,
        random_init=False))
    flags = []
    if pgd100 > pgd10 + 0.02:
        flags.append("many-step PGD beats few-step by more than 2 points")
    if unconstrained > 0.01:
        flags.append("unconstrained attack leaves more than 1% accuracy")
    return {
        "pgd10_acc": pgd10,
        "pgd100_acc": pgd100,
        "unconstrained_acc": unconstrained,
        "verdict": "FLAG" if flags else "PASS",
        "flags": flags,
    }


def cmd_obfuscation_check(args):
    net, _ = ckpt_mod.load(args.checkpoint)
    dataset = data_mod.load_idx(args.images, args.labels)
    seed = int(os.environ.get("SWAAT_SEED", args.seed))
    kind, cfg = attack_mod.parse_attack_spec(args.spec)
    report = obfuscation_verdict(net, dataset, cfg.epsilon, cfg.alpha, seed)
    print(json.dumps(report, indent=2))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(report, f, indent=2)
    return 0


# ---- argument parsing ----------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="swaat",
                                description="adversarial-training laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a training experiment")
    t.add_argument("--config", help="INI config file")
    t.add_argument("--run-dir", help="output directory")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint under attacks")
    e.add_argument("checkpoint")
    e.add_argument("images")
    e.add_argument("labels")
    e.add_argument("attacks", nargs="*", default=[])
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("attack", help="emit adversarial examples to IDX")
    a.add_argument("checkpoint")
    a.add_argument("images")
    a.add_argument("labels")
    a.add_argument("spec")
    a.add_argument("out_images")
    a.add_argument("out_labels")
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(fn=cmd_attack)

    b = sub.add_parser("adjust-bn", help="recalibrate BN running statistics")
    b.add_argument("checkpoint")
    b.add_argument("images")
    b.add_argument("labels")
    b.add_argument("out")
    b.add_argument("--mode", choices=["natural", "adversarial"], default="natural")
    b.add_argument("--attack", default="pgd:linf:eps=8/255:alpha=2/255:steps=10")
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(fn=cmd_adjust_bn)

    d = sub.add_parser("dilemma", help="member-vs-whole attack-target experiment")
    d.add_argument("images")
    d.add_argument("labels")
    d.add_argument("test_images")
    d.add_argument("test_labels")
    d.add_argument("--members", type=int, default=3)
    d.add_argument("--epochs", type=int, default=5)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out")
    d.set_defaults(fn=cmd_dilemma)

    o = sub.add_parser("obfuscation-check", help="gradient-masking sanity checks")
    o.add_argument("checkpoint")
    o.add_argument("images")
    o.add_argument("labels")
    o.add_argument("--spec", default="pgd:linf:eps=8/255:alpha=2/255:steps=10")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out")
    o.set_defaults(fn=cmd_obfuscation_check)

    s = sub.add_parser("synth-data", help="generate a synthetic IDX dataset")
    s.add_argument("images")
    s.add_argument("labels")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--classes", type=int, default=10)
    s.add_argument("--difficulty", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_synth_data)

    return p


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    args.overrides = []
    try:
        for item in extra:
            if item.startswith("--") and "=" in item and "." in item.split("=", 1)[0]:
                args.overrides.append(item)
            else:
                raise UsageError(f"unrecognized argument {item!r}")
        if args.command != "train" and args.overrides:
            raise UsageError("--section.key=value overrides only apply to train")
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (data_mod.DataError, attack_mod.AttackError, ckpt_mod.CheckpointError,
            FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # internal failure
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
