"""Desk-scale adversarial-training laboratory.

A from-scratch neural-network engine, white-box attack suite, sliding-window
weight averaging with batch-norm recalibration, misclassification-driven data
resampling, training loops and an evaluation CLI.
"""

__version__ = "0.1.0"

from .attack import AttackConfig, CWConfig, fgsm, pgd, cw_l2, parse_attack_spec
from .data import Dataset, BatchPlan, load_idx, write_idx, synth_dataset, \
    sample_with_replacement
from .netcore import Network, make_net, grad_check
from .resample import ResamplingPolicy, parse_policy_spec
from .swa import WeightAggregator, swap_in, adjust_bn
from .train import TrainConfig, SwaatOptions, RunRecord, train_pgd_at, \
    train_swaat, lr_at
from .ensemble import Ensemble, attack_target, dilemma_experiment

__all__ = [
    "AttackConfig", "CWConfig", "fgsm", "pgd", "cw_l2", "parse_attack_spec",
    "Dataset", "BatchPlan", "load_idx", "write_idx", "synth_dataset",
    "sample_with_replacement", "Network", "make_net", "grad_check",
    "ResamplingPolicy", "parse_policy_spec", "WeightAggregator", "swap_in",
    "adjust_bn", "TrainConfig", "SwaatOptions", "RunRecord", "train_pgd_at",
    "train_swaat", "lr_at", "Ensemble", "attack_target", "dilemma_experiment",
]
