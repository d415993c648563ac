"""Metrics, statistics and the diagnostic experiments."""

from .metrics import ALL_GROUP, DiceResult, combined_class_dice, default_grouping, dice, jaccard
from .stats import ComparisonReport, paired_ttest, t_cdf

_EXPERIMENTS = {
    "solvability_experiment",
    "sources_ablation",
    "overlap_distribution",
    "evaluate_segmentation",
    "EvalReport",
    "well_posedness_experiment",
    "transfer_experiment",
}

__all__ = [
    "ALL_GROUP",
    "ComparisonReport",
    "DiceResult",
    "combined_class_dice",
    "default_grouping",
    "dice",
    "jaccard",
    "paired_ttest",
    "t_cdf",
    *sorted(_EXPERIMENTS),
]


def __getattr__(name):
    # experiments depend on training, which depends on metrics; import lazily
    if name in _EXPERIMENTS:
        from . import experiments

        return getattr(experiments, name)
    raise AttributeError(name)
