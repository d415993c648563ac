"""Overlap metrics: Dice, Jaccard and grouped ("combined class") Dice."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..core import ConfigurationError, DomainError

ALL_GROUP = "All"


def dice(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """2|A n B| / (|A| + |B|); two empty masks score 1.0."""
    a = np.asarray(pred_mask, dtype=bool)
    b = np.asarray(gt_mask, dtype=bool)
    if a.shape != b.shape:
        raise DomainError(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def jaccard(a: np.ndarray, b: np.ndarray) -> float:
    """|A n B| / |A u B|; two empty masks score 1.0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DomainError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


@dataclass
class DiceResult:
    """Per-image, per-group Dice, shape (n_images, n_groups)."""

    scores: np.ndarray
    class_names: list[str]
    image_ids: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=np.float64))
        if self.scores.shape[1] != len(self.class_names):
            raise DomainError("score columns do not match class names")
        if self.scores.size and (self.scores.min() < 0 or self.scores.max() > 1):
            raise DomainError("Dice outside [0, 1]")

    @property
    def mean(self) -> dict[str, float]:
        return {c: float(self.scores[:, i].mean()) for i, c in enumerate(self.class_names)}

    @property
    def std(self) -> dict[str, float]:
        return {c: float(self.scores[:, i].std()) for i, c in enumerate(self.class_names)}

    def column(self, name: str) -> np.ndarray:
        return self.scores[:, self.class_names.index(name)]

    def to_dict(self) -> dict:
        return {
            "class_names": self.class_names,
            "image_ids": self.image_ids,
            "scores": self.scores.tolist(),
            "mean": self.mean,
            "std": self.std,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DiceResult":
        return cls(np.asarray(d["scores"], dtype=np.float64).reshape(-1, len(d["class_names"])),
                   list(d["class_names"]), list(d.get("image_ids", [])))


def _group_masks(labels: np.ndarray, grouping: Mapping[str, Sequence[int]]) -> list[np.ndarray]:
    return [np.isin(labels, list(classes)) for classes in grouping.values()]


def combined_class_dice(
    pred_labels: Sequence[np.ndarray] | np.ndarray,
    gt_labels: Sequence[np.ndarray] | np.ndarray,
    grouping: Mapping[str, Sequence[int]],
    valid_classes: Sequence[int] | None = None,
    image_ids: Sequence[str] | None = None,
    with_all: bool = True,
) -> DiceResult:
    """Dice per evaluation group, plus "All" on the concatenated group maps.

    ``grouping`` maps a group name to the raw label values it unions
    (e.g. whole tumour = {1, 2, 3}). "All" treats the group masks laid end
    to end as one long binary vector; it is not an average.
    """
    if isinstance(pred_labels, np.ndarray) and pred_labels.ndim == 2:
        pred_labels, gt_labels = [pred_labels], [gt_labels]
    if len(pred_labels) != len(gt_labels):
        raise DomainError("prediction and ground-truth lists differ in length")
    if valid_classes is not None:
        unknown = {c for cls in grouping.values() for c in cls} - set(valid_classes)
        if unknown:
            raise ConfigurationError(f"grouping references unknown classes {sorted(unknown)}")
    names = list(grouping) + ([ALL_GROUP] if with_all else [])
    rows = []
    for p, g in zip(pred_labels, gt_labels):
        pm, gm = _group_masks(np.asarray(p), grouping), _group_masks(np.asarray(g), grouping)
        row = [dice(a, b) for a, b in zip(pm, gm)]
        if with_all:
            row.append(dice(np.concatenate([m.ravel() for m in pm]), np.concatenate([m.ravel() for m in gm])))
        rows.append(row)
    ids = list(image_ids) if image_ids is not None else [str(i) for i in range(len(rows))]
    return DiceResult(np.array(rows).reshape(len(rows), len(names)), names, ids)


def default_grouping(class_names: Sequence[str]) -> dict[str, list[int]]:
    """Evaluation groups for phantom labels: each lesion class nests its cores."""
    groups = {}
    for i, name in enumerate(class_names, start=1):
        if name == "brain":
            continue
        groups[name] = list(range(i, len(class_names) + 1))
    return groups
