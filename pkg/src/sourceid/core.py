"""Domain types shared across the package.

Images are channel-last (H, W, T) float arrays, indexed row-major with
row = y. Every array stored on a core type is made read-only on
construction so instances can be handed to parallel workers freely.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

TARGET_INDEX = 0
DEFAULT_IMAGE_SIZE = 200


class ConfigurationError(ValueError):
    """Raised for invalid user configuration (bad params, infeasible setups)."""


class DomainError(ValueError):
    """Raised when an operation receives inputs outside its domain."""


class DegenerateInputError(ValueError):
    """Raised when data makes an operation ill-defined (empty masks, zero variance)."""


class SamplingError(RuntimeError):
    """Raised when not enough patients/slices exist to draw a sample."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.flags.writeable:
        a = a.copy()
        a.flags.writeable = False
    return a


def derive_rng(*keys: Any) -> np.random.Generator:
    """Return a Generator seeded from an arbitrary tuple of keys.

    Used for per-sample seeding: the stream depends only on the keys
    (e.g. global seed, patient id, slice index, epoch), never on which
    worker happens to build the sample.
    """
    digest = hashlib.sha256(repr(keys).encode()).digest()
    entropy = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(*keys: Any) -> int:
    digest = hashlib.sha256(repr(keys).encode()).digest()
    return int.from_bytes(digest[:4], "little")


class TaskKind(str, enum.Enum):
    CSI = "CSI"
    WSI = "WSI"
    DSI = "DSI"
    INPAINT = "INPAINT"
    PIXEL_SHUFFLE = "PIXEL_SHUFFLE"
    SUPER_RES = "SUPER_RES"
    INTENSITY_SHIFT = "INTENSITY_SHIFT"

    @property
    def is_si(self) -> bool:
        return self in (TaskKind.CSI, TaskKind.WSI, TaskKind.DSI)


@dataclass(frozen=True)
class TaskParams:
    """Parameter record for a proxy task.

    SI variants use ``n_per_mixture``/``m_mixtures``; corruption tasks use
    ``grid`` (cell size in pixels) and ``gamma``.
    """

    kind: TaskKind
    n_per_mixture: int = 3
    m_mixtures: int = 2
    grid: tuple[int, int] = (4, 4)
    gamma: float = 0.5
    min_overlap: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", TaskKind(self.kind))
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1], got {self.gamma}")
        if min(self.grid) < 1:
            raise ConfigurationError(f"grid dims must be >= 1, got {self.grid}")
        if self.n_per_mixture < 1 or self.m_mixtures < 1:
            raise ConfigurationError("n_per_mixture and m_mixtures must be >= 1")
        if self.kind is TaskKind.PIXEL_SHUFFLE and self.grid[0] != self.grid[1]:
            raise ConfigurationError(f"pixel shuffle needs square cells, got {self.grid}")

    @property
    def n_pool(self) -> int:
        return self.m_mixtures * (self.n_per_mixture - 1) + 1

    def input_channels(self, n_modalities: int) -> int:
        return n_modalities * self.m_mixtures if self.kind.is_si else n_modalities


@dataclass(frozen=True)
class MultiModalSlice:
    pixels: np.ndarray  # (H, W, T)
    brain_mask: np.ndarray  # (H, W) bool
    patient_id: str
    slice_index: int
    eligible: bool = True

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3:
            raise DomainError(f"pixels must be H x W x T, got shape {self.pixels.shape}")
        if self.brain_mask.shape != self.pixels.shape[:2]:
            raise DomainError("brain_mask shape does not match pixels")
        if self.slice_index < 0:
            raise DomainError("slice_index must be >= 0")
        object.__setattr__(self, "pixels", _frozen(self.pixels))
        object.__setattr__(self, "brain_mask", _frozen(self.brain_mask.astype(bool)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]

    @property
    def n_modalities(self) -> int:
        return self.pixels.shape[2]

    @property
    def key(self) -> tuple[str, int]:
        return (self.patient_id, self.slice_index)


@dataclass(frozen=True)
class MixturePlan:
    n_pool: int
    n_per_mixture: int
    m_mixtures: int
    weights: np.ndarray  # (m_mixtures, n_pool)
    target_index: int = TARGET_INDEX

    def __post_init__(self) -> None:
        object.__setattr__(self, "weights", _frozen(np.asarray(self.weights, dtype=np.float64)))


@dataclass(frozen=True)
class Provenance:
    sources: tuple[tuple[str, int], ...]
    weights: np.ndarray
    noise_seed: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "weights", _frozen(np.asarray(self.weights, dtype=np.float64)))


@dataclass(frozen=True)
class TrainingSample:
    input: np.ndarray  # (H, W, M*T) or (H, W, T)
    target: np.ndarray  # (H, W, T)
    provenance: Optional[Provenance] = None

    def __post_init__(self) -> None:
        if self.input.shape[:2] != self.target.shape[:2]:
            raise DomainError("input and target spatial shapes differ")
        if self.input.shape[2] % self.target.shape[2]:
            raise DomainError("input channels must be a multiple of target channels")
        object.__setattr__(self, "input", _frozen(self.input))
        object.__setattr__(self, "target", _frozen(self.target))

    @property
    def n_mixtures(self) -> int:
        return self.input.shape[2] // self.target.shape[2]


@dataclass(frozen=True)
class SegmentationSample:
    image: np.ndarray  # (H, W, T)
    labels: np.ndarray  # (H, W) int, 0 = background
    class_names: tuple[str, ...]
    soft_labels: Optional[np.ndarray] = None  # (H, W, C + 1)

    def __post_init__(self) -> None:
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.labels.shape != self.image.shape[:2]:
            raise DomainError("labels shape does not match image")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > len(self.class_names)):
            raise DomainError("labels contain undeclared class indices")
        object.__setattr__(self, "image", _frozen(self.image))
        object.__setattr__(self, "labels", _frozen(self.labels.astype(np.int64)))
        if self.soft_labels is not None:
            object.__setattr__(self, "soft_labels", _frozen(self.soft_labels))

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def one_hot(self) -> np.ndarray:
        if self.soft_labels is not None:
            return np.asarray(self.soft_labels)
        return np.eye(self.n_classes + 1)[self.labels]


@dataclass
class ValidationResult:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_mixture_plan(plan: MixturePlan, atol: float = 1e-9) -> ValidationResult:
    """Check every MixturePlan invariant; violations are collected, not raised."""
    out = ValidationResult()
    w = np.asarray(plan.weights, dtype=np.float64)
    if plan.n_per_mixture < 1:
        out.violations.append("n_per_mixture < 1")
    if plan.m_mixtures < 1:
        out.violations.append("m_mixtures < 1")
    if plan.n_pool < plan.n_per_mixture:
        out.violations.append("n_pool < n_per_mixture")
    if plan.target_index != TARGET_INDEX:
        out.violations.append("target_index != 0")
    if w.shape != (plan.m_mixtures, plan.n_pool):
        out.violations.append(f"weights shape {w.shape} != ({plan.m_mixtures}, {plan.n_pool})")
        return out
    if not np.all(np.isfinite(w)) or w.min(initial=0.0) < 0.0 or w.max(initial=0.0) > 1.0:
        out.violations.append("weight outside [0, 1]")
    for m, row in enumerate(w):
        if abs(row.sum() - 1.0) > atol:
            out.violations.append(f"row sum != 1 (row {m}: {row.sum():.12g})")
        nnz = int(np.count_nonzero(row))
        if nnz != plan.n_per_mixture:
            out.violations.append(f"row {m} has {nnz} nonzero entries, expected {plan.n_per_mixture}")
    if 0 <= plan.target_index < w.shape[1] and np.any(w[:, plan.target_index] == 0):
        out.violations.append("target column has a zero entry")
    others = np.delete(w, plan.target_index, axis=1) if 0 <= plan.target_index < w.shape[1] else w
    reused = np.flatnonzero(np.count_nonzero(others, axis=0) > 1)
    if reused.size:
        out.violations.append(f"non-target sources reused across rows: {reused.tolist()}")
    return out


def check_same_modalities(slices: Sequence[MultiModalSlice]) -> int:
    counts = {s.n_modalities for s in slices}
    if len(counts) != 1:
        raise DomainError(f"mixed sources must share the modality count, got {sorted(counts)}")
    return counts.pop()
