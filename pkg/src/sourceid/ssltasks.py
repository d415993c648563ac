"""Proxy-task sample construction.

Source identification (SI) builds several mixtures that all contain one
fixed target slice s1 and asks the network to reconstruct s1. The
corruption baselines (inpainting, local pixel shuffling, super-resolution,
Bezier intensity shift) map a slice to a corrupted copy with the original
as target. Mixup blends two labelled segmentation samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import (
    ConfigurationError,
    DomainError,
    MixturePlan,
    MultiModalSlice,
    Provenance,
    SamplingError,
    SegmentationSample,
    TaskKind,
    TaskParams,
    TrainingSample,
    check_same_modalities,
    derive_seed,
)
from .data import SliceDataset

NOISE_ID = "__noise__"


@dataclass(frozen=True)
class WeightDraw:
    weights: np.ndarray
    rng_tag: str = ""


@dataclass(frozen=True)
class CorruptionSpec:
    grid: tuple[int, int] = (4, 4)  # cell height, width in pixels
    gamma: float = 0.5
    control_points: Optional[tuple[float, float, float, float]] = None

    def __post_init__(self) -> None:
        if min(self.grid) < 1:
            raise ConfigurationError(f"grid dims must be >= 1, got {self.grid}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1], got {self.gamma}")


# --------------------------------------------------------------------------
# mixing weights and plans


def sample_weights(n: int, rng: np.random.Generator) -> WeightDraw:
    """Uniform draw from the probability simplex with ``n`` vertices."""
    if n < 1:
        raise DomainError("sample_weights needs n >= 1")
    if n == 1:
        return WeightDraw(np.ones(1))
    w = rng.dirichlet(np.ones(n))
    # renormalise in float64 so the sum is 1 to rounding
    return WeightDraw(w / w.sum())


def make_mixture_plan(n_per_mixture: int, m_mixtures: int, rng: np.random.Generator) -> MixturePlan:
    """Target in every row; non-target sources partitioned across rows without reuse."""
    if n_per_mixture < 1 or m_mixtures < 1:
        raise DomainError("n_per_mixture and m_mixtures must be >= 1")
    n_pool = m_mixtures * (n_per_mixture - 1) + 1
    weights = np.zeros((m_mixtures, n_pool))
    for m in range(m_mixtures):
        draw = sample_weights(n_per_mixture, rng).weights
        weights[m, 0] = draw[0]
        lo = 1 + m * (n_per_mixture - 1)
        weights[m, lo : lo + n_per_mixture - 1] = draw[1:]
    return MixturePlan(n_pool, n_per_mixture, m_mixtures, weights)


def check_pool_setting(n_pool: int, n_per_mixture: int, m_mixtures: int = 2) -> None:
    if n_per_mixture < 1 or n_pool != m_mixtures * (n_per_mixture - 1) + 1:
        raise ConfigurationError(
            f"(N={n_pool}, N~={n_per_mixture}) violates N = M~(N~-1)+1 with M~={m_mixtures}"
        )


def combination_count(n_images: int, n_sources: int) -> int:
    """Number of distinct (pool, target) choices: C(n_images, n_sources) * n_sources."""
    if not 0 <= n_sources <= n_images:
        raise DomainError("need 0 <= n_sources <= n_images")
    return math.comb(n_images, n_sources) * n_sources


# --------------------------------------------------------------------------
# source assignment


def noise_slice(shape: tuple[int, int], n_modalities: int, rng: np.random.Generator, index: int) -> MultiModalSlice:
    return MultiModalSlice(
        pixels=rng.standard_normal(shape + (n_modalities,)).astype(np.float32),
        brain_mask=np.ones(shape, dtype=bool),
        patient_id=NOISE_ID,
        slice_index=index,
    )


def assign_sources(kind: TaskKind, dataset: SliceDataset, n: int, rng: np.random.Generator) -> list[MultiModalSlice]:
    """Draw the N-slice source pool for one SI sample; index 0 is the target."""
    kind = TaskKind(kind)
    if n < 1:
        raise DomainError("need n >= 1 sources")
    patients = [pid for pid in dataset.patient_ids if dataset.eligible(pid)]
    if kind is TaskKind.CSI:
        if len(patients) < n:
            raise SamplingError(f"CSI with N={n} needs {n} patients with eligible slices, have {len(patients)}")
        chosen = rng.choice(len(patients), size=n, replace=False)
        out = []
        for i in chosen:
            cands = dataset.eligible(patients[i])
            out.append(cands[rng.integers(len(cands))])
        return out
    if kind is TaskKind.WSI:
        rich = [pid for pid in patients if len(dataset.eligible(pid)) >= n]
        if not rich:
            raise SamplingError(f"WSI with N={n} needs a patient with {n} eligible slices")
        cands = dataset.eligible(rich[rng.integers(len(rich))])
        return [cands[i] for i in rng.choice(len(cands), size=n, replace=False)]
    if kind is TaskKind.DSI:
        if not patients:
            raise SamplingError("DSI needs at least one patient with eligible slices")
        cands = dataset.eligible(patients[rng.integers(len(patients))])
        target = cands[rng.integers(len(cands))]
        return [target] + [noise_slice(target.shape, target.n_modalities, rng, k) for k in range(1, n)]
    raise DomainError(f"{kind} is not an SI task")


def overlap_admissible(sources: Sequence[MultiModalSlice], plan: MixturePlan, min_overlap: int = 1) -> bool:
    """Every source mixed with the target must share >= ``min_overlap`` mask pixels with it."""
    target = sources[plan.target_index].brain_mask
    mixed_with_target = np.flatnonzero(np.any(plan.weights[:, [plan.target_index]] * plan.weights > 0, axis=0))
    for n in mixed_with_target:
        if n == plan.target_index or sources[n].patient_id == NOISE_ID:
            continue
        if np.count_nonzero(target & sources[n].brain_mask) < min_overlap:
            return False
    return True


# --------------------------------------------------------------------------
# SI samples


def mix(sources: Sequence[np.ndarray], weights: np.ndarray) -> np.ndarray:
    """Stack of mixtures, channel-last: (H, W, M*T), each weight shared across T channels."""
    stack = np.stack([np.asarray(s, dtype=np.float64) for s in sources])  # (N, H, W, T)
    mixed = np.tensordot(np.asarray(weights, dtype=np.float64), stack, axes=(1, 0))  # (M, H, W, T)
    return np.concatenate(list(mixed), axis=-1)


def make_si_sample(
    sources: Sequence[MultiModalSlice], plan: MixturePlan, rng: Optional[np.random.Generator] = None
) -> TrainingSample:
    if len(sources) != plan.n_pool:
        raise DomainError(f"plan expects {plan.n_pool} sources, got {len(sources)}")
    check_same_modalities(sources)
    pixels = [s.pixels for s in sources]
    inp = mix(pixels, plan.weights).astype(np.float32)
    target = np.asarray(sources[plan.target_index].pixels, dtype=np.float32)
    prov = Provenance(tuple(s.key for s in sources), plan.weights)
    return TrainingSample(inp, target, prov)


def remix(sources: Sequence[MultiModalSlice], provenance: Provenance) -> np.ndarray:
    keys = tuple(s.key for s in sources)
    if keys != provenance.sources:
        raise DomainError("sources do not match provenance")
    return mix([s.pixels for s in sources], provenance.weights)


def swap_mixtures(sample: TrainingSample, order: Sequence[int]) -> TrainingSample:
    """Reorder the mixture blocks of an SI input; the target is unchanged."""
    t = sample.target.shape[2]
    blocks = [sample.input[..., m * t : (m + 1) * t] for m in order]
    prov = sample.provenance
    if prov is not None:
        prov = Provenance(prov.sources, prov.weights[list(order)], prov.noise_seed)
    return TrainingSample(np.concatenate(blocks, axis=-1), sample.target, prov)


def draw_si_sample(
    params: TaskParams, dataset: SliceDataset, rng: np.random.Generator, max_tries: int = 100, augment_fn=None
) -> TrainingSample:
    """Assign sources, sample a plan, reject non-overlapping draws, mix."""
    for _ in range(max_tries):
        plan = make_mixture_plan(params.n_per_mixture, params.m_mixtures, rng)
        sources = assign_sources(params.kind, dataset, plan.n_pool, rng)
        if augment_fn is not None:
            sources = [s if s.patient_id == NOISE_ID else augment_fn(s, rng) for s in sources]
        if params.kind is TaskKind.DSI or overlap_admissible(sources, plan, params.min_overlap):
            return make_si_sample(sources, plan, rng)
    raise SamplingError(f"no admissible source combination found in {max_tries} draws")


def make_ambiguous_sample(
    s1: MultiModalSlice,
    s2: MultiModalSlice,
    lam: float,
    rng: np.random.Generator,
    w: Optional[float] = None,
) -> TrainingSample:
    """Single mixture of s1 and a noise-blended s2; target s1.

    s2' = (1 - lam) s2 + lam * N(0, 1); x = w s1 + (1 - w) s2', w ~ U[0, 1].
    """
    if s1.pixels.shape != s2.pixels.shape:
        raise DomainError("s1 and s2 shapes differ")
    if not 0.0 <= lam <= 1.0:
        raise DomainError(f"lambda must lie in [0, 1], got {lam}")
    noise_seed = derive_seed(int(rng.integers(2**63)))
    noise = np.random.default_rng(noise_seed).standard_normal(s2.pixels.shape)
    s2p = (1.0 - lam) * np.asarray(s2.pixels, dtype=np.float64) + lam * noise
    if w is None:
        w = float(rng.uniform())
    x = w * np.asarray(s1.pixels, dtype=np.float64) + (1.0 - w) * s2p
    prov = Provenance((s1.key, s2.key), np.array([[w, 1.0 - w]]), noise_seed)
    return TrainingSample(x.astype(np.float32), np.asarray(s1.pixels, dtype=np.float32), prov)


def perturbed_source(s2: np.ndarray, lam: float, noise_seed: int) -> np.ndarray:
    noise = np.random.default_rng(noise_seed).standard_normal(np.shape(s2))
    return (1.0 - lam) * np.asarray(s2, dtype=np.float64) + lam * noise


# --------------------------------------------------------------------------
# corruption baselines


def cell_slices(shape: tuple[int, int], grid: tuple[int, int], ragged: bool = True):
    """Yield (row-slice, col-slice) for each grid cell in row-major order.

    ``grid`` is the cell size. With ``ragged`` the trailing partial cells
    are included, otherwise only full cells are produced.
    """
    h, w = shape
    gh, gw = grid
    row_stop = h if ragged else h - h % gh
    col_stop = w if ragged else w - w % gw
    for r in range(0, row_stop, gh):
        for c in range(0, col_stop, gw):
            yield slice(r, min(r + gh, h)), slice(c, min(c + gw, w))


def apply_inpaint_mask(pixels: np.ndarray, grid: tuple[int, int], keep: Sequence[bool]) -> np.ndarray:
    out = np.array(pixels, copy=True)
    cells = list(cell_slices(out.shape[:2], grid))
    if len(keep) != len(cells):
        raise DomainError(f"expected {len(cells)} cell draws, got {len(keep)}")
    for (rs, cs), k in zip(cells, keep):
        if not k:
            out[rs, cs] = 0
    return out


def inpaint_corrupt(slice_: MultiModalSlice, spec: CorruptionSpec, rng: np.random.Generator) -> TrainingSample:
    """Zero each grid cell (all channels) unless a Bernoulli(gamma) draw keeps it."""
    if spec.grid[0] > slice_.shape[0] or spec.grid[1] > slice_.shape[1]:
        raise DomainError("grid cell larger than the image")
    n_cells = len(list(cell_slices(slice_.shape, spec.grid)))
    keep = rng.random(n_cells) < spec.gamma
    return TrainingSample(apply_inpaint_mask(slice_.pixels, spec.grid, keep), slice_.pixels)


def permute_cell(cell: np.ndarray, row_perm: Sequence[int], col_perm: Sequence[int]) -> np.ndarray:
    """P @ cell @ Q for every channel, P and Q given as index permutations."""
    return cell[np.asarray(row_perm)][:, np.asarray(col_perm)]


def pixel_shuffle_corrupt(slice_: MultiModalSlice, spec: CorruptionSpec, rng: np.random.Generator) -> TrainingSample:
    gh, gw = spec.grid
    if gh != gw:
        raise ConfigurationError(f"pixel shuffle needs square cells, got {spec.grid}")
    out = np.array(slice_.pixels, copy=True)
    for rs, cs in cell_slices(slice_.shape, spec.grid, ragged=False):
        if rng.random() < spec.gamma:
            out[rs, cs] = permute_cell(out[rs, cs], rng.permutation(gh), rng.permutation(gw))
    return TrainingSample(out, slice_.pixels)


def superres_corrupt(slice_: MultiModalSlice, spec: CorruptionSpec) -> TrainingSample:
    """Replace each cell by its (ceil(h/2), ceil(w/2)) pixel, 1-based."""
    if spec.grid[0] > slice_.shape[0] or spec.grid[1] > slice_.shape[1]:
        raise DomainError("grid cell larger than the image")
    out = np.array(slice_.pixels, copy=True)
    for rs, cs in cell_slices(slice_.shape, spec.grid):
        h, w = rs.stop - rs.start, cs.stop - cs.start
        out[rs, cs] = out[rs.start + math.ceil(h / 2) - 1, cs.start + math.ceil(w / 2) - 1]
    return TrainingSample(out, slice_.pixels)


def bezier_curve(v: np.ndarray, p: Sequence[float]) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    p0, p1, p2, p3 = p
    u = 1.0 - v
    return u**3 * p0 + 3 * v * u**2 * p1 + 3 * v**2 * u * p2 + v**3 * p3


def bezier_intensity_shift(
    slice_: MultiModalSlice, rng: np.random.Generator, control_points: Optional[Sequence[float]] = None
) -> TrainingSample:
    """Per-channel cubic Bezier remap of min-max rescaled foreground intensities."""
    p = tuple(control_points) if control_points is not None else tuple(rng.uniform(0, 1, 4))
    out = np.array(slice_.pixels, dtype=np.float64, copy=True)
    fg = np.asarray(slice_.brain_mask)
    if not fg.any():
        return TrainingSample(out.astype(np.float32), slice_.pixels)
    for c in range(out.shape[2]):
        vals = out[..., c][fg]
        lo, hi = vals.min(), vals.max()
        rng_ = hi - lo
        if rng_ <= 0:
            # constant channel: v = 0 everywhere, maps to p0 offset from the level
            out[..., c][fg] = lo + p[0]
            continue
        v = (vals - lo) / rng_
        ch = out[..., c]
        ch[fg] = bezier_curve(v, p) * rng_ + lo
    return TrainingSample(out.astype(np.float32), slice_.pixels)


# --------------------------------------------------------------------------
# Mixup


def mixup(
    a: SegmentationSample,
    b: SegmentationSample,
    alpha: float,
    rng: np.random.Generator,
    lam: Optional[float] = None,
) -> SegmentationSample:
    if alpha <= 0:
        raise ConfigurationError(f"mixup alpha must be > 0, got {alpha}")
    if a.image.shape != b.image.shape or a.class_names != b.class_names:
        raise DomainError("mixup samples must share shape and class set")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    image = lam * np.asarray(a.image, dtype=np.float64) + (1 - lam) * np.asarray(b.image, dtype=np.float64)
    soft = lam * a.one_hot() + (1 - lam) * b.one_hot()
    return SegmentationSample(image.astype(np.float32), soft.argmax(-1), a.class_names, soft)


# --------------------------------------------------------------------------
# dispatch


def make_proxy_sample(
    params: TaskParams, dataset: SliceDataset, rng: np.random.Generator, augment_fn=None
) -> TrainingSample:
    """One training pair for any proxy task kind."""
    if params.kind.is_si:
        return draw_si_sample(params, dataset, rng, augment_fn=augment_fn)
    pool = dataset.all_eligible()
    if not pool:
        raise SamplingError("no eligible slices")
    s = pool[rng.integers(len(pool))]
    if augment_fn is not None:
        s = augment_fn(s, rng)
    spec = CorruptionSpec(params.grid, params.gamma)
    if params.kind is TaskKind.INPAINT:
        return inpaint_corrupt(s, spec, rng)
    if params.kind is TaskKind.PIXEL_SHUFFLE:
        return pixel_shuffle_corrupt(s, spec, rng)
    if params.kind is TaskKind.SUPER_RES:
        return superres_corrupt(s, spec)
    return bezier_intensity_shift(s, rng)


def dump_sample_png(sample: TrainingSample, path: str | Path, channel: int = 0) -> None:
    """Debug triptych: each input mixture | target, one modality."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    t = sample.target.shape[2]
    panels = [sample.input[..., m * t + channel] for m in range(sample.n_mixtures)] + [sample.target[..., channel]]
    fig, axes = plt.subplots(1, len(panels), figsize=(2.2 * len(panels), 2.4))
    for i, (ax, img) in enumerate(zip(np.atleast_1d(axes), panels)):
        ax.imshow(img, cmap="gray")
        ax.set_title("target" if i == len(panels) - 1 else f"x{i + 1}", fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
