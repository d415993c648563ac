"""Dataset ingestion, preprocessing, the synthetic phantom and augmentation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .core import (
    ConfigurationError,
    DegenerateInputError,
    DomainError,
    MultiModalSlice,
    derive_rng,
)

log = logging.getLogger(__name__)

PHANTOM_SIDECAR = "dataset.json"
MANIFEST_NAME = "manifest.json"
RAW_DTYPE = "<f4"


class SchemaError(ValueError):
    """On-disk data does not match what the manifest declares."""


@dataclass(frozen=True)
class Volume:
    voxels: np.ndarray  # (H, W, Z, T)
    patient_id: str
    modality_names: tuple[str, ...]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        object.__setattr__(self, "modality_names", tuple(self.modality_names))
        if self.voxels.ndim != 4:
            raise DomainError(f"voxels must be H x W x Z x T, got {self.voxels.shape}")
        if self.voxels.shape[2] < 1:
            raise DomainError("volume needs Z >= 1")
        if len(set(self.modality_names)) != len(self.modality_names):
            raise DomainError(f"modality names must be unique: {self.modality_names}")
        if len(self.modality_names) != self.voxels.shape[3]:
            raise DomainError("modality_names length differs from channel count")

    @property
    def n_modalities(self) -> int:
        return self.voxels.shape[3]

    def replace(self, voxels: np.ndarray) -> "Volume":
        return Volume(voxels, self.patient_id, self.modality_names, self.spacing)


# --------------------------------------------------------------------------
# loading


def _load_nifti(path: Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    import nibabel as nib

    img = nib.load(str(path))
    data = np.asarray(img.get_fdata(dtype=np.float32))
    zooms = tuple(float(z) for z in img.header.get_zooms()[:3])
    zooms = zooms + (1.0,) * (3 - len(zooms))
    return data, zooms


def load_volume(
    paths: str | Path | Sequence[str | Path],
    patient_id: Optional[str] = None,
    modality_names: Optional[Sequence[str]] = None,
) -> Volume:
    """Load one patient from NIfTI files, one per modality (or one 4D file).

    ``modality_names`` fixes the channel order; a count mismatch with the
    files found raises :class:`SchemaError`.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    paths = [Path(p) for p in paths]
    channels = []
    spacing = (1.0, 1.0, 1.0)
    for p in paths:
        if not p.is_file():
            raise FileNotFoundError(f"volume file not found: {p}")
        name = p.name.lower()
        if not (name.endswith(".nii") or name.endswith(".nii.gz")):
            raise OSError(f"unsupported volume format: {p}")
        try:
            data, spacing = _load_nifti(p)
        except Exception as exc:  # nibabel raises a zoo of types
            raise OSError(f"cannot read {p}: {exc}") from exc
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim == 3:
            data = data[..., None]
        if data.ndim != 4:
            raise SchemaError(f"{p}: expected 3D or 4D data, got {data.ndim}D")
        channels.append(data)
    voxels = np.concatenate(channels, axis=3).astype(np.float32)
    t = voxels.shape[3]
    if modality_names is None:
        modality_names = [f"m{i}" for i in range(t)]
    elif len(modality_names) != t:
        raise SchemaError(f"manifest declares {len(modality_names)} modalities, files provide {t}")
    return Volume(voxels, patient_id or paths[0].name.split(".")[0], tuple(modality_names), spacing)


def load_label_volume(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"label file not found: {path}")
    data, _ = _load_nifti(path)
    return np.rint(data).astype(np.int64)


# --------------------------------------------------------------------------
# preprocessing


def _center_crop_pad_axis(a: np.ndarray, axis: int, target: int) -> np.ndarray:
    n = a.shape[axis]
    if n > target:
        start = (n - target) // 2
        return np.take(a, np.arange(start, start + target), axis=axis)
    if n < target:
        before = (target - n) // 2
        pad = [(0, 0)] * a.ndim
        pad[axis] = (before, target - n - before)
        return np.pad(a, pad, mode="constant", constant_values=0)
    return a


def crop_or_pad_array(a: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Center crop/pad the first two axes of ``a`` to ``size`` (pad value 0)."""
    h, w = size
    if h < 1 or w < 1:
        raise ConfigurationError(f"size must be positive, got {size}")
    return _center_crop_pad_axis(_center_crop_pad_axis(a, 0, h), 1, w)


def crop_or_pad(volume: Volume, size: tuple[int, int]) -> Volume:
    return volume.replace(crop_or_pad_array(volume.voxels, size))


def brain_mask_threshold(pixels: np.ndarray, tau: float = 1e-6) -> np.ndarray:
    """Foreground = max over channels of |intensity| above ``tau``.

    Works for a slice (H, W, T) or a volume (H, W, Z, T); the channel axis
    is always last.
    """
    return np.abs(pixels).max(axis=-1) > tau


def foreground_normalize(volume: Volume, mask: np.ndarray) -> Volume:
    """Z-score each channel over the foreground; background becomes 0."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != volume.voxels.shape[:3]:
        raise DomainError(f"mask shape {mask.shape} != volume grid {volume.voxels.shape[:3]}")
    n = int(mask.sum())
    if n == 0:
        raise DegenerateInputError("empty foreground mask")
    out = np.zeros_like(volume.voxels, dtype=np.float32)
    for c in range(volume.n_modalities):
        fg = volume.voxels[..., c][mask].astype(np.float64)
        mu = fg.mean()
        sd = fg.std()  # population std
        if n < 2 or sd <= 1e-12 * max(1.0, abs(mu)):
            raise DegenerateInputError(f"zero-variance foreground in channel {c}")
        ch = np.zeros(mask.shape, dtype=np.float64)
        ch[mask] = (fg - mu) / sd
        out[..., c] = ch
    return volume.replace(out)


def preprocess_volume(
    volume: Volume,
    size: tuple[int, int],
    labels: Optional[np.ndarray] = None,
    tau: float = 1e-6,
) -> tuple[Volume, np.ndarray, Optional[np.ndarray]]:
    """crop/pad -> threshold mask on raw intensities -> foreground z-score."""
    volume = crop_or_pad(volume, size)
    mask = brain_mask_threshold(volume.voxels, tau)
    volume = foreground_normalize(volume, mask)
    if labels is not None:
        labels = crop_or_pad_array(labels, size)
    return volume, mask, labels


def extract_slices(
    volume: Volume,
    labels: Optional[np.ndarray] = None,
    mask: Optional[np.ndarray] = None,
    min_fraction: float = 0.01,
) -> list[tuple[MultiModalSlice, Optional[np.ndarray]]]:
    """One 2D slice per axial index.

    Slices whose brain mask covers less than ``min_fraction`` of the frame
    (in particular empty ones) are flagged ineligible for proxy sampling.
    """
    if mask is None:
        mask = brain_mask_threshold(volume.voxels)
    h, w, z, _ = volume.voxels.shape
    out = []
    for k in range(z):
        m = mask[:, :, k]
        eligible = bool(m.any()) and m.mean() >= min_fraction
        s = MultiModalSlice(
            pixels=volume.voxels[:, :, k, :],
            brain_mask=m,
            patient_id=volume.patient_id,
            slice_index=k,
            eligible=eligible,
        )
        out.append((s, None if labels is None else np.asarray(labels[:, :, k])))
    return out


# --------------------------------------------------------------------------
# synthetic phantom


@dataclass(frozen=True)
class LesionParams:
    count: tuple[int, int] = (1, 3)
    radius: tuple[float, float] = (0.06, 0.14)  # fraction of image side
    fraction: tuple[float, float] = (0.01, 0.08)  # lesion voxels / brain voxels
    n_classes: int = 2  # 2 -> brain + lesion; 3 adds a nested lesion core
    max_tries: int = 200

    def validate(self, brain_radius: float = 0.25) -> None:
        lo, hi = self.count
        if lo < 1 or hi < lo:
            raise ConfigurationError(f"lesion_params.count must satisfy 1 <= lo <= hi, got {self.count}")
        rlo, rhi = self.radius
        if rlo <= 0 or rhi < rlo:
            raise ConfigurationError(f"lesion_params.radius must satisfy 0 < lo <= hi, got {self.radius}")
        if rlo >= brain_radius:
            raise ConfigurationError(
                f"lesion_params.radius: smallest lesion ({rlo}) does not fit inside the brain ({brain_radius})"
            )
        flo, fhi = self.fraction
        if not 0 <= flo <= fhi < 1:
            raise ConfigurationError(f"lesion_params.fraction must satisfy 0 <= lo <= hi < 1, got {self.fraction}")
        if self.n_classes not in (2, 3):
            raise ConfigurationError("lesion_params.n_classes must be 2 or 3")


@dataclass
class PhantomCase:
    volume: Volume
    labels: np.ndarray  # (H, W, Z) int

    @property
    def patient_id(self) -> str:
        return self.volume.patient_id


def class_names_for(n_classes: int) -> tuple[str, ...]:
    return ("brain", "lesion", "core")[:n_classes]


def _smooth_field(rng: np.random.Generator, shape: tuple[int, ...], sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return f / (f.std() + 1e-12)


def _ellipsoid(grid, center, axes, angle) -> np.ndarray:
    yy, xx, zz = grid
    ca, sa = math.cos(angle), math.sin(angle)
    dy, dx, dz = yy - center[0], xx - center[1], zz - center[2]
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    return (u / axes[0]) ** 2 + (v / axes[1]) ** 2 + (dz / axes[2]) ** 2 <= 1.0


def _make_phantom(
    rng: np.random.Generator, patient_id: str, size: tuple[int, int], depth: int, n_mod: int, lp: LesionParams
) -> PhantomCase:
    h, w = size
    side = min(h, w)
    grid = np.meshgrid(np.arange(h), np.arange(w), np.arange(depth), indexing="ij")
    center = (h / 2 + rng.uniform(-0.06, 0.06) * h, w / 2 + rng.uniform(-0.06, 0.06) * w, (depth - 1) / 2)
    axes = (rng.uniform(0.28, 0.42) * side, rng.uniform(0.22, 0.36) * side, max(depth * rng.uniform(0.55, 0.7), 1.0))
    angle = rng.uniform(-0.5, 0.5)
    brain = _ellipsoid(grid, center, axes, angle)
    vent_axes = (axes[0] * rng.uniform(0.15, 0.3), axes[1] * rng.uniform(0.1, 0.2), axes[2] * 0.6)
    ventricle = _ellipsoid(grid, center, vent_axes, angle + rng.uniform(-0.3, 0.3)) & brain

    labels = None
    for _ in range(lp.max_tries):
        labels = brain.astype(np.int64)
        n_les = int(rng.integers(lp.count[0], lp.count[1] + 1))
        for _ in range(n_les):
            r = rng.uniform(*lp.radius) * side
            # keep the lesion center well inside the brain ellipse
            t = rng.uniform(0, 2 * math.pi)
            rho = math.sqrt(rng.uniform(0, 1)) * 0.6
            cy = center[0] + rho * math.sin(t) * axes[1]
            cx = center[1] + rho * math.cos(t) * axes[0]
            cz = center[2] + rng.uniform(-0.4, 0.4) * axes[2]
            les_axes = (r * rng.uniform(0.7, 1.3), r * rng.uniform(0.7, 1.3), max(r * depth / side * 2.0, 1.0))
            blob = _ellipsoid(grid, (cy, cx, cz), les_axes, rng.uniform(0, math.pi)) & brain
            labels[blob] = 2
            if lp.n_classes == 3:
                core = _ellipsoid(grid, (cy, cx, cz), tuple(a * 0.5 for a in les_axes), 0.0) & blob
                labels[core] = 3
        frac = (labels >= 2).sum() / max(brain.sum(), 1)
        if lp.fraction[0] <= frac <= lp.fraction[1]:
            break
    else:
        raise ConfigurationError(
            f"lesion_params: could not place lesions with fraction in {lp.fraction} after {lp.max_tries} tries"
        )

    shape = (h, w, depth)
    texture = _smooth_field(rng, shape, sigma=(side / 12, side / 12, 1.0))
    fine = _smooth_field(rng, shape, sigma=(1.0, 1.0, 0.5))
    voxels = np.zeros(shape + (n_mod,), dtype=np.float32)
    lesion = labels >= 2
    for c in range(n_mod):
        base = rng.uniform(60.0, 140.0)
        tissue = base * (1.0 + 0.12 * texture + 0.02 * fine + 0.01 * rng.standard_normal(shape))
        tissue = np.where(ventricle, base * rng.uniform(0.3, 0.5), tissue)
        gain = rng.uniform(1.4, 1.8) if c % 2 == 0 else rng.uniform(0.45, 0.65)
        tissue = np.where(lesion, tissue * gain, tissue)
        if lp.n_classes == 3:
            tissue = np.where(labels == 3, tissue * (1.15 if c % 2 == 0 else 0.8), tissue)
        voxels[..., c] = np.where(brain, np.maximum(tissue, 1.0), 0.0)
    names = tuple(f"mod{c}" for c in range(n_mod))
    return PhantomCase(Volume(voxels, patient_id, names), labels)


def generate_phantom_dataset(
    n_patients: int,
    size: int | tuple[int, int] = 64,
    n_modalities: int = 2,
    lesion_params: Optional[LesionParams] = None,
    seed: int = 0,
    n_slices: int = 16,
) -> list[PhantomCase]:
    """Build ``n_patients`` synthetic ellipsoid "brains" with blob lesions.

    Raw (pre-normalization) positive intensities, background exactly 0.
    Labels: 0 background, 1 brain, 2 lesion (3 lesion core if requested).
    """
    if n_patients < 1:
        raise ConfigurationError("n_patients must be >= 1")
    if n_modalities < 1 or n_slices < 1:
        raise ConfigurationError("n_modalities and n_slices must be >= 1")
    size = (size, size) if isinstance(size, int) else tuple(size)
    lp = lesion_params or LesionParams()
    lp.validate()
    width = max(3, len(str(n_patients - 1)))
    return [
        _make_phantom(derive_rng(seed, "phantom", i), f"P{i:0{width}d}", size, n_slices, n_modalities, lp)
        for i in range(n_patients)
    ]


# --------------------------------------------------------------------------
# manifest + on-disk formats


@dataclass
class PatientEntry:
    patient_id: str
    files: list[str]
    label_file: Optional[str] = None
    split: str = "train"
    labeled: bool = True


@dataclass
class DatasetManifest:
    root: str
    kind: str  # "phantom" | "nifti"
    modality_names: list[str]
    patients: list[PatientEntry]
    seed: int = 0
    class_names: list[str] = field(default_factory=lambda: ["brain", "lesion"])

    def validate(self) -> None:
        ids = [p.patient_id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise SchemaError("duplicate patient ids in manifest")
        for p in self.patients:
            if p.split not in ("train", "val", "test"):
                raise SchemaError(f"{p.patient_id}: unknown split {p.split!r}")
            if p.labeled and not p.label_file:
                raise SchemaError(f"{p.patient_id}: labeled but no label file")

    def split_ids(self, split: str) -> list[str]:
        return [p.patient_id for p in self.patients if p.split == split]

    def save(self, path: str | Path) -> None:
        self.validate()
        Path(path).write_text(json.dumps(asdict(self), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        raw = json.loads(Path(path).read_text())
        raw["patients"] = [PatientEntry(**p) for p in raw["patients"]]
        m = cls(**raw)
        m.validate()
        return m


def assign_splits(
    patient_ids: Sequence[str], n_val: int, n_test: int, seed: int
) -> dict[str, str]:
    if n_val + n_test >= len(patient_ids):
        raise ConfigurationError(
            f"split needs at least one training patient: {len(patient_ids)} patients, {n_val} val, {n_test} test"
        )
    order = derive_rng(seed, "split").permutation(len(patient_ids))
    out = {}
    for rank, idx in enumerate(order):
        out[patient_ids[idx]] = "val" if rank < n_val else "test" if rank < n_val + n_test else "train"
    return out


def save_phantom_dataset(
    cases: Sequence[PhantomCase],
    root: str | Path,
    seed: int,
    n_val: int,
    n_test: int,
    params: Optional[dict] = None,
) -> DatasetManifest:
    """Write raw little-endian float32 arrays + JSON sidecar + manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    splits = assign_splits([c.patient_id for c in cases], n_val, n_test, seed)
    n_classes = int(max(c.labels.max() for c in cases))
    patients = []
    for c in cases:
        img_name, lab_name = f"{c.patient_id}.image.f32", f"{c.patient_id}.labels.f32"
        c.volume.voxels.astype(RAW_DTYPE).tofile(root / img_name)
        c.labels.astype(RAW_DTYPE).tofile(root / lab_name)
        patients.append(PatientEntry(c.patient_id, [img_name], lab_name, splits[c.patient_id], True))
    shape = list(cases[0].volume.voxels.shape)
    sidecar = {
        "shape": shape,
        "dtype": RAW_DTYPE,
        "order": "C",
        "axes": "H,W,Z,T",
        "labels": {"0": "background", **{str(i + 1): n for i, n in enumerate(class_names_for(n_classes))}},
        "seed": seed,
        "params": params or {},
        "modality_names": list(cases[0].volume.modality_names),
    }
    (root / PHANTOM_SIDECAR).write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    manifest = DatasetManifest(
        root=".",
        kind="phantom",
        modality_names=list(cases[0].volume.modality_names),
        patients=patients,
        seed=seed,
        class_names=list(class_names_for(n_classes)),
    )
    manifest.save(root / MANIFEST_NAME)
    return manifest


def load_phantom_dataset(root: str | Path) -> list[PhantomCase]:
    root = Path(root)
    side = json.loads((root / PHANTOM_SIDECAR).read_text())
    manifest = DatasetManifest.load(root / MANIFEST_NAME)
    shape = tuple(side["shape"])
    cases = []
    for p in manifest.patients:
        vox = np.fromfile(root / p.files[0], dtype=side["dtype"])
        lab = np.fromfile(root / p.label_file, dtype=side["dtype"])
        if vox.size != math.prod(shape) or lab.size != math.prod(shape[:3]):
            raise SchemaError(f"{p.patient_id}: raw array size does not match sidecar shape {shape}")
        cases.append(
            PhantomCase(
                Volume(vox.reshape(shape).astype(np.float32), p.patient_id, side["modality_names"]),
                np.rint(lab.reshape(shape[:3])).astype(np.int64),
            )
        )
    return cases


# --------------------------------------------------------------------------
# slice datasets


@dataclass
class SliceDataset:
    """Preprocessed 2D slices grouped by patient."""

    slices: dict[str, list[tuple[MultiModalSlice, Optional[np.ndarray]]]]
    class_names: tuple[str, ...] = ("brain", "lesion")

    @property
    def patient_ids(self) -> list[str]:
        return list(self.slices)

    @property
    def n_modalities(self) -> int:
        first = next(iter(self.slices.values()))
        return first[0][0].n_modalities

    @property
    def image_shape(self) -> tuple[int, int]:
        first = next(iter(self.slices.values()))
        return first[0][0].shape

    def eligible(self, patient_id: str) -> list[MultiModalSlice]:
        return [s for s, _ in self.slices[patient_id] if s.eligible]

    def all_eligible(self) -> list[MultiModalSlice]:
        return [s for pid in self.slices for s in self.eligible(pid)]

    def labeled_pairs(self) -> list[tuple[MultiModalSlice, np.ndarray]]:
        return [(s, lab) for pid in self.slices for s, lab in self.slices[pid] if lab is not None and s.eligible]

    def subset(self, patient_ids: Iterable[str]) -> "SliceDataset":
        return SliceDataset({pid: self.slices[pid] for pid in patient_ids}, self.class_names)

    def __len__(self) -> int:
        return len(self.slices)


@dataclass
class DataSplits:
    train: SliceDataset
    val: SliceDataset
    test: SliceDataset


def slices_from_cases(
    cases: Sequence[PhantomCase], size: tuple[int, int], tau: float = 1e-6, min_fraction: float = 0.01
) -> SliceDataset:
    out = {}
    n_classes = 2
    for c in cases:
        vol, mask, labels = preprocess_volume(c.volume, size, c.labels, tau)
        out[c.patient_id] = extract_slices(vol, labels, mask, min_fraction)
        n_classes = max(n_classes, int(c.labels.max()))
    return SliceDataset(out, class_names_for(n_classes))


def splits_from_cases(
    cases: Sequence[PhantomCase],
    assignment: dict[str, str],
    size: tuple[int, int],
    tau: float = 1e-6,
    min_fraction: float = 0.01,
) -> DataSplits:
    ds = slices_from_cases(cases, size, tau, min_fraction)
    pick = lambda name: ds.subset([pid for pid in ds.patient_ids if assignment[pid] == name])  # noqa: E731
    return DataSplits(pick("train"), pick("val"), pick("test"))


def load_manifest_splits(manifest_path: str | Path, size: tuple[int, int], tau: float = 1e-6) -> DataSplits:
    """Load phantom or NIfTI data listed in a manifest into train/val/test slices."""
    manifest_path = Path(manifest_path)
    manifest = DatasetManifest.load(manifest_path)
    root = (manifest_path.parent / manifest.root).resolve()
    if manifest.kind == "phantom":
        cases = load_phantom_dataset(root)
    elif manifest.kind == "nifti":
        cases = []
        for p in manifest.patients:
            vol = load_volume([root / f for f in p.files], p.patient_id, manifest.modality_names)
            if p.label_file:
                labels = load_label_volume(root / p.label_file)
            else:
                labels = np.zeros(vol.voxels.shape[:3], dtype=np.int64)
            cases.append(PhantomCase(vol, labels))
    else:
        raise SchemaError(f"unknown dataset kind {manifest.kind!r}")
    assignment = {p.patient_id: p.split for p in manifest.patients}
    splits = splits_from_cases(cases, assignment, size, tau)
    names = tuple(manifest.class_names)
    for ds in (splits.train, splits.val, splits.test):
        ds.class_names = names
    unlabeled = {p.patient_id for p in manifest.patients if not p.labeled}
    for ds in (splits.train, splits.val, splits.test):
        for pid in unlabeled & set(ds.slices):
            ds.slices[pid] = [(s, None) for s, _ in ds.slices[pid]]
    return splits


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    p_rotate: float = 0.2
    rotation_deg: float = 15.0
    p_scale: float = 0.2
    scale: tuple[float, float] = (0.9, 1.1)
    p_flip: float = 0.5  # per axis
    p_elastic: float = 0.2
    elastic_alpha: float = 4.0  # displacement magnitude, pixels
    elastic_sigma: float = 3.0

    @classmethod
    def none(cls) -> "AugmentParams":
        return cls(p_rotate=0.0, p_scale=0.0, p_flip=0.0, p_elastic=0.0)


def flip(a: np.ndarray, axis: int) -> np.ndarray:
    return np.flip(a, axis=axis).copy()


def warp(a: np.ndarray, coords: np.ndarray, order: int) -> np.ndarray:
    if a.ndim == 2:
        return ndimage.map_coordinates(a, coords, order=order, mode="constant", cval=0.0)
    return np.stack(
        [ndimage.map_coordinates(a[..., c], coords, order=order, mode="constant", cval=0.0) for c in range(a.shape[-1])],
        axis=-1,
    )


def spatial_coords(
    shape: tuple[int, int],
    angle_deg: float = 0.0,
    scale: float = 1.0,
    displacement: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Source coordinates for every output pixel.

    A positive angle rotates content counter-clockwise as displayed
    (row 0 at the top), i.e. the same sense as ``np.rot90``.
    """
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    th = math.radians(angle_deg)
    c, s = math.cos(th), math.sin(th)
    dy, dx = yy - cy, xx - cx
    # inverse map: output -> input
    src_y = (c * dy + s * dx) / scale + cy
    src_x = (-s * dy + c * dx) / scale + cx
    coords = np.stack([src_y, src_x])
    if displacement is not None:
        coords = coords + displacement
    return coords


def augment(
    slice_: MultiModalSlice,
    labels: Optional[np.ndarray],
    rng: np.random.Generator,
    params: AugmentParams = AugmentParams(),
) -> tuple[MultiModalSlice, Optional[np.ndarray]]:
    """Random rotation/scale/elastic warp + axis flips, identical across channels.

    Image channels are interpolated linearly; mask and labels use nearest
    neighbour so no new label values can appear.
    """
    pixels = np.asarray(slice_.pixels)
    mask = np.asarray(slice_.brain_mask)
    lab = None if labels is None else np.asarray(labels)
    h, w = slice_.shape

    angle = rng.uniform(-params.rotation_deg, params.rotation_deg) if rng.random() < params.p_rotate else 0.0
    scale = rng.uniform(*params.scale) if rng.random() < params.p_scale else 1.0
    disp = None
    if rng.random() < params.p_elastic:
        disp = np.stack(
            [ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), params.elastic_sigma) for _ in range(2)]
        )
        disp *= params.elastic_alpha / (np.abs(disp).max() + 1e-12)
    flips = [axis for axis in (0, 1) if rng.random() < params.p_flip]

    if angle != 0.0 or scale != 1.0 or disp is not None:
        coords = spatial_coords((h, w), angle, scale, disp)
        pixels = warp(pixels, coords, order=1)
        mask = warp(mask.astype(np.float32), coords, order=0) > 0.5
        if lab is not None:
            lab = warp(lab.astype(np.float64), coords, order=0).round().astype(lab.dtype)
        pixels = np.where(mask[..., None], pixels, 0.0)
    for axis in flips:
        pixels, mask = flip(pixels, axis), flip(mask, axis)
        if lab is not None:
            lab = flip(lab, axis)
    out = MultiModalSlice(pixels.astype(np.float32), mask, slice_.patient_id, slice_.slice_index, slice_.eligible)
    return out, lab
