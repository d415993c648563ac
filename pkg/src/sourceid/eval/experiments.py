"""Diagnostic experiments: solvability sweep, source-count ablation, mask-overlap histogram,
and segmentation evaluation reports."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from ..core import ConfigurationError, SamplingError, TaskKind, TaskParams, TrainingSample, derive_rng
from ..data import AugmentParams, DataSplits, SliceDataset, augment, brain_mask_threshold
from ..model import NetworkSpec, UNet, build_network
from ..ssltasks import check_pool_setting, make_ambiguous_sample
from ..training import (
    TrainConfig,
    finetune,
    mean_reconstruction_error,
    patient_volumes,
    predict_labels,
    pretrain,
    train_reconstruction,
)
from .metrics import ALL_GROUP, DiceResult, combined_class_dice, default_grouping, jaccard


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]


# --------------------------------------------------------------------------
# segmentation evaluation


@dataclass
class EvalReport:
    dice: DiceResult
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"dice": self.dice.to_dict(), "meta": self.meta}

    def save(self, out_dir: str | Path, stem: str = "eval") -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=2))
        with open(out_dir / f"{stem}.csv", "w") as fh:
            fh.write("image_id," + ",".join(self.dice.class_names) + "\n")
            for iid, row in zip(self.dice.image_ids, self.dice.scores):
                fh.write(iid + "," + ",".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        return cls(DiceResult.from_dict(d["dice"]), d.get("meta", {}))


def evaluate_segmentation(
    net: UNet, dataset: SliceDataset, grouping: Optional[dict] = None, meta: Optional[dict] = None
) -> EvalReport:
    """Per-patient (stacked slices) Dice for each evaluation group plus "All"."""
    grouping = grouping or default_grouping(dataset.class_names)
    preds, gts, ids = [], [], []
    for pid, imgs, labs in patient_volumes(dataset):
        preds.append(predict_labels(net, imgs))
        gts.append(labs)
        ids.append(pid)
    valid = list(range(len(dataset.class_names) + 1))
    res = combined_class_dice(preds, gts, grouping, valid, ids, with_all=len(grouping) > 1)
    return EvalReport(res, dict(meta or {}))


# --------------------------------------------------------------------------
# solvability sweep


@dataclass
class SolvabilityResult:
    lambdas: list[float]
    errors: list[float]
    error_std: list[float]
    records: list = field(default_factory=list)

    def table(self) -> list[dict]:
        return [{"lambda": l, "error": e, "std": s} for l, e, s in zip(self.lambdas, self.errors, self.error_std)]


def _pair_sample(dataset: SliceDataset, lam: float, rng: np.random.Generator, aug, distinct: bool = True) -> TrainingSample:
    patients = [p for p in dataset.patient_ids if dataset.eligible(p)]
    if distinct and len(patients) >= 2:
        i, j = rng.choice(len(patients), size=2, replace=False)
    else:
        i = j = rng.integers(len(patients))
    c1, c2 = dataset.eligible(patients[i]), dataset.eligible(patients[j])
    s1, s2 = c1[rng.integers(len(c1))], c2[rng.integers(len(c2))]
    if aug is not None:
        s1, s2 = aug(s1, rng), aug(s2, rng)
    return make_ambiguous_sample(s1, s2, lam, rng)


def two_mixture_sample(dataset: SliceDataset, task: TaskParams, rng: np.random.Generator, aug=None) -> TrainingSample:
    from ..ssltasks import draw_si_sample

    return draw_si_sample(task, dataset, rng, augment_fn=aug)


def solvability_experiment(
    splits: DataSplits,
    lambda_grid: Sequence[float],
    config: TrainConfig,
    spec: NetworkSpec,
    n_eval: int = 64,
    out_dir: Optional[str | Path] = None,
    single_image: bool = False,
) -> SolvabilityResult:
    """Train one network per lambda on single-mixture (s1, s2') streams.

    Reports the held-out (test split) reconstruction error of s1 for each
    lambda; every arm uses the same budget, seed and evaluation draws.
    ``single_image`` uses s1 = s2 (degenerate control).
    """
    for lam in lambda_grid:
        if not 0.0 <= lam <= 1.0:
            raise ConfigurationError(f"lambda {lam} outside [0, 1]")
    t = splits.train.n_modalities
    spec = replace(spec, in_channels=t, out_channels=t)
    aug = None if config.augment is None else (lambda s, rng: augment(s, None, rng, config.augment)[0])
    held_out = splits.test if len(splits.test) else splits.val
    errors, stds, records = [], [], []
    for lam in lambda_grid:
        draw = lambda rng, ds=splits.train: _pair_sample(ds, lam, rng, aug, not single_image)  # noqa: E731
        val = [_pair_sample(splits.val, lam, derive_rng(config.seed, "val", lam, k), None, not single_image) for k in range(config.val_samples)]
        net = build_network(spec)
        _, record, _ = train_reconstruction(net, config, draw, val, phase=f"solv-{lam}")
        test = [_pair_sample(held_out, lam, derive_rng(config.seed, "test", k), None, not single_image) for k in range(n_eval)]
        per = [mean_reconstruction_error(net, [s]) for s in test]
        errors.append(float(np.mean(per)))
        stds.append(float(np.std(per)))
        records.append(record)
        if out_dir is not None:
            _solvability_panel(net, test[:3], lam, Path(out_dir))
    res = SolvabilityResult(list(lambda_grid), errors, stds, records)
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "solvability.json").write_text(json.dumps({"table": res.table(), "config_hash": config_hash(asdict(config)), "seed": config.seed}, indent=2))
        with open(out_dir / "solvability.csv", "w") as fh:
            fh.write("lambda,error,std\n")
            for row in res.table():
                fh.write(f"{row['lambda']},{row['error']!r},{row['std']!r}\n")
    return res


def _solvability_panel(net: UNet, samples: Sequence[TrainingSample], lam: float, out_dir: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from ..training import stack_samples

    out_dir.mkdir(parents=True, exist_ok=True)
    x, y = stack_samples(samples)
    with torch.no_grad():
        pred = net(x).numpy()
    fig, axes = plt.subplots(len(samples), 3, figsize=(6, 2 * len(samples)), squeeze=False)
    for r, s in enumerate(samples):
        for c, (img, title) in enumerate([(s.input[..., 0], "mixture"), (pred[r, 0], "output"), (s.target[..., 0], "s1")]):
            axes[r, c].imshow(img, cmap="gray")
            axes[r, c].set_title(title, fontsize=8)
            axes[r, c].axis("off")
    fig.suptitle(f"lambda = {lam}", fontsize=9)
    fig.savefig(out_dir / f"solvability_lambda_{lam:.2f}.png", dpi=80)
    plt.close(fig)


@dataclass
class WellPosednessResult:
    csi_error: float
    ambiguous_error: float
    records: list = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.ambiguous_error / self.csi_error


def well_posedness_experiment(
    splits: DataSplits, config: TrainConfig, spec: NetworkSpec, n_eval: int = 64
) -> WellPosednessResult:
    """Two-mixture CSI (M~=2, N~=2, N=3) against the single ambiguous mixture at lambda=0.

    Both arms share budget, seed and network size (apart from the input
    head); errors are held-out reconstruction errors of s1 on the test split.
    """
    t = splits.train.n_modalities
    held_out = splits.test if len(splits.test) else splits.val
    task = TaskParams(TaskKind.CSI, n_per_mixture=2, m_mixtures=2)
    arms = {
        "csi": (2 * t, lambda ds, rng: two_mixture_sample(ds, task, rng)),
        "ambiguous": (t, lambda ds, rng: _pair_sample(ds, 0.0, rng, None)),
    }
    errors, records = {}, []
    for name, (in_ch, draw) in arms.items():
        val = [draw(splits.val, derive_rng(config.seed, "val", name, k)) for k in range(config.val_samples)]
        test = [draw(held_out, derive_rng(config.seed, "test", name, k)) for k in range(n_eval)]
        net = build_network(replace(spec, in_channels=in_ch, out_channels=t))
        _, record, _ = train_reconstruction(net, config, lambda rng: draw(splits.train, rng), val, phase=f"wp-{name}")
        errors[name] = float(np.mean([mean_reconstruction_error(net, [s]) for s in test]))
        records.append(record)
    return WellPosednessResult(errors["csi"], errors["ambiguous"], records)


@dataclass
class TransferRow:
    seed: int
    pretrained_dice: float
    random_dice: float


def transfer_experiment(
    splits: DataSplits,
    pretrain_config: TrainConfig,
    finetune_config: TrainConfig,
    spec: NetworkSpec,
    seeds: Sequence[int] = (0, 1, 2),
    group: Optional[str] = None,
) -> list[TransferRow]:
    """Proxy-pretrained fine-tuning against the random-init baseline, per seed.

    Pretraining sees every training patient without labels; both arms then
    fine-tune on the same ``labeled_budget`` patients. Scores are mean
    test-split Dice of ``group`` (default: the first lesion group).
    """
    t = splits.train.n_modalities
    task = pretrain_config.task
    rows = []
    for seed in seeds:
        pspec = replace(spec, in_channels=task.input_channels(t), out_channels=t, seed=seed)
        ck, _ = pretrain(replace(pretrain_config, seed=seed), splits, pspec)
        fcfg = replace(finetune_config, seed=seed)
        scores = []
        for checkpoint in (ck, None):
            net, _ = finetune(fcfg, splits, checkpoint, spec=replace(spec, seed=seed))
            rep = evaluate_segmentation(net, splits.test)
            key = group or rep.dice.class_names[0]
            scores.append(rep.dice.mean[key])
        rows.append(TransferRow(seed, *scores))
    return rows


# --------------------------------------------------------------------------
# source-count ablation


@dataclass
class AblationRow:
    variant: str
    n_pool: int
    n_per_mixture: int
    seed: int
    mean_dice: float
    per_class: dict


def sources_ablation(
    splits: DataSplits,
    settings: Sequence[tuple[int, int]],
    pretrain_config: TrainConfig,
    finetune_config: TrainConfig,
    spec: NetworkSpec,
    variants: Sequence[TaskKind | str] = (TaskKind.CSI, TaskKind.WSI, TaskKind.DSI),
    seeds: Sequence[int] = (0,),
    out_dir: Optional[str | Path] = None,
) -> list[AblationRow]:
    """Full pretrain -> fine-tune per (N, N~) setting and SI variant; M~ = 2."""
    for n_pool, n_per in settings:
        check_pool_setting(n_pool, n_per, 2)
    t = splits.train.n_modalities
    rows = []
    for variant in variants:
        kind = TaskKind(variant)
        for n_pool, n_per in settings:
            for seed in seeds:
                task = TaskParams(kind, n_per_mixture=n_per, m_mixtures=2)
                pcfg = replace(pretrain_config, task=task, seed=seed)
                ck, _ = pretrain(pcfg, splits, replace(spec, in_channels=2 * t, out_channels=t, seed=seed))
                net, _ = finetune(replace(finetune_config, seed=seed), splits, ck)
                rep = evaluate_segmentation(net, splits.test)
                key = ALL_GROUP if ALL_GROUP in rep.dice.class_names else rep.dice.class_names[0]
                rows.append(AblationRow(kind.value, n_pool, n_per, seed, rep.dice.mean[key], rep.dice.mean))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        meta = {"config_hash": config_hash([asdict(pretrain_config), asdict(finetune_config)]), "seeds": list(seeds)}
        (out_dir / "ablation.json").write_text(json.dumps({"rows": [asdict(r) for r in rows], **meta}, indent=2))
        with open(out_dir / "ablation.csv", "w") as fh:
            fh.write("variant,N,N_per_mixture,seed,mean_dice\n")
            for r in rows:
                fh.write(f"{r.variant},{r.n_pool},{r.n_per_mixture},{r.seed},{r.mean_dice!r}\n")
    return rows


# --------------------------------------------------------------------------
# overlap distribution


@dataclass
class OverlapHistogram:
    edges: list[float]
    counts: list[int]
    zero_count: int
    values: list[float]

    def to_dict(self) -> dict:
        return asdict(self)


def overlap_distribution(
    dataset: SliceDataset,
    n_pairs: int,
    rng: np.random.Generator,
    augment_params: Optional[AugmentParams] = AugmentParams(),
    n_bins: int = 10,
    tau: float = 1e-6,
    out_dir: Optional[str | Path] = None,
) -> OverlapHistogram:
    """Jaccard similarity of thresholded brain masks for augmented slices of distinct patients.

    Pairs with no overlap at all are counted separately in ``zero_count``
    (they are the pairs SI sampling rejects) and left out of the histogram.
    """
    patients = [p for p in dataset.patient_ids if dataset.eligible(p)]
    if len(patients) < 2:
        raise SamplingError("overlap distribution needs at least 2 patients")
    values, zeros = [], 0
    for _ in range(n_pairs):
        i, j = rng.choice(len(patients), size=2, replace=False)
        a = dataset.eligible(patients[i])[rng.integers(len(dataset.eligible(patients[i])))]
        b = dataset.eligible(patients[j])[rng.integers(len(dataset.eligible(patients[j])))]
        if augment_params is not None:
            a = augment(a, None, rng, augment_params)[0]
            b = augment(b, None, rng, augment_params)[0]
        jv = jaccard(brain_mask_threshold(a.pixels, tau), brain_mask_threshold(b.pixels, tau))
        if jv == 0.0:
            zeros += 1
        else:
            values.append(jv)
    counts, edges = np.histogram(values, bins=n_bins, range=(0.0, 1.0))
    hist = OverlapHistogram(edges.tolist(), counts.tolist(), zeros, values)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "overlap.json").write_text(json.dumps({k: v for k, v in hist.to_dict().items() if k != "values"}, indent=2))
        with open(out_dir / "overlap.csv", "w") as fh:
            fh.write("bin_lo,bin_hi,count\n")
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                fh.write(f"{lo},{hi},{c}\n")
        _histogram_png(hist, out_dir / "overlap.png")
    return hist


def _histogram_png(hist: OverlapHistogram, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.hist(hist.values, bins=hist.edges)
    ax.set_xlabel("Jaccard similarity of brain masks")
    ax.set_ylabel("pairs")
    ax.set_title(f"zero-overlap pairs excluded: {hist.zero_count}", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
