"""Losses, LR schedule, and the pretrain / fine-tune loops.

Optimisation follows the nnUNet protocol: SGD (momentum 0.99, coupled
weight decay 3e-5), poly learning rate, early stopping on a validation
metric. Every random draw is derived from (seed, phase, epoch, index) so
results do not depend on how many data workers run.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import (
    ConfigurationError,
    DomainError,
    SamplingError,
    SegmentationSample,
    TaskKind,
    TaskParams,
    TrainingSample,
    derive_rng,
)
from .data import AugmentParams, DataSplits, SliceDataset, augment
from .eval.metrics import dice
from .model import Checkpoint, NetworkSpec, UNet, build_network, encode_torch_rng, swap_head
from .ssltasks import make_proxy_sample, mixup

log = logging.getLogger(__name__)


class DataError(RuntimeError):
    """The dataset cannot feed the requested training run."""


# --------------------------------------------------------------------------
# losses


def reconstruction_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean |residual| + RMS residual, per sample, averaged over the batch.

    Inputs are B x C x H x W (a single C x H x W image is also accepted).
    """
    if pred.shape != target.shape:
        raise DomainError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.ndim == 3:
        pred, target = pred[None], target[None]
    r = (pred - target).flatten(1)
    l1 = r.abs().mean(dim=1)
    ms = r.square().mean(dim=1)
    rms = torch.where(ms > 0, ms.clamp_min(1e-24).sqrt(), torch.zeros_like(ms))
    return (l1 + rms).mean()


def _as_distribution(labels: torch.Tensor, n_out: int) -> torch.Tensor:
    if labels.dtype.is_floating_point:
        if labels.ndim != 4 or labels.shape[1] != n_out:
            raise DomainError(f"soft labels must be B x {n_out} x H x W")
        return labels
    if labels.min() < 0 or labels.max() >= n_out:
        raise DomainError(f"labels contain classes outside 0..{n_out - 1}")
    return F.one_hot(labels.long(), n_out).permute(0, 3, 1, 2).to(torch.get_default_dtype())


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    q = _as_distribution(labels, logits.shape[1]).to(logits.dtype)
    return -(q * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


def soft_dice_loss(logits: torch.Tensor, labels: torch.Tensor, smooth: float = 1e-5) -> torch.Tensor:
    """1 - mean foreground soft Dice, statistics pooled over the batch."""
    q = _as_distribution(labels, logits.shape[1]).to(logits.dtype)
    p = F.softmax(logits, dim=1)
    dims = (0, 2, 3)
    inter = (p * q).sum(dims)
    denom = p.sum(dims) + q.sum(dims)
    d = (2 * inter + smooth) / (denom + smooth)
    return 1.0 - d[1:].mean()


def segmentation_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy + soft Dice, equal weights; accepts hard or soft labels."""
    return cross_entropy(logits, labels) + soft_dice_loss(logits, labels)


def poly_lr(epoch: int, epochs_max: int, lr0: float, exponent: float = 0.9) -> float:
    if not 0 <= epoch <= epochs_max:
        raise DomainError(f"epoch {epoch} outside [0, {epochs_max}]")
    return lr0 * (1.0 - epoch / epochs_max) ** exponent


# --------------------------------------------------------------------------
# config + records


@dataclass
class TrainConfig:
    task: TaskParams = field(default_factory=lambda: TaskParams(TaskKind.CSI))
    epochs_max: int = 200
    iters_per_epoch: int = 25
    initial_lr: float = 1e-2
    momentum: float = 0.99
    nesterov: bool = True
    weight_decay: float = 3e-5
    batch_size: int = 1
    early_stop_patience: int = 50
    seed: int = 0
    labeled_budget: Optional[int] = None
    mixup: bool = False
    mixup_alpha: float = 0.2
    augment: Optional[AugmentParams] = field(default_factory=AugmentParams)
    val_samples: int = 16
    grad_clip: Optional[float] = 12.0
    workers: int = 0
    snapshot_dir: Optional[str] = None

    def __post_init__(self) -> None:
        if self.epochs_max < 1:
            raise ConfigurationError("epochs_max must be >= 1")
        if self.initial_lr <= 0:
            raise ConfigurationError("initial_lr must be > 0")
        if self.early_stop_patience < 1:
            raise ConfigurationError("early_stop_patience must be >= 1")
        if self.batch_size < 1 or self.iters_per_epoch < 1:
            raise ConfigurationError("batch_size and iters_per_epoch must be >= 1")
        if self.mixup and self.mixup_alpha <= 0:
            raise ConfigurationError("mixup_alpha must be > 0")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_metric: float
    lr: float


@dataclass
class RunRecord:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_value: float = math.nan
    stop_reason: str = ""
    wall_clock: float = 0.0
    metric: str = ""

    @property
    def train_loss(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    @property
    def val_metric(self) -> list[float]:
        return [e.val_metric for e in self.epochs]

    def same_trajectory(self, other: "RunRecord") -> bool:
        return self.epochs == other.epochs and self.best_epoch == other.best_epoch

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_metric", "lr"])
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.train_loss), repr(e.val_metric), repr(e.lr)])

    def summary(self) -> dict:
        return {
            "n_epochs": len(self.epochs),
            "best_epoch": self.best_epoch,
            "best_value": self.best_value,
            "metric": self.metric,
            "stop_reason": self.stop_reason,
            "wall_clock": self.wall_clock,
            "final_train_loss": self.epochs[-1].train_loss if self.epochs else None,
        }

    def to_json(self, path: str | Path) -> None:
        d = self.summary() | {"epochs": [asdict(e) for e in self.epochs]}
        Path(path).write_text(json.dumps(d, indent=2))


class EarlyStopping:
    """Stop once ``patience`` epochs have passed without beating the best value."""

    def __init__(self, patience: int, mode: str = "min"):
        if patience < 1:
            raise ConfigurationError("patience must be >= 1")
        self.patience = patience
        self.sign = 1.0 if mode == "min" else -1.0
        self.best_epoch = -1
        self.best_value = math.nan

    def update(self, epoch: int, value: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        improved = self.best_epoch < 0 or self.sign * value < self.sign * self.best_value
        if improved:
            self.best_epoch, self.best_value = epoch, value
        return improved, epoch - self.best_epoch >= self.patience


# --------------------------------------------------------------------------
# generic loop


def make_optimizer(net: UNet, config: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(
        net.parameters(),
        lr=config.initial_lr,
        momentum=config.momentum,
        nesterov=config.nesterov,
        weight_decay=config.weight_decay,
    )


def momentum_buffers(net: UNet, opt: torch.optim.Optimizer) -> dict[str, torch.Tensor]:
    out = {}
    for name, p in net.named_parameters():
        buf = opt.state.get(p, {}).get("momentum_buffer")
        if buf is not None:
            out[name] = buf.detach().clone()
    return out


def _map(fn, items, workers: int):
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _fit(
    net: UNet,
    config: TrainConfig,
    make_batch: Callable[[int, int], tuple[torch.Tensor, torch.Tensor]],
    loss_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    validate: Callable[[UNet], float],
    mode: str,
    metric: str,
    snapshot: Optional[Callable[[UNet, int], None]] = None,
) -> tuple[dict[str, torch.Tensor], RunRecord, dict]:
    opt = make_optimizer(net, config)
    stopper = EarlyStopping(config.early_stop_patience, mode)
    record = RunRecord(metric=metric)
    best_state = copy.deepcopy(net.state_dict())
    best_extra: dict = {"epoch": 0, "optim": {}}
    t0 = time.perf_counter()
    for epoch in range(config.epochs_max):
        lr = poly_lr(epoch, config.epochs_max, config.initial_lr)
        for g in opt.param_groups:
            g["lr"] = lr
        net.train()
        losses = []
        for it in range(config.iters_per_epoch):
            x, y = make_batch(epoch, it)
            loss = loss_fn(net(x), y)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(net.parameters(), config.grad_clip)
            opt.step()
            losses.append(float(loss.detach()))
        train_loss = float(np.mean(losses))
        if not math.isfinite(train_loss):
            record.stop_reason = "diverged"
            record.epochs.append(EpochRecord(epoch, train_loss, math.nan, lr))
            break
        net.eval()
        with torch.no_grad():
            value = float(validate(net))
        record.epochs.append(EpochRecord(epoch, train_loss, value, lr))
        improved, stop = stopper.update(epoch, value)
        if improved:
            best_state = copy.deepcopy(net.state_dict())
            best_extra = {"epoch": epoch, "optim": momentum_buffers(net, opt)}
        if snapshot is not None:
            snapshot(net, epoch)
        log.debug("epoch %d lr %.3g train %.4f %s %.4f", epoch, lr, train_loss, metric, value)
        if stop:
            record.stop_reason = "early_stop"
            break
    else:
        record.stop_reason = "epochs_max"
    record.best_epoch, record.best_value = stopper.best_epoch, stopper.best_value
    record.wall_clock = time.perf_counter() - t0
    net.load_state_dict(best_state)
    net.eval()
    return best_state, record, best_extra


def _augment_fn(params: Optional[AugmentParams]):
    if params is None:
        return None
    return lambda s, rng: augment(s, None, rng, params)[0]


def _to_chw(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(np.asarray(a, dtype=np.float32), -1, -3)))


def stack_samples(samples: Sequence[TrainingSample]) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.stack([_to_chw(s.input) for s in samples])
    y = torch.stack([_to_chw(s.target) for s in samples])
    return x, y


# --------------------------------------------------------------------------
# pretraining


def proxy_validation_set(task: TaskParams, dataset: SliceDataset, n: int, seed: int) -> list[TrainingSample]:
    return [make_proxy_sample(task, dataset, derive_rng(seed, "val", task.kind.value, k)) for k in range(n)]


def mean_reconstruction_error(net: UNet, samples: Sequence[TrainingSample], batch: int = 16) -> float:
    errs = []
    with torch.no_grad():
        for i in range(0, len(samples), batch):
            x, y = stack_samples(samples[i : i + batch])
            pred = net(x)
            errs += [float(reconstruction_loss(p[None], t[None])) for p, t in zip(pred, y)]
    return float(np.mean(errs))


def train_reconstruction(
    net: UNet,
    config: TrainConfig,
    sample_fn: Callable[[np.random.Generator], TrainingSample],
    val_samples: Sequence[TrainingSample],
    phase: str = "pretrain",
    snapshot=None,
) -> tuple[dict[str, torch.Tensor], RunRecord, dict]:
    """Fit ``net`` on a stream of reconstruction samples (any proxy task)."""

    def make_batch(epoch: int, it: int):
        idx = [it * config.batch_size + b for b in range(config.batch_size)]
        samples = _map(lambda j: sample_fn(derive_rng(config.seed, phase, epoch, j)), idx, config.workers)
        return stack_samples(samples)

    return _fit(
        net,
        config,
        make_batch,
        reconstruction_loss,
        lambda n: mean_reconstruction_error(n, val_samples),
        "min",
        "val_reconstruction_loss",
        snapshot,
    )


def pretrain(config: TrainConfig, splits: DataSplits, spec: NetworkSpec) -> tuple[Checkpoint, RunRecord]:
    """Train ``spec`` on the configured proxy task; returns the best-validation checkpoint."""
    task = config.task
    t = splits.train.n_modalities
    if spec.in_channels != task.input_channels(t) or spec.out_channels != t:
        raise ConfigurationError(
            f"network channels ({spec.in_channels}->{spec.out_channels}) do not fit task "
            f"{task.kind.value} ({task.input_channels(t)}->{t})"
        )
    spec.check_image_size(*splits.train.image_shape)
    if not splits.train.all_eligible():
        raise DataError("no proxy-eligible slices in the training split")
    val_source = splits.val if len(splits.val) and splits.val.all_eligible() else splits.train
    try:
        val = proxy_validation_set(task, val_source, config.val_samples, config.seed)
    except SamplingError:
        val = proxy_validation_set(task, splits.train, config.val_samples, config.seed)
    aug = _augment_fn(config.augment)
    net = build_network(spec)
    snapshot = None
    if config.snapshot_dir:
        snapshot = _reconstruction_snapshotter(Path(config.snapshot_dir), val[0])
    state, record, extra = train_reconstruction(
        net, config, lambda rng: make_proxy_sample(task, splits.train, rng, aug), val, snapshot=snapshot
    )
    head = {"task": task.kind.value, "in_channels": spec.in_channels, "out_channels": spec.out_channels}
    ck = Checkpoint(
        spec,
        {k: v.detach().clone() for k, v in state.items()},
        head,
        extra["epoch"],
        extra["optim"],
        {"torch": encode_torch_rng(), "seed": config.seed},
    )
    return ck, record


def _reconstruction_snapshotter(out_dir: Path, sample: TrainingSample):
    out_dir.mkdir(parents=True, exist_ok=True)

    def snap(net: UNet, epoch: int) -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        x, y = stack_samples([sample])
        with torch.no_grad():
            out = net(x)[0, 0].numpy()
        t = sample.target.shape[2]
        panels = [sample.input[..., m * t] for m in range(sample.n_mixtures)] + [out, sample.target[..., 0]]
        fig, axes = plt.subplots(1, len(panels), figsize=(2 * len(panels), 2.2))
        for ax, img, title in zip(axes, panels, [f"x{m + 1}" for m in range(sample.n_mixtures)] + ["output", "target"]):
            ax.imshow(img, cmap="gray")
            ax.set_title(title, fontsize=8)
            ax.axis("off")
        fig.suptitle(f"epoch {epoch}", fontsize=8)
        fig.savefig(out_dir / f"epoch_{epoch:04d}.png", dpi=80)
        plt.close(fig)

    return snap


# --------------------------------------------------------------------------
# fine-tuning


def select_labeled(dataset: SliceDataset, budget: Optional[int], seed: int) -> list[str]:
    """Deterministic labelled-patient subset of size ``budget`` (all when None)."""
    pool = sorted(pid for pid in dataset.patient_ids if any(lab is not None for _, lab in dataset.slices[pid]))
    if budget is None:
        return pool
    if budget < 1 or budget > len(pool):
        raise ConfigurationError(f"labeled_budget={budget} but the labelled pool has {len(pool)} patients")
    idx = derive_rng(seed, "labeled-budget").choice(len(pool), size=budget, replace=False)
    return sorted(pool[i] for i in idx)


def seg_pairs(dataset: SliceDataset):
    return dataset.labeled_pairs()


def predict_labels(net: UNet, images: np.ndarray, batch: int = 32) -> np.ndarray:
    """Argmax labels for an N x H x W x T stack."""
    out = []
    net.eval()
    with torch.no_grad():
        for i in range(0, len(images), batch):
            x = torch.from_numpy(np.ascontiguousarray(np.moveaxis(images[i : i + batch], -1, 1).astype(np.float32)))
            out.append(net(x).argmax(1).numpy())
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[1:3], dtype=np.int64)


def patient_volumes(dataset: SliceDataset) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """(patient_id, images Z x H x W x T, labels Z x H x W) for labelled patients, all slices."""
    out = []
    for pid in dataset.patient_ids:
        items = [(s, lab) for s, lab in dataset.slices[pid] if lab is not None]
        if items:
            out.append((pid, np.stack([s.pixels for s, _ in items]), np.stack([lab for _, lab in items])))
    return out


def mean_foreground_dice(net: UNet, dataset: SliceDataset) -> float:
    """Mean over patients and foreground classes of per-volume Dice."""
    n_cls = len(dataset.class_names)
    scores = []
    for _, imgs, labs in patient_volumes(dataset):
        pred = predict_labels(net, imgs)
        scores.append(np.mean([dice(pred == c, labs == c) for c in range(1, n_cls + 1)]))
    return float(np.mean(scores)) if scores else math.nan


def finetune(
    config: TrainConfig,
    splits: DataSplits,
    checkpoint: Optional[Checkpoint] = None,
    spec: Optional[NetworkSpec] = None,
    restart: bool = False,
) -> tuple[UNet, RunRecord]:
    """Segmentation training from a proxy checkpoint, from scratch, or restarted.

    With ``checkpoint`` the heads are swapped for T-in / (C+1)-out layers and
    the body is kept. ``restart=True`` takes a converged segmentation
    checkpoint and retrains it from the initial learning rate.
    """
    t = splits.train.n_modalities
    n_out = len(splits.train.class_names) + 1
    labeled = select_labeled(splits.train, config.labeled_budget, config.seed)
    train_ds = splits.train.subset(labeled)
    pairs = seg_pairs(train_ds)
    if not pairs:
        raise DataError("no labelled slices available for fine-tuning")
    if restart:
        if checkpoint is None:
            raise ConfigurationError("restart mode needs a segmentation checkpoint")
        if checkpoint.spec.in_channels != t or checkpoint.spec.out_channels != n_out:
            raise ConfigurationError("restart checkpoint heads do not match the segmentation task")
        net = checkpoint.to_network()
    elif checkpoint is not None:
        net = swap_head(checkpoint, t, n_out, seed=config.seed)
    else:
        if spec is None:
            raise ConfigurationError("need a NetworkSpec when no checkpoint is given")
        from dataclasses import replace

        net = build_network(replace(spec, in_channels=t, out_channels=n_out, seed=config.seed))
    net.spec.check_image_size(*splits.train.image_shape)
    class_names = splits.train.class_names
    aug_params = config.augment

    def one(rng: np.random.Generator) -> SegmentationSample:
        s, lab = pairs[rng.integers(len(pairs))]
        if aug_params is not None:
            s, lab = augment(s, lab, rng, aug_params)
        return SegmentationSample(s.pixels, lab, class_names)

    def sample(rng: np.random.Generator) -> SegmentationSample:
        a = one(rng)
        if config.mixup:
            a = mixup(a, one(rng), config.mixup_alpha, rng)
        return a

    def make_batch(epoch: int, it: int):
        idx = [it * config.batch_size + b for b in range(config.batch_size)]
        samples = _map(lambda j: sample(derive_rng(config.seed, "finetune", epoch, j)), idx, config.workers)
        x = torch.stack([_to_chw(s.image) for s in samples])
        y = torch.stack([_to_chw(s.one_hot()) for s in samples])
        return x, y

    val_ds = splits.val if len(splits.val) and patient_volumes(splits.val) else train_ds
    _, record, _ = _fit(net, config, make_batch, segmentation_loss, lambda n: mean_foreground_dice(n, val_ds), "max", "val_mean_dice")
    return net, record
