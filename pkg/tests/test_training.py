import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from sourceid.core import ConfigurationError, DomainError, TaskKind, TaskParams
from sourceid.model import NetworkSpec, build_network, is_head_param, tensor_hash
from sourceid.training import (
    EarlyStopping,
    TrainConfig,
    cross_entropy,
    _fit,
    finetune,
    make_optimizer,
    mean_reconstruction_error,
    poly_lr,
    pretrain,
    proxy_validation_set,
    reconstruction_loss,
    segmentation_loss,
    select_labeled,
    soft_dice_loss,
    stack_samples,
)

# ---- losses -----------------------------------------------------------------


def test_reconstruction_loss_examples():
    t = torch.randn(2, 3, 4, 4)
    assert reconstruction_loss(t, t).item() == 0.0
    assert reconstruction_loss(t + 1, t).item() == pytest.approx(2.0)
    with pytest.raises(DomainError):
        reconstruction_loss(t, t[:, :2])


def test_reconstruction_loss_independent_formula():
    rng = np.random.default_rng(0)
    p, t = rng.normal(size=(3, 2, 5, 5)), rng.normal(size=(3, 2, 5, 5))
    r = (p - t).reshape(3, -1)
    expected = np.mean(np.abs(r).mean(1) + np.sqrt((r**2).mean(1)))
    assert reconstruction_loss(torch.from_numpy(p), torch.from_numpy(t)).item() == pytest.approx(expected, rel=1e-12)


def _fd_check(fn, x, eps=1e-6):
    x = x.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    num = torch.zeros_like(x)
    flat, nflat = x.detach().view(-1), num.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        lp = fn(x.detach()).item()
        flat[i] = old - eps
        lm = fn(x.detach()).item()
        flat[i] = old
        nflat[i] = (lp - lm) / (2 * eps)
    return ((g - num).norm() / num.norm()).item()


def test_reconstruction_loss_finite_differences():
    gen = torch.Generator().manual_seed(0)
    p = torch.randn(1, 1, 4, 4, generator=gen, dtype=torch.float64)
    t = torch.randn(1, 1, 4, 4, generator=gen, dtype=torch.float64)
    assert _fd_check(lambda x: reconstruction_loss(x, t), p) <= 1e-5


def test_segmentation_loss_finite_differences_hard_and_soft():
    gen = torch.Generator().manual_seed(1)
    logits = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64)
    hard = torch.randint(0, 3, (2, 4, 4), generator=gen)
    soft = torch.softmax(torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64), 1)
    assert _fd_check(lambda x: segmentation_loss(x, hard), logits) <= 1e-5
    assert _fd_check(lambda x: segmentation_loss(x, soft), logits) <= 1e-5


def test_cross_entropy_uniform_is_ln2():
    logits = torch.zeros(1, 2, 2, 2)
    labels = torch.tensor([[[0, 1], [1, 0]]])
    assert cross_entropy(logits, labels).item() == pytest.approx(math.log(2))


def test_perfect_prediction_loss_near_zero():
    labels = torch.tensor([[[0, 1], [2, 1]]])
    logits = 60.0 * torch.nn.functional.one_hot(labels, 3).permute(0, 3, 1, 2).double()
    assert segmentation_loss(logits, labels).item() == pytest.approx(0.0, abs=1e-6)


def test_segmentation_loss_rejects_undeclared_class():
    with pytest.raises(DomainError):
        segmentation_loss(torch.zeros(1, 2, 2, 2), torch.tensor([[[0, 2], [0, 0]]]))


def test_soft_dice_pooled_over_batch():
    labels = torch.tensor([[[1, 0]], [[0, 0]]])
    logits = torch.nn.functional.one_hot(labels, 2).permute(0, 3, 1, 2).double() * 80
    assert soft_dice_loss(logits, labels).item() == pytest.approx(0.0, abs=1e-6)


# ---- schedule, optimizer, early stopping ------------------------------------


def test_poly_lr_values():
    assert poly_lr(0, 1000, 1e-2) == 1e-2
    assert poly_lr(1000, 1000, 1e-2) == 0.0
    assert abs(poly_lr(500, 1000, 1e-2) - 1e-2 * math.exp(0.9 * math.log(0.5))) < 1e-15
    assert abs(poly_lr(500, 1000, 1e-2) - 5.359e-3) <= 1e-6
    seq = [poly_lr(e, 50, 1e-2) for e in range(51)]
    assert all(a >= b for a, b in zip(seq, seq[1:])) and seq[-1] == 0
    with pytest.raises(DomainError):
        poly_lr(51, 50, 1e-2)


def test_zero_lr_step_leaves_parameters_unchanged():
    net = build_network(NetworkSpec(2, 2, depth=1, base_width=2))
    opt = make_optimizer(net, TrainConfig())
    for g in opt.param_groups:
        g["lr"] = 0.0
    before = tensor_hash(net.state_dict())
    for _ in range(2):
        loss = net(torch.randn(1, 2, 8, 8)).square().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert tensor_hash(net.state_dict()) == before


def test_optimizer_protocol():
    opt = make_optimizer(build_network(NetworkSpec(1, 1, 1, 2)), TrainConfig())
    g = opt.param_groups[0]
    assert g["momentum"] == 0.99 and g["weight_decay"] == 3e-5 and g["nesterov"]


@pytest.mark.parametrize("patience", [1, 3, 7])
def test_early_stopping_exact(patience):
    values = [5, 4, 3, 3.5, 2, 2.5, 2.1] + [9] * 20
    stopper = EarlyStopping(patience)
    for epoch, v in enumerate(values):
        _, stop = stopper.update(epoch, v)
        if stop:
            break
    best = 4 if patience > 1 else 3
    # with patience 1 the rise at epoch 3 already stops the run
    assert stopper.best_epoch == (2 if patience == 1 else best)
    assert epoch == stopper.best_epoch + patience


def test_train_config_validation():
    for kw in ({"epochs_max": 0}, {"initial_lr": 0}, {"early_stop_patience": 0}, {"batch_size": 0}):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kw)


# ---- pretrain / finetune ----------------------------------------------------

TINY = NetworkSpec(4, 2, depth=2, base_width=4)


def _cfg(**kw):
    base = dict(
        task=TaskParams(TaskKind.CSI, 2, 2), epochs_max=2, iters_per_epoch=3, val_samples=4, augment=None, seed=3
    )
    return TrainConfig(**(base | kw))


def test_pretrain_smoke_and_record_lengths(small_splits):
    ck, rec = pretrain(_cfg(epochs_max=1), small_splits, TINY)
    assert len(rec.epochs) == 1 and rec.best_epoch == 0 and rec.stop_reason == "epochs_max"
    assert ck.spec == TINY and ck.head["task"] == "CSI"


def test_pretrain_deterministic_and_worker_invariant(small_splits):
    _, a = pretrain(_cfg(), small_splits, TINY)
    _, b = pretrain(_cfg(), small_splits, TINY)
    _, c = pretrain(_cfg(workers=3), small_splits, TINY)
    assert a.same_trajectory(b) and a.same_trajectory(c)


def test_pretrain_channel_mismatch(small_splits):
    with pytest.raises(ConfigurationError):
        pretrain(_cfg(), small_splits, replace(TINY, in_channels=2))


def test_early_stop_in_training_loop():
    net = build_network(NetworkSpec(1, 1, depth=1, base_width=2))
    values = iter([3.0, 2.0, 2.5, 1.0, 1.5, 1.2, 1.1, 0.5])
    batch = lambda e, i: (torch.ones(1, 1, 8, 8), torch.zeros(1, 1, 8, 8))  # noqa: E731
    cfg = TrainConfig(epochs_max=20, iters_per_epoch=1, early_stop_patience=3)
    _, rec, extra = _fit(net, cfg, batch, reconstruction_loss, lambda n: next(values), "min", "v")
    assert rec.best_epoch == 3 and rec.best_value == 1.0 and extra["epoch"] == 3
    assert len(rec.epochs) == 3 + 3 + 1 and rec.stop_reason == "early_stop"


def test_pretrain_beats_mean_mixture_predictor(small_splits):
    # DSI learns within seconds; CSI needs hundreds of epochs and is covered by the acceptance suite
    task = TaskParams(TaskKind.DSI, 2, 2)
    cfg = _cfg(task=task, epochs_max=15, iters_per_epoch=20, batch_size=2, val_samples=16)
    ck, _ = pretrain(cfg, small_splits, replace(TINY, base_width=8))
    val = proxy_validation_set(task, small_splits.val, cfg.val_samples, cfg.seed + 1)
    x, y = stack_samples(val)
    baseline = reconstruction_loss((x[:, :2] + x[:, 2:]) / 2, y).item()
    assert mean_reconstruction_error(ck.to_network(), val) < baseline


def test_loss_decreases_first_epochs_in_most_seeds(small_splits):
    wins = 0
    for seed in range(3):
        _, rec = pretrain(_cfg(epochs_max=10, iters_per_epoch=5, seed=seed, early_stop_patience=50), small_splits, TINY)
        wins += rec.train_loss[-1] < rec.train_loss[0]
    assert wins >= 2


def test_select_labeled_budget(small_splits):
    a = select_labeled(small_splits.train, 5, seed=1)
    assert len(a) == 5 and a == select_labeled(small_splits.train, 5, seed=1)
    assert select_labeled(small_splits.train, None, 0) == sorted(small_splits.train.patient_ids)
    with pytest.raises(ConfigurationError):
        select_labeled(small_splits.train, 99, 0)


def test_finetune_paths(small_splits):
    cfg = _cfg(epochs_max=2, labeled_budget=3, batch_size=2)
    ck, _ = pretrain(_cfg(epochs_max=1), small_splits, TINY)
    net, rec = finetune(cfg, small_splits, ck)
    n_out = len(small_splits.train.class_names) + 1
    assert net.output_conv.out_channels == n_out and net.input_conv.in_channels == 2
    body = lambda k: not is_head_param(k)  # noqa: E731
    assert tensor_hash(net.state_dict(), body) != tensor_hash(ck.state, body)  # training moved the body
    base, rec_b = finetune(cfg, small_splits, None, spec=TINY)
    base2, rec_b2 = finetune(cfg, small_splits, None, spec=TINY)
    assert rec_b.same_trajectory(rec_b2)
    assert 0.0 <= rec_b.best_value <= 1.0
    mixed, _ = finetune(replace(cfg, mixup=True), small_splits, None, spec=TINY)
    assert mixed.output_conv.out_channels == n_out
    from sourceid.model import Checkpoint

    restarted, _ = finetune(cfg, small_splits, Checkpoint.from_network(base), restart=True)
    assert restarted.output_conv.out_channels == n_out
    with pytest.raises(ConfigurationError):
        finetune(cfg, small_splits, None)
    with pytest.raises(ConfigurationError):
        finetune(replace(cfg, labeled_budget=50), small_splits, None, spec=TINY)
