"""2D UNet backbone with swappable input/output heads and a binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    magic       8 bytes   b"SIDCKPT\\0"
    version     uint32
    meta_len    uint64
    meta        meta_len bytes of UTF-8 JSON
    payload     float32 little-endian, tensors concatenated in the order of
                meta["tensors"] (each entry: name, shape)

``meta`` also carries the NetworkSpec, head metadata, epoch and training
state (RNG states). Parameter tensors come first in ``state_dict`` order,
optimizer momentum buffers follow under the ``optim/`` prefix.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch
from torch import nn

from .core import ConfigurationError, DomainError

MAGIC = b"SIDCKPT\0"
FORMAT_VERSION = 1
LEAKY_SLOPE = 0.01


class CheckpointFormatError(ValueError):
    """Checkpoint bytes are truncated, corrupt or of an unknown version."""


@dataclass(frozen=True)
class NetworkSpec:
    in_channels: int
    out_channels: int
    depth: int = 3
    base_width: int = 16
    norm: str = "instance"  # "instance" | "none"
    nonlinearity: str = "leaky_relu"  # "leaky_relu" | "relu"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ConfigurationError("depth must be >= 1")
        if self.in_channels < 1 or self.out_channels < 1 or self.base_width < 1:
            raise ConfigurationError("channel counts must be >= 1")
        if self.norm not in ("instance", "none"):
            raise ConfigurationError(f"unknown norm kind {self.norm!r}")
        if self.nonlinearity not in ("leaky_relu", "relu"):
            raise ConfigurationError(f"unknown nonlinearity {self.nonlinearity!r}")

    def check_image_size(self, h: int, w: int) -> None:
        f = 2**self.depth
        if h % f or w % f:
            raise ConfigurationError(
                f"image size {h}x{w} is not divisible by 2**depth = {f} (depth={self.depth})"
            )

    def widths(self) -> list[int]:
        return [self.base_width * 2**level for level in range(self.depth + 1)]


def _act(spec: NetworkSpec) -> nn.Module:
    return nn.LeakyReLU(LEAKY_SLOPE) if spec.nonlinearity == "leaky_relu" else nn.ReLU()


def _norm(spec: NetworkSpec, ch: int) -> nn.Module:
    return nn.InstanceNorm2d(ch, affine=True) if spec.norm == "instance" else nn.Identity()


class ConvBlock(nn.Module):
    def __init__(self, spec: NetworkSpec, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = _norm(spec, cout)
        self.act1 = _act(spec)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = _norm(spec, cout)
        self.act2 = _act(spec)

    def forward(self, x):
        x = self.act1(self.norm1(self.conv1(x)))
        return self.act2(self.norm2(self.conv2(x)))


class UNet(nn.Module):
    """Encoder-decoder with skip connections at each resolution.

    ``input_conv`` and ``output_conv`` are the swappable heads; every other
    parameter is shared between proxy and main task.
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        widths = spec.widths()
        self.input_conv = nn.Conv2d(spec.in_channels, widths[0], 3, padding=1)
        self.stem = nn.Sequential(_norm(spec, widths[0]), _act(spec))
        self.stem_block = nn.Sequential(
            nn.Conv2d(widths[0], widths[0], 3, padding=1), _norm(spec, widths[0]), _act(spec)
        )
        self.down = nn.ModuleList(ConvBlock(spec, widths[i], widths[i + 1]) for i in range(spec.depth))
        self.pool = nn.MaxPool2d(2)
        self.up = nn.ModuleList(
            nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2) for i in reversed(range(spec.depth))
        )
        self.dec = nn.ModuleList(ConvBlock(spec, 2 * widths[i], widths[i]) for i in reversed(range(spec.depth)))
        self.output_conv = nn.Conv2d(widths[0], spec.out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.output_conv(self.features(x))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Decoder activations just before the output head."""
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise DomainError(f"expected input B x {self.spec.in_channels} x H x W, got {tuple(x.shape)}")
        self.spec.check_image_size(x.shape[2], x.shape[3])
        x = self.stem_block(self.stem(self.input_conv(x)))
        skips = [x]
        for block in self.down:
            x = block(self.pool(x))
            skips.append(x)
        skips.pop()
        for up, dec in zip(self.up, self.dec):
            x = dec(torch.cat([up(x), skips.pop()], dim=1))
        return x


HEAD_PREFIXES = ("input_conv.", "output_conv.")


def is_head_param(name: str) -> bool:
    return name.startswith(HEAD_PREFIXES)


def _kaiming_(module: nn.Module, gen: torch.Generator, slope: float) -> None:
    nn.init.kaiming_normal_(module.weight, a=slope, mode="fan_in", nonlinearity="leaky_relu", generator=gen)
    if module.bias is not None:
        nn.init.zeros_(module.bias)


def init_weights(net: nn.Module, seed: int, slope: float = LEAKY_SLOPE) -> None:
    gen = torch.Generator().manual_seed(int(seed))
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            _kaiming_(m, gen, slope)


def build_network(spec: NetworkSpec) -> UNet:
    """Fresh UNet, Kaiming-initialised from ``spec.seed`` (biases zero)."""
    net = UNet(spec)
    slope = LEAKY_SLOPE if spec.nonlinearity == "leaky_relu" else 0.0
    init_weights(net, spec.seed, slope)
    return net


def forward(net: UNet, batch: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Eval-mode forward pass; numpy input is taken as B x C x H x W."""
    x = torch.as_tensor(batch, dtype=next(net.parameters()).dtype)
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            return net(x)
    finally:
        net.train(was_training)


def parameter_count(spec: NetworkSpec) -> int:
    """Closed-form trainable parameter count."""
    w = spec.widths()
    conv = lambda cin, cout, k: cin * cout * k * k + cout  # noqa: E731
    norm = (lambda c: 2 * c) if spec.norm == "instance" else (lambda c: 0)  # noqa: E731
    total = conv(spec.in_channels, w[0], 3) + norm(w[0]) + conv(w[0], w[0], 3) + norm(w[0])
    for i in range(spec.depth):
        total += conv(w[i], w[i + 1], 3) + conv(w[i + 1], w[i + 1], 3) + 2 * norm(w[i + 1])
        total += conv(w[i + 1], w[i], 2)  # transposed conv: same count
        total += conv(2 * w[i], w[i], 3) + conv(w[i], w[i], 3) + 2 * norm(w[i])
    return total + conv(w[0], spec.out_channels, 1)


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    spec: NetworkSpec
    state: dict[str, torch.Tensor]
    head: dict[str, Any] = field(default_factory=dict)  # task kind, channel counts
    epoch: int = 0
    optimizer_state: dict[str, torch.Tensor] = field(default_factory=dict)  # momentum buffers
    rng_state: dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_network(cls, net: UNet, head: Optional[dict] = None, epoch: int = 0, **kw) -> "Checkpoint":
        state = {k: v.detach().clone() for k, v in net.state_dict().items()}
        return cls(net.spec, state, dict(head or {}), epoch, **kw)

    def to_network(self) -> UNet:
        net = UNet(self.spec)
        try:
            net.load_state_dict(self.state)
        except RuntimeError as exc:
            raise CheckpointFormatError(f"parameter shapes inconsistent with spec: {exc}") from exc
        return net

    def to_bytes(self) -> bytes:
        tensors = [(k, v) for k, v in self.state.items()]
        tensors += [(f"optim/{k}", v) for k, v in self.optimizer_state.items()]
        meta = {
            "spec": asdict(self.spec),
            "head": self.head,
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors],
        }
        meta_b = json.dumps(meta, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<IQ", self.version, len(meta_b)))
        buf.write(meta_b)
        for _, v in tensors:
            buf.write(v.detach().cpu().numpy().astype("<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:8] != MAGIC:
            raise CheckpointFormatError("bad magic; not a checkpoint file")
        try:
            version, meta_len = struct.unpack_from("<IQ", raw, 8)
        except struct.error as exc:
            raise CheckpointFormatError("truncated header") from exc
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        off = 8 + struct.calcsize("<IQ")
        try:
            meta = json.loads(raw[off : off + meta_len].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"corrupt metadata block: {exc}") from exc
        off += meta_len
        state, optim = {}, {}
        for entry in meta["tensors"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            chunk = raw[off : off + 4 * n]
            if len(chunk) != 4 * n:
                raise CheckpointFormatError("payload truncated")
            t = torch.from_numpy(np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(shape))
            off += 4 * n
            name = entry["name"]
            if name.startswith("optim/"):
                optim[name[len("optim/"):]] = t
            else:
                state[name] = t
        if off != len(raw):
            raise CheckpointFormatError("trailing bytes after payload")
        ck = cls(NetworkSpec(**meta["spec"]), state, meta["head"], meta["epoch"], optim, meta["rng_state"], version)
        ck.to_network()  # shape check
        return ck

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def encode_torch_rng() -> str:
    return base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode()


def tensor_hash(state: dict[str, torch.Tensor], keep=lambda name: True) -> str:
    h = hashlib.sha256()
    for k in sorted(state):
        if keep(k):
            h.update(k.encode())
            h.update(state[k].detach().cpu().numpy().tobytes())
    return h.hexdigest()


def swap_head(checkpoint: Checkpoint | str | Path, new_in: int, new_out: int, seed: int) -> UNet:
    """Keep every intermediate parameter; re-initialise first and last layers."""
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = Checkpoint.load(checkpoint)
    if new_in < 1 or new_out < 1:
        raise ConfigurationError("new channel counts must be >= 1")
    spec = replace(checkpoint.spec, in_channels=new_in, out_channels=new_out, seed=seed)
    net = UNet(spec)
    body = {k: v for k, v in checkpoint.state.items() if not is_head_param(k)}
    missing, unexpected = net.load_state_dict(body, strict=False)
    if unexpected or any(not is_head_param(k) for k in missing):
        raise CheckpointFormatError(f"checkpoint does not match the backbone: missing={missing} unexpected={unexpected}")
    gen = torch.Generator().manual_seed(int(seed))
    slope = LEAKY_SLOPE if spec.nonlinearity == "leaky_relu" else 0.0
    with torch.no_grad():
        _kaiming_(net.input_conv, gen, slope)
        _kaiming_(net.output_conv, gen, slope)
    return net
