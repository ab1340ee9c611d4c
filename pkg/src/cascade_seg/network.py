"""3D U-Net construction, soft Dice loss, stage training and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np
import torch
from torch import nn

from .data_pipeline import PATCH_SIDE, PatchSample

log = logging.getLogger(__name__)

MODEL_MAGIC = b"CSEG-MODEL-1"


@dataclass(frozen=True)
class UNetSpec:
    in_channels: int = 4
    depth: int = 4
    base_width: int = 32
    convs_per_level: int = 2
    kernel: int = 3
    patch_side: int = PATCH_SIDE

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.depth < 1 or self.base_width < 1 or self.convs_per_level < 1:
            raise ValueError("depth, base_width and convs_per_level must be >= 1")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.patch_side % (2 ** (self.depth - 1)) != 0:
            raise ValueError(f"patch side {self.patch_side} is not divisible by 2^(depth-1) = {2 ** (self.depth - 1)}")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2**level for level in range(self.depth)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> UNetSpec:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown UNetSpec fields {sorted(unknown)}")
        return cls(**d)


def _conv_block(cin: int, cout: int, n: int, k: int) -> nn.Sequential:
    layers = []
    for i in range(n):
        layers += [
            nn.Conv3d(cin if i == 0 else cout, cout, k, padding=k // 2, bias=False),
            nn.BatchNorm3d(cout),
            nn.ReLU(inplace=True),
        ]
    return nn.Sequential(*layers)


class UNet3D(nn.Module):
    """Encoder/decoder with concatenation skips and a sigmoid output map."""

    def __init__(self, spec: UNetSpec):
        super().__init__()
        self.spec = spec
        w = spec.widths
        n, k = spec.convs_per_level, spec.kernel
        self.encoders = nn.ModuleList(
            [_conv_block(spec.in_channels if i == 0 else w[i - 1], w[i], n, k) for i in range(spec.depth)]
        )
        self.pool = nn.MaxPool3d(2)
        self.ups = nn.ModuleList(
            [
                nn.Sequential(
                    nn.ConvTranspose3d(w[i + 1], w[i], 2, stride=2, bias=False),
                    nn.BatchNorm3d(w[i]),
                    nn.ReLU(inplace=True),
                )
                for i in range(spec.depth - 1)
            ]
        )
        self.decoders = nn.ModuleList([_conv_block(2 * w[i], w[i], n, k) for i in range(spec.depth - 1)])
        self.head = nn.Conv3d(w[0], 1, 1)

    @property
    def first_conv(self) -> nn.Conv3d:
        return self.encoders[0][0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x)
            if i < len(self.encoders) - 1:
                skips.append(x)
                x = self.pool(x)
        for i in reversed(range(len(self.ups))):
            x = self.ups[i](x)
            x = self.decoders[i](torch.cat([skips[i], x], dim=1))
        return torch.sigmoid(self.head(x))


def build_unet(spec: UNetSpec, seed: int | None = None) -> UNet3D:
    if seed is None:
        return UNet3D(spec)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return UNet3D(spec)


def parameter_count(spec: UNetSpec) -> int:
    """Closed-form trainable parameter count.

    Each k^3 convolution from ``a`` to ``b`` maps has ``k^3 a b`` weights (no
    bias) plus ``2 b`` batch-norm affine terms; each up-convolution from level
    ``i+1`` to ``i`` has ``8 w[i+1] w[i] + 2 w[i]``; the 1x1x1 head adds
    ``w[0] + 1``.
    """
    w, n, k3 = spec.widths, spec.convs_per_level, spec.kernel**3

    def block(cin, cout):
        return k3 * (cin * cout + (n - 1) * cout * cout) + 2 * n * cout

    total = sum(block(spec.in_channels if i == 0 else w[i - 1], w[i]) for i in range(spec.depth))
    for i in range(spec.depth - 1):
        total += 8 * w[i + 1] * w[i] + 2 * w[i]
        total += block(2 * w[i], w[i])
    return total + w[0] + 1


def soft_dice_loss(pred: torch.Tensor, truth: torch.Tensor, epsilon: float = 1.0) -> torch.Tensor:
    """``1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`` over all elements."""
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs truth {tuple(truth.shape)}")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    truth = truth.to(pred.dtype)
    inter = (pred * truth).sum()
    return 1 - (2 * inter + epsilon) / (pred.sum() + truth.sum() + epsilon)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 1e-6
    max_epochs: int = 200
    plateau_patience: int = 10
    min_delta: float = 1e-5
    batch_size: int = 16
    checkpoint_dir: Path | None = None
    seed: int = 0
    epsilon: float = 1.0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.max_epochs < 1 or self.plateau_patience < 1 or self.batch_size < 1:
            raise ValueError("max_epochs, plateau_patience and batch_size must be >= 1")
        if self.checkpoint_dir is not None:
            self.checkpoint_dir = Path(self.checkpoint_dir)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    wall_seconds: float


@dataclass
class TrainResult:
    model: UNet3D
    history: list[EpochRecord]
    best_epoch: int
    best_val_loss: float
    checkpoint: Path | None = None
    stopped_early: bool = False
    train_size: int = 0


# a fixed list of patches, or a callable returning the patches for a given epoch
PatchStream = Union[Sequence[PatchSample], Callable[[int], Sequence[PatchSample]]]


def _epoch_patches(stream: PatchStream, epoch: int) -> Sequence[PatchSample]:
    patches = stream(epoch) if callable(stream) else stream
    if len(patches) == 0:
        raise ValueError("empty patch stream")
    return patches


def _to_tensors(samples: Sequence[PatchSample]) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(np.stack([s.channels for s in samples]).astype(np.float32))
    y = torch.from_numpy(np.stack([s.target for s in samples]).astype(np.float32))[:, None]
    return x, y


def evaluate_loss(model: nn.Module, samples: Sequence[PatchSample], batch_size: int = 16, epsilon: float = 1.0) -> float:
    """Mean per-batch soft Dice loss in eval mode."""
    model.eval()
    losses = []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            x, y = _to_tensors(samples[i : i + batch_size])
            losses.append(float(soft_dice_loss(model(x), y, epsilon)))
    return float(np.mean(losses))


def train_stage(model: UNet3D, train: PatchStream, val: PatchStream, cfg: TrainConfig, name: str = "model") -> TrainResult:
    """Minimise soft Dice with NAdam until ``max_epochs`` or a validation plateau.

    Stops once validation loss has not improved by more than ``min_delta`` for
    ``plateau_patience`` consecutive epochs. The best-validation weights are
    restored into ``model`` (and saved under ``checkpoint_dir`` if set).
    """
    in_ch = model.spec.in_channels
    train_size = len(_epoch_patches(train, 0))
    _check_channels(_epoch_patches(train, 0), in_ch, "train")
    _check_channels(_epoch_patches(val, 0), in_ch, "val")

    gen = torch.Generator().manual_seed(cfg.seed)
    torch.manual_seed(cfg.seed)
    opt = torch.optim.NAdam(model.parameters(), lr=cfg.learning_rate)

    history: list[EpochRecord] = []
    best_val, best_epoch, best_state = math.inf, 0, None
    stale = 0
    start = time.perf_counter()
    stopped_early = False
    for epoch in range(1, cfg.max_epochs + 1):
        patches = _epoch_patches(train, epoch - 1)
        _check_channels(patches, in_ch, "train")
        model.train()
        order = torch.randperm(len(patches), generator=gen).tolist()
        batch_losses = []
        for i in range(0, len(order), cfg.batch_size):
            x, y = _to_tensors([patches[j] for j in order[i : i + cfg.batch_size]])
            opt.zero_grad(set_to_none=True)
            loss = soft_dice_loss(model(x), y, cfg.epsilon)
            loss.backward()
            opt.step()
            batch_losses.append(float(loss.detach()))
        val_loss = evaluate_loss(model, _epoch_patches(val, epoch - 1), cfg.batch_size, cfg.epsilon)
        rec = EpochRecord(epoch, float(np.mean(batch_losses)), val_loss, time.perf_counter() - start)
        history.append(rec)
        log.info("%s epoch %d train %.5f val %.5f", name, epoch, rec.train_loss, val_loss)

        if val_loss < best_val - cfg.min_delta:
            best_val, best_epoch, stale = val_loss, epoch, 0
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        else:
            stale += 1
            if stale >= cfg.plateau_patience:
                stopped_early = True
                break

    model.load_state_dict(best_state)
    model.eval()
    ckpt = None
    if cfg.checkpoint_dir is not None:
        ckpt = save_model(model, cfg.checkpoint_dir / f"{name}.cseg", meta={"best_epoch": best_epoch})
        write_history(history, cfg.checkpoint_dir / f"{name}_history.csv")
    return TrainResult(model, history, best_epoch, best_val, ckpt, stopped_early, train_size)


def _check_channels(samples: Sequence[PatchSample], expected: int, which: str) -> None:
    got = samples[0].channels.shape[0]
    if got != expected:
        raise ValueError(f"{which} patches have {got} channels but the model expects {expected}")


def write_history(history: Sequence[EpochRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "val_loss", "wall_seconds"])
        for r in history:
            w.writerow([r.epoch, f"{r.train_loss:.8f}", f"{r.val_loss:.8f}", f"{r.wall_seconds:.3f}"])
    return path


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def save_model(model: UNet3D, path: str | Path, meta: dict | None = None) -> Path:
    """Magic line, length-prefixed JSON header (spec + meta), torch state dict."""
    header = json.dumps({"spec": model.spec.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    buf = io.BytesIO()
    torch.save(model.state_dict(), buf)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC + b"\n")
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(buf.getvalue())
    return path


def read_checkpoint_header(path: str | Path) -> dict:
    with open(path, "rb") as f:
        return _read_header(f, path)


def _read_header(f, path) -> dict:
    magic = f.readline().rstrip(b"\n")
    if magic != MODEL_MAGIC:
        raise CheckpointError(f"{path}: unsupported checkpoint version (magic {magic[:16]!r})")
    raw = f.read(8)
    if len(raw) != 8:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw)
    try:
        return json.loads(f.read(n))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupted header") from e


def load_model(path: str | Path, expected_spec: UNetSpec | None = None) -> tuple[UNet3D, dict]:
    """Returns the model (eval mode) and the checkpoint's metadata."""
    path = Path(path)
    with open(path, "rb") as f:
        header = _read_header(f, path)
        state = torch.load(io.BytesIO(f.read()), map_location="cpu", weights_only=True)
    spec = UNetSpec.from_dict(header["spec"])
    if expected_spec is not None and spec != expected_spec:
        raise CheckpointError(f"{path}: spec {spec} does not match expected {expected_spec}")
    model = UNet3D(spec)
    model.load_state_dict(state)
    model.eval()
    return model, header.get("meta", {})


def file_checksum(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
