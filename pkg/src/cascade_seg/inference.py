"""Whole-volume prediction from 32^3 tiles at several grid offsets."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
import torch

from .data_pipeline import PATCH_SIDE
from .volume_core import Volume, check_geometry


class PatchModel(Protocol):
    """Anything that maps a batch of patches to probability patches.

    ``patches`` has shape (N, C, s, s, s) and ``corners`` (N, 3) gives each
    patch's voxel corner in the unpadded volume (possibly negative); the result
    must have shape (N, s, s, s) with values in [0, 1].
    """

    in_channels: int

    def predict_patches(self, patches: np.ndarray, corners: np.ndarray) -> np.ndarray: ...


class TorchPatchModel:
    """Adapts a U-Net to :class:`PatchModel`."""

    def __init__(self, model: torch.nn.Module):
        self.model = model.eval()
        self.in_channels = model.spec.in_channels

    def predict_patches(self, patches, corners):
        with torch.no_grad():
            out = self.model(torch.from_numpy(np.ascontiguousarray(patches, dtype=np.float32)))
        return out[:, 0].numpy()


def as_patch_model(model) -> PatchModel:
    if isinstance(model, torch.nn.Module):
        return TorchPatchModel(model)
    return model


@dataclass(frozen=True)
class GridPlan:
    offsets: tuple[tuple[int, int, int], ...]
    patch_side: int = PATCH_SIDE
    pad_value: float = 0.0

    def __post_init__(self):
        offsets = tuple(tuple(int(c) for c in o) for o in self.offsets)
        if not offsets:
            raise ValueError("grid plan needs at least one offset")
        if len(set(offsets)) != len(offsets):
            raise ValueError("grid plan offsets must be distinct")
        for o in offsets:
            if len(o) != 3 or not all(0 <= c < self.patch_side for c in o):
                raise ValueError(f"offset {o} outside [0, {self.patch_side - 1}]")
        object.__setattr__(self, "offsets", offsets)

    def corners(self, shape: Sequence[int]) -> list[tuple[int, int, int]]:
        """Every tile corner: per offset, a stride-``patch_side`` tiling whose
        lattice passes through the offset and covers the whole volume."""
        side = self.patch_side
        out = []
        for off in self.offsets:
            axes = [range(o - side if o > 0 else 0, n, side) for o, n in zip(off, shape)]
            out.extend(itertools.product(*axes))
        return out

    def to_dict(self) -> dict:
        return {"patch_side": self.patch_side, "pad_value": self.pad_value, "offsets": [list(o) for o in self.offsets]}

    @classmethod
    def from_dict(cls, d: dict) -> GridPlan:
        return cls(tuple(tuple(o) for o in d["offsets"]), d.get("patch_side", PATCH_SIDE), d.get("pad_value", 0.0))


def default_grid_plan() -> GridPlan:
    """Two interleaved lattices, offsets {0,16}^3 and {8,24}^3."""
    offsets = list(itertools.product((0, 16), repeat=3)) + list(itertools.product((8, 24), repeat=3))
    return GridPlan(tuple(offsets))


def extract_block(arr: np.ndarray, corner: Sequence[int], side: int, fill: float = 0.0) -> np.ndarray:
    """``side``^3 block of the trailing three axes of ``arr`` at ``corner``;
    the part outside the array is ``fill``."""
    spatial = arr.shape[-3:]
    block = np.full(arr.shape[:-3] + (side,) * 3, fill, dtype=arr.dtype)
    src, dst = [], []
    for c, n in zip(corner, spatial):
        lo, hi = max(c, 0), min(c + side, n)
        if hi <= lo:
            return block
        src.append(slice(lo, hi))
        dst.append(slice(lo - c, hi - c))
    block[(...,) + tuple(dst)] = arr[(...,) + tuple(src)]
    return block


@dataclass
class ProbabilityAccumulator:
    shape: tuple[int, int, int]
    sum: np.ndarray = field(init=False)
    count: np.ndarray = field(init=False)

    def __post_init__(self):
        self.sum = np.zeros(self.shape, dtype=np.float64)
        self.count = np.zeros(self.shape, dtype=np.int64)

    def add(self, corner: Sequence[int], block: np.ndarray) -> None:
        src, dst = [], []
        for c, n, s in zip(corner, self.shape, block.shape):
            lo, hi = max(c, 0), min(c + s, n)
            if hi <= lo:
                return
            dst.append(slice(lo, hi))
            src.append(slice(lo - c, hi - c))
        self.sum[tuple(dst)] += block[tuple(src)]
        self.count[tuple(dst)] += 1

    def merge(self, other: ProbabilityAccumulator) -> None:
        self.sum += other.sum
        self.count += other.count

    def mean(self) -> np.ndarray:
        if (self.count == 0).any():
            raise RuntimeError("some voxels were not covered by any patch")
        return self.sum / self.count


def predict_volume(model, channels: Sequence[Volume], plan: GridPlan | None = None, batch_size: int = 8) -> Volume:
    """Average of patch predictions over every tile covering each voxel."""
    plan = plan or default_grid_plan()
    model = as_patch_model(model)
    channels = list(channels)
    if not channels:
        raise ValueError("no input channels")
    check_geometry(*channels)
    if len(channels) != model.in_channels:
        raise ValueError(f"model expects {model.in_channels} channels, got {len(channels)}")
    ref = channels[0]
    stack = np.stack([np.asarray(v.data, dtype=np.float32) for v in channels])
    side = plan.patch_side
    acc = ProbabilityAccumulator(ref.shape)
    corners = plan.corners(ref.shape)
    for i in range(0, len(corners), batch_size):
        chunk = corners[i : i + batch_size]
        patches = np.stack([extract_block(stack, c, side, plan.pad_value) for c in chunk])
        out = np.asarray(model.predict_patches(patches, np.asarray(chunk)), dtype=np.float64)
        if out.shape != (len(chunk), side, side, side):
            raise ValueError(f"model returned shape {out.shape}, expected {(len(chunk), side, side, side)}")
        for c, block in zip(chunk, out):
            acc.add(c, block)
    prob = np.clip(acc.mean(), 0.0, 1.0).astype(np.float32)
    return ref.with_data(prob, kind="probability")


def binarize(prob: Volume, threshold: float = 0.5) -> Volume:
    """1 where ``prob >= threshold``."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return prob.with_data(prob.data >= threshold, kind="binary")
