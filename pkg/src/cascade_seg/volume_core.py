"""Volumetric data model: volumes, subjects, NIfTI I/O, resampling and mask algebra.

Arrays are stored in (sagittal, coronal, axial) axis order. A volume's
``origin`` is the world position (mm) of the outer corner of voxel
``(0, 0, 0)``; voxel ``i`` along an axis spans
``[origin + i * spacing, origin + (i + 1) * spacing)``. NIfTI headers store the
centre of voxel 0, so the two differ by half a voxel on read and write.
"""

from __future__ import annotations

import gzip
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import nibabel as nib
from nibabel.openers import ImageOpener
import numpy as np

KINDS = ("intensity", "probability", "label", "binary")
LABEL_VALUES = (0, 1, 2, 4)
MODALITIES = ("T1", "T1Post", "T2", "FLAIR")

GEOMETRY_TOL = 1e-4


class GeometryError(ValueError):
    """Raised when volumes that must share a grid do not."""


@dataclass(frozen=True, eq=False)
class Volume:
    """One 3D scalar grid with voxel spacing and origin.

    The array is copied and marked read-only on construction, so a Volume can
    be shared freely.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    kind: str = "intensity"

    def __post_init__(self):
        data = np.array(self.data)
        if data.ndim != 3:
            raise ValueError(f"expected a 3D array, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"every dimension must be >= 1, got {data.shape}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown volume kind {self.kind!r}")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or len(origin) != 3:
            raise ValueError("spacing and origin must be 3-tuples")
        if not all(s > 0 for s in spacing):
            raise ValueError(f"spacing must be strictly positive, got {spacing}")

        if self.kind == "probability":
            if data.size and (np.nanmin(data) < 0 or np.nanmax(data) > 1 or np.isnan(data).any()):
                raise ValueError("probability volume values must lie in [0, 1]")
        elif self.kind == "binary":
            if not np.isin(data, (0, 1)).all():
                raise ValueError("binary volume values must be 0 or 1")
            data = data.astype(np.uint8)
        elif self.kind == "label":
            if not np.isin(data, LABEL_VALUES).all():
                bad = sorted(set(np.unique(data).tolist()) - set(LABEL_VALUES))
                raise ValueError(f"label volume has values outside {{0,1,2,4}}: {bad}")
            data = data.astype(np.uint8)

        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def with_data(self, data: np.ndarray, kind: str | None = None) -> Volume:
        """Same geometry, new voxel values."""
        return Volume(data, self.spacing, self.origin, kind or self.kind)

    def same_geometry(self, other: Volume, tol: float = GEOMETRY_TOL) -> bool:
        return (
            self.shape == other.shape
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=tol)
            and np.allclose(self.origin, other.origin, rtol=0, atol=tol)
        )


def check_geometry(*volumes: Volume) -> None:
    first = volumes[0]
    for other in volumes[1:]:
        if not first.same_geometry(other):
            raise GeometryError(
                f"geometry mismatch: shape {first.shape} spacing {first.spacing} origin "
                f"{first.origin} vs shape {other.shape} spacing {other.spacing} origin {other.origin}"
            )


@dataclass(frozen=True, eq=False)
class Subject:
    """Four co-registered modalities plus an optional ground-truth labelmap."""

    id: str
    modalities: Mapping[str, Volume]
    truth: Volume | None = None
    brain_mask: Volume = field(init=False)

    def __post_init__(self):
        missing = [m for m in MODALITIES if m not in self.modalities]
        if missing:
            raise ValueError(f"subject {self.id}: missing modalities {missing}")
        extra = set(self.modalities) - set(MODALITIES)
        if extra:
            raise ValueError(f"subject {self.id}: unknown modalities {sorted(extra)}")
        vols = [self.modalities[m] for m in MODALITIES]
        for v in vols:
            if v.kind != "intensity":
                raise ValueError(f"subject {self.id}: modalities must be intensity volumes")
        check_geometry(*vols)
        if self.truth is not None:
            if self.truth.kind != "label":
                raise ValueError(f"subject {self.id}: truth must be a label volume")
            check_geometry(vols[0], self.truth)
        object.__setattr__(self, "modalities", {m: self.modalities[m] for m in MODALITIES})
        nonzero = np.zeros(vols[0].shape, dtype=bool)
        for v in vols:
            nonzero |= v.data != 0
        object.__setattr__(self, "brain_mask", vols[0].with_data(nonzero, kind="binary"))

    @property
    def reference(self) -> Volume:
        return self.modalities[MODALITIES[0]]

    def channel_volumes(self) -> list[Volume]:
        return [self.modalities[m] for m in MODALITIES]


# --------------------------------------------------------------------------
# file I/O
# --------------------------------------------------------------------------

def load_volume(path: str | Path, kind: str = "intensity") -> Volume:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such volume file: {path}")
    img = nib.load(str(path))
    if img.ndim != 3:
        shape = img.shape
        if img.ndim == 4 and shape[3] == 1:
            pass
        else:
            raise ValueError(f"{path}: non-scalar payload with shape {shape}")
    zooms = np.asarray(img.header.get_zooms()[:3], dtype=float)
    # nibabel silently rewrites zero pixdim to 1 on load; check the raw header
    with ImageOpener(str(path)) as f:
        raw = type(img.header).from_fileobj(f, check=False)
    if not np.all(np.asarray(raw["pixdim"][1:4], dtype=float) > 0) or not np.all(zooms > 0):
        raise ValueError(f"{path}: non-positive spacing in header {tuple(zooms)}")
    data = np.asanyarray(img.dataobj)
    if data.ndim == 4:
        data = data[..., 0]
    slope, inter = img.header.get_slope_inter()
    if slope is not None and (slope != 1 or (inter or 0) != 0):
        data = data * slope + (inter or 0)
    centre0 = np.asarray(img.affine[:3, 3], dtype=float)
    origin = centre0 - zooms / 2
    return Volume(np.array(data), tuple(zooms), tuple(origin), kind)


def volume_to_nifti(v: Volume) -> nib.Nifti1Image:
    affine = np.diag([*v.spacing, 1.0])
    affine[:3, 3] = np.asarray(v.origin) + np.asarray(v.spacing) / 2
    img = nib.Nifti1Image(np.asarray(v.data), affine)
    img.set_data_dtype(v.data.dtype)
    img.header.set_zooms(v.spacing)
    img.header.set_xyzt_units("mm")
    return img


def save_volume(v: Volume, path: str | Path) -> Path:
    """Write ``v`` as NIfTI-1; ``.nii.gz`` output is gzipped with a fixed mtime
    so identical volumes produce identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = volume_to_nifti(v).to_bytes()
    if path.name.endswith(".gz"):
        raw = gzip.compress(raw, compresslevel=6, mtime=0)
    path.write_bytes(raw)
    return path


# --------------------------------------------------------------------------
# intensity normalisation
# --------------------------------------------------------------------------

def zscore_normalize(v: Volume, mask: Volume) -> Volume:
    """Zero-mean, unit (population) variance over ``mask``; zero outside it."""
    if v.kind != "intensity":
        raise ValueError("zscore_normalize expects an intensity volume")
    check_geometry(v, mask)
    inside = mask.data.astype(bool)
    if inside.sum() == 0:
        raise ValueError("empty mask")
    values = v.data[inside].astype(np.float64)
    mean = values.mean()
    std = values.std()
    if not std > 0:
        raise ValueError("zero variance inside mask")
    out = np.zeros(v.shape, dtype=np.float32)
    out[inside] = ((values - mean) / std).astype(np.float32)
    return v.with_data(out)


def normalize_subject(subject: Subject) -> Subject:
    mask = subject.brain_mask
    mods = {m: zscore_normalize(vol, mask) for m, vol in subject.modalities.items()}
    normalized = Subject(subject.id, mods, subject.truth)
    # re-zeroed background keeps the mask; voxels normalised to exactly 0 must not drop out
    object.__setattr__(normalized, "brain_mask", mask)
    return normalized


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------

def _output_shape(shape, spacing, target) -> tuple[int, ...]:
    # the tiny slack keeps e.g. 64 * 1.0 / 2.0 from rounding up through float noise
    return tuple(max(1, math.ceil(n * s / t - 1e-9)) for n, s, t in zip(shape, spacing, target))


def nearest_indices(n_out: int, out_spacing: float, n_in: int, in_spacing: float) -> np.ndarray:
    """Source index for each output voxel: the source voxel containing the
    output voxel centre (equidistant ties go to the higher index)."""
    centres = (np.arange(n_out) + 0.5) * out_spacing
    idx = np.floor(centres / in_spacing + 1e-9).astype(np.int64)
    return np.clip(idx, 0, n_in - 1)


def _mean_pool_axis(arr: np.ndarray, axis: int, n_out: int, t: float, s: float) -> np.ndarray:
    n_in = arr.shape[axis]
    nearest = nearest_indices(n_out, t, n_in, s)
    moved = np.moveaxis(arr, axis, 0)
    cums = np.concatenate([np.zeros((1,) + moved.shape[1:]), np.cumsum(moved, axis=0)], axis=0)
    out = np.empty((n_out,) + moved.shape[1:], dtype=np.float64)
    for j in range(n_out):
        # source voxels whose centres fall inside output voxel j
        lo = max(0, math.ceil(j * t / s - 0.5 - 1e-9))
        hi = min(n_in, math.ceil((j + 1) * t / s - 0.5 - 1e-9))
        if hi > lo:
            out[j] = (cums[hi] - cums[lo]) / (hi - lo)
        else:
            out[j] = moved[nearest[j]]
    return np.moveaxis(out, 0, axis)


def resample_to_spacing(v: Volume, target_spacing, mode: str = "nearest") -> Volume:
    """Resample onto a grid with ``target_spacing`` sharing ``v``'s origin.

    ``mean_pool`` averages the source voxels whose centres fall in each output
    voxel (falling back to nearest where none do); ``nearest`` copies the
    source voxel containing each output centre.
    """
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or not all(t > 0 for t in target):
        raise ValueError(f"target spacing must be three positive values, got {target_spacing}")
    if mode not in ("nearest", "mean_pool"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    if mode == "mean_pool" and v.kind in ("label", "binary"):
        raise ValueError(f"mean_pool cannot be used on a {v.kind} volume")
    if np.allclose(target, v.spacing, rtol=0, atol=1e-9):
        return v

    out_shape = _output_shape(v.shape, v.spacing, target)
    if mode == "nearest":
        idx = [nearest_indices(n, t, m, s) for n, t, m, s in zip(out_shape, target, v.shape, v.spacing)]
        data = v.data[np.ix_(*idx)]
    else:
        data = v.data.astype(np.float64)
        for axis in range(3):
            data = _mean_pool_axis(data, axis, out_shape[axis], target[axis], v.spacing[axis])
        data = data.astype(v.data.dtype if v.data.dtype.kind == "f" else np.float32)
        if v.kind == "probability":
            data = np.clip(data, 0.0, 1.0)
    return Volume(data, target, v.origin, v.kind)


def upsample_nn_labels(v: Volume, target: Volume) -> Volume:
    """Nearest-neighbour transfer of a binary mask onto ``target``'s grid."""
    if v.kind != "binary":
        raise ValueError("upsample_nn_labels expects a binary volume")
    if v.same_geometry(target):
        return v
    idx = []
    for axis in range(3):
        centres = np.asarray(target.origin[axis]) + (np.arange(target.shape[axis]) + 0.5) * target.spacing[axis]
        rel = (centres - v.origin[axis]) / v.spacing[axis]
        idx.append(np.clip(np.floor(rel + 1e-9).astype(np.int64), 0, v.shape[axis] - 1))
    data = v.data[np.ix_(*idx)]
    return Volume(data, target.spacing, target.origin, "binary")


# --------------------------------------------------------------------------
# mask algebra
# --------------------------------------------------------------------------

def _binary_pair(a: Volume, b: Volume) -> tuple[np.ndarray, np.ndarray]:
    for v in (a, b):
        if v.kind != "binary":
            raise ValueError("mask operations expect binary volumes")
    check_geometry(a, b)
    return a.data.astype(bool), b.data.astype(bool)


def mask_union(a: Volume, b: Volume) -> Volume:
    x, y = _binary_pair(a, b)
    return a.with_data(x | y)


def mask_intersect(a: Volume, b: Volume) -> Volume:
    x, y = _binary_pair(a, b)
    return a.with_data(x & y)


def mask_subset(a: Volume, b: Volume) -> bool:
    x, y = _binary_pair(a, b)
    return bool(np.all(~x | y))
