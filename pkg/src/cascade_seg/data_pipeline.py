"""Subject I/O, class-stratified patch sampling, flip augmentation and phantoms."""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .volume_core import MODALITIES, Subject, Volume, check_geometry, load_volume, save_volume

PATCH_SIDE = 32
CLASSES = ("background", "normal_brain", "tumor")
PATCH_CACHE_MAGIC = b"CSEG-PATCH-1"

# BraTS file suffix for each modality
FILE_SUFFIX = {"T1": "t1", "T1Post": "t1ce", "T2": "t2", "FLAIR": "flair"}
TRUTH_SUFFIX = "seg"


class EmptyClassError(ValueError):
    pass


# --------------------------------------------------------------------------
# subject directories
# --------------------------------------------------------------------------

def subject_paths(directory: str | Path) -> dict[str, Path]:
    directory = Path(directory)
    sid = directory.name
    paths = {m: directory / f"{sid}_{FILE_SUFFIX[m]}.nii.gz" for m in MODALITIES}
    paths["truth"] = directory / f"{sid}_{TRUTH_SUFFIX}.nii.gz"
    return paths


def load_subject(directory: str | Path, require_truth: bool = False) -> Subject:
    directory = Path(directory)
    paths = subject_paths(directory)
    modalities = {m: load_volume(paths[m]) for m in MODALITIES}
    truth = None
    if paths["truth"].is_file():
        truth = load_volume(paths["truth"], kind="label")
    elif require_truth:
        raise FileNotFoundError(f"subject {directory.name}: missing {paths['truth'].name}")
    return Subject(directory.name, modalities, truth)


def save_subject(subject: Subject, root: str | Path) -> Path:
    directory = Path(root) / subject.id
    paths = subject_paths(directory)
    for m in MODALITIES:
        save_volume(subject.modalities[m], paths[m])
    if subject.truth is not None:
        save_volume(subject.truth, paths["truth"])
    return directory


def discover_subjects(root: str | Path) -> list[Path]:
    """Subject directories under ``root`` that hold all four modality files."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"data root {root} does not exist")
    found = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        paths = subject_paths(d)
        if all(paths[m].is_file() for m in MODALITIES):
            found.append(d)
    return found


def split_subjects(subjects: Sequence, train_fraction: float, seed: int = 0) -> tuple[list, list]:
    """Deterministic shuffled split with ``round(n * train_fraction)`` training
    subjects (half rounds up), kept within ``[1, n - 1]``."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    n = len(subjects)
    if n < 2:
        raise ValueError("need at least 2 subjects to split")
    n_train = min(max(math.floor(n * train_fraction + 0.5), 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    train = [subjects[i] for i in order[:n_train]]
    hold = [subjects[i] for i in order[n_train:]]
    return train, hold


# --------------------------------------------------------------------------
# patch sampling
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplingPlan:
    ratios: tuple[float, float, float] = (0.01, 0.29, 0.70)
    patches_per_subject: int = 70
    seed: int = 0

    def __post_init__(self):
        r = tuple(float(x) for x in self.ratios)
        if len(r) != 3 or min(r) < 0 or not math.isclose(sum(r), 1.0, abs_tol=1e-9):
            raise ValueError(f"ratios must be three nonnegative values summing to 1, got {self.ratios}")
        if self.patches_per_subject < 1:
            raise ValueError("patches_per_subject must be >= 1")
        object.__setattr__(self, "ratios", r)

    def class_counts(self) -> dict[str, int]:
        return dict(zip(CLASSES, largest_remainder(self.ratios, self.patches_per_subject)))


def largest_remainder(ratios: Sequence[float], total: int) -> list[int]:
    """Integer counts summing to ``total``; leftover units go to the largest
    fractional remainders (earlier classes win ties)."""
    quotas = [r * total for r in ratios]
    counts = [math.floor(q + 1e-9) for q in quotas]
    remainders = [q - c for q, c in zip(quotas, counts)]
    for i in sorted(range(len(ratios)), key=lambda k: (-remainders[k], k))[: total - sum(counts)]:
        counts[i] += 1
    return counts


@dataclass(frozen=True, eq=False)
class PatchSample:
    """One training patch.

    ``center`` is the voxel drawn for the patch's class; it is the geometric
    centre ``corner + 16`` unless the patch was shifted to fit the volume, and
    ``class_tag`` always describes it.
    """

    channels: np.ndarray
    target: np.ndarray
    corner: tuple[int, int, int]
    subject_id: str
    class_tag: str
    center: tuple[int, int, int]
    flipped: bool = False


def classify_voxels(brain: np.ndarray, target: np.ndarray) -> np.ndarray:
    """0 = background, 1 = normal brain, 2 = tumour, per voxel."""
    cls = np.where(brain.astype(bool), 1, 0).astype(np.int8)
    cls[brain.astype(bool) & target.astype(bool)] = 2
    return cls


def subject_rng(seed: int, subject_id: str) -> np.random.Generator:
    salt = int.from_bytes(hashlib.sha256(subject_id.encode()).digest()[:8], "little")
    return np.random.default_rng([seed, salt])


def clamp_corner(center, shape, side: int = PATCH_SIDE) -> tuple[int, int, int]:
    return tuple(int(min(max(c - side // 2, 0), n - side)) for c, n in zip(center, shape))


def sample_patches(
    subject: Subject,
    target_mask: Volume,
    plan: SamplingPlan,
    extra_channels: Sequence[Volume] = (),
    redistribute_empty: bool = False,
    epoch: int = 0,
) -> list[PatchSample]:
    """Draw ``plan.patches_per_subject`` 32^3 patches stratified by the class of
    their centre voxel.

    Channels are the four modalities followed by ``extra_channels`` (prior
    masks). Each subject gets its own random stream salted with its id, and
    ``epoch`` gives a fresh draw for per-epoch resampling.
    """
    check_geometry(subject.reference, target_mask, *extra_channels)
    shape = subject.reference.shape
    if min(shape) < PATCH_SIDE:
        raise ValueError(f"subject {subject.id}: volume {shape} is smaller than a {PATCH_SIDE}^3 patch")

    cls = classify_voxels(subject.brain_mask.data, target_mask.data)
    regions = [np.flatnonzero(cls.ravel() == k) for k in range(3)]
    counts = plan.class_counts()
    for k, name in enumerate(CLASSES):
        if counts[name] > 0 and regions[k].size == 0:
            if not redistribute_empty or name == "tumor" or regions[2].size == 0:
                raise EmptyClassError(
                    f"subject {subject.id}: no eligible {name} voxels for {counts[name]} requested patches"
                )
            counts["tumor"] += counts[name]
            counts[name] = 0

    stack = np.stack([v.data for v in subject.channel_volumes()] + [v.data for v in extra_channels])
    stack = stack.astype(np.float32, copy=False)
    target = target_mask.data
    rng = subject_rng(plan.seed + epoch, subject.id)

    samples = []
    for k, name in enumerate(CLASSES):
        if counts[name] == 0:
            continue
        picks = rng.choice(regions[k], size=counts[name], replace=True)
        for flat in picks:
            center = tuple(int(i) for i in np.unravel_index(flat, shape))
            x, y, z = corner = clamp_corner(center, shape)
            sl = (slice(x, x + PATCH_SIDE), slice(y, y + PATCH_SIDE), slice(z, z + PATCH_SIDE))
            samples.append(
                PatchSample(
                    channels=stack[(slice(None),) + sl].copy(),
                    target=target[sl].astype(np.uint8),
                    corner=corner,
                    subject_id=subject.id,
                    class_tag=name,
                    center=center,
                )
            )
    return samples


def flip_sample(s: PatchSample) -> PatchSample:
    return replace(
        s,
        channels=np.ascontiguousarray(s.channels[:, ::-1]),
        target=np.ascontiguousarray(s.target[::-1]),
        flipped=not s.flipped,
    )


def augment_flip(samples: Sequence[PatchSample]) -> list[PatchSample]:
    """Originals followed by their sagittal (axis 0) mirror images."""
    samples = list(samples)
    return samples + [flip_sample(s) for s in samples]


# --------------------------------------------------------------------------
# patch cache
# --------------------------------------------------------------------------

def save_patch_cache(samples: Sequence[PatchSample], path: str | Path) -> Path:
    """Single-file archive: magic line, length-prefixed JSON index, npz arrays."""
    samples = list(samples)
    if not samples:
        raise ValueError("refusing to write an empty patch cache")
    index = {
        "version": 1,
        "records": [
            {
                "subject_id": s.subject_id,
                "corner": list(s.corner),
                "center": list(s.center),
                "class_tag": s.class_tag,
                "flipped": s.flipped,
            }
            for s in samples
        ],
    }
    header = json.dumps(index, sort_keys=True).encode()
    buf = io.BytesIO()
    np.savez(
        buf,
        channels=np.stack([s.channels for s in samples]),
        targets=np.stack([s.target for s in samples]),
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(PATCH_CACHE_MAGIC + b"\n")
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(buf.getvalue())
    return path


def load_patch_cache(path: str | Path) -> list[PatchSample]:
    with open(path, "rb") as f:
        magic = f.readline().rstrip(b"\n")
        if magic != PATCH_CACHE_MAGIC:
            raise ValueError(f"{path}: not a patch cache (magic {magic[:16]!r})")
        (n,) = struct.unpack("<Q", f.read(8))
        index = json.loads(f.read(n))
        arrays = np.load(io.BytesIO(f.read()))
        channels, targets = arrays["channels"], arrays["targets"]
    records = index["records"]
    if len(records) != len(channels):
        raise ValueError(f"{path}: index has {len(records)} records but {len(channels)} patches")
    return [
        PatchSample(
            channels=channels[i],
            target=targets[i],
            corner=tuple(r["corner"]),
            subject_id=r["subject_id"],
            class_tag=r["class_tag"],
            center=tuple(r["center"]),
            flipped=r["flipped"],
        )
        for i, r in enumerate(records)
    ]


# --------------------------------------------------------------------------
# synthetic phantoms
# --------------------------------------------------------------------------

TISSUES = ("normal", "edema", "necrosis", "enhancing")

# mean intensity per tissue, in MODALITIES order (T1, T1Post, T2, FLAIR)
DEFAULT_INTENSITY = {
    "normal": (50.0, 50.0, 40.0, 40.0),
    "edema": (45.0, 45.0, 70.0, 85.0),
    "necrosis": (35.0, 20.0, 75.0, 60.0),
    "enhancing": (45.0, 90.0, 55.0, 60.0),
}
DEFAULT_SIGMA = 2.0


def _default_table():
    return {t: tuple((m, DEFAULT_SIGMA) for m in means) for t, means in DEFAULT_INTENSITY.items()}


@dataclass(frozen=True)
class PhantomSpec:
    """Concentric spherical tumour inside an ellipsoidal brain.

    ``intensity`` maps tissue -> per-modality ``(mean, sigma)``. ``center`` is
    in mm; ``None`` means the middle of the volume.
    """

    volume_dim: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    edema_radius: float = 16.0
    core_radius: float = 9.0
    enhancing_rim_thickness: float = 3.0
    center: tuple[float, float, float] | None = None
    brain_fraction: float = 0.46
    intensity: dict = field(default_factory=_default_table)
    seed: int = 0
    subject_id: str = "phantom_000"

    def __post_init__(self):
        if not (self.edema_radius > 0 and self.core_radius > 0 and self.enhancing_rim_thickness > 0):
            raise ValueError("phantom radii must be positive")
        if not self.core_radius < self.edema_radius:
            raise ValueError("core_radius must be smaller than edema_radius")
        if not self.enhancing_rim_thickness < self.core_radius:
            raise ValueError("enhancing rim must be thinner than core_radius")
        for t in TISSUES:
            if t not in self.intensity or len(self.intensity[t]) != len(MODALITIES):
                raise ValueError(f"intensity table needs {len(MODALITIES)} (mean, sigma) entries for {t}")

    @property
    def extent_mm(self) -> np.ndarray:
        return np.asarray(self.volume_dim) * np.asarray(self.spacing)

    @property
    def center_mm(self) -> np.ndarray:
        return self.extent_mm / 2 if self.center is None else np.asarray(self.center, dtype=float)


def voxel_centres(shape, spacing, origin=(0.0, 0.0, 0.0)) -> list[np.ndarray]:
    return [o + (np.arange(n) + 0.5) * s for n, s, o in zip(shape, spacing, origin)]


def phantom_truth(spec: PhantomSpec) -> np.ndarray:
    """BraTS labelmap of the phantom tumour: label 1 inside ``core - rim``,
    label 4 out to ``core_radius``, label 2 out to ``edema_radius``."""
    xs, ys, zs = voxel_centres(spec.volume_dim, spec.spacing)
    c = spec.center_mm
    r = np.sqrt((xs[:, None, None] - c[0]) ** 2 + (ys[None, :, None] - c[1]) ** 2 + (zs[None, None, :] - c[2]) ** 2)
    labels = np.zeros(spec.volume_dim, dtype=np.uint8)
    labels[r <= spec.edema_radius] = 2
    labels[r <= spec.core_radius] = 4
    labels[r <= spec.core_radius - spec.enhancing_rim_thickness] = 1
    return labels


def phantom_brain(spec: PhantomSpec) -> np.ndarray:
    xs, ys, zs = voxel_centres(spec.volume_dim, spec.spacing)
    half = spec.extent_mm / 2
    semi = half * 2 * spec.brain_fraction
    q = (
        ((xs[:, None, None] - half[0]) / semi[0]) ** 2
        + ((ys[None, :, None] - half[1]) / semi[1]) ** 2
        + ((zs[None, None, :] - half[2]) / semi[2]) ** 2
    )
    return q <= 1.0


def generate_phantom(spec: PhantomSpec) -> Subject:
    """Deterministic four-modality phantom subject with its truth labelmap."""
    c = spec.center_mm
    extent = spec.extent_mm
    if np.any(c - spec.edema_radius < 0) or np.any(c + spec.edema_radius > extent):
        raise ValueError("phantom tumour does not fit inside the volume")
    labels = phantom_truth(spec)
    brain = phantom_brain(spec) | (labels > 0)
    if brain.all():
        raise ValueError("phantom brain fills the whole volume; no background left")

    tissue_of = {0: "normal", 2: "edema", 1: "necrosis", 4: "enhancing"}
    rng = np.random.default_rng(spec.seed)
    modalities = {}
    for m_idx, m in enumerate(MODALITIES):
        img = np.zeros(spec.volume_dim, dtype=np.float32)
        for lab, tissue in tissue_of.items():
            region = brain & (labels == lab)
            mean, sigma = spec.intensity[tissue][m_idx]
            img[region] = mean
        noise_sigma = np.zeros(spec.volume_dim, dtype=np.float32)
        for lab, tissue in tissue_of.items():
            noise_sigma[brain & (labels == lab)] = spec.intensity[tissue][m_idx][1]
        img += (rng.standard_normal(spec.volume_dim) * noise_sigma).astype(np.float32)
        img[brain] = np.maximum(img[brain], 1.0)
        img[~brain] = 0.0
        modalities[m] = Volume(img, spec.spacing, (0.0, 0.0, 0.0), "intensity")
    truth = Volume(labels, spec.spacing, (0.0, 0.0, 0.0), "label")
    return Subject(spec.subject_id, modalities, truth)


def random_phantom_spec(index: int, seed: int = 0, **overrides) -> PhantomSpec:
    """Phantom with jittered tumour centre and radii, for building cohorts."""
    rng = np.random.default_rng([seed, index])
    dim = tuple(overrides.pop("volume_dim", (64, 64, 64)))
    spacing = tuple(overrides.pop("spacing", (1.0, 1.0, 1.0)))
    extent = np.asarray(dim) * np.asarray(spacing)
    edema = overrides.pop("edema_radius", float(rng.uniform(0.2, 0.26) * extent.min()))
    core = overrides.pop("core_radius", float(edema * rng.uniform(0.5, 0.65)))
    rim = overrides.pop("enhancing_rim_thickness", float(min(3.0, core / 3)))
    jitter = extent.min() * 0.06
    center = overrides.pop("center", tuple(float(v) for v in extent / 2 + rng.uniform(-jitter, jitter, 3)))
    return PhantomSpec(
        volume_dim=dim,
        spacing=spacing,
        edema_radius=edema,
        core_radius=core,
        enhancing_rim_thickness=rim,
        center=center,
        seed=int(rng.integers(0, 2**31 - 1)),
        subject_id=overrides.pop("subject_id", f"phantom_{index:03d}"),
        **overrides,
    )
