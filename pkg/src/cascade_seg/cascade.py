"""The six-network tree: coarse WT, refined WT, WT-conditioned ET/TC, and
seven-channel repair networks, composed into a BraTS labelmap."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data_pipeline import SamplingPlan, augment_flip, sample_patches
from .inference import GridPlan, PatchModel, TorchPatchModel, as_patch_model, binarize, default_grid_plan, predict_volume
from .network import TrainConfig, TrainResult, UNetSpec, build_unet, load_model, save_model, train_stage, write_history
from .volume_core import (
    MODALITIES,
    GeometryError,
    Subject,
    Volume,
    check_geometry,
    resample_to_spacing,
    upsample_nn_labels,
)

log = logging.getLogger(__name__)

STAGES = ("wt_lowres", "wt_highres", "et", "tc", "post_et", "post_tc")

# prior-mask name -> stage producing it
PRIOR_SOURCE = {"wt_lowres": "wt_lowres", "wt": "wt_highres", "et": "et", "tc": "tc"}
CANONICAL_PRIORS = {
    "wt_lowres": (),
    "wt_highres": ("wt_lowres",),
    "et": ("wt",),
    "tc": ("wt",),
    "post_et": ("wt", "et", "tc"),
    "post_tc": ("wt", "et", "tc"),
}
EXPECTED_CHANNELS = {name: len(MODALITIES) + len(p) for name, p in CANONICAL_PRIORS.items()}
STAGE_TARGET = {"wt_lowres": "wt", "wt_highres": "wt", "et": "et", "tc": "tc", "post_et": "et", "post_tc": "tc"}
# stages a given stage's checkpoint depends on
PREREQUISITES = {
    "wt_lowres": (),
    "wt_highres": ("wt_lowres",),
    "et": ("wt_lowres", "wt_highres"),
    "tc": ("wt_lowres", "wt_highres"),
    "post_et": ("wt_lowres", "wt_highres", "et", "tc"),
    "post_tc": ("wt_lowres", "wt_highres", "et", "tc"),
}
TC_CONVENTIONS = ("brats", "core_only")


class CascadeConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StageConfig:
    name: str
    model_path: Path | None = None
    modalities: tuple[str, ...] = MODALITIES
    priors: tuple[str, ...] = ()
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    threshold: float = 0.5
    grid_plan: GridPlan = field(default_factory=default_grid_plan)

    @property
    def in_channels(self) -> int:
        return len(self.modalities) + len(self.priors)


@dataclass(frozen=True)
class CascadeConfig:
    stages: tuple[StageConfig, ...]
    tc_convention: str = "brats"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        names = [s.name for s in self.stages]
        if tuple(names) != STAGES:
            raise CascadeConfigError(f"cascade stages must be {list(STAGES)} in order, got {names}")
        if self.tc_convention not in TC_CONVENTIONS:
            raise CascadeConfigError(f"tc_convention must be one of {TC_CONVENTIONS}")
        seen: set[str] = set()
        for s in self.stages:
            if s.in_channels != EXPECTED_CHANNELS[s.name]:
                raise CascadeConfigError(
                    f"stage {s.name}: {s.in_channels} input channels, expected {EXPECTED_CHANNELS[s.name]}"
                )
            if tuple(s.modalities) != MODALITIES:
                raise CascadeConfigError(f"stage {s.name}: modalities must be {list(MODALITIES)}")
            if tuple(s.priors) != CANONICAL_PRIORS[s.name]:
                raise CascadeConfigError(
                    f"stage {s.name}: priors {list(s.priors)} differ from wiring {list(CANONICAL_PRIORS[s.name])}"
                )
            for p in s.priors:
                if PRIOR_SOURCE[p] not in seen:
                    raise CascadeConfigError(f"stage {s.name}: prior {p} is produced by a later stage")
            if not 0 < s.threshold < 1:
                raise CascadeConfigError(f"stage {s.name}: threshold must lie in (0, 1)")
            if not all(v > 0 for v in s.spacing):
                raise CascadeConfigError(f"stage {s.name}: spacing must be positive")
            seen.add(s.name)

    def stage(self, name: str) -> StageConfig:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)


def default_cascade_config(model_dir: str | Path | None = None, lowres_spacing: float = 2.0) -> CascadeConfig:
    stages = []
    for name in STAGES:
        spacing = (lowres_spacing,) * 3 if name == "wt_lowres" else (1.0, 1.0, 1.0)
        path = Path(model_dir) / f"{name}.cseg" if model_dir is not None else None
        stages.append(StageConfig(name, path, MODALITIES, CANONICAL_PRIORS[name], spacing))
    return CascadeConfig(tuple(stages))


# --------------------------------------------------------------------------
# region masks
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RegionMasks:
    wt: Volume
    tc: Volume
    et: Volume

    def __post_init__(self):
        for v in (self.wt, self.tc, self.et):
            if v.kind != "binary":
                raise ValueError("region masks must be binary volumes")
        check_geometry(self.wt, self.tc, self.et)

    def as_dict(self) -> dict[str, Volume]:
        return {"wt": self.wt, "tc": self.tc, "et": self.et}


def derive_training_targets(truth: Volume, tc_convention: str = "brats") -> RegionMasks:
    """WT = labels {1,2,4}, TC = {1,4} (or {1} for ``core_only``), ET = {4}."""
    if truth.kind != "label":
        raise ValueError("expected a label volume")
    labels = truth.data
    bad = set(np.unique(labels).tolist()) - {0, 1, 2, 4}
    if bad:
        raise ValueError(f"unexpected label values {sorted(bad)}")
    tc_labels = (1, 4) if tc_convention == "brats" else (1,)
    return RegionMasks(
        wt=truth.with_data(np.isin(labels, (1, 2, 4)), kind="binary"),
        tc=truth.with_data(np.isin(labels, tc_labels), kind="binary"),
        et=truth.with_data(labels == 4, kind="binary"),
    )


def compose_labelmap(masks: RegionMasks) -> Volume:
    """BraTS labelmap after repairing the ET <= TC <= WT hierarchy.

    ET outside WT is dropped, ET forces TC, and TC is clipped to WT.
    """
    wt = masks.wt.data.astype(bool)
    et = masks.et.data.astype(bool) & wt
    tc = (masks.tc.data.astype(bool) | et) & wt
    labels = np.zeros(wt.shape, dtype=np.uint8)
    labels[wt & ~tc] = 2
    labels[tc & ~et] = 1
    labels[et] = 4
    return masks.wt.with_data(labels, kind="label")


# --------------------------------------------------------------------------
# stage execution
# --------------------------------------------------------------------------

def working_grid(subject: Subject, spacing) -> Subject:
    """``subject`` resampled to ``spacing`` (intensities mean-pooled)."""
    ref = subject.reference
    if np.allclose(ref.spacing, spacing, rtol=0, atol=1e-9):
        return subject
    mods = {m: resample_to_spacing(v, spacing, "mean_pool") for m, v in subject.modalities.items()}
    truth = resample_to_spacing(subject.truth, spacing, "nearest") if subject.truth is not None else None
    return Subject(subject.id, mods, truth)


def to_grid(mask: Volume, grid: Volume) -> Volume:
    if mask.same_geometry(grid):
        return mask
    if np.all(np.asarray(mask.spacing) <= np.asarray(grid.spacing)):
        return resample_to_spacing(mask, grid.spacing, "nearest")
    return upsample_nn_labels(mask, grid)


def stage_channels(stage: StageConfig, work: Subject, priors: Mapping[str, Volume]) -> list[Volume]:
    """Stage inputs on the working grid: modalities then prior masks."""
    ref = work.reference
    missing = [p for p in stage.priors if p not in priors]
    if missing:
        raise CascadeConfigError(f"stage {stage.name}: missing prior masks {missing}")
    chans = [work.modalities[m] for m in stage.modalities]
    chans += [to_grid(priors[p], ref) for p in stage.priors]
    if len(chans) != EXPECTED_CHANNELS[stage.name]:
        raise CascadeConfigError(f"stage {stage.name}: built {len(chans)} channels, expected {EXPECTED_CHANNELS[stage.name]}")
    return chans


@dataclass
class StageOutput:
    probability: Volume
    mask: Volume
    in_channels: int


def run_stage(stage: StageConfig, model, subject: Subject, priors: Mapping[str, Volume], batch_size: int = 8) -> StageOutput:
    """Predict one stage; the returned mask is on ``subject``'s native grid."""
    model = as_patch_model(model)
    work = working_grid(subject, stage.spacing)
    chans = stage_channels(stage, work, priors)
    if model.in_channels != len(chans):
        raise CascadeConfigError(f"stage {stage.name}: model takes {model.in_channels} channels, wiring gives {len(chans)}")
    prob = predict_volume(model, chans, stage.grid_plan, batch_size)
    mask = to_grid(binarize(prob, stage.threshold), subject.reference)
    if not mask.same_geometry(subject.reference):
        raise GeometryError(f"stage {stage.name}: output mask drifted off the subject grid")
    return StageOutput(prob, mask, len(chans))


def run_stages(
    subject: Subject,
    cfg: CascadeConfig,
    models: Mapping[str, object],
    names: Sequence[str],
    priors: Mapping[str, Volume] | None = None,
    batch_size: int = 8,
) -> dict[str, StageOutput]:
    """Run ``names`` in order; each stage's mask becomes the prior it produces."""
    priors = dict(priors or {})
    produced = {src: p for p, src in PRIOR_SOURCE.items()}
    outputs = {}
    for name in names:
        out = run_stage(cfg.stage(name), models[name], subject, priors, batch_size)
        outputs[name] = out
        if name in produced:
            priors[produced[name]] = out.mask
    return outputs


@dataclass
class CascadeResult:
    masks: RegionMasks
    labels: Volume
    stages: dict[str, StageOutput]

    def __iter__(self):
        return iter((self.masks, self.labels))

    @property
    def probabilities(self) -> dict[str, Volume]:
        return {k: v.probability for k, v in self.stages.items()}

    @property
    def stage_masks(self) -> dict[str, Volume]:
        return {k: v.mask for k, v in self.stages.items()}


def run_cascade(subject: Subject, cfg: CascadeConfig, models: Mapping[str, object] | None = None, batch_size: int = 8) -> CascadeResult:
    """Full tree on a normalised subject.

    ``models`` maps stage name to a U-Net or :class:`PatchModel`; when omitted
    the checkpoints named in ``cfg`` are loaded.
    """
    if models is None:
        models = load_stage_models(cfg)
    missing = [s for s in STAGES if s not in models]
    if missing:
        raise CascadeConfigError(f"missing stage models {missing}")
    outputs = run_stages(subject, cfg, models, STAGES, batch_size=batch_size)
    masks = RegionMasks(wt=outputs["wt_highres"].mask, tc=outputs["post_tc"].mask, et=outputs["post_et"].mask)
    labels = compose_labelmap(masks)
    final = derive_training_targets(labels)
    return CascadeResult(final, labels, outputs)


def load_stage_models(cfg: CascadeConfig, names: Sequence[str] = STAGES) -> dict[str, PatchModel]:
    models = {}
    for name in names:
        stage = cfg.stage(name)
        if stage.model_path is None or not Path(stage.model_path).is_file():
            raise FileNotFoundError(f"checkpoint for stage {name} not found: {stage.model_path}")
        model, _ = load_model(stage.model_path)
        if model.spec.in_channels != stage.in_channels:
            raise CascadeConfigError(
                f"checkpoint {stage.model_path} takes {model.spec.in_channels} channels; stage {name} needs {stage.in_channels}"
            )
        models[name] = TorchPatchModel(model)
    return models


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def training_priors(
    stage_name: str, subject: Subject, cfg: CascadeConfig, models: Mapping[str, object], batch_size: int = 8
) -> dict[str, Volume]:
    """Conditioning masks for training ``stage_name`` on ``subject``.

    ET and TC nets see the ground-truth WT; the refined-WT net and the repair
    nets see masks predicted by earlier trained stages.
    """
    if subject.truth is None:
        raise ValueError(f"subject {subject.id} has no truth labelmap")
    if stage_name == "wt_lowres":
        return {}
    if stage_name in ("et", "tc"):
        return {"wt": derive_training_targets(subject.truth, cfg.tc_convention).wt}
    upstream = {"wt_highres": ("wt_lowres",), "post_et": ("wt_lowres", "wt_highres", "et", "tc")}
    upstream["post_tc"] = upstream["post_et"]
    outputs = run_stages(subject, cfg, models, upstream[stage_name], batch_size=batch_size)
    priors = {}
    for p, src in PRIOR_SOURCE.items():
        if src in outputs:
            priors[p] = outputs[src].mask
    return priors


def stage_patches(
    stage: StageConfig,
    subject: Subject,
    priors: Mapping[str, Volume],
    plan: SamplingPlan,
    tc_convention: str = "brats",
    epoch: int = 0,
    augment: bool = True,
):
    work = working_grid(subject, stage.spacing)
    region = derive_training_targets(work.truth, tc_convention).as_dict()[STAGE_TARGET[stage.name]]
    chans = stage_channels(stage, work, priors)
    patches = sample_patches(work, region, plan, extra_channels=chans[len(stage.modalities) :], redistribute_empty=True, epoch=epoch)
    return augment_flip(patches) if augment else patches


def train_single_stage(
    stage_name: str,
    subjects: Sequence[Subject],
    cfg: CascadeConfig,
    train_cfg: TrainConfig,
    plan: SamplingPlan,
    models: Mapping[str, object],
    val_subjects: Sequence[Subject] = (),
    unet: UNetSpec | None = None,
    resample_each_epoch: bool = False,
    out_dir: str | Path | None = None,
    meta: Mapping | None = None,
) -> TrainResult:
    """Train one stage given the already-trained upstream ``models``."""
    missing = [p for p in PREREQUISITES[stage_name] if p not in models]
    if missing:
        raise CascadeConfigError(f"stage {stage_name} needs trained {', '.join(missing)} first")
    stage = cfg.stage(stage_name)
    base = unet or UNetSpec()
    spec = replace(base, in_channels=stage.in_channels)

    priors = {s.id: training_priors(stage_name, s, cfg, models) for s in subjects}
    val_priors = {s.id: training_priors(stage_name, s, cfg, models) for s in val_subjects}

    def train_stream(epoch: int):
        ep = epoch if resample_each_epoch else 0
        return [p for s in subjects for p in stage_patches(stage, s, priors[s.id], plan, cfg.tc_convention, ep)]

    fixed = train_stream(0)
    train = train_stream if resample_each_epoch else fixed
    if val_subjects:
        val_plan = replace(plan, seed=plan.seed + 7919)
        val = [p for s in val_subjects for p in stage_patches(stage, s, val_priors[s.id], val_plan, cfg.tc_convention, augment=False)]
    else:
        val = fixed

    model = build_unet(spec, seed=train_cfg.seed)
    result = train_stage(model, train, val, replace(train_cfg, checkpoint_dir=None), name=stage_name)

    if out_dir is not None:
        out_dir = Path(out_dir)
        info = {
            "stage": stage_name,
            "spacing": list(stage.spacing),
            "learning_rate": train_cfg.learning_rate,
            "best_epoch": result.best_epoch,
            "epochs_run": len(result.history),
            "tc_convention": cfg.tc_convention,
            **(meta or {}),
        }
        result.checkpoint = save_model(result.model, out_dir / f"{stage_name}.cseg", meta=info)
        write_history(result.history, out_dir / f"{stage_name}_history.csv")
    return result


def train_cascade(
    subjects: Sequence[Subject],
    cfg: CascadeConfig,
    train_cfg: TrainConfig,
    plan: SamplingPlan | None = None,
    val_subjects: Sequence[Subject] = (),
    unet: UNetSpec | None = None,
    stages: Sequence[str] = STAGES,
    out_dir: str | Path | None = None,
    resample_each_epoch: bool = False,
) -> dict[str, TrainResult]:
    """Train ``stages`` in dependency order on normalised subjects with truth."""
    for s in list(subjects) + list(val_subjects):
        if s.truth is None:
            raise ValueError(f"subject {s.id} has no truth labelmap")
    order = [s for s in STAGES if s in stages]
    if list(stages) != order:
        raise CascadeConfigError(f"stages must follow dependency order {list(STAGES)}")
    plan = plan or SamplingPlan(seed=train_cfg.seed)
    models: dict[str, object] = {}
    results = {}
    for name in order:
        log.info("training stage %s", name)
        res = train_single_stage(
            name, subjects, cfg, train_cfg, plan, models, val_subjects, unet, resample_each_epoch, out_dir
        )
        results[name] = res
        models[name] = TorchPatchModel(res.model)
    return results
