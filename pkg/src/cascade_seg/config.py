"""Flat ``key = value`` run configuration.

Keys are grouped by prefix: top-level keys (``data_root``, ``work_dir``,
``seed``, ``jobs``, ``train_fraction``), ``sampling.*``, ``train.*``,
``unet.*`` and ``cascade.*`` (``cascade.tc_convention`` plus
``cascade.<stage>.{model,spacing,threshold,offsets,priors,modalities}``).
Blank lines and ``#`` comments are ignored. Relative paths resolve against
the file's directory.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .cascade import CANONICAL_PRIORS, STAGES, CascadeConfig, CascadeConfigError, StageConfig
from .data_pipeline import SamplingPlan
from .inference import GridPlan, default_grid_plan
from .network import TrainConfig, UNetSpec
from .volume_core import MODALITIES

WORKDIR_ENV = "CASCADE_SEG_WORKDIR"


class ConfigError(ValueError):
    pass


def parse_flat(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key}")
        out[key] = value
    return out


def _float(v: str, key: str) -> float:
    try:
        return float(v)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {v!r}") from None


def _int(v: str, key: str) -> int:
    try:
        return int(v)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {v!r}") from None


def _bool(v: str, key: str) -> bool:
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {v!r}")


def _floats(v: str, key: str, n: int | None = None) -> tuple[float, ...]:
    vals = tuple(_float(x, key) for x in v.replace(",", " ").split())
    if n is not None and len(vals) == 1:
        vals = vals * n
    if n is not None and len(vals) != n:
        raise ConfigError(f"{key}: expected {n} values, got {len(vals)}")
    return vals


def _names(v: str) -> tuple[str, ...]:
    return tuple(x for x in v.replace(",", " ").split() if x and x != "none")


def format_offsets(plan: GridPlan) -> str:
    return " ".join(":".join(str(c) for c in o) for o in plan.offsets)


def parse_offsets(v: str, key: str) -> GridPlan:
    if v.strip() == "default":
        return default_grid_plan()
    try:
        offsets = tuple(tuple(int(c) for c in tok.split(":")) for tok in v.split())
        return GridPlan(offsets)
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from None


@dataclass
class RunConfig:
    data_root: Path | None = None
    work_dir: Path = Path("work")
    seed: int = 0
    jobs: int = field(default_factory=lambda: os.cpu_count() or 1)
    train_fraction: float = 0.9
    sampling: SamplingPlan = field(default_factory=SamplingPlan)
    resample_each_epoch: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)
    unet: UNetSpec = field(default_factory=UNetSpec)
    cascade: CascadeConfig | None = None

    @property
    def model_dir(self) -> Path:
        return self.work_dir / "models"

    def with_seed(self, seed: int) -> RunConfig:
        return replace(
            self,
            seed=seed,
            sampling=replace(self.sampling, seed=seed),
            train=replace(self.train, seed=seed),
        )


def load_config(path: str | Path | None, work_dir_override: str | Path | None = None) -> RunConfig:
    if path is None:
        values, base = {}, Path.cwd()
    else:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        values, base = parse_flat(path.read_text(), str(path)), path.parent
    return build_config(values, base, work_dir_override)


def build_config(values: dict[str, str], base: Path, work_dir_override=None) -> RunConfig:
    values = dict(values)

    def resolve(p: str | Path) -> Path:
        p = Path(p).expanduser()
        return p if p.is_absolute() else (base / p)

    def take(key, default=None):
        return values.pop(key, default)

    seed = _int(take("seed", "0"), "seed")
    data_root = take("data_root")
    configured = take("work_dir")
    if work_dir_override is not None:
        work_dir = Path(work_dir_override)
    elif configured:
        work_dir = resolve(configured)
    elif os.environ.get(WORKDIR_ENV):
        work_dir = Path(os.environ[WORKDIR_ENV])
    else:
        work_dir = resolve("work")
    jobs = _int(take("jobs", str(os.cpu_count() or 1)), "jobs")
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")
    train_fraction = _float(take("train_fraction", "0.9"), "train_fraction")

    try:
        sampling = SamplingPlan(
            ratios=_floats(take("sampling.ratios", "0.01 0.29 0.70"), "sampling.ratios", None),
            patches_per_subject=_int(take("sampling.patches_per_subject", "70"), "sampling.patches_per_subject"),
            seed=_int(take("sampling.seed", str(seed)), "sampling.seed"),
        )
        resample = _bool(take("sampling.resample_each_epoch", "false"), "sampling.resample_each_epoch")
        train = TrainConfig(
            learning_rate=_float(take("train.learning_rate", "1e-6"), "train.learning_rate"),
            max_epochs=_int(take("train.max_epochs", "200"), "train.max_epochs"),
            plateau_patience=_int(take("train.plateau_patience", "10"), "train.plateau_patience"),
            min_delta=_float(take("train.min_delta", "1e-5"), "train.min_delta"),
            batch_size=_int(take("train.batch_size", "16"), "train.batch_size"),
            seed=_int(take("train.seed", str(seed)), "train.seed"),
        )
        unet = UNetSpec(
            depth=_int(take("unet.depth", "4"), "unet.depth"),
            base_width=_int(take("unet.base_width", "32"), "unet.base_width"),
            convs_per_level=_int(take("unet.convs_per_level", "2"), "unet.convs_per_level"),
        )
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from None

    cascade = build_cascade(values, resolve, work_dir / "models")
    leftover = sorted(values)
    if leftover:
        raise ConfigError(f"unknown config keys: {', '.join(leftover)}")
    return RunConfig(
        data_root=resolve(data_root) if data_root else None,
        work_dir=work_dir,
        seed=seed,
        jobs=jobs,
        train_fraction=train_fraction,
        sampling=sampling,
        resample_each_epoch=resample,
        train=train,
        unet=unet,
        cascade=cascade,
    )


def build_cascade(values: dict[str, str], resolve, model_dir: Path) -> CascadeConfig:
    """Pops ``cascade.*`` keys from ``values``; validates wiring."""
    tc_convention = values.pop("cascade.tc_convention", "brats")
    stages = []
    for name in STAGES:
        pre = f"cascade.{name}."
        model = values.pop(pre + "model", None)
        default_spacing = "2" if name == "wt_lowres" else "1"
        stages.append(
            StageConfig(
                name=name,
                model_path=resolve(model) if model else model_dir / f"{name}.cseg",
                modalities=_names(values.pop(pre + "modalities", " ".join(MODALITIES))),
                priors=_names(values.pop(pre + "priors", " ".join(CANONICAL_PRIORS[name]) or "none")),
                spacing=_floats(values.pop(pre + "spacing", default_spacing), pre + "spacing", 3),
                threshold=_float(values.pop(pre + "threshold", "0.5"), pre + "threshold"),
                grid_plan=parse_offsets(values.pop(pre + "offsets", "default"), pre + "offsets"),
            )
        )
    try:
        return CascadeConfig(tuple(stages), tc_convention)
    except CascadeConfigError as e:
        raise ConfigError(str(e)) from None


def cascade_manifest(cfg: CascadeConfig) -> str:
    """The ``cascade.*`` section for ``cfg``; readable back by :func:`load_config`."""
    lines = [f"cascade.tc_convention = {cfg.tc_convention}"]
    for s in cfg.stages:
        pre = f"cascade.{s.name}."
        lines += [
            f"{pre}model = {s.model_path}",
            f"{pre}modalities = {' '.join(s.modalities)}",
            f"{pre}priors = {' '.join(s.priors) or 'none'}",
            f"{pre}spacing = {' '.join(format(x, 'g') for x in s.spacing)}",
            f"{pre}threshold = {s.threshold:g}",
            f"{pre}offsets = {format_offsets(s.grid_plan)}",
        ]
    return "\n".join(lines) + "\n"
