"""``cascade-seg`` command line: phantom | train | predict | evaluate.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import cascade as cas
from .config import ConfigError, RunConfig, cascade_manifest, load_config
from .data_pipeline import (
    discover_subjects,
    generate_phantom,
    load_subject,
    random_phantom_spec,
    save_subject,
    split_subjects,
    subject_paths,
)
from .evaluation import cohort_report, score_subject
from .network import file_checksum
from .volume_core import MODALITIES, load_volume, normalize_subject, save_volume

log = logging.getLogger("cascade_seg")


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config, getattr(args, "work_dir", None))
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    torch.set_num_threads(cfg.jobs)
    return cfg


# --------------------------------------------------------------------------
# phantom
# --------------------------------------------------------------------------

def cmd_phantom(args) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create {out}: {e}") from None
    dim = tuple(args.dim) if args.dim else (64, 64, 64)
    overrides = {"volume_dim": dim}
    for key in ("edema_radius", "core_radius", "enhancing_rim_thickness"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    for i in range(args.count):
        spec = random_phantom_spec(i, seed=args.seed or 0, **dict(overrides))
        subject = generate_phantom(spec)
        save_subject(subject, out)
        labels = subject.truth.data
        counts = {lab: int(np.count_nonzero(labels == lab)) for lab in (1, 2, 4)}
        print(
            f"{subject.id}: dim={'x'.join(map(str, dim))} "
            f"necrotic={counts[1]} edema={counts[2]} enhancing={counts[4]} "
            f"wt={sum(counts.values())} voxels"
        )
    return 0


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

def _checkpoint_paths(cfg: RunConfig) -> dict[str, Path]:
    return {s.name: Path(s.model_path) for s in cfg.cascade.stages}


def _load_cohort(cfg: RunConfig):
    if cfg.data_root is None:
        raise ConfigError("data_root is not set")
    try:
        dirs = discover_subjects(cfg.data_root)
    except FileNotFoundError as e:
        raise ConfigError(str(e)) from None
    if not dirs:
        raise ConfigError(f"no subjects found under {cfg.data_root}")
    subjects = [normalize_subject(load_subject(d, require_truth=True)) for d in dirs]
    if len(subjects) >= 2:
        return split_subjects(subjects, cfg.train_fraction, cfg.seed)
    return subjects, []


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    stages = list(cas.STAGES) if args.all else [args.stage]
    paths = _checkpoint_paths(cfg)
    if not args.all:
        missing = [p for p in cas.PREREQUISITES[args.stage] if not paths[p].is_file()]
        if missing:
            print(f"error: stage {args.stage} needs checkpoint(s) for {', '.join(missing)} "
                  f"(expected {paths[missing[0]]})", file=sys.stderr)
            return 2
    train, val = _load_cohort(cfg)
    log.info("training on %d subjects, validating on %d", len(train), len(val))

    models = {}
    for name in stages:
        for p in cas.PREREQUISITES[name]:
            if p not in models:
                models.update(cas.load_stage_models(cfg.cascade, [p]))
        out_dir = paths[name].parent
        res = cas.train_single_stage(
            name,
            train,
            cfg.cascade,
            cfg.train,
            cfg.sampling,
            models,
            val_subjects=val,
            unet=cfg.unet,
            resample_each_epoch=cfg.resample_each_epoch,
            out_dir=out_dir,
        )
        if res.checkpoint != paths[name]:
            res.checkpoint.replace(paths[name])
        models[name] = cas.TorchPatchModel(res.model)
        print(f"{name}: {len(res.history)} epochs, best val loss {res.best_val_loss:.5f} "
              f"(epoch {res.best_epoch}) -> {paths[name]}")
    manifest = cfg.work_dir / "cascade_manifest.txt"
    manifest.parent.mkdir(parents=True, exist_ok=True)
    manifest.write_text(cascade_manifest(cfg.cascade))
    return 0


# --------------------------------------------------------------------------
# predict
# --------------------------------------------------------------------------

def load_models_for_predict(cfg: RunConfig):
    """Stage models for ``predict``; separated out so callers can substitute it."""
    return cas.load_stage_models(cfg.cascade)


def cmd_predict(args) -> int:
    cfg = _load_run_config(args)
    paths = _checkpoint_paths(cfg)
    subject_dir = Path(args.subject)
    if not subject_dir.is_dir():
        raise ConfigError(f"subject directory {subject_dir} not found")
    models = load_models_for_predict(cfg)
    raw = load_subject(subject_dir)
    subject = normalize_subject(raw)
    result = cas.run_cascade(subject, cfg.cascade, models)

    out = Path(args.out) / subject.id
    out.mkdir(parents=True, exist_ok=True)
    sid = subject.id
    save_volume(result.labels, out / f"{sid}_seg.nii.gz")
    for region, mask in result.masks.as_dict().items():
        save_volume(mask, out / f"{sid}_{region}.nii.gz")
    for name, st in result.stages.items():
        save_volume(st.probability, out / f"{sid}_prob_{name}.nii.gz")
        save_volume(st.mask, out / f"{sid}_mask_{name}.nii.gz")

    inputs = subject_paths(subject_dir)
    sidecar = {
        "subject_id": sid,
        "inputs": {m: {"file": inputs[m].name, "sha256": file_checksum(inputs[m])} for m in MODALITIES},
        "stages": {
            s.name: {
                "model": str(paths[s.name]),
                "model_sha256": file_checksum(paths[s.name]) if paths[s.name].is_file() else None,
                "in_channels": result.stages[s.name].in_channels,
                "spacing": list(s.spacing),
                "threshold": s.threshold,
                "grid_plan": s.grid_plan.to_dict(),
            }
            for s in cfg.cascade.stages
        },
        "tc_convention": cfg.cascade.tc_convention,
    }
    (out / f"{sid}_prediction.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    labels = result.labels.data
    print(f"{sid}: wt={int(np.count_nonzero(labels))} tc={int(np.count_nonzero(np.isin(labels, (1, 4))))} "
          f"et={int(np.count_nonzero(labels == 4))} voxels -> {out}")
    return 0


# --------------------------------------------------------------------------
# evaluate
# --------------------------------------------------------------------------

def _labelmaps(root: Path) -> dict[str, Path]:
    found = {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        f = d / f"{d.name}_seg.nii.gz"
        if f.is_file():
            found[d.name] = f
    return found


def cmd_evaluate(args) -> int:
    pred_root, truth_root = Path(args.pred), Path(args.truth)
    for r in (pred_root, truth_root):
        if not r.is_dir():
            raise ConfigError(f"directory {r} not found")
    preds, truths = _labelmaps(pred_root), _labelmaps(truth_root)
    if set(preds) != set(truths) or not preds:
        only_p = sorted(set(preds) - set(truths))
        only_t = sorted(set(truths) - set(preds))
        print(f"error: subject ids differ; only in predictions: {only_p}; only in truth: {only_t}", file=sys.stderr)
        return 2
    scores = {
        sid: score_subject(load_volume(preds[sid], kind="label"), load_volume(truths[sid], kind="label"))
        for sid in sorted(preds)
    }
    report_path = Path(args.report)
    plot_dir = None if args.no_plots else (Path(args.plots) if args.plots else report_path.parent / "plots")
    report = cohort_report(scores, report_path, plot_dir)
    for region in ("WT", "ET", "TC"):
        print(f"{region}: mean dice {report.mean(region, 'dice'):.4f} "
              f"sensitivity {report.mean(region, 'sensitivity'):.4f} "
              f"specificity {report.mean(region, 'specificity'):.4f}")
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cascade-seg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value run configuration")
        p.add_argument("--seed", type=int, help="override the configured seed")

    p = sub.add_parser("phantom", help="write synthetic phantom subjects")
    common(p)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, nargs=3, metavar=("X", "Y", "Z"))
    p.add_argument("--edema-radius", dest="edema_radius", type=float)
    p.add_argument("--core-radius", dest="core_radius", type=float)
    p.add_argument("--rim", dest="enhancing_rim_thickness", type=float)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train one cascade stage (or --all)")
    common(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--stage", choices=cas.STAGES)
    g.add_argument("--all", action="store_true")
    p.add_argument("--work-dir", dest="work_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="run the cascade on one subject directory")
    common(p)
    p.add_argument("--subject", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--work-dir", dest="work_dir")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predicted labelmaps against truth")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--plots", help="box-plot directory (default: <report dir>/plots)")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        log.debug("command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
