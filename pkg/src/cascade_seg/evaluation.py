"""Per-region confusion counts, Dice / sensitivity / specificity, cohort reports."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cascade import derive_training_targets
from .volume_core import Volume, check_geometry

REGIONS = ("ET", "WT", "TC")
METRICS = ("dice", "sensitivity", "specificity")
REPORT_COLUMNS = ("subject_id", "region", "dice", "sensitivity", "specificity", "tp", "fp", "fn", "tn")
COHORT_ID = "__cohort__"


@dataclass(frozen=True)
class RegionScores:
    region: str
    tp: int
    fp: int
    fn: int
    tn: int
    dice: float
    sensitivity: float
    specificity: float


def metrics_from_counts(tp: int, fp: int, fn: int, tn: int) -> tuple[float, float, float]:
    """Dice, sensitivity, specificity.

    An empty truth region scores Dice and sensitivity 1.0 when the prediction
    is empty too and 0.0 otherwise; specificity with no negatives is 1.0.
    """
    if tp + fn == 0:
        dice = sens = 1.0 if fp == 0 else 0.0
    else:
        dice = 2 * tp / (2 * tp + fp + fn)
        sens = tp / (tp + fn)
    spec = tn / (tn + fp) if tn + fp else 1.0
    return dice, sens, spec


def score_region(pred: Volume, truth: Volume, region: str = "WT") -> RegionScores:
    check_geometry(pred, truth)
    p = np.asarray(pred.data, dtype=bool)
    t = np.asarray(truth.data, dtype=bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(p.size - tp - fp - fn)
    return RegionScores(region, tp, fp, fn, tn, *metrics_from_counts(tp, fp, fn, tn))


def score_subject(pred_labels: Volume, truth_labels: Volume) -> dict[str, RegionScores]:
    pred = derive_training_targets(pred_labels)
    truth = derive_training_targets(truth_labels)
    return {
        "ET": score_region(pred.et, truth.et, "ET"),
        "WT": score_region(pred.wt, truth.wt, "WT"),
        "TC": score_region(pred.tc, truth.tc, "TC"),
    }


def quantiles(values: Sequence[float]) -> dict[str, float]:
    """min, q1, median, q3, max with linear interpolation between order statistics."""
    v = np.asarray(values, dtype=float)
    q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0], method="linear")
    return dict(zip(("min", "q1", "median", "q3", "max"), (float(x) for x in q)))


@dataclass
class CohortReport:
    rows: list[dict]
    summary: list[dict]

    def mean(self, region: str, metric: str = "dice") -> float:
        for r in self.rows:
            if r["subject_id"] == COHORT_ID and r["region"] == region:
                return r[metric]
        raise KeyError(region)


def cohort_report(
    per_subject: Mapping[str, Mapping[str, RegionScores]],
    csv_path: str | Path | None = None,
    plot_dir: str | Path | None = None,
) -> CohortReport:
    """Per-subject rows plus one ``__cohort__`` row per region.

    Cohort rows hold metric means and summed confusion counts. Median and
    quartiles go to a companion ``*_summary.csv``; ``plot_dir`` receives one
    box plot per region.
    """
    if not per_subject:
        raise ValueError("empty cohort")
    rows = []
    for sid in sorted(per_subject):
        for region in REGIONS:
            s = per_subject[sid][region]
            rows.append({"subject_id": sid, **{k: v for k, v in asdict(s).items()}})
    summary = []
    for region in REGIONS:
        scores = [per_subject[sid][region] for sid in sorted(per_subject)]
        cohort = {"subject_id": COHORT_ID, "region": region}
        for m in METRICS:
            vals = [getattr(s, m) for s in scores]
            cohort[m] = float(np.mean(vals))
            summary.append({"region": region, "metric": m, "mean": cohort[m], **quantiles(vals)})
        for c in ("tp", "fp", "fn", "tn"):
            cohort[c] = int(sum(getattr(s, c) for s in scores))
        rows.append(cohort)

    report = CohortReport(rows, summary)
    if csv_path is not None:
        write_report(report, csv_path)
    if plot_dir is not None:
        plot_boxes(per_subject, plot_dir)
    return report


def write_report(report: CohortReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in report.rows:
            w.writerow({k: _fmt(r[k]) for k in REPORT_COLUMNS})
    summary_path = path.with_name(path.stem + "_summary.csv")
    with open(summary_path, "w", newline="") as f:
        cols = ("region", "metric", "mean", "min", "q1", "median", "q3", "max")
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for r in report.summary:
            w.writerow({k: _fmt(r[k]) for k in cols})
    return path


def read_report(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        out = []
        for r in csv.DictReader(f):
            for k in METRICS:
                r[k] = float(r[k])
            for k in ("tp", "fp", "fn", "tn"):
                r[k] = int(r[k])
            out.append(r)
    return out


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def plot_boxes(per_subject: Mapping[str, Mapping[str, RegionScores]], out_dir: str | Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for region in REGIONS:
        data = [[getattr(per_subject[sid][region], m) for sid in sorted(per_subject)] for m in METRICS]
        fig, ax = plt.subplots(figsize=(4, 3.5))
        ax.boxplot(data)
        ax.set_xticks(range(1, len(METRICS) + 1), METRICS)
        ax.set_ylim(-0.02, 1.02)
        ax.set_title(region)
        fig.tight_layout()
        p = out_dir / f"boxplot_{region}.png"
        fig.savefig(p, dpi=80, metadata={"Software": None})
        plt.close(fig)
        paths.append(p)
    return paths
