"""CSV reports and optional figures for cross-validation and evaluation runs.

Everything written here is a pure function of the results, so identical runs
give byte-identical files. Numbers use ``repr``-style shortest round-trip
formatting; undefined metrics are written as ``NA``.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .crossval import CVResult, FoldRun
from .metrics import METRIC_NAMES, MetricsReport


def fmt(value) -> str:
    if value is None:
        return "NA"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _csv(rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def _metric_items(report: MetricsReport) -> list[tuple[str, float | None]]:
    items = [(name, getattr(report, name)) for name in METRIC_NAMES]
    for c, vals in sorted(report.per_class.items()):
        items += [(f"class{c}.{k}", vals[k]) for k in ("acc", "sen", "spe", "f1", "auc")]
    return items


def metrics_rows(result: CVResult) -> list[list[str]]:
    """Long format: one row per (run, fold, repeat, metric); a ``mean`` fold row
    per repeat summarises that repeat's folds."""
    rows = [["run_id", "fold", "repeat", "metric", "value"]]
    for run_id in result.run_ids():
        for repeat in range(result.repeats):
            runs = result.runs_for(run_id, repeat)
            for r in runs:
                rows += [[run_id, str(r.fold), str(repeat), name, fmt(v)] for name, v in _metric_items(r.report)]
            for name in METRIC_NAMES:
                vals = [getattr(r.report, name) for r in runs if getattr(r.report, name) is not None]
                rows.append([run_id, "mean", str(repeat), name, fmt(np.mean(vals) if vals else None)])
    return rows


def confusion_rows(result: CVResult) -> list[list[str]]:
    """Per-fold and pooled-per-repeat confusion matrices (rows true, columns predicted)."""
    k = result.runs[0].probs.shape[1] if result.runs else 0
    rows = [["run_id", "repeat", "fold", "true"] + [f"pred{c}" for c in range(k)]]
    for run_id in result.run_ids():
        for repeat in range(result.repeats):
            blocks = [(str(r.fold), r.report.confusion) for r in result.runs_for(run_id, repeat)]
            blocks.append(("pooled", result.pooled(run_id, repeat).confusion))
            for fold, cm in blocks:
                rows += [[run_id, str(repeat), fold, str(t)] + [str(int(x)) for x in cm[t]] for t in range(k)]
    return rows


def prediction_rows(runs: Iterable[FoldRun]) -> list[list[str]]:
    runs = list(runs)
    k = runs[0].probs.shape[1] if runs else 0
    rows = [["run_id", "repeat", "fold", "id", "true", "predicted"] + [f"score{c}" for c in range(k)]]
    for r in runs:
        pred = r.probs.argmax(axis=1)
        for sid, t, p, probs in zip(r.test_ids, r.labels, pred, r.probs):
            rows.append([r.run_id, str(r.repeat), str(r.fold), sid, str(int(t)), str(int(p))] + [fmt(x) for x in probs])
    return rows


def mean_std_cell(mean: float | None, std: float | None) -> str:
    """Percent ``mean±std`` with two decimals, as in published result tables."""
    if mean is None:
        return "NA"
    return f"{100 * mean:.2f}±{100 * std:.2f}"


def summary_rows(result: CVResult) -> list[list[str]]:
    rows = [["run_id"] + [m.upper() for m in METRIC_NAMES]]
    for run_id in result.run_ids():
        s = result.summary(run_id)
        rows.append([run_id] + [mean_std_cell(*s[m]) for m in METRIC_NAMES])
    return rows


def feature_rows(ids: Sequence[str], features: np.ndarray) -> list[list[str]]:
    rows = [["id"] + [f"f{j}" for j in range(features.shape[1])]]
    rows += [[sid] + [fmt(x) for x in row] for sid, row in zip(ids, features)]
    return rows


def single_report_rows(report: MetricsReport, run_id: str) -> list[list[str]]:
    rows = [["run_id", "fold", "repeat", "metric", "value"]]
    rows += [[run_id, "all", "0", name, fmt(v)] for name, v in _metric_items(report)]
    return rows


def write_rows(path, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_csv(rows), encoding="utf-8")
    return path


def format_table(rows: list[list[str]], sep: str = " | ") -> str:
    """Pipe-delimited text rendering of a row list for terminal output."""
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join(sep.join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows)


def write_cv_reports(result: CVResult, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    return {
        "metrics": write_rows(out / "metrics.csv", metrics_rows(result)),
        "confusion": write_rows(out / "confusion.csv", confusion_rows(result)),
        "predictions": write_rows(out / "predictions.csv", prediction_rows(result.runs)),
        "summary": write_rows(out / "summary.csv", summary_rows(result)),
    }


# ----------------------------------------------------------------------
# figures


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """False- and true-positive rates at every distinct threshold, from (0,0) to (1,1)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order] == 1
    cut = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps, fps = np.cumsum(y)[cut], np.cumsum(~y)[cut]
    p, n = max(y.sum(), 1), max((~y).sum(), 1)
    return np.r_[0.0, fps / n], np.r_[0.0, tps / p]


def _figure_module():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_confusion(cm: np.ndarray, path, title: str = "") -> Path:
    plt = _figure_module()
    fig, ax = plt.subplots(figsize=(3.2, 3.0))
    ax.imshow(cm, cmap="Blues")
    for (i, j), v in np.ndenumerate(cm):
        ax.text(j, i, str(int(v)), ha="center", va="center")
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_xticks(range(cm.shape[1]))
    ax.set_yticks(range(cm.shape[0]))
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def plot_roc(curves: dict[str, tuple[np.ndarray, np.ndarray]], path) -> Path:
    plt = _figure_module()
    fig, ax = plt.subplots(figsize=(3.4, 3.2))
    for label, (fpr, tpr) in curves.items():
        ax.plot(fpr, tpr, label=label)
    ax.plot([0, 1], [0, 1], color="0.7", linestyle=":")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def write_cv_figures(result: CVResult, out_dir) -> list[Path]:
    out = Path(out_dir) / "figures"
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    curves = {}
    for run_id in result.run_ids():
        safe = run_id.replace(":", "_")
        cm = sum(result.pooled(run_id, r).confusion for r in range(result.repeats))
        paths.append(plot_confusion(cm, out / f"confusion_{safe}.png", run_id))
        if result.task == "binary":
            runs = result.runs_for(run_id)
            curves[run_id] = roc_curve(np.concatenate([r.probs[:, 1] for r in runs]),
                                       np.concatenate([r.labels for r in runs]))
    if curves:
        paths.append(plot_roc(curves, out / "roc.png"))
    return paths
