"""Stratified k-fold cross-validation, evaluation and transfer testing."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .fusion import HrlModel, ModelConfig, normalize_variant
from .metrics import MetricsReport, aggregate, compute_metrics, multiclass_metrics
from .synth import Dataset
from .train import Inputs, TrainHyper, TrainResult, normalize_strategy, predict_proba, prepare_inputs, pretrain_then_branch

logger = logging.getLogger(__name__)

TASKS = ("binary", "multi")


@dataclass
class FoldPlan:
    k: int
    test_folds: list[np.ndarray]

    def train_indices(self, fold: int) -> np.ndarray:
        return np.sort(np.concatenate([f for i, f in enumerate(self.test_folds) if i != fold]))


def make_folds(labels, k: int = 5, seed: int = 0) -> FoldPlan:
    """Seeded stratified partition.

    Members of each class are shuffled and dealt round-robin over the folds.
    The starting fold rotates from class to class so fold sizes stay level
    when class counts are not multiples of ``k``.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    start = 0
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if len(members) < k:
            logger.warning("class %s has %d members for %d folds; some folds get none", c, len(members), k)
        members = rng.permutation(members)
        for j, idx in enumerate(members):
            folds[(start + j) % k].append(int(idx))
        start = (start + len(members)) % k
    return FoldPlan(k, [np.array(sorted(f), dtype=int) for f in folds])


def _check_task(task: str, num_classes: int) -> str:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    if task == "binary" and num_classes != 2:
        raise ValueError(f"binary task needs 2 classes, model has {num_classes}")
    return task


def report_for(probs: np.ndarray, labels, task: str) -> MetricsReport:
    if task == "binary":
        return compute_metrics(probs[:, 1], labels)
    return multiclass_metrics(probs, labels)


def evaluate(model: HrlModel, data: Inputs, task: str = "binary", variant: str | None = None
             ) -> tuple[MetricsReport, np.ndarray]:
    """Metrics and class probabilities on ``data``."""
    _check_task(task, model.config.num_classes)
    probs = predict_proba(model, data, variant)
    return report_for(probs, data.labels, task), probs


@dataclass
class FoldRun:
    repeat: int
    fold: int
    variant: str
    strategy: str
    seed: int
    report: MetricsReport
    test_ids: list[str]
    labels: np.ndarray
    probs: np.ndarray
    train: TrainResult

    @property
    def run_id(self) -> str:
        return f"{self.variant}:{self.strategy}"


@dataclass
class CVResult:
    task: str
    k: int
    repeats: int
    runs: list[FoldRun] = field(default_factory=list)

    def run_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.runs:
            seen.setdefault(r.run_id, None)
        return list(seen)

    def runs_for(self, run_id: str, repeat: int | None = None) -> list[FoldRun]:
        return [r for r in self.runs if r.run_id == run_id and (repeat is None or r.repeat == repeat)]

    def summary(self, run_id: str) -> dict[str, tuple[float | None, float | None]]:
        """Mean and std of every metric over all folds of all repeats."""
        return aggregate([r.report for r in self.runs_for(run_id)])

    def pooled(self, run_id: str, repeat: int) -> MetricsReport:
        """Metrics on the predictions of all folds of one repeat taken together."""
        runs = self.runs_for(run_id, repeat)
        probs = np.concatenate([r.probs for r in runs])
        labels = np.concatenate([r.labels for r in runs])
        return report_for(probs, labels, self.task)


def fold_seed(seed: int, fold: int, repeat: int) -> int:
    return seed + fold + 1000 * repeat


def cross_validate(dataset: Dataset, model_config: ModelConfig, hyper: TrainHyper, task: str = "binary",
                   k: int = 5, repeats: int = 5, variants=("full",), strategies=("two_stage",),
                   mask_rois=None, on_fold: Callable[[FoldRun, HrlModel], None] | None = None,
                   inputs: Inputs | None = None) -> CVResult:
    """Train on k-1 folds and test on the held-out one, for every repeat.

    Class balancing is applied to each training split only. All requested
    (variant, strategy) pairs share the same folds and, where applicable, the
    same stage-1 backbone.
    """
    task = _check_task(task, model_config.num_classes)
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    variants = [normalize_variant(v) for v in variants]
    strategies = [normalize_strategy(s) for s in strategies]
    data = inputs if inputs is not None else prepare_inputs(dataset, mask_rois)
    result = CVResult(task, k, repeats)
    for repeat in range(repeats):
        plan = make_folds(data.labels, k, hyper.seed + 1000 * repeat)
        for fold in range(k):
            test_idx = plan.test_folds[fold]
            if len(test_idx) == 0:
                logger.warning("repeat %d fold %d has no test subjects; skipped", repeat, fold)
                continue
            seed = fold_seed(hyper.seed, fold, repeat)
            h = copy.copy(hyper)
            h.seed = seed
            train, test = data.take(plan.train_indices(fold)), data.take(test_idx)
            trained = pretrain_then_branch(HrlModel(model_config, seed), train, h, variants, strategies)
            for (variant, strategy), (model, tr) in trained.items():
                report, probs = evaluate(model, test, task, variant)
                run = FoldRun(repeat, fold, variant, strategy, seed, report, test.ids, test.labels, probs, tr)
                logger.info("repeat %d fold %d %s auc=%s acc=%.3f", repeat, fold, run.run_id, report.auc, report.acc)
                result.runs.append(run)
                if on_fold is not None:
                    on_fold(run, model)
    return result


def remap_labels(labels, label_map: dict[int, int] | None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if label_map is None:
        return labels
    missing = sorted(set(labels.tolist()) - set(label_map))
    if missing:
        raise ValueError(f"label map has no entry for target labels {missing}")
    return np.array([label_map[int(c)] for c in labels], dtype=np.int64)


@dataclass
class TransferResult:
    report: MetricsReport
    probs: np.ndarray
    labels: np.ndarray
    test_ids: list[str]
    train: TrainResult
    model: HrlModel


def transfer_eval(source: Dataset, target: Dataset, model_config: ModelConfig, hyper: TrainHyper,
                  task: str = "binary", variant: str | None = None, label_map: dict[int, int] | None = None,
                  mask_rois=None) -> TransferResult:
    """Train on ``source`` only and evaluate on ``target`` only."""
    task = _check_task(task, model_config.num_classes)
    if label_map is None and target.class_count != source.class_count:
        raise ValueError(f"target has {target.class_count} classes, source {source.class_count}; "
                         "a label mapping is required")
    if label_map is not None:
        bad = sorted(v for v in label_map.values() if not 0 <= v < source.class_count)
        if bad:
            raise ValueError(f"label map sends targets to unknown source classes {bad}")
    if len(source.feature_names) != len(target.feature_names):
        raise ValueError("source and target handcrafted feature lengths differ")
    if source.atlas.shape != target.atlas.shape:
        raise ValueError(f"volume extents differ: {source.atlas.shape} vs {target.atlas.shape}")
    if not np.array_equal(source.atlas.roi_labels, target.atlas.roi_labels):
        logger.warning("source and target atlases differ; ROI features are not aligned")
    variant = normalize_variant(variant or model_config.variant)
    train = prepare_inputs(source, mask_rois)
    test = prepare_inputs(target, mask_rois)
    test.labels = remap_labels(test.labels, label_map)
    trained = pretrain_then_branch(HrlModel(model_config, hyper.seed), train, hyper, [variant], [hyper.strategy])
    model, tr = trained[(variant, hyper.strategy)]
    report, probs = evaluate(model, test, task, variant)
    return TransferResult(report, probs, test.labels, test.ids, tr, model)


def model_config_for(dataset: Dataset, base: ModelConfig | None = None, **overrides) -> ModelConfig:
    """``base`` with input shape, feature length and class count taken from the data."""
    base = base or ModelConfig()
    return replace(base, input_shape=dataset.atlas.shape, feature_dim=len(dataset.feature_names),
                   num_classes=dataset.class_count, **overrides)
