"""Two-stage training of the hybrid model.

Stage 1 trains the backbone alone with a throwaway pooled-linear classifier.
Stage 2 trains the patch embedding, encoder and head; under the default
``two_stage`` strategy the backbone is frozen (eval-mode batchnorm, no
updates) so its feature maps are computed once and reused every epoch.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .nn import Linear
from .fusion import HrlModel, normalize_variant
from .optim import Adam
from .preprocess import AffineRanges, Atlas, apply_roi_mask, preprocess_volume, random_affine
from .synth import Dataset
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

STRATEGIES = ("two_stage", "scratch", "joint")


def normalize_strategy(name: str) -> str:
    s = name.strip().lower().replace("-", "_")
    s = {"hrl_s": "scratch", "hrl_r": "joint", "twostage": "two_stage"}.get(s, s)
    if s not in STRATEGIES:
        raise ValueError(f"unknown strategy {name!r}; expected one of {STRATEGIES}")
    return s


@dataclass
class TrainHyper:
    lr: float = 1e-4
    max_epochs: int = 300
    early_stop_train_acc: float = 0.9
    batch_size: int = 4
    seed: int = 0
    strategy: str = "two_stage"
    stage1_max_epochs: int | None = None
    augment: AffineRanges = field(default_factory=AffineRanges)

    def __post_init__(self):
        self.strategy = normalize_strategy(self.strategy)
        if not 0 <= self.early_stop_train_acc <= 1:
            raise ValueError("early_stop_train_acc must lie in [0, 1]")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if isinstance(self.augment, dict):
            self.augment = AffineRanges(**self.augment)


@dataclass
class Inputs:
    """Network-ready arrays for a set of subjects."""

    volumes: np.ndarray  # [N, 1, D, H, W] float32, preprocessed
    features: np.ndarray  # [N, F]
    labels: np.ndarray
    ids: list[str]
    origins: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "Inputs":
        idx = np.asarray(idx, dtype=int)
        return Inputs(self.volumes[idx], self.features[idx], self.labels[idx],
                      [self.ids[i] for i in idx], [self.origins[i] for i in idx])


def prepare_inputs(dataset: Dataset, mask_rois=None, atlas: Atlas | None = None) -> Inputs:
    """Preprocess every volume; optionally zero voxels outside ``mask_rois``."""
    atlas = atlas or dataset.atlas
    vols = []
    for s in dataset.subjects:
        v = preprocess_volume(s.volume)
        if mask_rois:
            v = apply_roi_mask(v, atlas, mask_rois)
        vols.append(v)
    feats = np.stack([s.features for s in dataset.subjects]) if dataset.subjects else np.zeros((0, 0))
    return Inputs(np.stack(vols)[:, None].astype(np.float32), feats.astype(np.float64), dataset.labels,
                  dataset.ids, [s.origin for s in dataset.subjects])


def balance_classes(data: Inputs, ranges: AffineRanges, seed: int) -> Inputs:
    """Upsample minority classes to the majority count with augmented copies.

    Copies cycle through the class members in order; each is warped with its
    own seed and keeps its source's origin id and handcrafted features.
    """
    labels = data.labels
    present = np.unique(labels)
    counts = {int(c): int((labels == c).sum()) for c in present}
    target = max(counts.values())
    vols, feats, labs, ids, origins = [data.volumes], [data.features], [labels], list(data.ids), list(data.origins)
    for c in present:
        members = np.flatnonzero(labels == c)
        for j in range(target - counts[int(c)]):
            src = members[j % len(members)]
            aug_seed = int(np.random.SeedSequence([seed, int(c), j]).generate_state(1)[0])
            vols.append(random_affine(data.volumes[src, 0], ranges, aug_seed)[None, None])
            feats.append(data.features[src][None])
            labs.append(np.array([c]))
            ids.append(f"{data.ids[src]}#aug{j}")
            origins.append(data.origins[src])
    return Inputs(np.concatenate(vols).astype(np.float32), np.concatenate(feats), np.concatenate(labs), ids, origins)


# ----------------------------------------------------------------------
# loops


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    acc: float


@dataclass
class StageResult:
    history: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def epochs(self) -> int:
        return len(self.history)


def _batches(n: int, batch_size: int, rng: np.random.Generator, drop_single: bool) -> list[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # a lone sample gives degenerate batch statistics
    if drop_single and len(batches) > 1 and len(batches[-1]) == 1:
        batches.pop()
    return batches


def _should_stop(acc: float, threshold: float) -> bool:
    # a non-positive threshold always fires
    return threshold <= 0 or acc > threshold


def _run_epochs(step_fn, n: int, hyper: TrainHyper, max_epochs: int, rng_seed: int, drop_single: bool) -> StageResult:
    result = StageResult()
    for epoch in range(1, max_epochs + 1):
        rng = np.random.default_rng([rng_seed, epoch])
        total_loss = 0.0
        correct = seen = 0
        for idx in _batches(n, hyper.batch_size, rng, drop_single):
            loss, pred = step_fn(idx)
            total_loss += loss * len(idx)
            correct += int(pred.sum())
            seen += len(idx)
        acc = correct / seen
        result.history.append(EpochRecord(epoch, total_loss / seen, acc))
        logger.debug("epoch %d loss %.4f acc %.3f", epoch, total_loss / seen, acc)
        if _should_stop(acc, hyper.early_stop_train_acc):
            result.stopped_early = True
            break
    return result


def train_stage1(model: HrlModel, data: Inputs, hyper: TrainHyper) -> StageResult:
    """Train the backbone through a temporary pooled-linear classifier."""
    if len(data) == 0:
        raise ValueError("empty training split")
    backbone = model.backbone
    head = Linear(backbone.config.out_channels, model.config.num_classes,
                  rng=np.random.default_rng([hyper.seed, 1]), dtype=model.dtype)
    opt = Adam(backbone.parameters() + head.parameters(), lr=hyper.lr)
    backbone.train()

    def step(idx):
        opt.zero_grad()
        maps = backbone(Tensor(data.volumes[idx]))
        logits = head(maps.mean(axis=(2, 3, 4)))
        loss = F.cross_entropy(logits, data.labels[idx])
        loss.backward()
        opt.step()
        return float(loss.data), logits.data.argmax(axis=1) == data.labels[idx]

    result = _run_epochs(step, len(data), hyper, hyper.stage1_max_epochs or hyper.max_epochs,
                         rng_seed=hyper.seed * 2 + 1, drop_single=True)
    backbone.eval()
    model.backbone_pretrained = True
    return result


def backbone_maps(model: HrlModel, volumes: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Eval-mode final feature maps [N, C, l, w, h]."""
    model.backbone.eval()
    out = []
    with no_grad():
        for i in range(0, len(volumes), batch_size):
            out.append(model.backbone(Tensor(volumes[i : i + batch_size])).data)
    return np.concatenate(out)


def train_stage2(model: HrlModel, data: Inputs, hyper: TrainHyper, variant: str | None = None) -> StageResult:
    """Train embedding, encoder and head (plus the backbone unless frozen)."""
    if len(data) == 0:
        raise ValueError("empty training split")
    variant = normalize_variant(variant or model.config.variant)
    pretrained = model.backbone_pretrained
    uses_backbone = variant != "h-only"
    if uses_backbone and hyper.strategy in ("two_stage", "joint") and not pretrained:
        raise ValueError(f"strategy {hyper.strategy!r} needs a stage-1 backbone; run train_stage1 first")
    if uses_backbone and hyper.strategy == "scratch" and pretrained:
        raise ValueError("strategy 'scratch' expects a randomly initialised backbone")

    frozen = hyper.strategy == "two_stage" or not uses_backbone
    params = model.fusion_parameters() + ([] if frozen else model.backbone.parameters())
    opt = Adam(params, lr=hyper.lr)
    maps = backbone_maps(model, data.volumes) if uses_backbone and frozen else None
    if not frozen:
        model.backbone.train()

    def step(idx):
        opt.zero_grad()
        if maps is not None:
            logits = model(None, data.features[idx], variant, maps=Tensor(maps[idx]))
        elif uses_backbone:
            logits = model(Tensor(data.volumes[idx]), data.features[idx], variant)
        else:
            logits = model(None, data.features[idx], variant)
        loss = F.cross_entropy(logits, data.labels[idx])
        loss.backward()
        opt.step()
        return float(loss.data), logits.data.argmax(axis=1) == data.labels[idx]

    result = _run_epochs(step, len(data), hyper, hyper.max_epochs, rng_seed=hyper.seed * 2 + 2,
                         drop_single=not frozen)
    model.backbone.eval()
    return result


@dataclass
class TrainResult:
    stage1: StageResult | None
    stage2: StageResult
    train_ids: list[str]
    train_origins: list[str]

    @property
    def train_size(self) -> int:
        return len(self.train_ids)


def fit_feature_scaling(model: HrlModel, data: Inputs) -> None:
    """Store per-slot mean/std of the training features in the model."""
    if data.features.shape[1]:
        model.set_feature_scaling(data.features.mean(axis=0), data.features.std(axis=0))


def train_hrl(model: HrlModel, data: Inputs, hyper: TrainHyper, variant: str | None = None,
              balance: bool = True) -> TrainResult:
    """Full protocol: feature scaling, class balancing, stage 1 (unless scratch), stage 2."""
    variant = normalize_variant(variant or model.config.variant)
    fit_feature_scaling(model, data)
    train = balance_classes(data, hyper.augment, hyper.seed) if balance else data
    stage1 = None
    if variant != "h-only" and hyper.strategy in ("two_stage", "joint"):
        stage1 = train_stage1(model, train, hyper)
    stage2 = train_stage2(model, train, hyper, variant)
    return TrainResult(stage1, stage2, train.ids, train.origins)


def pretrain_then_branch(base: HrlModel, data: Inputs, hyper: TrainHyper, variants, strategies):
    """Train each (variant, strategy) pair, sharing one stage-1 run where possible.

    Returns {(variant, strategy): (model, TrainResult)}.
    """
    fit_feature_scaling(base, data)
    train = balance_classes(data, hyper.augment, hyper.seed)
    pretrained = None
    out = {}
    for strategy in strategies:
        h = copy.copy(hyper)
        h.strategy = normalize_strategy(strategy)
        for variant in variants:
            variant = normalize_variant(variant)
            model = copy.deepcopy(base)
            stage1 = None
            if variant != "h-only" and h.strategy in ("two_stage", "joint"):
                if pretrained is None:
                    pre = copy.deepcopy(base)
                    pretrained = (pre, train_stage1(pre, train, h))
                model = copy.deepcopy(pretrained[0])
                stage1 = pretrained[1]
            stage2 = train_stage2(model, train, h, variant)
            out[(variant, h.strategy)] = (model, TrainResult(stage1, stage2, train.ids, train.origins))
    return out


def predict_proba(model: HrlModel, data: Inputs, variant: str | None = None, batch_size: int = 16) -> np.ndarray:
    variant = normalize_variant(variant or model.config.variant)
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(data), batch_size):
            sl = slice(i, i + batch_size)
            vols = None if variant == "h-only" else Tensor(data.volumes[sl])
            out.append(model.predict_proba(vols, data.features[sl], variant))
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


def pooled_backbone_features(model: HrlModel, volumes: np.ndarray) -> np.ndarray:
    """Global-average-pooled final backbone maps [N, C]."""
    return backbone_maps(model, volumes).mean(axis=(2, 3, 4))
