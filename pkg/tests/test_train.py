import numpy as np
import pytest

from hrl import train as T
from hrl.fusion import HrlModel
from hrl.preprocess import AffineRanges
from hrl.train import (Inputs, TrainHyper, balance_classes, predict_proba, prepare_inputs, pretrain_then_branch,
                       train_hrl, train_stage1, train_stage2)

from conftest import backbone_bytes


def _inputs(labels, shape=(16, 16, 16)):
    rng = np.random.default_rng(0)
    n = len(labels)
    return Inputs(rng.uniform(size=(n, 1) + shape).astype(np.float32), rng.normal(size=(n, 3)),
                  np.asarray(labels), [f"s{i}" for i in range(n)], [f"s{i}" for i in range(n)])


# ----------------------------------------------------------------------
# balancing


def test_balance_eight_two():
    out = balance_classes(_inputs([0] * 8 + [1] * 2), AffineRanges(), seed=0)
    assert np.bincount(out.labels).tolist() == [8, 8]
    extra = out.ids[10:]
    assert len(extra) == 6 and all("#aug" in i for i in extra)
    assert out.origins[10:] == ["s8", "s9"] * 3
    np.testing.assert_array_equal(out.features[10], out.features[8])


def test_balanced_split_unchanged():
    data = _inputs([0, 1, 0, 1])
    out = balance_classes(data, AffineRanges(), seed=0)
    assert out.ids == data.ids and np.array_equal(out.volumes, data.volumes)


def test_augmented_copies_differ_from_sources():
    out = balance_classes(_inputs([0] * 4 + [1]), AffineRanges(), seed=1)
    for j in range(5, 8):
        assert not np.array_equal(out.volumes[j], out.volumes[4])
        assert out.volumes[j].dtype == np.float32


def test_prepare_inputs_shapes_and_mask(tiny_dataset):
    data = prepare_inputs(tiny_dataset)
    assert data.volumes.shape == (12, 1, 16, 16, 16) and data.volumes.dtype == np.float32
    assert data.volumes.min() == 0 and data.volumes.max() == 1
    masked = prepare_inputs(tiny_dataset, mask_rois=[1])
    assert np.all(masked.volumes[:, 0][:, tiny_dataset.atlas.roi_labels != 1] == 0)


# ----------------------------------------------------------------------
# early stopping


def test_zero_threshold_stops_after_one_epoch(tiny_inputs, tiny_config):
    h = TrainHyper(lr=1e-3, max_epochs=10, early_stop_train_acc=0.0)
    res = train_stage1(HrlModel(tiny_config, 0), tiny_inputs, h)
    assert res.epochs == 1 and res.stopped_early


def test_stops_at_first_epoch_above_threshold(tiny_inputs, tiny_config):
    h = TrainHyper(lr=3e-3, max_epochs=30, early_stop_train_acc=0.9)
    res = train_hrl(HrlModel(tiny_config, 0), tiny_inputs, h, "h-only").stage2
    accs = [e.acc for e in res.history]
    assert res.stopped_early, accs
    assert accs[-1] > 0.9 and all(a <= 0.9 for a in accs[:-1])


def test_never_reached_threshold_runs_all_epochs(tiny_inputs, tiny_config):
    h = TrainHyper(lr=1e-3, max_epochs=3, early_stop_train_acc=1.0)
    res = train_stage1(HrlModel(tiny_config, 0), tiny_inputs, h)
    assert res.epochs == 3 and not res.stopped_early


def test_loss_decreases_on_fixed_batch(tiny_inputs, tiny_config):
    drops = []
    for seed in range(3):
        h = TrainHyper(lr=1e-3, max_epochs=5, early_stop_train_acc=1.0, batch_size=len(tiny_inputs), seed=seed)
        res = train_stage1(HrlModel(tiny_config, seed), tiny_inputs, h)
        drops.append(res.history[-1].loss - res.history[0].loss)
    assert np.median(drops) < 0


# ----------------------------------------------------------------------
# strategies


def test_two_stage_keeps_backbone_bit_identical(tiny_inputs, tiny_config):
    h = TrainHyper(lr=1e-3, max_epochs=3, early_stop_train_acc=1.0)
    model = HrlModel(tiny_config, 0)
    train_stage1(model, tiny_inputs, h)
    before = backbone_bytes(model)
    buffers = {k: v.copy() for k, v in model.backbone.named_buffers()}
    train_stage2(model, tiny_inputs, h, "full")
    assert backbone_bytes(model) == before
    assert all(np.array_equal(v, buffers[k]) for k, v in model.backbone.named_buffers())


def test_joint_updates_backbone(tiny_inputs, tiny_config):
    h = TrainHyper(lr=1e-3, max_epochs=1, early_stop_train_acc=1.0, strategy="joint")
    model = HrlModel(tiny_config, 0)
    train_stage1(model, tiny_inputs, h)
    before = backbone_bytes(model)
    train_stage2(model, tiny_inputs, h, "full")
    assert backbone_bytes(model) != before


def test_scratch_skips_stage_one(tiny_inputs, tiny_config, monkeypatch):
    def boom(*a, **k):
        raise AssertionError("stage 1 must not run")

    monkeypatch.setattr(T, "train_stage1", boom)
    h = TrainHyper(lr=1e-3, max_epochs=1, strategy="scratch")
    model = HrlModel(tiny_config, 0)
    res = train_hrl(model, tiny_inputs, h)
    assert res.stage1 is None and not model.backbone_pretrained


def test_h_only_never_touches_backbone(tiny_inputs, tiny_config):
    model = HrlModel(tiny_config, 0)
    before = backbone_bytes(model)
    res = train_hrl(model, tiny_inputs, TrainHyper(lr=1e-3, max_epochs=2), variant="h-only")
    assert res.stage1 is None and backbone_bytes(model) == before


def test_inconsistent_strategy_rejected(tiny_inputs, tiny_config):
    with pytest.raises(ValueError):
        train_stage2(HrlModel(tiny_config, 0), tiny_inputs, TrainHyper(max_epochs=1), "full")
    model = HrlModel(tiny_config, 0)
    model.backbone_pretrained = True
    with pytest.raises(ValueError):
        train_stage2(model, tiny_inputs, TrainHyper(max_epochs=1, strategy="scratch"), "full")
    with pytest.raises(ValueError):
        TrainHyper(strategy="warm")
    with pytest.raises(ValueError):
        TrainHyper(early_stop_train_acc=1.5)


def test_strategy_aliases():
    assert TrainHyper(strategy="HRL-S").strategy == "scratch"
    assert TrainHyper(strategy="hrl_r").strategy == "joint"


# ----------------------------------------------------------------------
# reproducibility and prediction


def test_training_is_bit_reproducible(tiny_inputs, tiny_config):
    def run():
        model = HrlModel(tiny_config, 3)
        train_hrl(model, tiny_inputs, TrainHyper(lr=1e-3, max_epochs=2, seed=3))
        return model.state_dict()

    a, b = run(), run()
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_branching_shares_stage_one(tiny_inputs, tiny_config):
    h = TrainHyper(lr=1e-3, max_epochs=2)
    out = pretrain_then_branch(HrlModel(tiny_config, 0), tiny_inputs, h, ["full", "d-only", "h-only"], ["two_stage"])
    full, d_only = out[("full", "two_stage")], out[("d-only", "two_stage")]
    assert full[1].stage1 is d_only[1].stage1
    assert backbone_bytes(full[0]) == backbone_bytes(d_only[0])
    assert out[("h-only", "two_stage")][1].stage1 is None
    solo = HrlModel(tiny_config, 0)
    train_hrl(solo, tiny_inputs, h, "full")
    assert backbone_bytes(solo) == backbone_bytes(full[0])


def test_predict_proba_rows(tiny_inputs, tiny_config):
    model = HrlModel(tiny_config, 0)
    for v in ("full", "h-only", "d-only"):
        p = predict_proba(model, tiny_inputs, v, batch_size=5)
        assert p.shape == (12, 2)
        np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)


def test_empty_split_rejected(tiny_inputs, tiny_config):
    with pytest.raises(ValueError):
        train_stage1(HrlModel(tiny_config, 0), tiny_inputs.take([]), TrainHyper())
