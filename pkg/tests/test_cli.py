import csv
import subprocess
import sys

import numpy as np
import pytest

from hrl import cli
from hrl.featuremaps import CONSTANT_GRAY, read_pgm

TINY = """\
seed: 3
data:
  generator:
    extents: [16, 16, 16]
    roi_count: 4
    subjects_per_class: {n}
    effects:
      - {{}}
      - {{intensity_shift: 0.3, shift_rois: [1, 2]}}
model: {{base_channels: 2, blocks_per_stage: [1, 1, 1, 1], hidden: 8, heads: 2, mlp_dim: 16}}
train: {{lr: 0.003, max_epochs: 2, stage1_max_epochs: 1}}
eval: {{k: {k}, repeats: {repeats}}}
"""


def _config(tmp_path, n=10, k=5, repeats=1, name="c.yaml"):
    path = tmp_path / name
    path.write_text(TINY.format(n=n, k=k, repeats=repeats))
    return str(path)


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def _files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and p.name != "run.log"}


# ----------------------------------------------------------------------
# generate


def test_generate_twenty_rows_and_rerun_identical(tmp_path, capsys):
    cfg = _config(tmp_path)
    assert cli.main(["generate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    out = capsys.readouterr().out
    assert [c.strip() for c in out.splitlines()[-1].split("|")][:2] == ["total", "20"]
    assert len(_read(tmp_path / "a" / "manifest.csv")) == 21
    assert cli.main(["generate", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    a.pop(next(k for k in a if k.name == "resolved_config.yaml"))
    b.pop(next(k for k in b if k.name == "resolved_config.yaml"))
    assert a == b


def test_generate_imbalanced_summary(tmp_path, capsys):
    path = tmp_path / "imb.yaml"
    path.write_text("data:\n  generator:\n    extents: [8, 8, 8]\n    roi_count: 3\n"
                    "    subjects_per_class: [172, 87, 35]\n"
                    "    effects: [{}, {intensity_shift: 0.1, shift_rois: [1]}, {intensity_shift: -0.1, shift_rois: [1]}]\n")
    assert cli.main(["generate", "--config", str(path), "--out", str(tmp_path / "d")]) == 0
    lines = capsys.readouterr().out.splitlines()
    counts = [line.split(" | ")[1].strip() for line in lines[1:4]]
    assert counts == ["172", "87", "35"]


# ----------------------------------------------------------------------
# crossval


def test_crossval_fold_rows_and_determinism(tmp_path, capsys):
    cfg = _config(tmp_path, n=5, k=5, repeats=2)
    assert cli.main(["crossval", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    rows = _read(tmp_path / "a" / "metrics.csv")
    for rep in ("0", "1"):
        folds = [r[1] for r in rows[1:] if r[3] == "acc" and r[2] == rep]
        assert folds == ["0", "1", "2", "3", "4", "mean"]
    assert len(list((tmp_path / "a" / "checkpoints").glob("*.ckpt"))) == 10
    assert "full:two_stage" in capsys.readouterr().out
    assert cli.main(["crossval", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert a.keys() == b.keys()
    assert all(a[k] == b[k] for k in a if k.name != "resolved_config.yaml")
    assert not list((tmp_path / "a").glob("figures"))


def test_variant_and_strategy_sweeps(tmp_path):
    cfg = _config(tmp_path, n=4, k=2)
    out = tmp_path / "v"
    assert cli.main(["crossval", "--config", cfg, "--out", str(out), "--variant", "full,H-only,D-only"]) == 0
    assert [r[0] for r in _read(out / "summary.csv")[1:]] == ["full:two_stage", "h-only:two_stage", "d-only:two_stage"]
    out = tmp_path / "s"
    assert cli.main(["crossval", "--config", cfg, "--out", str(out), "--strategy", "two-stage,scratch,joint",
                     "--figures"]) == 0
    assert [r[0] for r in _read(out / "summary.csv")[1:]] == ["full:two_stage", "full:scratch", "full:joint"]
    assert (out / "figures").is_dir() and list((out / "figures").glob("*.png"))


# ----------------------------------------------------------------------
# train, eval, features, maps, transfer


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _config(root, n=4)
    assert cli.main(["generate", "--config", cfg, "--out", str(root / "ds")]) == 0
    assert cli.main(["train", "--config", cfg, "--data", str(root / "ds"), "--out", str(root / "tr")]) == 0
    return root, cfg


def test_train_and_eval(trained):
    root, cfg = trained
    assert (root / "tr" / "model.ckpt").exists() and (root / "tr" / "history.csv").exists()
    assert cli.main(["eval", "--config", cfg, "--data", str(root / "ds"), "--out", str(root / "ev"),
                     "--checkpoint", str(root / "tr" / "model.ckpt")]) == 0
    preds = _read(root / "ev" / "predictions.csv")
    assert len(preds) == 9 and preds[0][:3] == ["id", "true", "predicted"]


def test_extract_features(trained):
    root, cfg = trained
    assert cli.main(["extract-features", "--config", cfg, "--data", str(root / "ds"), "--out", str(root / "fx"),
                     "--checkpoint", str(root / "tr" / "model.ckpt")]) == 0
    hand = _read(root / "fx" / "handcrafted.csv")
    pen = _read(root / "fx" / "penultimate.csv")
    assert len(hand) == len(pen) == 9
    assert len(hand[0]) == 1 + 5 * 4 and len(pen[0]) == 1 + 16


def test_export_maps(trained):
    root, cfg = trained
    args = ["export-maps", "--config", cfg, "--data", str(root / "ds"), "--out", str(root / "mp"),
            "--checkpoint", str(root / "tr" / "model.ckpt"), "--subject", "s0001"]
    assert cli.main(args) == 0
    files = list((root / "mp" / "maps" / "s0001").glob("stage1_*.pgm"))
    assert len(files) == 2 * 3
    assert all(read_pgm(f).dtype == np.uint8 for f in files)
    assert cli.main(args + ["--stage", "4"]) == 0
    files = list((root / "mp" / "maps" / "s0001").glob("stage4_*.pgm"))
    assert len(files) == 16 * 3
    # 1x1x1 maps hold one value per channel, so every image is the constant gray
    assert all(np.all(read_pgm(f) == CONSTANT_GRAY) for f in files)


def test_transfer(trained, tmp_path):
    root, cfg = trained
    assert cli.main(["transfer", "--config", cfg, "--data", str(root / "ds"), "--target", str(root / "ds"),
                     "--out", str(tmp_path / "t"), "--variant", "h-only", "--label-map", "0:0,1:1"]) == 0
    assert (tmp_path / "t" / "metrics.csv").exists()


# ----------------------------------------------------------------------
# exit codes


@pytest.mark.parametrize("argv", [
    ["crossval", "--config", "/nonexistent.yaml"],
    ["eval"],
    ["export-maps", "--subject", "s0000"],
    ["transfer"],
    ["frobnicate"],
    ["crossval", "--mask-rois", "a,b"],
])
def test_usage_errors_exit_one(argv, tmp_path):
    assert cli.main(argv + ["--out", str(tmp_path)]) == 1


def test_invalid_config_exits_one(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("model: {hiden: 3}\n")
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert "hiden" in capsys.readouterr().err


def test_runtime_failure_exits_two(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    cfg = _config(tmp_path, n=2)
    assert cli.main(["generate", "--config", cfg, "--out", str(blocker / "sub")]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hrl", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gradcheck" in proc.stdout
