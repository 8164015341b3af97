"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad config, flags or inputs),
2 runtime failure. Standard output carries only deterministic text; timings
and timestamps go to ``run.log`` in the output directory.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import report as rep
from .checkpoint import load_model, save_model
from .config import RunConfig, load_config, write_resolved
from .crossval import cross_validate, evaluate, transfer_eval
from .featuremaps import export_stage_maps
from .fusion import HrlModel
from .gradcheck import TOLERANCE, run_gradcheck
from .synth import Dataset, generate_dataset, load_dataset, save_dataset
from .train import pooled_backbone_features, prepare_inputs, train_hrl
from .volume_io import FormatError, write_feature_csv

logger = logging.getLogger("hrl")


class UsageError(Exception):
    """Invalid user input; maps to exit code 1."""


def _split(text: str | None) -> list[str] | None:
    return None if text is None else [t.strip() for t in text.split(",") if t.strip()]


def _int_list(text: str | None, flag: str) -> list[int] | None:
    items = _split(text)
    if items is None:
        return None
    try:
        return [int(t) for t in items]
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated integers, got {text!r}") from None


def _label_map(text: str | None) -> dict[int, int] | None:
    if text is None:
        return None
    out = {}
    for item in _split(text):
        try:
            a, b = item.split(":")
            out[int(a)] = int(b)
        except ValueError:
            raise UsageError(f"--label-map entries look like 'target:source', got {item!r}") from None
    return out


def resolve_config(args) -> RunConfig:
    try:
        cfg = load_config(args.config)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {args.config}") from None
    doc = cfg.model_dump()
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.out is not None:
        doc["export"]["out"] = args.out
    if getattr(args, "figures", False):
        doc["export"]["figures"] = True
    variants = _split(args.variant)
    if variants:
        doc["eval"]["variants"] = variants
        doc["model"]["variant"] = variants[0]
    strategies = _split(args.strategy)
    if strategies:
        doc["eval"]["strategies"] = strategies
        doc["train"]["strategy"] = strategies[0]
    masks = _int_list(args.mask_rois, "--mask-rois")
    if masks is not None:
        doc["data"]["mask_rois"] = masks
    if getattr(args, "data", None):
        doc["data"]["path"] = args.data
        doc["data"]["generator"] = None
    return RunConfig.model_validate(doc)


def _setup_logging(out_dir: Path, verbose: bool) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    fh = logging.FileHandler(out_dir / "run.log", mode="a")
    fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.addHandler(fh)
    err = logging.StreamHandler(sys.stderr)
    err.setLevel(logging.WARNING)
    err.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    # tracebacks belong in the log file, not on the terminal
    err.addFilter(lambda record: not record.exc_info)
    root.addHandler(err)


def obtain_dataset(cfg: RunConfig) -> Dataset:
    if cfg.data.path is not None:
        try:
            return load_dataset(cfg.data.path)
        except FileNotFoundError as exc:
            raise UsageError(f"dataset not found: {exc}") from None
    return generate_dataset(cfg.data.generator.phantom(), cfg.seed)


def _model_config(cfg: RunConfig, ds: Dataset):
    return cfg.model.build(ds.atlas.shape, len(ds.feature_names), ds.class_count)


def _print_rows(rows) -> None:
    print(rep.format_table(rows))


# ----------------------------------------------------------------------
# commands


def cmd_generate(cfg: RunConfig, args) -> int:
    if cfg.data.generator is None:
        raise UsageError("generate needs a data.generator section")
    phantom = cfg.data.generator.phantom()
    ds = generate_dataset(phantom, cfg.seed)
    out = Path(cfg.export.out)
    save_dataset(ds, out, phantom)
    sites = np.array([s.site for s in ds.subjects])
    rows = [["class", "subjects", "site0", "site1"]]
    for c in range(ds.class_count):
        m = ds.labels == c
        rows.append([str(c), str(int(m.sum())), str(int((m & (sites == 0)).sum())), str(int((m & (sites == 1)).sum()))])
    rows.append(["total", str(len(ds)), str(int((sites == 0).sum())), str(int((sites == 1).sum()))])
    _print_rows(rows)
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    ds = obtain_dataset(cfg)
    data = prepare_inputs(ds, cfg.data.mask_rois)
    hyper = cfg.train.hyper(cfg.seed)
    model = HrlModel(_model_config(cfg, ds), cfg.seed)
    result = train_hrl(model, data, hyper)
    out = Path(cfg.export.out)
    save_model(out / "model.ckpt", model, {"seed": cfg.seed, "strategy": hyper.strategy})
    rows = [["stage", "epoch", "loss", "acc"]]
    for name, stage in (("1", result.stage1), ("2", result.stage2)):
        if stage is not None:
            rows += [[name, str(e.epoch), rep.fmt(e.loss), rep.fmt(e.acc)] for e in stage.history]
    rep.write_rows(out / "history.csv", rows)
    print(f"trained {model.config.variant} ({hyper.strategy}) on {result.train_size} inputs; "
          f"stage-2 epochs {result.stage2.epochs}, final train acc {result.stage2.history[-1].acc:.4f}")
    return 0


def cmd_crossval(cfg: RunConfig, args) -> int:
    ds = obtain_dataset(cfg)
    out = Path(cfg.export.out)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    def on_fold(run, model):
        name = f"{run.variant}_{run.strategy}_r{run.repeat}_f{run.fold}.ckpt"
        save_model(ckpt_dir / name, model, {"repeat": run.repeat, "fold": run.fold, "seed": run.seed})

    result = cross_validate(ds, _model_config(cfg, ds), cfg.train.hyper(cfg.seed), cfg.eval.task,
                            cfg.eval.k, cfg.eval.repeats, cfg.variants(), cfg.strategies(),
                            cfg.data.mask_rois, on_fold=on_fold)
    rep.write_cv_reports(result, out)
    if cfg.export.figures:
        rep.write_cv_figures(result, out)
    _print_rows(rep.summary_rows(result))
    return 0


def _load_checkpoint(path) -> HrlModel:
    if path is None:
        raise UsageError("--checkpoint is required")
    try:
        model, _ = load_model(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None
    except FormatError as exc:
        raise UsageError(str(exc)) from None
    return model


def cmd_eval(cfg: RunConfig, args) -> int:
    model = _load_checkpoint(args.checkpoint)
    ds = obtain_dataset(cfg)
    data = prepare_inputs(ds, cfg.data.mask_rois)
    variant = (cfg.eval.variants or [model.config.variant])[0]
    report, probs = evaluate(model, data, cfg.eval.task, variant)
    _write_single(cfg, report, probs, data.ids, data.labels, f"{variant}:eval")
    return 0


def _write_single(cfg: RunConfig, report, probs, ids, labels, run_id: str) -> None:
    out = Path(cfg.export.out)
    rep.write_rows(out / "metrics.csv", rep.single_report_rows(report, run_id))
    k = probs.shape[1]
    pred = probs.argmax(axis=1)
    rows = [["id", "true", "predicted"] + [f"score{c}" for c in range(k)]]
    rows += [[i, str(int(t)), str(int(p))] + [rep.fmt(x) for x in pr] for i, t, p, pr in zip(ids, labels, pred, probs)]
    rep.write_rows(out / "predictions.csv", rows)
    cm = report.confusion
    rep.write_rows(out / "confusion.csv",
                   [["true"] + [f"pred{c}" for c in range(k)]] + [[str(t)] + [str(int(x)) for x in cm[t]] for t in range(k)])
    if cfg.export.figures:
        fig_dir = out / "figures"
        fig_dir.mkdir(parents=True, exist_ok=True)
        rep.plot_confusion(cm, fig_dir / "confusion.png", run_id)
        if k == 2:
            rep.plot_roc({run_id: rep.roc_curve(probs[:, 1], labels)}, fig_dir / "roc.png")
    _print_rows([["metric", "value"]] + [[m, rep.fmt(v)] for m, v in report.as_dict().items()])


def cmd_transfer(cfg: RunConfig, args) -> int:
    if not args.target:
        raise UsageError("--target DATASET_DIR is required")
    source = obtain_dataset(cfg)
    try:
        target = load_dataset(args.target)
    except FileNotFoundError as exc:
        raise UsageError(f"target dataset not found: {exc}") from None
    label_map = _label_map(args.label_map)
    mc = _model_config(cfg, source)
    res = transfer_eval(source, target, mc, cfg.train.hyper(cfg.seed), cfg.eval.task, cfg.model.variant,
                        label_map, cfg.data.mask_rois)
    save_model(Path(cfg.export.out) / "model.ckpt", res.model, {"seed": cfg.seed})
    _write_single(cfg, res.report, res.probs, res.test_ids, res.labels, f"{cfg.model.variant}:transfer")
    return 0


def cmd_extract_features(cfg: RunConfig, args) -> int:
    ds = obtain_dataset(cfg)
    out = Path(cfg.export.out)
    out.mkdir(parents=True, exist_ok=True)
    write_feature_csv(out / "handcrafted.csv", ds.ids, ds.feature_names, np.stack([s.features for s in ds.subjects]))
    msg = f"wrote handcrafted features for {len(ds)} subjects"
    if args.checkpoint:
        model = _load_checkpoint(args.checkpoint)
        data = prepare_inputs(ds, cfg.data.mask_rois)
        feats = pooled_backbone_features(model, data.volumes)
        rep.write_rows(out / "penultimate.csv", rep.feature_rows(data.ids, feats))
        msg += f" and {feats.shape[1]} pooled backbone features"
    print(msg)
    return 0


def cmd_export_maps(cfg: RunConfig, args) -> int:
    model = _load_checkpoint(args.checkpoint)
    if args.stage not in (1, 2, 3, 4):
        raise UsageError(f"unknown stage {args.stage}; expected 1-4")
    ds = obtain_dataset(cfg)
    if args.subject not in ds.ids:
        raise UsageError(f"unknown subject id {args.subject!r}")
    data = prepare_inputs(ds.subset([ds.ids.index(args.subject)]), cfg.data.mask_rois, ds.atlas)
    paths = export_stage_maps(model, data.volumes[0, 0], args.stage, Path(cfg.export.out) / "maps" / args.subject)
    print(f"wrote {len(paths)} slices for {args.subject} stage {args.stage}")
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    results = run_gradcheck(seed=cfg.seed)
    width = max(len(r.op) for r in results)
    for r in results:
        print(f"{r.op.ljust(width)}  {r.max_rel_error:.3e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} op(s) above {TOLERANCE:g}: " + ", ".join(f"{r.op} ({r.max_rel_error:.3e})" for r in failed))
        return 1
    print(f"all {len(results)} ops below {TOLERANCE:g}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "crossval": cmd_crossval,
    "eval": cmd_eval,
    "transfer": cmd_transfer,
    "extract-features": cmd_extract_features,
    "export-maps": cmd_export_maps,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="dataset directory (overrides the config's data section)")
    common.add_argument("--variant", help="full, h-only, d-only (comma list for sweeps)")
    common.add_argument("--strategy", help="two-stage, scratch, joint (comma list for sweeps)")
    common.add_argument("--mask-rois", help='keep only these ROI ids in the network input, e.g. "1,5,7"')
    common.add_argument("--figures", action="store_true", help="also render PNG figures")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hrl", description="Hybrid CNN/transformer classifier for 3-d volumes.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("eval", "extract-features", "export-maps"):
            p.add_argument("--checkpoint")
        if name == "export-maps":
            p.add_argument("--subject", required=True)
            p.add_argument("--stage", type=int, default=1)
        if name == "transfer":
            p.add_argument("--target", help="target dataset directory")
            p.add_argument("--label-map", help='target:source pairs, e.g. "0:0,1:1,2:1"')
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        cfg = resolve_config(args)
        out = Path(cfg.export.out)
        _setup_logging(out, args.verbose)
        write_resolved(cfg, out)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ValidationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        # inconsistent inputs detected by the library (shapes, labels, strategies)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        if logging.getLogger().handlers:
            logger.exception("command failed")
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
