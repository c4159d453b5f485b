"""Command-line entry point: ``flatland {train,eval,landscape,gen-data}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, config_from_dict, load_config
from .data import domain_split, export_dataset, generate_synthetic_domains
from .landscape import (loss_slice_1d, loss_slice_2d, sample_direction, sharpness, write_slice_csv,
                        write_slice_svg)
from .models import build_model, load_model, save_model
from .pipeline import (StageDivergedError, accuracy, leave_one_domain_out_eval, run_dfp, tta_predict,
                       validate_plans, write_metrics_csv)

log = logging.getLogger("flatland")


class CommandError(RuntimeError):
    pass


def _versions() -> dict:
    import scipy
    return {"flatland": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def _parse_stages(text: str | None, cfg: RunConfig):
    if not text:
        return list(cfg.stages)
    try:
        wanted = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise CommandError(f"--stages: expected comma-separated stage numbers, got {text!r}") from None
    plans = []
    for k in wanted:
        try:
            plans.append(cfg.plan(k))
        except KeyError as exc:
            raise CommandError(f"--stages: {exc.args[0]}") from None
    try:
        validate_plans(plans)
    except ValueError as exc:
        raise CommandError(f"--stages: {exc}") from None
    return plans


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    plans = _parse_stages(args.stages, cfg)
    ds = generate_synthetic_domains(cfg.dataset, cfg.dataset_seed)
    split = domain_split(ds, cfg.held_out_domain, cfg.val_fraction, cfg.seed)
    model = build_model(cfg.model, cfg.shakedrop, seed=cfg.seed)
    cfg_dict = cfg.to_dict()
    written = []

    def on_stage_end(res):
        k = res.stage_index
        metrics = out / f"metrics_stage{k}.csv"
        write_metrics_csv(metrics, res.rows)
        ckpt = out / f"stage{k}.ckpt"
        save_model(ckpt, model, stage=k, resolution=cfg.plan(k).resolution, config=cfg_dict)
        written.extend([metrics.name, ckpt.name])
        print(f"stage {k} ({res.loss_mode}): {res.epochs} epochs, train loss {res.final_train_loss:.4f}, "
              f"val acc {res.val_acc:.4f}")

    started = time.time()
    try:
        result = run_dfp(plans, ds, model, split, cfg.distill, cfg.seed, cfg.augment, on_stage_end=on_stage_end)
    except StageDivergedError as exc:
        raise CommandError(str(exc)) from None
    summary = out / "summary.csv"
    with summary.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "loss_mode", "epochs", "final_train_loss", "val_acc", "terminated_by_scheduler"])
        for s in result.stages:
            w.writerow([s.stage_index, s.loss_mode, s.epochs, repr(s.final_train_loss), repr(s.val_acc),
                        s.terminated_by_scheduler])
    manifest = {
        "command": "train",
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "stages": [p.stage_index for p in plans],
        "versions": _versions(),
        "outputs": written + [summary.name],
        "config": cfg_dict,
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    for name in manifest["outputs"]:
        if not (out / name).is_file():
            raise CommandError(f"expected output {name} was not written")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _checkpoint_context(path):
    try:
        model, header = load_model(path)
    except (OSError, CheckpointError, ValueError, KeyError, TypeError) as exc:
        raise CommandError(f"cannot load checkpoint {path}: {exc}") from None
    meta = header.get("meta", {})
    cfg = config_from_dict(meta["config"]) if "config" in meta else RunConfig()
    return model, meta, cfg


def _eval_dataset(args, cfg: RunConfig, model, resolution: int):
    if args.config:
        cfg = load_config(args.config)
    ds = generate_synthetic_domains(cfg.dataset, cfg.dataset_seed)
    if ds.num_classes != model.spec.num_classes:
        raise CommandError(f"checkpoint predicts {model.spec.num_classes} classes, dataset has {ds.num_classes}")
    try:
        model.spec.stage_resolutions(resolution)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    return cfg, ds


def cmd_eval(args) -> int:
    model, meta, cfg = _checkpoint_context(args.checkpoint)
    resolution = args.resolution or meta.get("resolution") or model.spec.input_resolution
    cfg, ds = _eval_dataset(args, cfg, model, resolution)
    out = Path(args.out) if args.out else Path(args.checkpoint).resolve().parent
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.checkpoint).stem

    if args.lodo:
        factory = lambda: build_model(model.spec, model.shakedrop, seed=cfg.seed, use_shakedrop=model.use_shakedrop)
        report = leave_one_domain_out_eval(factory, ds, cfg.stages, cfg.distill, cfg.seed, cfg.val_fraction)
        path = out / f"{stem}_lodo.csv"
        report.write_csv(path)
        for d, acc in report.rows:
            print(f"held-out domain {d}: {acc:.4f}")
        print(f"average: {report.average:.4f}")
        return 0

    split = domain_split(ds, cfg.held_out_domain, cfg.val_fraction, cfg.seed)
    imgs = ds.images(resolution)[split.test]
    labels = ds.labels[split.test]
    plain = accuracy(model, imgs, labels)
    rows = [("accuracy", plain)]
    if args.tta is not None:
        rng = np.random.default_rng([cfg.seed, 80])
        probs = tta_predict(model, imgs, args.tta, rng, cfg=cfg.augment)
        rows.append(("tta_accuracy", float(np.mean(probs.argmax(axis=1) == labels))))
    path = out / f"{stem}_eval.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for name, v in rows:
            w.writerow([name, repr(v)])
    for name, v in rows:
        print(f"{name}: {v:.4f}")
    return 0


# ---------------------------------------------------------------------------
# landscape
# ---------------------------------------------------------------------------

def cmd_landscape(args) -> int:
    model, meta, cfg = _checkpoint_context(args.checkpoint)
    lc = cfg.landscape
    resolution = args.resolution or meta.get("resolution") or model.spec.input_resolution
    cfg, ds = _eval_dataset(args, cfg, model, resolution)
    split = domain_split(ds, cfg.held_out_domain, cfg.val_fraction, cfg.seed)
    which = args.split or lc.split
    idx = getattr(split, which)
    rng = np.random.default_rng(args.seed)
    samples = args.samples or lc.samples
    pick = idx[rng.permutation(len(idx))[:samples]]
    data = (ds.images(resolution)[pick], ds.labels[pick])
    mode = args.normalization or lc.mode
    r = args.r if args.r is not None else lc.r
    steps = args.steps or (lc.steps if args.mode == "1d" else 21)
    try:
        if args.mode == "1d":
            sl = loss_slice_1d(model, data, sample_direction(model, mode, rng), r, steps, seed=args.seed, split=which)
        else:
            d1 = sample_direction(model, mode, rng)
            d2 = sample_direction(model, mode, rng)
            sl = loss_slice_2d(model, data, d1, d2, r, steps, seed=args.seed, split=which)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    out = Path(args.out) if args.out else Path(args.checkpoint).resolve().parent
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{Path(args.checkpoint).stem}_landscape_{args.mode}_seed{args.seed}"
    write_slice_csv(out / f"{stem}.csv", sl)
    if args.svg:
        write_slice_svg(out / f"{stem}.svg", sl)
    value = sharpness(sl) if steps > 1 else 0.0
    print(f"base loss: {sl.base_loss:.6f}")
    print(f"sharpness: {value:.6f}")
    return 0


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    out = Path(args.out or Path(cfg.output_dir) / "data")
    ds = generate_synthetic_domains(cfg.dataset, cfg.dataset_seed)
    split = domain_split(ds, cfg.held_out_domain, cfg.val_fraction, cfg.seed)
    export_dataset(ds, out, split, args.resolution)
    print(f"wrote {len(ds)} images to {out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flatland", description="Desk-scale flat-minimum training toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the staged training pipeline")
    t.add_argument("config", help="JSON run configuration")
    t.add_argument("--stages", help="comma-separated subset of stages, e.g. 1 or 1,2")
    t.add_argument("--out", help="output directory (default: config output_dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="held-out accuracy of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--config", help="dataset/run configuration (default: the one stored in the checkpoint)")
    e.add_argument("--tta", type=int, help="also report test-time-augmented accuracy with N augmented copies")
    e.add_argument("--lodo", action="store_true", help="leave-one-domain-out table (retrains per domain)")
    e.add_argument("--resolution", type=int)
    e.add_argument("--out", help="output directory (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("landscape", help="loss slice around a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--config")
    s.add_argument("--mode", choices=("1d", "2d"), default="1d")
    s.add_argument("--r", type=float)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--normalization", choices=("filter", "global", "none"))
    s.add_argument("--samples", type=int)
    s.add_argument("--split", choices=("train", "val", "test"))
    s.add_argument("--resolution", type=int)
    s.add_argument("--svg", action="store_true", help="also render an SVG")
    s.add_argument("--out")
    s.set_defaults(func=cmd_landscape)

    g = sub.add_parser("gen-data", help="export the synthetic dataset as raw RGB files")
    g.add_argument("--config")
    g.add_argument("--resolution", type=int)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CommandError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
