"""Command line: gen-data, train, predict, eval, gradcheck, bench.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure
(training divergence or a failed gradient check).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig

log = logging.getLogger("igcn")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


class CliError(Exception):
    def __init__(self, message, code=EXIT_INVALID):
        super().__init__(message)
        self.code = code


def _load_config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"run.seed={args.seed}")
    if getattr(args, "workers", None) is not None:
        overrides.append(f"run.workers={args.workers}")
    for flag, key in (("epochs", "training.epochs"), ("lr", "training.lr")):
        if getattr(args, flag, None) is not None:
            overrides.append(f"{key}={getattr(args, flag)}")
    rc = RunConfig.load(args.config, overrides)
    if getattr(args, "paper_scale", False):
        rc = rc.with_paper_scale()
    return rc


def _dir(rc: RunConfig, args, attr: str, key: str) -> Path:
    value = getattr(args, attr, None)
    return Path(value if value is not None else rc["paths"][key])


def _dataset_dir(rc, args) -> Path:
    return _dir(rc, args, "dataset", "dataset_dir")


def _load_split(root: Path, splits):
    from .dataset import load_dataset

    if not (root / "manifest.csv").exists():
        raise CliError(f"no dataset at {root} (run gen-data first)")
    samples = load_dataset(root, splits)
    if not samples:
        raise CliError(f"dataset at {root} has no {'/'.join(splits)} samples")
    return samples


def _load_checkpoint(path):
    from .train import load_model

    try:
        return load_model(path)
    except FileNotFoundError as exc:
        raise CliError(str(exc)) from exc


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .dataset import build_dataset, plan_dataset, write_dataset

    rc = _load_config(args)
    cfg = rc.dataset_config()
    out = _dir(rc, args, "out", "dataset_dir")
    plans = plan_dataset(cfg)
    counts = {k: sum(p.split == k for p in plans) for k in ("train", "augment", "test")}
    print(f"plan: train {counts['train']} (rbf) + augment {counts['augment']} (translation) = "
          f"{counts['train'] + counts['augment']} training, test {counts['test']}; "
          f"image {cfg.image_size}x{cfg.image_size}, grid {tuple(cfg.phantom.grid_spacing)} mm")
    if args.dry_run:
        return EXIT_OK
    samples = build_dataset(cfg, workers=rc["run"]["workers"])
    manifest = write_dataset(out, samples, cfg.camera())
    rc.echo(out)
    digest = hashlib.sha256(manifest.read_bytes()).hexdigest()[:16]
    print(f"wrote {len(samples)} samples to {out} (manifest sha256 {digest})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .model import IgcnModel
    from .train import TrainingDiverged, save_model, train, write_log, write_timing

    rc = _load_config(args)
    samples = _load_split(_dataset_dir(rc, args), ("train", "augment"))
    out = _dir(rc, args, "out", "checkpoint_dir")
    out.mkdir(parents=True, exist_ok=True)
    rc.echo(out)
    variant = args.variant
    tcfg = rc.training_config()
    model = IgcnModel(rc.model_config(variant), seed=rc.seed)
    stem = out / variant
    history = []

    def on_epoch(rec, result):
        history.append(rec)
        if args.verbose or rec.epoch == 1 or rec.epoch % max(1, tcfg.epochs // 10) == 0:
            print(f"epoch {rec.epoch:5d}  total {rec.total:.6g}  pos {rec.l_pos:.6g}  map {rec.l_map:.6g}  "
                  f"lap {rec.l_laplacian:.6g}  train rmse {rec.train_rmse_mm:.3f} mm", flush=True)
        if tcfg.checkpoint_every and rec.epoch % tcfg.checkpoint_every == 0:
            save_model(f"{stem}_epoch{rec.epoch:04d}.ckpt", model, result.scale, result.adam,
                       {"variant": variant, "epoch": rec.epoch})

    try:
        result = train(model, samples, tcfg, on_epoch=on_epoch)
    except TrainingDiverged as exc:
        write_log(f"{stem}_log.csv", history)
        model.load_arrays(exc.last_good)
        from .train import coordinate_scale
        save_model(f"{stem}_last_good.ckpt", model, coordinate_scale(samples), None,
                   {"variant": variant, "epoch": exc.epoch - 1})
        raise CliError(f"training diverged: {exc}; last good parameters saved to {stem}_last_good.ckpt",
                       EXIT_NUMERIC) from exc
    write_log(f"{stem}_log.csv", result.history)
    write_timing(f"{stem}_timing.csv", result.history)
    save_model(f"{stem}.ckpt", model, result.scale, result.adam, {"variant": variant, "epoch": tcfg.epochs})
    print(f"wrote {stem}.ckpt and {stem}_log.csv")
    return EXIT_OK


def _variant_name(meta, path) -> str:
    return meta.get("variant") or Path(path).stem


def cmd_predict(args) -> int:
    from .mesh import write_obj
    from .train import predict

    rc = _load_config(args)
    model, scale, _, meta = _load_checkpoint(args.checkpoint)
    samples = {s.sample_id: s for s in _load_split(_dataset_dir(rc, args), ("train", "augment", "test"))}
    if args.sample not in samples:
        raise CliError(f"unknown sample id {args.sample!r}")
    s = samples[args.sample]
    try:
        mesh, ms = predict(model, s.initial_mesh, s.drr, s.camera, scale)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    variant = _variant_name(meta, args.checkpoint)
    out = _dir(rc, args, "out", "report_dir") / "predictions"
    out.mkdir(parents=True, exist_ok=True)
    rc.echo(out)
    path = out / f"{s.sample_id}_{variant}.obj"
    write_obj(path, mesh)
    timing = out / "timing.csv"
    new = not timing.exists()
    with open(timing, "a", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if new:
            w.writerow(["sample_id", "variant", "forward_ms"])
        w.writerow([s.sample_id, variant, f"{ms:.3f}"])
    print(f"wrote {path}")
    print(f"forward_ms={ms:.3f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate_suite
    from .train import predict

    rc = _load_config(args)
    test = _load_split(_dataset_dir(rc, args), ("test",))
    predictors = {}
    for path in args.checkpoints:
        model, scale, _, meta = _load_checkpoint(path)
        name = _variant_name(meta, path)
        if name in predictors:
            name = Path(path).stem
        predictors[name] = (lambda m, sc: lambda s: predict(m, s.initial_mesh, s.drr, s.camera, sc))(model, scale)
    if args.oracle:
        predictors["Ground truth"] = lambda s: (s.target_mesh, 0.0)
    report = evaluate_suite(predictors, test, rc["metrics"]["grid_spacing"], workers=rc["run"]["workers"])
    out = _dir(rc, args, "out", "report_dir")
    out.mkdir(parents=True, exist_ok=True)
    rc.echo(out)
    (out / "report.csv").write_text(report.to_csv())
    text = report.to_text()
    (out / "report.txt").write_text(text)
    print(text, end="")
    print(f"wrote {out / 'report.csv'} and {out / 'report.txt'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .engine import ops
    from .engine.gradcheck import CheckResult, run_suite
    from .model import end_to_end_gradcheck

    for name in args.inject_fault or ():
        ops.FAULTS.add(name)
    try:
        results = run_suite(np.random.default_rng(args.seed if args.seed is not None else 1234),
                            tol=args.tolerance)
        if not args.ops_only:
            results.append(CheckResult("end_to_end_loss_total", end_to_end_gradcheck(), args.end_to_end_tolerance))
    finally:
        ops.FAULTS.clear()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<24} rel err {r.error:.3e}  (tol {r.tolerance:g})")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed: {', '.join(failed)}")
        return EXIT_NUMERIC
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_bench(args) -> int:
    from . import _accel
    from .bench import format_rows, forward_ms, run_kernel_bench

    rows = run_kernel_bench(args.image_size, args.repeats)
    print(f"active backend: {_accel.backend_name()} (numba available: {_accel.HAVE_NUMBA})")
    print(format_rows(rows))
    fwd = forward_ms(args.image_size, args.repeats)
    print(f"model forward ({args.image_size}x{args.image_size}, full): {fwd:.1f} ms")
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["kernel", "numba_ms", "numpy_ms", "speedup", "max_abs_diff"])
            for r in rows:
                w.writerow([r.name, f"{r.numba_ms:.4f}", f"{r.numpy_ms:.4f}", f"{r.speedup:.3f}", f"{r.max_abs_diff:.3e}"])
            w.writerow(["model_forward", f"{fwd:.4f}", "", "", ""])
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="INI configuration file")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("--seed", type=int, help="global seed (overrides run.seed)")
    common.add_argument("--workers", type=int, help="parallel workers for gen-data and eval")
    common.add_argument("--verbose", "-v", action="store_true")

    p = argparse.ArgumentParser(prog="igcn", description="Image-to-graph organ mesh reconstruction.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    g.add_argument("--out", help="dataset directory (overrides paths.dataset_dir)")
    g.add_argument("--paper-scale", action="store_true", help="640x640 images, 20+124 training and 15 test samples")
    g.add_argument("--dry-run", action="store_true", help="print the split plan only")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train one model variant")
    t.add_argument("--variant", choices=("full", "no-mapping"), default="full")
    t.add_argument("--dataset", help="dataset directory")
    t.add_argument("--out", help="checkpoint directory")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("predict", parents=[common], help="predict one sample's mesh")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--sample", required=True, help="sample id from the manifest")
    r.add_argument("--dataset", help="dataset directory")
    r.add_argument("--out", help="report directory")
    r.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", parents=[common], help="score checkpoints on the test split")
    e.add_argument("--checkpoints", nargs="+", default=[])
    e.add_argument("--oracle", action="store_true", help="add a ground-truth column")
    e.add_argument("--dataset", help="dataset directory")
    e.add_argument("--out", help="report directory")
    e.set_defaults(func=cmd_eval)

    k = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    k.add_argument("--inject-fault", action="append", metavar="OP", help="flip the sign of OP's backward")
    k.add_argument("--tolerance", type=float, default=1e-4)
    k.add_argument("--end-to-end-tolerance", type=float, default=1e-3)
    k.add_argument("--ops-only", action="store_true", help="skip the whole-model check")
    k.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", parents=[common], help="numba vs numpy kernel timings")
    b.add_argument("--image-size", type=int, default=128)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--out", help="CSV file for the timings")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
