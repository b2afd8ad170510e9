"""``urbanwind`` command line: data generation, training, search, Pareto
reporting, benchmarking, counting and prediction.

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import os
import platform
import shutil
import sys
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from ._kernels import BACKEND

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DESK = {"scenes": 16, "grid": 128, "trials": 16, "search_epochs": 5}
PAPER = {"scenes": 163, "grid": 1024, "trials": 128, "search_epochs": 30}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def write_run_manifest(path: Path, command: str, args: argparse.Namespace, argv: list[str], artifacts: list[str],
                       started: str, extra: dict | None = None) -> None:
    """Replay record next to an output; the only place timestamps appear."""
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    payload = {
        "command": command,
        "argv": argv,
        "flags": flags,
        "seeds": {k: v for k, v in flags.items() if "seed" in k},
        "artifacts": artifacts,
        "tool_version": __version__,
        "kernel_backend": BACKEND,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "started": started,
        "finished": _now(),
    }
    if extra:
        payload.update(extra)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    os.replace(tmp, path)


@contextmanager
def cleanup_on_error(*paths: Path):
    """Remove outputs this command created if it fails part-way."""
    fresh = [p for p in paths if not p.exists()]
    try:
        yield
    except BaseException:
        for p in fresh:
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()
        raise


def _load_config(path: str):
    from .model import ModelConfig

    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    return ModelConfig.from_json(text)


def _open_dataset(root: str):
    from .data import Dataset

    try:
        return Dataset(root)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"dataset {root}: {exc}") from None


def _load_ckpt(path: str):
    from .train import CheckpointError, load_checkpoint

    try:
        return load_checkpoint(path)
    except (OSError, CheckpointError) as exc:
        raise DataError(f"checkpoint {path}: {exc}") from None


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args, argv) -> int:
    from .data import build_dataset

    started = _now()
    scale = PAPER if args.paper_scale else DESK
    args.scenes = args.scenes if args.scenes is not None else scale["scenes"]
    args.grid = args.grid if args.grid is not None else scale["grid"]
    if args.scenes < 10:
        raise UsageError("--scenes must be >= 10")
    if args.grid < 64 or args.grid % 64:
        raise UsageError("--grid must be a positive multiple of 64")
    out = Path(args.out)
    with cleanup_on_error(out):
        manifest = build_dataset(args.scenes, args.grid, args.seed, out, workers=args.workers, previews=args.previews)
        write_run_manifest(out / "run.json", "gen-data", args, argv, [str(out / "manifest.json"), str(out / "data")],
                           started)
    sizes = {k: len(v) for k, v in manifest.splits.items()}
    print(f"wrote {manifest.n_scenes} scenes x {manifest.directions} directions = {manifest.n_samples} samples "
          f"({manifest.grid}x{manifest.grid}) to {out}; split train/val/test = "
          f"{sizes['train']}/{sizes['val']}/{sizes['test']} scenes")
    return EXIT_OK


def cmd_train(args, argv) -> int:
    from .model import build_model
    from .train import TrainConfig, make_checkpoint, save_checkpoint, train

    started = _now()
    cfg = _load_config(args.config)
    if not args.lr > 0:
        raise UsageError("--lr must be > 0")
    tc = TrainConfig(learning_rate=args.lr, weight_decay=args.weight_decay, epochs=args.epochs,
                     batch_size=args.batch_size, huber_delta=args.huber_delta, seed=args.seed,
                     head_init=args.head_init)
    try:
        tc.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ds = _open_dataset(args.data)
    out = Path(args.out)
    loss_csv = Path(args.loss_csv) if args.loss_csv else out.with_name(out.name + ".loss.csv")
    with cleanup_on_error(out, loss_csv):
        model = build_model(cfg, seed=args.seed)
        result = train(model, ds.split("train"), ds.split("val"), tc, loss_csv=loss_csv,
                       on_epoch=None if args.quiet else lambda r: print(
                           f"epoch {r.epoch}: train {r.train_loss:.6f} val {r.val_loss:.6f}", flush=True))
        save_checkpoint(out, make_checkpoint(model, result.optimizer, tc.epochs, tc, result.history))
        write_run_manifest(out.with_name(out.name + ".run.json"), "train", args, argv, [str(out), str(loss_csv)],
                           started, {"final_val_loss": result.final_val_loss})
    print(f"final validation loss {result.final_val_loss!r}; checkpoint {out}")
    return EXIT_OK


def cmd_search(args, argv) -> int:
    from .model import parse_arch
    from .search import ParamSpace, SearchSettings, run_search

    started = _now()
    scale = PAPER if args.paper_scale else DESK
    args.trials = args.trials if args.trials is not None else scale["trials"]
    args.epochs = args.epochs if args.epochs is not None else scale["search_epochs"]
    try:
        parse_arch(args.arch)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.trials < 1 or args.epochs < 1:
        raise UsageError("--trials and --epochs must be >= 1")
    _open_dataset(args.data)
    space = ParamSpace.for_arch(args.arch, tiny=args.tiny)
    settings = SearchSettings(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                              bench_warmup=args.bench_warmup, bench_repeats=args.bench_repeats,
                              head_init=args.head_init)

    def report(r):
        if not args.quiet:
            status = f"loss {r.loss:.6f} runtime {r.runtime_ms:.2f} ms" if r.ok else f"FAILED ({r.error})"
            print(f"[{space.architecture}] trial {r.trial}: {status}", flush=True)

    out = Path(args.out)
    # the results file doubles as resume state, so it is kept on failure
    results = run_search(space, args.trials, args.data, args.seed, out, settings, workers=args.workers,
                         on_result=report)
    write_run_manifest(out.with_name(out.name + ".run.json"), "search", args, argv, [str(out)], started)
    ok = sum(r.ok for r in results)
    print(f"{space.architecture}: {len(results)} trials ({ok} ok) in {out}")
    return EXIT_OK


def cmd_pareto(args, argv) -> int:
    from .analysis import export_report, points_from_results, summarize_tradeoff
    from .search import read_results

    started = _now()
    results = []
    for path in args.inputs:
        try:
            results += read_results(path)
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"{path}: {exc}") from None
    points = points_from_results(results)
    prefix = Path(args.out_prefix)
    csv_path, svg_path = prefix.with_name(prefix.name + ".csv"), prefix.with_name(prefix.name + ".svg")
    with cleanup_on_error(csv_path, svg_path):
        front = export_report(points, prefix)
        extra = {"front_size": len(front)}
        if front:
            extra["tradeoff"] = summarize_tradeoff(front)
        write_run_manifest(prefix.with_name(prefix.name + ".run.json"), "pareto", args, argv,
                           [str(csv_path), str(svg_path)], started, extra)
    print(f"{len(points)} trials -> {len(front)} front members; wrote {csv_path} and {svg_path}")
    for p in front:
        print(f"  {p.config:<18} loss {p.loss:.6f} runtime {p.runtime_ms:8.3f} ms "
              f"rel {p.relative_loss:.4f}/{p.relative_runtime:.4f}")
    return EXIT_OK


def cmd_bench(args, argv) -> int:
    from .analysis import bench_runtime

    ckpt = _load_ckpt(args.ckpt)
    model = ckpt.build()
    if args.grid < 64 or args.grid % 64:
        raise UsageError("--grid must be a positive multiple of 64")
    rep = bench_runtime(model, (1, ckpt.config.input_channels, args.grid, args.grid), args.warmup, args.repeats)
    print(json.dumps({k: v for k, v in rep.to_dict().items() if k != "times_ms"}, sort_keys=True))
    return EXIT_OK


def cmd_count(args, argv) -> int:
    from .model import count_macs, count_params

    cfg = _load_config(args.config)
    if args.grid < 64 or args.grid % 64:
        raise UsageError("--grid must be a positive multiple of 64")
    print(json.dumps({"architecture": cfg.architecture, "params": count_params(cfg),
                      "macs": count_macs(cfg, args.grid, args.grid), "grid": args.grid}, sort_keys=True))
    return EXIT_OK


def cmd_predict(args, argv) -> int:
    from .data import N_DIRECTIONS, model_input, read_height

    started = _now()
    if not 0 <= args.dir < N_DIRECTIONS:
        raise UsageError(f"--dir must be in 0..{N_DIRECTIONS - 1}")
    ckpt = _load_ckpt(args.ckpt)
    scene = Path(args.scene)
    hpath = scene / "height.f32"
    if not hpath.exists():
        raise DataError(f"{hpath}: not found")
    grid = int(round((hpath.stat().st_size // 4) ** 0.5))
    try:
        heights = read_height(scene, grid)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    model = ckpt.build()
    pred = model.predict(model_input(heights, args.dir)[None])[0]
    q = np.clip(np.floor(pred.astype(np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    out = Path(args.out)
    with cleanup_on_error(out):
        tmp = out.with_name(f".{out.name}.tmp")
        if out.suffix.lower() == ".png":
            from PIL import Image

            Image.fromarray(np.ascontiguousarray(q), mode="RGB").save(tmp, format="PNG")
        else:
            tmp.write_bytes(np.ascontiguousarray(q).tobytes())
        os.replace(tmp, out)
        write_run_manifest(out.with_name(out.name + ".run.json"), "predict", args, argv, [str(out)], started)
    print(f"wrote {grid}x{grid}x3 quantized prediction to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # one-line diagnostic, usage exit code
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="urbanwind", description="CNN surrogate for pedestrian-level urban wind fields.")
    p.add_argument("--version", action="version", version=f"urbanwind {__version__} ({BACKEND} kernels)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic scene/wind dataset")
    g.add_argument("--scenes", type=int, default=None, help="number of scenes (default 16, paper scale 163)")
    g.add_argument("--grid", type=int, default=None, help="grid size G (default 128, paper scale 1024)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--previews", action="store_true", help="also write 8-bit PNG previews")
    g.add_argument("--paper-scale", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", required=True, help="ModelConfig JSON file")
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--batch-size", type=int, default=4)
    t.add_argument("--weight-decay", type=float, default=0.01)
    t.add_argument("--huber-delta", type=float, default=1.0)
    t.add_argument("--head-init", choices=["target_mean", "none"], default="target_mean",
                   help="output-layer start: constant training-mean predictor, or plain random init")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--loss-csv", default=None, help="default: <out>.loss.csv")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("search", help="random hyperparameter search for one architecture")
    s.add_argument("--arch", required=True, help="Half-U-NeXt, Half-U-Net, U-NeXt or U-Net")
    s.add_argument("--trials", type=int, default=None, help="default 16, paper scale 128")
    s.add_argument("--epochs", type=int, default=None, help="default 5, paper scale 30")
    s.add_argument("--data", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="results CSV (appended, resumable)")
    s.add_argument("--tiny", action="store_true", help="restrict widths to the smallest tested row")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--batch-size", type=int, default=4)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--bench-warmup", type=int, default=10)
    s.add_argument("--bench-repeats", type=int, default=50)
    s.add_argument("--head-init", choices=["target_mean", "none"], default="target_mean")
    s.add_argument("--paper-scale", action="store_true")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_search)

    pa = sub.add_parser("pareto", help="Pareto front report from search CSVs")
    pa.add_argument("--in", dest="inputs", nargs="+", required=True)
    pa.add_argument("--out-prefix", required=True)
    pa.set_defaults(func=cmd_pareto)

    b = sub.add_parser("bench", help="benchmark inference runtime of a checkpoint")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--repeats", type=int, default=50)
    b.add_argument("--warmup", type=int, default=10)
    b.add_argument("--grid", type=int, default=128)
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("count", help="parameter and multiply-add counts of a config")
    c.add_argument("--config", required=True)
    c.add_argument("--grid", type=int, default=128)
    c.set_defaults(func=cmd_count)

    pr = sub.add_parser("predict", help="predict a quantized wind field for one scene and direction")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--scene", required=True, help="scene directory containing height.f32")
    pr.add_argument("--dir", type=int, required=True, help="direction index 0..7")
    pr.add_argument("--out", required=True, help=".png for an RGB preview, anything else for raw G x G x 3 bytes")
    pr.set_defaults(func=cmd_predict)
    return p


def main(argv: list[str] | None = None) -> int:
    from .data import ConvergenceError
    from .model import ConfigError
    from .tensor import NonFiniteError

    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args, argv)
    except (UsageError, ConfigError) as exc:
        code, msg = EXIT_USAGE, str(exc)
    except (DataError, FileNotFoundError) as exc:
        code, msg = EXIT_DATA, str(exc)
    except (NonFiniteError, ConvergenceError, FloatingPointError) as exc:
        code, msg = EXIT_NUMERIC, str(exc)
    except OSError as exc:
        code, msg = EXIT_DATA, f"{exc.filename or ''}: {exc.strerror or exc}"
    except KeyboardInterrupt:
        code, msg = 130, "interrupted"
    print(f"urbanwind: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
