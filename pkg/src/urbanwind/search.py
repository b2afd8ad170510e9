"""Random search over the tested hyperparameter spaces of each architecture."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import rng as rngmod
from .model import ARCHITECTURES, ConfigError, ModelConfig, build_model, count_macs, count_params, parse_arch
from .tensor import NonFiniteError

RESULT_FIELDS = ["trial", "arch", "loss", "runtime_ms", "params", "macs", "seed", "config_json"]

BLOCK_OPTIONS = ([1] * 5, [2] * 5, [4] * 5)
COUNT_OPTIONS = (1, 2, 4)
DROPOUT_OPTIONS = (0.1, 0.2, 0.3)
UNET_ENCODERS = ([32, 64, 128, 256, 512], [64, 128, 256, 512, 1024], [128, 256, 512, 1024, 2048])
HALF_ENCODERS = ([32] * 5, [64] * 5, [128] * 5)


@dataclass(frozen=True)
class ParamSpace:
    architecture: str
    block_type: str
    decoder_type: str
    encoder_channels: tuple[tuple[int, ...], ...]
    encoder_blocks: tuple[tuple[int, ...], ...] = tuple(map(tuple, BLOCK_OPTIONS))
    decoder_blocks: tuple[tuple[int, ...], ...] = tuple(map(tuple, BLOCK_OPTIONS))
    output_blocks: tuple[int, ...] = COUNT_OPTIONS
    resmerge_blocks: tuple[int, ...] = COUNT_OPTIONS
    dropout: tuple[float, ...] = DROPOUT_OPTIONS

    @classmethod
    def for_arch(cls, name: str, tiny: bool = False) -> ParamSpace:
        block_type, decoder_type = parse_arch(name)
        encoders = UNET_ENCODERS if decoder_type == "unet" else HALF_ENCODERS
        if tiny:
            encoders = encoders[:1]
        return cls(ARCHITECTURES[(decoder_type, block_type)], block_type, decoder_type,
                   tuple(tuple(e) for e in encoders))

    def decoder_channels(self, encoder: Sequence[int]) -> list[int]:
        # reversed for the U-Net decoder, identical for the Half-U-Net decoder
        return list(reversed(encoder)) if self.decoder_type == "unet" else list(encoder)

    def size(self) -> int:
        return (len(self.encoder_channels) * len(self.encoder_blocks) * len(self.decoder_blocks)
                * len(self.output_blocks) * len(self.resmerge_blocks) * len(self.dropout))

    def contains(self, cfg: ModelConfig) -> bool:
        return (cfg.block_type == self.block_type and cfg.decoder_type == self.decoder_type
                and tuple(cfg.encoder_channels) in self.encoder_channels
                and list(cfg.decoder_channels) == self.decoder_channels(cfg.encoder_channels)
                and tuple(cfg.encoder_blocks) in self.encoder_blocks
                and tuple(cfg.decoder_blocks) in self.decoder_blocks
                and cfg.output_blocks in self.output_blocks
                and cfg.resmerge_blocks in self.resmerge_blocks
                and cfg.dropout in self.dropout)


def sample_config(space: ParamSpace, gen: np.random.Generator) -> ModelConfig:
    """One independent uniform draw per axis, in a fixed axis order."""
    def pick(options):
        return options[int(gen.integers(len(options)))]

    enc = list(pick(space.encoder_channels))
    cfg = ModelConfig(
        block_type=space.block_type,
        decoder_type=space.decoder_type,
        encoder_channels=enc,
        decoder_channels=space.decoder_channels(enc),
        encoder_blocks=list(pick(space.encoder_blocks)),
        decoder_blocks=list(pick(space.decoder_blocks)),
        output_blocks=int(pick(space.output_blocks)),
        resmerge_blocks=int(pick(space.resmerge_blocks)),
        dropout=float(pick(space.dropout)),
    )
    return cfg.validate()


def trial_config(space: ParamSpace, base_seed: int, trial: int) -> ModelConfig:
    return sample_config(space, rngmod.stream(base_seed, "trial", trial))


def trial_seed(base_seed: int, trial: int) -> int:
    return rngmod.derive_seed(base_seed, trial)


@dataclass
class TrialResult:
    trial: int
    arch: str
    loss: float
    runtime_ms: float
    params: int
    macs: int
    seed: int
    config: ModelConfig | None
    history: list[dict] = field(default_factory=list)
    error: str = ""

    @property
    def ok(self) -> bool:
        return math.isfinite(self.loss) and math.isfinite(self.runtime_ms)

    def row(self) -> list[str]:
        if self.error:
            # failure rows keep the sampled config (if any) next to the message
            cfg = json.dumps({"error": self.error, "config": self.config.to_dict() if self.config else None},
                             sort_keys=True)
        else:
            cfg = self.config.to_json()
        return [str(self.trial), self.arch, repr(float(self.loss)), repr(float(self.runtime_ms)),
                str(self.params), str(self.macs), str(self.seed), cfg]

    @classmethod
    def from_row(cls, row: dict) -> TrialResult:
        raw = json.loads(row["config_json"])
        error = ""
        if "error" in raw:
            error, raw = raw["error"], raw.get("config")
        cfg = ModelConfig.from_dict(raw) if raw else None
        return cls(int(row["trial"]), row["arch"], float(row["loss"]), float(row["runtime_ms"]),
                   int(row["params"]), int(row["macs"]), int(row["seed"]), cfg, error=error)


def read_results(path: str | os.PathLike) -> list[TrialResult]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RESULT_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [TrialResult.from_row(r) for r in reader]


def write_results(path: str | os.PathLike, results: Sequence[TrialResult]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_FIELDS)
    for r in sorted(results, key=lambda r: (r.arch, r.trial)):
        w.writerow(r.row())
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(buf.getvalue(), encoding="utf-8")
    os.replace(tmp, path)


def _append_row(path: Path, result: TrialResult) -> None:
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(RESULT_FIELDS)
        w.writerow(result.row())
        fh.flush()
        os.fsync(fh.fileno())


@dataclass
class SearchSettings:
    epochs: int = 5
    batch_size: int = 4
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    bench_warmup: int = 10
    bench_repeats: int = 50
    head_init: str = "target_mean"


def run_trial(space: ParamSpace, trial: int, base_seed: int, dataset_root: str, settings: SearchSettings) -> TrialResult:
    """Build, train, evaluate, benchmark and count one sampled configuration."""
    from .analysis import bench_runtime
    from .data import Dataset
    from .train import TrainConfig, train

    seed = trial_seed(base_seed, trial)
    cfg = None
    params = macs = 0
    try:
        cfg = trial_config(space, base_seed, trial)
        ds = Dataset(dataset_root)
        grid = ds.manifest.grid
        params, macs = count_params(cfg), count_macs(cfg, grid, grid)
        model = build_model(cfg, seed=seed)
        tc = TrainConfig(learning_rate=settings.learning_rate, weight_decay=settings.weight_decay,
                         epochs=settings.epochs, batch_size=settings.batch_size, seed=seed,
                         head_init=settings.head_init)
        result = train(model, ds.split("train"), ds.split("val"), tc)
        bench = bench_runtime(model, (1, cfg.input_channels, grid, grid), settings.bench_warmup, settings.bench_repeats)
        return TrialResult(trial, space.architecture, result.final_val_loss, bench.mean_ms, params, macs, seed, cfg,
                           [{"epoch": h.epoch, "train_loss": h.train_loss, "val_loss": h.val_loss}
                            for h in result.history])
    except (NonFiniteError, ConfigError, FloatingPointError, ValueError) as exc:
        msg = f"{type(exc).__name__}: {exc}"
        return TrialResult(trial, space.architecture, math.nan, math.nan, params, macs, seed, cfg, error=msg)


def _run_trial_job(args) -> TrialResult:
    return run_trial(*args)


def completed_trials(path: str | os.PathLike, arch: str) -> dict[int, TrialResult]:
    p = Path(path)
    if not p.exists() or p.stat().st_size == 0:
        return {}
    try:
        rows = read_results(p)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise ValueError(f"{p}: cannot resume from a corrupt results file ({exc})") from exc
    return {r.trial: r for r in rows if r.arch == arch}


def run_search(space: ParamSpace, n_trials: int, dataset_root: str | os.PathLike, base_seed: int,
               out_csv: str | os.PathLike, settings: SearchSettings | None = None, workers: int = 1,
               on_result: Callable[[TrialResult], None] | None = None) -> list[TrialResult]:
    """Run trials 0..n_trials-1, skipping ids already recorded in ``out_csv``.

    Rows are appended as trials finish; once all trials are done the file is
    rewritten sorted by trial id so the final artifact is order-independent.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    settings = settings or SearchSettings()
    out = Path(out_csv)
    # a partially written trailing line from a killed run would corrupt the CSV
    _truncate_partial_line(out)
    done = completed_trials(out, space.architecture)
    pending = [t for t in range(n_trials) if t not in done]
    jobs = [(space, t, base_seed, str(dataset_root), settings) for t in pending]
    results = dict(done)

    def record(res: TrialResult):
        _append_row(out, res)
        results[res.trial] = res
        if on_result is not None:
            on_result(res)

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for res in pool.map(_run_trial_job, jobs):
                record(res)
    else:
        for job in jobs:
            record(_run_trial_job(job))
    final = [results[t] for t in sorted(results)]
    others = [r for r in (read_results(out) if out.exists() else []) if r.arch != space.architecture]
    write_results(out, others + final)
    return [r for r in final if r.trial < n_trials]


def _truncate_partial_line(path: Path) -> None:
    if not path.exists():
        return
    data = path.read_bytes()
    if data and not data.endswith(b"\n"):
        path.write_bytes(data[:data.rfind(b"\n") + 1])


def select_best(results: Sequence[TrialResult]) -> dict[str, TrialResult]:
    """Per-architecture winner: lowest loss, then lower runtime, then lower trial id.

    Architectures whose trials all failed are absent from the result.
    """
    best: dict[str, TrialResult] = {}
    for r in results:
        if not r.ok:
            continue
        cur = best.get(r.arch)
        if cur is None or (r.loss, r.runtime_ms, r.trial) < (cur.loss, cur.runtime_ms, cur.trial):
            best[r.arch] = r
    return best

