"""Pareto front over (validation loss, runtime), relative metrics, benchmarking
and Table-style report export."""
from __future__ import annotations

import csv
import io
import math
import os
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

from . import rng as rngmod
from .model import Model

REPORT_FIELDS = ["config", "huber_loss", "runtime_ms", "relative_loss", "relative_runtime", "block_type",
                 "decoder_type", "parameters", "multiply_adds"]
BLOCK_NAMES = {"convnext": "ConvNeXt", "unet": "U-Net"}
DECODER_NAMES = {"unet": "U-Net", "half_unet": "Half U-Net"}


def _objectives(p: Any) -> tuple[float, float]:
    if isinstance(p, (tuple, list)):
        return float(p[0]), float(p[1])
    return float(p.loss), float(p.runtime_ms)


def dominates(a: tuple[float, float], b: tuple[float, float]) -> bool:
    return a[0] <= b[0] and a[1] <= b[1] and (a[0] < b[0] or a[1] < b[1])


def pareto_front(points: Iterable[Any]) -> list[Any]:
    """Non-dominated points (both objectives minimized), by descending runtime.

    Items are (loss, runtime) pairs or objects with ``loss`` and ``runtime_ms``.
    Items identical in both objectives collapse to the first one seen.
    """
    items = list(points)
    keyed = []
    for i, p in enumerate(items):
        loss, rt = _objectives(p)
        if not (math.isfinite(loss) and math.isfinite(rt)) or loss <= 0 or rt <= 0:
            raise ValueError(f"pareto_front: objectives must be finite and positive, got ({loss}, {rt})")
        keyed.append((loss, rt, i))
    keyed.sort()
    front = []
    best_rt = math.inf
    for loss, rt, i in keyed:
        # ascending loss: a point survives only if it is strictly faster than all better ones
        if rt < best_rt:
            front.append(items[i])
            best_rt = rt
    return front


@dataclass
class ParetoPoint:
    config: str
    loss: float
    runtime_ms: float
    relative_loss: float = 1.0
    relative_runtime: float = 1.0
    block_type: str = ""
    decoder_type: str = ""
    params: int = 0
    macs: int = 0

    def display_row(self) -> list[str]:
        return [self.config, repr(self.loss), repr(self.runtime_ms), f"{self.relative_loss:.4f}",
                f"{self.relative_runtime:.4f}", self.block_type, self.decoder_type, str(self.params),
                str(self.macs)]


def points_from_results(results) -> list[ParetoPoint]:
    """Successful TrialResults as ParetoPoints labelled ``<arch>#<trial>``."""
    out = []
    for r in results:
        if not r.ok:
            continue
        cfg = r.config
        out.append(ParetoPoint(f"{r.arch}#{r.trial}", r.loss, r.runtime_ms,
                               block_type=BLOCK_NAMES.get(cfg.block_type, cfg.block_type) if cfg else "",
                               decoder_type=DECODER_NAMES.get(cfg.decoder_type, cfg.decoder_type) if cfg else "",
                               params=r.params, macs=r.macs))
    return out


def relative_metrics(front: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    """Annotate with ratios to the minimum-loss member (exact; rounded only on display)."""
    if not front:
        raise ValueError("relative_metrics: empty front")
    base = min(front, key=lambda p: (p.loss, p.runtime_ms))
    out = []
    for p in front:
        q = ParetoPoint(**p.__dict__)
        q.relative_loss = p.loss / base.loss
        q.relative_runtime = p.runtime_ms / base.runtime_ms
        out.append(q)
    return out


@dataclass
class BenchReport:
    warmup: int
    repeats: int
    times_ms: list[float]

    @property
    def mean_ms(self) -> float:
        return statistics.fmean(self.times_ms)

    @property
    def median_ms(self) -> float:
        return statistics.median(self.times_ms)

    @property
    def min_ms(self) -> float:
        return min(self.times_ms)

    @property
    def cv(self) -> float:
        if len(self.times_ms) < 2:
            return 0.0
        return statistics.stdev(self.times_ms) / self.mean_ms

    def to_dict(self) -> dict:
        return {"warmup": self.warmup, "repeats": self.repeats, "times_ms": self.times_ms, "mean_ms": self.mean_ms,
                "median_ms": self.median_ms, "min_ms": self.min_ms, "cv": self.cv}


def bench_runtime(model: Model, shape: tuple[int, ...], warmup: int = 10, repeats: int = 50) -> BenchReport:
    """Wall-clock eval-mode forward passes on one fixed input."""
    if repeats < 1 or warmup < 0:
        raise ValueError("bench_runtime: repeats >= 1 and warmup >= 0 required")
    x = rngmod.stream(0, "bench").random(shape).astype(model.dtype)
    for _ in range(warmup):
        model.predict(x)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        model.predict(x)
        times.append((time.perf_counter() - t0) * 1e3)
    return BenchReport(warmup, repeats, times)


def write_report_csv(path: str | os.PathLike, front: Sequence[ParetoPoint]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for p in front:
        w.writerow(p.display_row())
    _atomic_write(Path(path), buf.getvalue().encode("utf-8"))


def read_report_csv(path: str | os.PathLike) -> list[ParetoPoint]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != REPORT_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [ParetoPoint(r["config"], float(r["huber_loss"]), float(r["runtime_ms"]), float(r["relative_loss"]),
                            float(r["relative_runtime"]), r["block_type"], r["decoder_type"], int(r["parameters"]),
                            int(r["multiply_adds"])) for r in reader]


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def plot_front_svg(path: str | os.PathLike, trials: Sequence[ParetoPoint], front: Sequence[ParetoPoint]) -> None:
    """Scatter of all trials with the front highlighted and joined in runtime order."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "urbanwind", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(6.4, 4.4))
        if trials:
            ax.scatter([p.runtime_ms for p in trials], [p.loss for p in trials], s=14, c="0.6", label="trials")
        if front:
            ordered = sorted(front, key=lambda p: p.runtime_ms)
            ax.plot([p.runtime_ms for p in ordered], [p.loss for p in ordered], "-o", color="tab:red", ms=5,
                    label="Pareto front")
        ax.set_xlabel("runtime (ms)")
        ax.set_ylabel("validation Huber loss")
        if trials or front:
            ax.legend(frameon=False)
        fig.tight_layout()
        buf = io.BytesIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    _atomic_write(Path(path), buf.getvalue())


def export_report(trials: Sequence[ParetoPoint], prefix: str | os.PathLike) -> list[ParetoPoint]:
    """Front of ``trials`` with relative metrics -> ``<prefix>.csv`` and ``<prefix>.svg``."""
    front = pareto_front(trials)
    annotated = relative_metrics(front) if front else []
    prefix = str(prefix)
    write_report_csv(prefix + ".csv", annotated)
    plot_front_svg(prefix + ".svg", list(trials), annotated)
    return annotated


def brute_force_front(points: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    """O(n^2) dominance reference: unique non-dominated pairs by descending runtime."""
    uniq = sorted(set((float(a), float(b)) for a, b in points))
    keep = [p for p in uniq if not any(dominates(q, p) for q in uniq)]
    return sorted(keep, key=lambda p: -p[1])


def summarize_tradeoff(front: Sequence[ParetoPoint]) -> dict:
    """Loss and speed ratios between the fastest and the most accurate member."""
    best = min(front, key=lambda p: p.loss)
    fastest = min(front, key=lambda p: p.runtime_ms)
    return {"loss_ratio": fastest.loss / best.loss, "speedup": best.runtime_ms / fastest.runtime_ms,
            "most_accurate": best.config, "fastest": fastest.config}


__all__ = [
    "BenchReport", "ParetoPoint", "REPORT_FIELDS", "bench_runtime", "brute_force_front", "dominates",
    "export_report", "pareto_front", "points_from_results", "read_report_csv", "relative_metrics",
    "summarize_tradeoff", "write_report_csv",
]
