"""Huber-loss training with AdamW, evaluation and binary checkpoints."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from . import rng as rngmod
from .data import Sample
from .model import Model, ModelConfig, build_model
from .tensor import NonFiniteError, ParamRegistry, Tensor, _accumulate, _make, no_grad


HEAD_INITS = ("target_mean", "none")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    epochs: int = 30
    batch_size: int = 4
    huber_delta: float = 1.0
    seed: int = 0
    head_init: str = "target_mean"

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)

    def validate(self) -> TrainConfig:
        # lr == 0 is accepted on purpose: it freezes the weights for diagnostics
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ValueError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.huber_delta > 0:
            raise ValueError(f"huber_delta must be > 0, got {self.huber_delta}")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.betas}")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("eps must be > 0 and weight_decay >= 0")
        if self.head_init not in HEAD_INITS:
            raise ValueError(f"head_init must be one of {HEAD_INITS}, got {self.head_init!r}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)


# --------------------------------------------------------------------------
# loss


def huber_values(e: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(e)
    return np.where(a <= delta, 0.5 * e * e, delta * (a - 0.5 * delta))


def huber_loss(pred: Tensor, target, delta: float = 1.0) -> Tensor:
    """Mean elementwise Huber loss; the scalar result is accumulated in float64."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != t.shape:
        raise ValueError(f"huber_loss: prediction {pred.shape} and target {t.shape} differ")
    e = pred.data.astype(np.float64) - t
    n = e.size
    value = huber_values(e, delta).sum() / n

    def backward(g):
        slope = np.clip(e, -delta, delta)  # subgradient delta*sign(e) outside the quadratic zone
        _accumulate(pred, (float(g) / n) * slope)

    return _make(np.asarray(value, dtype=pred.dtype), (pred,), backward)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(registry: ParamRegistry, grads: dict[str, np.ndarray] | None, state: AdamState,
               config: TrainConfig) -> AdamState:
    """One AdamW update in place; ``grads`` defaults to each parameter's ``.grad``.

    Missing gradients count as zero. A non-finite gradient rejects the whole
    step before anything is modified.
    """
    lr, (b1, b2), eps, wd = config.learning_rate, config.betas, config.eps, config.weight_decay
    resolved = {}
    for e in registry:
        g = grads.get(e.name) if grads is not None else e.tensor.grad
        if g is None:
            g = np.zeros_like(e.tensor.data)
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteError(f"adamw: {bad} non-finite gradient entries in {e.name}; step rejected")
        resolved[e.name] = g
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for e in registry:
        w = e.tensor.data
        g = resolved[e.name].astype(w.dtype, copy=False)
        m = state.m.get(e.name)
        if m is None:
            m = state.m[e.name] = np.zeros_like(w)
            state.v[e.name] = np.zeros_like(w)
        v = state.v[e.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = lr * ((m / c1) / (np.sqrt(v / c2) + eps))
        if e.decay and wd:
            update = update + (lr * wd) * w
        w -= update.astype(w.dtype, copy=False)
    return state


class AdamW:
    def __init__(self, registry: ParamRegistry, config: TrainConfig):
        self.registry = registry
        self.config = config
        self.state = AdamState()

    def step(self) -> None:
        adamw_step(self.registry, None, self.state, self.config)

    def zero_grad(self) -> None:
        self.registry.zero_grad()


# --------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    model: Model
    history: list[EpochRecord]
    optimizer: AdamW

    @property
    def final_val_loss(self) -> float:
        return self.history[-1].val_loss


def _stack(samples: Sequence[Sample], dtype) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([s.x for s in samples]).astype(dtype, copy=False)
    y = np.stack([s.y for s in samples])
    return x, y


def target_mean(samples: Sequence[Sample]) -> np.ndarray:
    """Per-channel mean of the training targets, float64."""
    total = np.zeros(samples[0].y.shape[0])
    for s in samples:
        total += s.y.astype(np.float64).mean(axis=(1, 2))
    return total / len(samples)


def init_output_head(model: Model, samples: Sequence[Sample]) -> None:
    """Start from the constant-mean predictor: zero final 1x1 weights, bias = target mean.

    The summed decoder scales and the ResMerge residual leave the raw output
    roughly ten times larger than the targets, and at lr 1e-3 Adam needs
    hundreds of steps just to undo that offset.
    """
    final = model.head.final
    final.weight.data[...] = 0
    final.bias.data[...] = target_mean(samples).astype(final.bias.dtype)


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    perm = rngmod.stream(seed, "shuffle", epoch).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def evaluate(model: Model, samples: Sequence[Sample], delta: float = 1.0) -> float:
    """Mean Huber loss over ``samples`` in eval mode.

    Each sample is scored on its own and the per-sample means are combined
    with an exactly rounded sum, so the result does not depend on order.
    """
    if len(samples) == 0:
        raise ValueError("evaluate: empty split")
    losses = []
    for s in samples:
        pred = model.predict(s.x[None])
        losses.append(float(huber_values(pred.astype(np.float64) - s.y[None], delta).mean()))
    return math.fsum(losses) / len(losses)


def write_loss_csv(path: str | os.PathLike, history: Sequence[EpochRecord]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_loss"])
    for r in history:
        w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss)])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def train(model: Model, train_samples: Sequence[Sample], val_samples: Sequence[Sample], config: TrainConfig,
          loss_csv: str | os.PathLike | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None,
          optimizer: AdamW | None = None, start_epoch: int = 0) -> TrainResult:
    """Train for ``config.epochs`` epochs and return the final-epoch model."""
    config.validate()
    if len(train_samples) == 0:
        raise ValueError("train: empty training split")
    if len(val_samples) == 0:
        raise ValueError("train: empty validation split")
    opt = optimizer or AdamW(model.params, config)
    opt.config = config
    if start_epoch == 0:
        model.set_dropout_rng(rngmod.stream(config.seed, "dropout"))
        if config.head_init == "target_mean":
            init_output_head(model, train_samples)
    history: list[EpochRecord] = []
    for epoch in range(start_epoch, config.epochs):
        model.train()
        total = 0.0
        for step, idx in enumerate(batch_order(len(train_samples), config.batch_size, config.seed, epoch)):
            x, y = _stack([train_samples[i] for i in idx], model.dtype)
            opt.zero_grad()
            loss = huber_loss(model(Tensor(x)), y, config.huber_delta)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite training loss at epoch {epoch + 1}, step {step + 1} "
                                     f"(batch indices {idx.tolist()})")
            loss.backward()
            opt.step()
            total += value * len(idx)
        record = EpochRecord(epoch + 1, total / len(train_samples), evaluate(model, val_samples, config.huber_delta))
        if not math.isfinite(record.val_loss):
            raise NonFiniteError(f"non-finite validation loss after epoch {epoch + 1}")
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if loss_csv is not None:
            write_loss_csv(loss_csv, history)
    model.eval()
    return TrainResult(model, history, opt)


def constant_baseline_loss(train_samples: Sequence[Sample], val_samples: Sequence[Sample],
                           delta: float = 1.0) -> float:
    """Validation loss of predicting the per-channel training mean everywhere."""
    mean = target_mean(train_samples)
    losses = [float(huber_values(mean[:, None, None] - s.y, delta).mean()) for s in val_samples]
    return math.fsum(losses) / len(losses)


@dataclass
class RepeatSummary:
    seeds: list[int]
    losses: list[float]

    @property
    def min(self) -> float:
        return min(self.losses)

    @property
    def max(self) -> float:
        return max(self.losses)

    @property
    def median(self) -> float:
        return statistics.median(self.losses)

    @property
    def mean(self) -> float:
        return statistics.fmean(self.losses)


def repeat_train(config: ModelConfig, train_samples, val_samples, train_config: TrainConfig, n_seeds: int = 10,
                 base_seed: int = 0) -> RepeatSummary:
    """Train ``n_seeds`` models with seeds base..base+n-1 (init and training stream)."""
    if n_seeds < 2:
        raise ValueError("repeat_train needs n_seeds >= 2")
    seeds = list(range(base_seed, base_seed + n_seeds))
    losses = []
    for s in seeds:
        cfg = TrainConfig(**{**train_config.to_dict(), "seed": s})
        result = train(build_model(config, seed=s), train_samples, val_samples, cfg)
        losses.append(result.final_val_loss)
    return RepeatSummary(seeds, losses)


# --------------------------------------------------------------------------
# checkpoints
#
# layout: MAGIC | u32 version | u64 header length | JSON header | tensor bytes
# tensors are little-endian float32 in header order; offsets are relative to
# the end of the header.

MAGIC = b"UWNDCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    epoch: int = 0
    step: int = 0
    seed: int = 0
    train_config: dict = field(default_factory=dict)
    rng_states: dict = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    tool_version: str = __version__

    def model_arrays(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("adam.")}

    def build(self) -> Model:
        model = build_model(self.config, seed=self.seed)
        model.load_state_arrays(self.model_arrays())
        model.eval()
        return model

    def optimizer_state(self) -> AdamState:
        st = AdamState(step=self.step)
        for k, v in self.tensors.items():
            if k.startswith("adam.m:"):
                st.m[k[7:]] = v.copy()
            elif k.startswith("adam.v:"):
                st.v[k[7:]] = v.copy()
        return st


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def make_checkpoint(model: Model, optimizer: AdamW | None = None, epoch: int = 0,
                    train_config: TrainConfig | None = None, history: Sequence[EpochRecord] = ()) -> Checkpoint:
    tensors = dict(model.state_arrays())
    step = 0
    if optimizer is not None:
        step = optimizer.state.step
        for name in model.params.names():
            if name in optimizer.state.m:
                tensors[f"adam.m:{name}"] = optimizer.state.m[name]
                tensors[f"adam.v:{name}"] = optimizer.state.v[name]
    return Checkpoint(
        config=model.config,
        tensors={k: np.asarray(v, dtype="<f4").copy() for k, v in tensors.items()},
        epoch=epoch, step=step, seed=model.seed,
        train_config=train_config.to_dict() if train_config else {},
        rng_states={"dropout": rngmod.get_state(model.dropout_rng)},
        history=[asdict(h) for h in history],
    )


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    table = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        nbytes = arr.size * 4
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "config": ckpt.config.to_dict(), "epoch": ckpt.epoch, "step": ckpt.step, "seed": ckpt.seed,
        "train_config": ckpt.train_config, "rng_states": ckpt.rng_states, "history": ckpt.history,
        "tool_version": ckpt.tool_version, "dtype": "<f4", "tensors": table,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)), hbytes]
    parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in ckpt.tensors.values()]
    return b"".join(parts)


def decode_checkpoint(payload: bytes, source: str = "<bytes>") -> Checkpoint:
    if payload[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    try:
        version, hlen = struct.unpack_from("<IQ", payload, pos)
    except struct.error as exc:
        raise CheckpointError(f"{source}: truncated header") from exc
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<IQ")
    try:
        header = json.loads(payload[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt header") from exc
    base = pos + hlen
    tensors = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        if start + entry["nbytes"] > len(payload):
            raise CheckpointError(f"{source}: truncated tensor {entry['name']}")
        arr = np.frombuffer(payload, dtype="<f4", count=entry["nbytes"] // 4, offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(
        config=ModelConfig.from_dict(header["config"]), tensors=tensors, epoch=header["epoch"],
        step=header["step"], seed=header["seed"], train_config=header["train_config"],
        rng_states=header["rng_states"], history=header["history"], tool_version=header["tool_version"],
    )


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    atomic_write_bytes(path, encode_checkpoint(ckpt))


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), str(path))


def resume(ckpt: Checkpoint) -> tuple[Model, AdamW]:
    """Model and optimizer restored from a checkpoint, ready to continue at ``ckpt.epoch``."""
    model = ckpt.build()
    opt = AdamW(model.params, TrainConfig.from_dict(ckpt.train_config) if ckpt.train_config else TrainConfig())
    opt.state = ckpt.optimizer_state()
    if "dropout" in ckpt.rng_states:
        gen = np.random.Generator(np.random.PCG64())
        rngmod.set_state(gen, ckpt.rng_states["dropout"])
        model.set_dropout_rng(gen)
    return model, opt
