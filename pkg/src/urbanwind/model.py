"""Configurable encoder/decoder CNN: stem, encoder, U-Net or Half-U-Net
decoder, ResMerge and output head, built from either U-Net or ConvNeXt
compute blocks.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import rng as rngmod
from .tensor import (
    DEFAULT_DTYPE,
    ParamRegistry,
    RunningStats,
    Tensor,
    activation,
    add,
    batchnorm2d,
    concat_channels,
    conv2d,
    counting_macs,
    dropout2d,
    layernorm_channels,
    maxpool2d,
    no_grad,
    upsample_nearest,
)

BLOCK_TYPES = ("unet", "convnext")
DECODER_TYPES = ("unet", "half_unet")
N_STAGES = 5
SPATIAL_MULTIPLE = 64  # stem (4x) and four poolings (16x)

# (decoder_type, block_type) -> display name
ARCHITECTURES = {
    ("half_unet", "convnext"): "Half-U-NeXt",
    ("half_unet", "unet"): "Half-U-Net",
    ("unet", "convnext"): "U-NeXt",
    ("unet", "unet"): "U-Net",
}


def arch_slug(name: str) -> str:
    return name.lower()


def parse_arch(name: str) -> tuple[str, str]:
    """Architecture name (any case, e.g. ``half-u-next``) -> (block_type, decoder_type)."""
    for (decoder, block), display in ARCHITECTURES.items():
        if name.lower() == display.lower():
            return block, decoder
    raise ValueError(f"unknown architecture {name!r}; expected one of {sorted(ARCHITECTURES.values())}")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    block_type: str
    decoder_type: str
    encoder_channels: tuple[int, ...]
    decoder_channels: tuple[int, ...]
    encoder_blocks: tuple[int, ...]
    decoder_blocks: tuple[int, ...]
    output_blocks: int
    resmerge_blocks: int
    dropout: float
    input_channels: int = 1
    output_channels: int = 3

    def __post_init__(self):
        for name in ("encoder_channels", "decoder_channels", "encoder_blocks", "decoder_blocks"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))

    @property
    def architecture(self) -> str:
        return ARCHITECTURES[(self.decoder_type, self.block_type)]

    @property
    def decoder_width(self) -> int:
        """Channel width of the decoder output (and of ResMerge / output blocks)."""
        return self.decoder_channels[-1]

    def validate(self) -> ModelConfig:
        if self.block_type not in BLOCK_TYPES:
            raise ConfigError(f"block_type must be one of {BLOCK_TYPES}, got {self.block_type!r}")
        if self.decoder_type not in DECODER_TYPES:
            raise ConfigError(f"decoder_type must be one of {DECODER_TYPES}, got {self.decoder_type!r}")
        for name in ("encoder_channels", "decoder_channels", "encoder_blocks", "decoder_blocks"):
            if len(getattr(self, name)) != N_STAGES:
                raise ConfigError(f"{name} must have {N_STAGES} entries")
        if any(c < 1 for c in self.encoder_channels + self.decoder_channels):
            raise ConfigError("channel counts must be >= 1")
        if any(b < 1 for b in self.encoder_blocks + self.decoder_blocks) or \
                self.output_blocks < 1 or self.resmerge_blocks < 1:
            raise ConfigError("all block counts must be >= 1")
        if self.input_channels < 1 or self.output_channels < 1:
            raise ConfigError("input_channels and output_channels must be >= 1")
        if self.encoder_channels[0] <= self.input_channels:
            raise ConfigError("encoder_channels[0] must exceed input_channels (stem 1x1 branch width)")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        if self.decoder_type == "unet" and self.decoder_channels != self.encoder_channels[::-1]:
            raise ConfigError("unet decoder: decoder_channels must equal reversed encoder_channels")
        if self.decoder_type == "half_unet":
            if self.decoder_channels != self.encoder_channels:
                raise ConfigError("half_unet decoder: decoder_channels must equal encoder_channels")
            if len(set(self.encoder_channels)) != 1:
                raise ConfigError("half_unet decoder: all encoder stage channels must be equal")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        fields = set(cls.__dataclass_fields__)
        unknown = set(d) - fields
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**d).validate()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, text: str) -> ModelConfig:
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config JSON: {exc}") from None

    @classmethod
    def tiny(cls, block_type: str = "convnext", decoder_type: str = "half_unet", width: int = 32,
             blocks: int = 1, dropout: float = 0.0) -> ModelConfig:
        """Smallest-row configuration of a family, one block everywhere by default.

        Meant for smoke runs, so dropout defaults to off; the search spaces
        still draw dropout from the tested values.
        """
        if decoder_type == "half_unet":
            enc = (width,) * N_STAGES
            dec = enc
        else:
            enc = tuple(width * 2 ** i for i in range(N_STAGES))
            dec = enc[::-1]
        return cls(block_type, decoder_type, enc, dec, (blocks,) * N_STAGES, (blocks,) * N_STAGES,
                   blocks, blocks, dropout).validate()


# --------------------------------------------------------------------------
# module plumbing


class Module:
    """Minimal container: parameters, buffers and child modules in definition order."""

    def __init__(self) -> None:
        self._params: dict[str, tuple[Tensor, bool]] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}
        self.training = True

    def param(self, name: str, data: np.ndarray, decay: bool) -> Tensor:
        t = Tensor(data, requires_grad=True)
        self._params[name] = (t, decay)
        return t

    def child(self, name: str, module: Module) -> Module:
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor, bool]]:
        for name, (t, decay) in self._params.items():
            yield prefix + name, t, decay
        for name, mod in self._children.items():
            yield from mod.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, arr in self._buffers.items():
            yield prefix + name, arr
        for name, mod in self._children.items():
            yield from mod.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator[Module]:
        yield self
        for mod in self._children.values():
            yield from mod.modules()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def __call__(self, *args):
        return self.forward(*args)

    def forward(self, *args):  # pragma: no cover - abstract
        raise NotImplementedError


class Sequence(Module):
    def __init__(self, modules: list[Module]) -> None:
        super().__init__()
        self.items = [self.child(str(i), m) for i, m in enumerate(modules)]

    def __len__(self) -> int:
        return len(self.items)

    def forward(self, x: Tensor) -> Tensor:
        for m in self.items:
            x = m(x)
        return x


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    # leaky-relu gain with negative slope sqrt(5): bound = 1/sqrt(fan_in)
    bound = math.sqrt(6.0 / ((1.0 + 5.0) * fan_in))
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0, groups: int = 1, dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        self.stride, self.padding, self.groups = stride, padding, groups
        fan_in = cin // groups * k * k
        self.weight = self.param("weight", _kaiming_uniform(rng, (cout, cin // groups, k, k), fan_in).astype(dtype),
                                 decay=True)
        self.bias = self.param("bias", np.zeros(cout, dtype=dtype), decay=False)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        self.scale = self.param("scale", np.ones(channels, dtype=dtype), decay=False)
        self.shift = self.param("shift", np.zeros(channels, dtype=dtype), decay=False)
        self.stats = RunningStats.init(channels, dtype)
        self._buffers["running_mean"] = self.stats.mean
        self._buffers["running_var"] = self.stats.var

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm2d(x, self.scale, self.shift, self.stats, self.training)


class LayerNormChannels(Module):
    def __init__(self, channels: int, eps: float = 1e-6, dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        self.eps = eps
        self.scale = self.param("scale", np.ones(channels, dtype=dtype), decay=False)
        self.shift = self.param("shift", np.zeros(channels, dtype=dtype), decay=False)

    def forward(self, x: Tensor) -> Tensor:
        return layernorm_channels(x, self.scale, self.shift, self.eps)


class Dropout2d(Module):
    def __init__(self, rate: float) -> None:
        super().__init__()
        self.rate = rate
        self.rng: np.random.Generator | None = None

    def forward(self, x: Tensor) -> Tensor:
        return dropout2d(x, self.rate, self.training, self.rng)


class UNetBlock(Module):
    """[3x3 conv, batchnorm, relu] x 2."""

    def __init__(self, cin: int, n: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        self.conv1 = self.child("conv1", Conv2d(cin, n, 3, rng, padding=1, dtype=dtype))
        self.norm1 = self.child("norm1", BatchNorm2d(n, dtype))
        self.conv2 = self.child("conv2", Conv2d(n, n, 3, rng, padding=1, dtype=dtype))
        self.norm2 = self.child("norm2", BatchNorm2d(n, dtype))

    def forward(self, x: Tensor) -> Tensor:
        x = activation(self.norm1(self.conv1(x)), "relu")
        return activation(self.norm2(self.conv2(x)), "relu")


class ConvNeXtBlock(Module):
    """Depthwise 7x7, channel layernorm, 4x pointwise expansion with GELU, residual."""

    def __init__(self, cin: int, n: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        self.proj = self.child("proj", Conv2d(cin, n, 1, rng, dtype=dtype)) if cin != n else None
        self.dw = self.child("dw", Conv2d(n, n, 7, rng, padding=3, groups=n, dtype=dtype))
        self.norm = self.child("norm", LayerNormChannels(n, dtype=dtype))
        self.pw1 = self.child("pw1", Conv2d(n, 4 * n, 1, rng, dtype=dtype))
        self.pw2 = self.child("pw2", Conv2d(4 * n, n, 1, rng, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        if self.proj is not None:
            x = self.proj(x)
        y = self.pw2(activation(self.pw1(self.norm(self.dw(x))), "gelu"))
        return add(y, x)


def compute_block(kind: str, cin: int, n: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> Module:
    if kind == "unet":
        return UNetBlock(cin, n, rng, dtype)
    if kind == "convnext":
        return ConvNeXtBlock(cin, n, rng, dtype)
    raise ValueError(f"unknown block type {kind!r}")


def block_stack(kind: str, cin: int, n: int, count: int, rng, dtype=DEFAULT_DTYPE) -> Sequence:
    return Sequence([compute_block(kind, cin if i == 0 else n, n, rng, dtype) for i in range(count)])


# --------------------------------------------------------------------------
# architecture pieces


class Stem(Module):
    def __init__(self, cin: int, c0: int, rng, dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        self.down = self.child("down", Conv2d(cin, cin, 4, rng, stride=4, dtype=dtype))
        self.wide = self.child("wide", Conv2d(cin, cin, 7, rng, padding=3, dtype=dtype))
        self.point = self.child("point", Conv2d(cin, c0 - cin, 1, rng, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(f"stem: spatial extent {x.shape[2]}x{x.shape[3]} not divisible by 4")
        d = self.down(x)
        return concat_channels(self.wide(d), self.point(d))


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        cin = cfg.encoder_channels[0]
        self.stages = []
        for i in range(N_STAGES):
            stack = block_stack(cfg.block_type, cin, cfg.encoder_channels[i], cfg.encoder_blocks[i], rng, dtype)
            self.stages.append(self.child(f"stage{i}", stack))
            cin = cfg.encoder_channels[i]
        self.drop = self.child("drop", Dropout2d(cfg.dropout))

    def forward(self, x: Tensor) -> list[Tensor]:
        outs = []
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = maxpool2d(x)
            x = self.drop(stage(x))
            outs.append(x)
        return outs


class UNetDecoder(Module):
    """Bottleneck stage on the deepest features, then four upsample/concat/stack junctions."""

    def __init__(self, cfg: ModelConfig, rng, dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        enc, dec = cfg.encoder_channels, cfg.decoder_channels
        self.stages = [self.child("stage0", block_stack(cfg.block_type, enc[-1], dec[0], cfg.decoder_blocks[0],
                                                        rng, dtype))]
        for i in range(1, N_STAGES):
            cin = dec[i - 1] + enc[N_STAGES - 1 - i]
            self.stages.append(self.child(f"stage{i}", block_stack(cfg.block_type, cin, dec[i], cfg.decoder_blocks[i],
                                                                   rng, dtype)))
        self.drop = self.child("drop", Dropout2d(cfg.dropout))

    def forward(self, stages: list[Tensor]) -> Tensor:
        if len(stages) != N_STAGES:
            raise ValueError(f"decoder expects {N_STAGES} encoder stages, got {len(stages)}")
        x = self.drop(self.stages[0](stages[-1]))
        for i in range(1, N_STAGES):
            skip = stages[N_STAGES - 1 - i]
            up = upsample_nearest(x, 2)
            if up.shape[2:] != skip.shape[2:]:
                raise ValueError(f"decoder: upsampled {up.shape[2:]} does not match skip {skip.shape[2:]}")
            x = self.drop(self.stages[i](concat_channels(up, skip)))
        return x


class HalfUNetDecoder(Module):
    """Upsample every stage to the finest resolution, sum, then one block stack."""

    def __init__(self, cfg: ModelConfig, rng, dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        width = cfg.encoder_channels[0]
        self.stack = self.child("stack", block_stack(cfg.block_type, width, width, sum(cfg.decoder_blocks),
                                                     rng, dtype))
        self.drop = self.child("drop", Dropout2d(cfg.dropout))

    def fuse(self, stages: list[Tensor]) -> Tensor:
        if len({s.shape[1] for s in stages}) != 1:
            raise ValueError("half-unet decoder: stage channel counts differ")
        fused = stages[0]
        for i, s in enumerate(stages[1:], start=1):
            up = s
            for _ in range(i):
                up = upsample_nearest(up, 2)
            fused = add(fused, up)
        return fused

    def forward(self, stages: list[Tensor]) -> Tensor:
        return self.drop(self.stack(self.fuse(stages)))


class ResMerge(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        width = cfg.decoder_width
        self.embed = self.child("embed", Conv2d(cfg.input_channels, width, 3, rng, padding=1, dtype=dtype))
        self.stack = self.child("stack", block_stack(cfg.block_type, width, width, cfg.resmerge_blocks, rng, dtype))

    def forward(self, decoded: Tensor, raw: Tensor) -> Tensor:
        up = upsample_nearest(decoded, 4)
        if up.shape[2:] != raw.shape[2:]:
            raise ValueError(f"resmerge: upsampled {up.shape[2:]} does not match input {raw.shape[2:]}")
        merged = add(up, self.embed(raw))
        return add(merged, self.stack(merged))


class OutputHead(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        width = cfg.decoder_width
        self.stack = self.child("stack", block_stack(cfg.block_type, width, width, cfg.output_blocks, rng, dtype))
        self.final = self.child("final", Conv2d(width, cfg.output_channels, 1, rng, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return self.final(self.stack(x))


class Model(Module):
    """Height map (N, C_in, H, W) -> velocity components (N, C_out, H, W)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        cfg.validate()
        self.config = cfg
        self.seed = seed
        init = rngmod.stream(seed, "init")
        self.stem = self.child("stem", Stem(cfg.input_channels, cfg.encoder_channels[0], init, dtype))
        self.encoder = self.child("encoder", Encoder(cfg, init, dtype))
        decoder_cls = UNetDecoder if cfg.decoder_type == "unet" else HalfUNetDecoder
        self.decoder = self.child("decoder", decoder_cls(cfg, init, dtype))
        self.resmerge = self.child("resmerge", ResMerge(cfg, init, dtype))
        self.head = self.child("head", OutputHead(cfg, init, dtype))
        self.params = ParamRegistry()
        for name, t, decay in self.named_parameters():
            self.params.add(name, t, decay)
        self.set_dropout_rng(rngmod.stream(seed, "dropout"))

    def set_dropout_rng(self, gen: np.random.Generator) -> None:
        self.dropout_rng = gen
        for m in self.modules():
            if isinstance(m, Dropout2d):
                m.rng = gen

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 4:
            raise ValueError(f"model input must be (N, C, H, W), got {x.shape}")
        if x.shape[1] != self.config.input_channels:
            raise ValueError(f"model input has {x.shape[1]} channels, expected {self.config.input_channels}")
        h, w = x.shape[2:]
        if h % SPATIAL_MULTIPLE or w % SPATIAL_MULTIPLE:
            raise ValueError(f"model input extent {h}x{w} must be divisible by {SPATIAL_MULTIPLE}")

    def forward(self, x: Tensor) -> Tensor:
        self.check_input(x)
        stages = self.encoder(self.stem(x))
        return self.head(self.resmerge(self.decoder(stages), x))

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Eval-mode forward without graph construction; restores the previous mode."""
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                return self.forward(Tensor(np.asarray(x, dtype=self.dtype))).data
        finally:
            self.train(was_training)

    @property
    def dtype(self):
        return self.params.entries[0].tensor.dtype

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters then buffers, by name (checkpoint payload)."""
        out = {e.name: e.tensor.data for e in self.params}
        for name, arr in self.named_buffers():
            out[f"buffer:{name}"] = arr
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.state_arrays()
        missing = set(expected) - set(arrays)
        if missing:
            raise ValueError(f"state is missing {sorted(missing)[:3]}...")
        for name, target in expected.items():
            src = arrays[name]
            if src.shape != target.shape:
                raise ValueError(f"state {name}: shape {src.shape} != {target.shape}")
            target[...] = src


def build_model(config: ModelConfig, seed: int = 0, dtype=DEFAULT_DTYPE) -> Model:
    return Model(config, seed=seed, dtype=dtype)


# --------------------------------------------------------------------------
# analytic counts (independent of the module tree)


def _conv_params(cin: int, cout: int, k: int, groups: int = 1) -> int:
    return k * k * (cin // groups) * cout + cout


def _conv_macs(cin: int, cout: int, k: int, positions: int, groups: int = 1) -> int:
    return k * k * (cin // groups) * cout * positions


def _block_counts(kind: str, cin: int, n: int, positions: int) -> tuple[int, int]:
    if kind == "unet":
        params = _conv_params(cin, n, 3) + 2 * n + _conv_params(n, n, 3) + 2 * n
        macs = _conv_macs(cin, n, 3, positions) + _conv_macs(n, n, 3, positions)
        return params, macs
    params = macs = 0
    if cin != n:
        params += _conv_params(cin, n, 1)
        macs += _conv_macs(cin, n, 1, positions)
    params += _conv_params(n, n, 7, groups=n) + 2 * n + _conv_params(n, 4 * n, 1) + _conv_params(4 * n, n, 1)
    macs += _conv_macs(n, n, 7, positions, groups=n) + _conv_macs(n, 4 * n, 1, positions) \
        + _conv_macs(4 * n, n, 1, positions)
    return params, macs


def _stack_counts(kind: str, cin: int, n: int, count: int, positions: int) -> tuple[int, int]:
    p = m = 0
    for i in range(count):
        bp, bm = _block_counts(kind, cin if i == 0 else n, n, positions)
        p += bp
        m += bm
    return p, m


def _counts(cfg: ModelConfig, H: int, W: int) -> tuple[int, int]:
    cfg.validate()
    if H % SPATIAL_MULTIPLE or W % SPATIAL_MULTIPLE:
        raise ValueError(f"extent {H}x{W} must be divisible by {SPATIAL_MULTIPLE}")
    cin, kind = cfg.input_channels, cfg.block_type
    enc, dec = cfg.encoder_channels, cfg.decoder_channels
    full = H * W
    s = (H // 4) * (W // 4)
    res = [s // 4 ** i for i in range(N_STAGES)]
    params = macs = 0

    def acc(pm):
        nonlocal params, macs
        params += pm[0]
        macs += pm[1]

    # stem
    acc((_conv_params(cin, cin, 4), _conv_macs(cin, cin, 4, s)))
    acc((_conv_params(cin, cin, 7), _conv_macs(cin, cin, 7, s)))
    acc((_conv_params(cin, enc[0] - cin, 1), _conv_macs(cin, enc[0] - cin, 1, s)))
    # encoder
    prev = enc[0]
    for i in range(N_STAGES):
        acc(_stack_counts(kind, prev, enc[i], cfg.encoder_blocks[i], res[i]))
        prev = enc[i]
    # decoder
    if cfg.decoder_type == "unet":
        acc(_stack_counts(kind, enc[-1], dec[0], cfg.decoder_blocks[0], res[-1]))
        for i in range(1, N_STAGES):
            acc(_stack_counts(kind, dec[i - 1] + enc[N_STAGES - 1 - i], dec[i], cfg.decoder_blocks[i],
                              res[N_STAGES - 1 - i]))
    else:
        acc(_stack_counts(kind, enc[0], enc[0], sum(cfg.decoder_blocks), res[0]))
    width = cfg.decoder_width
    # resmerge
    acc((_conv_params(cin, width, 3), _conv_macs(cin, width, 3, full)))
    acc(_stack_counts(kind, width, width, cfg.resmerge_blocks, full))
    # output head
    acc(_stack_counts(kind, width, width, cfg.output_blocks, full))
    acc((_conv_params(width, cfg.output_channels, 1), _conv_macs(width, cfg.output_channels, 1, full)))
    return params, macs


def count_params(config: ModelConfig) -> int:
    return _counts(config, SPATIAL_MULTIPLE, SPATIAL_MULTIPLE)[0]


def count_macs(config: ModelConfig, H: int, W: int) -> int:
    """Multiply-accumulates of one batch-1 forward pass at H x W."""
    return _counts(config, H, W)[1]


def registry_param_count(model: Model) -> int:
    return model.params.numel()


def measured_macs(model: Model, H: int, W: int) -> int:
    """MACs recorded by the conv instrumentation during one batch-1 forward."""
    x = Tensor(np.zeros((1, model.config.input_channels, H, W), dtype=model.dtype))
    was_training = model.training
    model.eval()
    try:
        with no_grad(), counting_macs() as counter:
            model(x)
    finally:
        model.train(was_training)
    return counter.total
