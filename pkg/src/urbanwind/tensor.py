"""Dense NCHW tensors with reverse-mode autodiff and the primitive layers.

Each op computes its forward result with numpy (or a compiled kernel) and,
when gradients are being tracked, attaches a closure that maps the output
gradient to input gradients. ``Tensor.backward`` walks the graph in reverse
topological order.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from . import _kernels

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where finite values are required."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients into every tracked leaf reachable from this tensor."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.dtype)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            # intermediate gradients are not needed once propagated
            node.grad = None
            node._backward = None
            node._parents = ()


def _tracks(*inputs: Tensor | None) -> bool:
    return _grad_enabled and any(t is not None and t.requires_grad for t in inputs)


def _make(data: np.ndarray, parents: Sequence[Tensor | None], backward) -> Tensor:
    out = Tensor(data)
    live = tuple(p for p in parents if p is not None)
    if _tracks(*live):
        out.requires_grad = True
        out._parents = live
        out._backward = backward
    return out


def _accumulate(t: Tensor | None, g: np.ndarray) -> None:
    if t is None or not t.requires_grad:
        return
    g = g.astype(t.dtype, copy=False)
    if t.grad is None:
        # gradients are never mutated in place, so sharing g is safe
        t.grad = g
    else:
        t.grad = t.grad + g


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# --------------------------------------------------------------------------
# parameter registry


@dataclass
class ParamEntry:
    name: str
    tensor: Tensor
    decay: bool


@dataclass
class ParamRegistry:
    """Ordered, uniquely named collection of trainable tensors."""

    entries: list[ParamEntry] = field(default_factory=list)

    def add(self, name: str, tensor: Tensor, decay: bool) -> None:
        if any(e.name == name for e in self.entries):
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self.entries.append(ParamEntry(name, tensor, decay))

    def __iter__(self) -> Iterator[ParamEntry]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def get(self, name: str) -> Tensor:
        for e in self.entries:
            if e.name == name:
                return e.tensor
        raise KeyError(name)

    def numel(self) -> int:
        return sum(e.tensor.data.size for e in self.entries)

    def zero_grad(self) -> None:
        for e in self.entries:
            e.tensor.grad = None


# --------------------------------------------------------------------------
# MAC instrumentation


class MacCounter:
    """Running total of conv multiply-accumulates, fed while ``counting_macs`` is active."""

    def __init__(self) -> None:
        self.total = 0


_mac_counters: list[MacCounter] = []


@contextlib.contextmanager
def counting_macs() -> Iterator[MacCounter]:
    counter = MacCounter()
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.remove(counter)


def _record_macs(n: int) -> None:
    for c in _mac_counters:
        c.total += n


# --------------------------------------------------------------------------
# primitive ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), backward)


def _check4(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{op}: expected a 4-D (N, C, H, W) tensor, got shape {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding."""
    _check4(x, "conv2d")
    if weight.ndim != 4:
        raise ValueError(f"conv2d: weight must be 4-D, got shape {weight.shape}")
    N, C, H, W = x.shape
    Cout, Cg, kh, kw = weight.shape
    if kh != kw or kh < 1:
        raise ValueError(f"conv2d: kernel must be square and >= 1, got {kh}x{kw}")
    if stride < 1 or padding < 0 or groups < 1:
        raise ValueError("conv2d: stride >= 1, padding >= 0 and groups >= 1 required")
    if C % groups:
        raise ValueError(f"conv2d: input channels {C} not divisible by groups {groups}")
    if Cout % groups:
        raise ValueError(f"conv2d: output channels {Cout} not divisible by groups {groups}")
    if Cg != C // groups:
        raise ValueError(f"conv2d: weight input-channel dim {Cg} != channels {C} / groups {groups}")
    if bias is not None and bias.shape != (Cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({Cout},)")
    k = kh
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d: spatial extent {H}x{W} too small for kernel {k} with padding {padding}")
    _record_macs(N * Cout * Cg * k * k * Ho * Wo)

    if groups == 1:
        return _conv_dense(x, weight, bias, stride, padding, Ho, Wo)
    if groups == C and Cout == C and stride == 1:
        return _conv_depthwise(x, weight, bias, padding, Ho, Wo)
    # general grouped convolution: one dense conv per group
    og = Cout // groups
    parts = []
    for gi in range(groups):
        xs = _slice_channels(x, gi * Cg, (gi + 1) * Cg)
        ws = _slice_channels0(weight, gi * og, (gi + 1) * og)
        bs = None if bias is None else _slice_vector(bias, gi * og, (gi + 1) * og)
        parts.append(_conv_dense(xs, ws, bs, stride, padding, Ho, Wo))
    out = parts[0]
    for p in parts[1:]:
        out = concat_channels(out, p)
    return out


def _conv_dense(x, weight, bias, stride, padding, Ho, Wo) -> Tensor:
    N, C, H, W = x.shape
    Cout, _, k, _ = weight.shape
    w2 = weight.data.reshape(Cout, -1)

    if k == 1 and stride == 1 and padding == 0:
        xf = x.data.reshape(N, C, H * W)
        out = np.matmul(w2, xf)
        if bias is not None:
            out += bias.data[None, :, None]
        out = out.reshape(N, Cout, H, W)

        def backward(g):
            gf = g.reshape(N, Cout, H * W)
            if weight.requires_grad:
                gw = gf[0] @ xf[0].T
                for n in range(1, N):
                    gw += gf[n] @ xf[n].T
                _accumulate(weight, gw.reshape(weight.shape))
            if bias is not None and bias.requires_grad:
                _accumulate(bias, gf.sum(axis=(0, 2)))
            if x.requires_grad:
                _accumulate(x, np.matmul(w2.T, gf).reshape(N, C, H, W))

        return _make(out, (x, weight, bias), backward)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(N * Ho * Wo, C * k * k)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(N, Ho, Wo, Cout).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, Cout)
        if weight.requires_grad:
            _accumulate(weight, (g2.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(N, Ho, Wo, C, k, k)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            hs = stride * (Ho - 1) + 1
            ws = stride * (Wo - 1) + 1
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + hs:stride, j:j + ws:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                gxp = gxp[:, :, padding:padding + H, padding:padding + W]
            _accumulate(x, gxp)

    return _make(out, (x, weight, bias), backward)


def _conv_depthwise(x, weight, bias, padding, Ho, Wo) -> Tensor:
    N, C, H, W = x.shape
    dt = x.dtype
    xp = np.ascontiguousarray(np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))))
    w3 = np.ascontiguousarray(weight.data[:, 0].astype(dt, copy=False))
    b = np.zeros(C, dtype=dt) if bias is None else np.ascontiguousarray(bias.data.astype(dt, copy=False))
    out = np.empty((N, C, Ho, Wo), dtype=dt)
    _kernels.dwconv_forward(xp, w3, b, out)

    def backward(g):
        g = np.ascontiguousarray(g, dtype=dt)
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w3)
        _kernels.dwconv_backward(xp, w3, g, gxp, gw)
        _accumulate(weight, gw[:, None])
        if bias is not None:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            _accumulate(x, gxp[:, :, padding:padding + H, padding:padding + W])

    return _make(out, (x, weight, bias), backward)


def _slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        full[:, lo:hi] = g
        _accumulate(x, full)

    return _make(x.data[:, lo:hi].copy(), (x,), backward)


def _slice_channels0(w: Tensor, lo: int, hi: int) -> Tensor:
    def backward(g):
        full = np.zeros_like(w.data)
        full[lo:hi] = g
        _accumulate(w, full)

    return _make(w.data[lo:hi].copy(), (w,), backward)


def _slice_vector(b: Tensor, lo: int, hi: int) -> Tensor:
    return _slice_channels0(b, lo, hi)


def split_channels(x: Tensor, at: int) -> tuple[Tensor, Tensor]:
    """Inverse of :func:`concat_channels`."""
    _check4(x, "split_channels")
    if not 0 <= at <= x.shape[1]:
        raise ValueError(f"split_channels: index {at} outside 0..{x.shape[1]}")
    return _slice_channels(x, 0, at), _slice_channels(x, at, x.shape[1])


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """2x2 max pooling, stride 2. Ties route the gradient to the first element in scan order."""
    _check4(x, "maxpool2d")
    if window != 2 or stride != 2:
        raise ValueError("maxpool2d: only window=2, stride=2 is supported")
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"maxpool2d: spatial extent {H}x{W} must be even")
    xd = np.ascontiguousarray(x.data)
    out = np.empty((N, C, H // 2, W // 2), dtype=xd.dtype)
    arg = np.empty((N, C, H // 2, W // 2), dtype=np.int8)
    _kernels.maxpool2_forward(xd, out, arg)

    def backward(g):
        gx = np.empty_like(xd)
        _kernels.maxpool2_backward(np.ascontiguousarray(g, dtype=xd.dtype), arg, gx)
        _accumulate(x, gx)

    return _make(out, (x,), backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    _check4(x, "upsample_nearest")
    if factor < 1:
        raise ValueError(f"upsample_nearest: factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    N, C, H, W = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (N, C, H, factor, W, factor)).reshape(
        N, C, H * factor, W * factor)

    def backward(g):
        _accumulate(x, g.reshape(N, C, H, factor, W, factor).sum(axis=(3, 5)))

    return _make(out, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check4(a, "concat_channels")
    _check4(b, "concat_channels")
    for axis, label in ((0, "batch"), (2, "height"), (3, "width")):
        if a.shape[axis] != b.shape[axis]:
            raise ValueError(f"concat_channels: {label} mismatch {a.shape[axis]} vs {b.shape[axis]}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data.astype(a.dtype, copy=False)], axis=1)

    def backward(g):
        _accumulate(a, g[:, :ca])
        _accumulate(b, g[:, ca:])

    return _make(out, (a, b), backward)


def _norm_backward(g, xhat, inv, scale, axes, count):
    """Input gradient of (x - mean) * inv over ``axes`` given dL/dxhat = g * scale."""
    gxhat = g * scale
    m1 = gxhat.sum(axis=axes, keepdims=True) / count
    m2 = (gxhat * xhat).sum(axis=axes, keepdims=True) / count
    return inv * (gxhat - m1 - xhat * m2)


def layernorm_channels(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the channel axis independently at every (n, h, w)."""
    _check4(x, "layernorm_channels")
    if eps <= 0:
        raise ValueError("layernorm_channels: eps must be positive")
    C = x.shape[1]
    if scale.shape != (C,) or shift.shape != (C,):
        raise ValueError(f"layernorm_channels: scale/shift must have shape ({C},)")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    s = scale.data[None, :, None, None]
    out = s * xhat + shift.data[None, :, None, None]

    def backward(g):
        if scale.requires_grad:
            _accumulate(scale, (g * xhat).sum(axis=(0, 2, 3)))
        if shift.requires_grad:
            _accumulate(shift, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            _accumulate(x, _norm_backward(g, xhat, inv, s, (1,), C))

    return _make(out, (x, scale, shift), backward)


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def init(cls, channels: int, dtype=DEFAULT_DTYPE) -> RunningStats:
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(x: Tensor, scale: Tensor, shift: Tensor, stats: RunningStats, training: bool,
                eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Per-channel batch normalization; train mode updates ``stats`` in place."""
    _check4(x, "batchnorm2d")
    N, C, H, W = x.shape
    if scale.shape != (C,) or shift.shape != (C,):
        raise ValueError(f"batchnorm2d: scale/shift must have shape ({C},)")
    s = scale.data[None, :, None, None]
    xd = x.data
    if training:
        count = N * H * W
        if count < 2:
            raise ValueError(f"batchnorm2d: train mode needs N*H*W >= 2, got {count}")
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        unbiased = var.reshape(C) * (count / (count - 1))
        stats.mean[...] = (1 - momentum) * stats.mean + momentum * mu.reshape(C)
        stats.var[...] = (1 - momentum) * stats.var + momentum * unbiased
    else:
        count = None
        inv = (1.0 / np.sqrt(stats.var + eps)).astype(xd.dtype)[None, :, None, None]
        xhat = (xd - stats.mean.astype(xd.dtype)[None, :, None, None]) * inv
    out = s * xhat + shift.data[None, :, None, None]

    def backward(g):
        if scale.requires_grad:
            _accumulate(scale, (g * xhat).sum(axis=(0, 2, 3)))
        if shift.requires_grad:
            _accumulate(shift, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            if training:
                _accumulate(x, _norm_backward(g, xhat, inv, s, (0, 2, 3), count))
            else:
                _accumulate(x, g * s * inv)

    return _make(out, (x, scale, shift), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        _accumulate(x, g * mask)

    return _make(out, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * xd.dtype.type(_INV_SQRT2)))
    out = xd * cdf

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) * xd.dtype.type(_INV_SQRT2PI)
        _accumulate(x, g * (cdf + xd * pdf))

    return _make(out, (x,), backward)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"unknown activation {kind!r}")


def dropout2d(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Channelwise dropout: whole (n, c) planes are zeroed, survivors scaled by 1/(1-rate)."""
    _check4(x, "dropout2d")
    if not 0 <= rate < 1:
        raise ValueError(f"dropout2d: rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise ValueError("dropout2d: train mode needs an rng stream")
    N, C = x.shape[:2]
    keep = rng.random((N, C)) >= rate
    mask = (keep.astype(x.dtype) / x.dtype.type(1.0 - rate))[:, :, None, None]
    out = x.data * mask

    def backward(g):
        _accumulate(x, g * mask)

    return _make(out, (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        _accumulate(x, np.full(x.shape, g / n, dtype=x.dtype))

    return _make(np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward)


# --------------------------------------------------------------------------
# gradient checking


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
               max_elements: int | None = None, seed: int = 0) -> float:
    """Max relative error between backward and central differences.

    ``fn`` maps the input tensors to an output tensor; the scalar objective is
    ``sum(out * R)`` for a fixed random ``R``. Errors are normalized by
    ``max(1, |analytic|)``. ``max_elements`` caps the number of probed entries
    per input (sampled without replacement). Non-finite values give ``inf``.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check requires float64 inputs")
    rng = np.random.default_rng(seed)
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    weights = rng.standard_normal(out.shape)
    if not np.all(np.isfinite(out.data)):
        return math.inf
    out.backward(weights.astype(out.dtype))
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def objective() -> float:
        with no_grad():
            val = fn(*inputs).data
        return float(np.sum(val * weights))

    worst = 0.0
    for t, a in zip(inputs, analytic):
        if not np.all(np.isfinite(a)):
            return math.inf
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        af = a.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = objective()
            flat[i] = orig - h
            fm = objective()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            if not (math.isfinite(fp) and math.isfinite(fm)):
                return math.inf
            err = abs(af[i] - num) / max(1.0, abs(af[i]))
            worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst
