"""Procedural urban scenes, a potential-flow wind proxy and the on-disk dataset.

Scenes are height grids (meters) with free-standing rectangular and L-shaped
buildings inside a circular ring of buildings. Wind fields come from a
Laplace solve for the velocity potential around the building mask, plus a
vertical proxy driven by the smoothed height gradient. Samples are stored in
the model frame, where the inflow always points along -y.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import _kernels
from . import rng as rngmod

FORMAT_VERSION = 1
EXTENT_M = 1100.0
U_INF = 5.0
V_MAX = 16.0
N_DIRECTIONS = 8
SOR_OMEGA = 1.8
MAX_SWEEPS = 50_000
HEIGHT_SCALE = 100.0
MIN_HEIGHT, MAX_HEIGHT = 6.0, 100.0
COVERAGE_RANGE = (0.15, 0.45)
SMOOTH_SIGMA = 2.0
VERTICAL_GAIN = 0.3


class ConvergenceError(RuntimeError):
    pass


@dataclass
class Scene:
    heights: np.ndarray  # (G, G) float32, meters
    extent: float = EXTENT_M
    scene_id: str = "scene"
    seed: int = 0

    @property
    def grid(self) -> int:
        return self.heights.shape[0]

    @property
    def cell(self) -> float:
        return self.extent / self.grid

    @property
    def solid(self) -> np.ndarray:
        return self.heights > 0

    def coverage(self) -> float:
        return float(self.solid.mean())


@dataclass
class WindField:
    """World-frame velocity (m/s) on the scene grid, stacked as (3, G, G): u, v, w."""

    uvw: np.ndarray
    sweeps: int = 0
    residual: float = 0.0

    @property
    def u(self) -> np.ndarray:
        return self.uvw[0]

    @property
    def v(self) -> np.ndarray:
        return self.uvw[1]

    @property
    def w(self) -> np.ndarray:
        return self.uvw[2]


# --------------------------------------------------------------------------
# scene generation


def _cell_centers(grid: int, extent: float) -> tuple[np.ndarray, np.ndarray]:
    """Centered coordinates in meters: x along columns, y along rows."""
    cell = extent / grid
    c = (np.arange(grid) - (grid - 1) / 2.0) * cell
    return c[None, :], c[:, None]


def _draw_footprints(gen: np.random.Generator, radius: float) -> list[tuple[list[tuple[float, float, float, float]], float]]:
    """Footprints as (rectangles [x0, x1, y0, y1], height) inside ``radius``."""
    count = int(gen.integers(8, 26))
    inner = 0.80 * radius
    out = []
    while len(out) < count:
        w, h = gen.uniform(40.0, 170.0, size=2)
        cx, cy = gen.uniform(-inner, inner, size=2)
        rects = [(cx - w / 2, cx + w / 2, cy - h / 2, cy + h / 2)]
        if gen.random() < 0.35:
            # L-shape: a second rectangle sharing one corner of the first
            w2, h2 = gen.uniform(30.0, 100.0, size=2)
            sx, sy = gen.choice([-1.0, 1.0], size=2)
            ax, ay = cx + sx * w / 2, cy + sy * h / 2
            rects.append((min(ax, ax - sx * w2), max(ax, ax - sx * w2),
                          min(ay, ay + sy * h2), max(ay, ay + sy * h2)))
        height = float(gen.uniform(MIN_HEIGHT, MAX_HEIGHT))
        corners = [(x, y) for r in rects for x in r[:2] for y in r[2:]]
        if max(math.hypot(x, y) for x, y in corners) > inner:
            continue
        out.append((rects, height))
    return out


def _ring(gen: np.random.Generator, radius: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    r = np.hypot(x, y)
    theta = np.mod(np.arctan2(y, x), 2 * np.pi)
    segments = int(gen.integers(16, 28))
    start = gen.uniform(0, 2 * np.pi)
    fill = gen.uniform(0.55, 0.75, size=segments)
    heights = gen.uniform(MIN_HEIGHT, MAX_HEIGHT, size=segments)
    slot = 2 * np.pi / segments
    rel = np.mod(theta - start, 2 * np.pi)
    idx = np.minimum((rel // slot).astype(int), segments - 1)
    within = (rel - idx * slot) < fill[idx] * slot
    band = (r >= 0.86 * radius) & (r <= 0.96 * radius)
    return np.where(band & within, heights[idx], 0.0)


def generate_scene(seed: int, grid: int = 128, extent: float = EXTENT_M, scene_id: str | None = None,
                   ring: bool = True, max_retries: int = 64) -> Scene:
    """Deterministic procedural scene; retries footprint draws until coverage is in range."""
    if grid < 64 or grid % 64:
        raise ValueError(f"grid must be a multiple of 64, got {grid}")
    gen = rngmod.stream(seed, "scene")
    radius = extent / 2
    x, y = _cell_centers(grid, extent)
    ring_h = _ring(gen, radius, x, y) if ring else np.zeros((grid, grid))
    for _ in range(max_retries):
        heights = ring_h.copy()
        for rects, h in _draw_footprints(gen, radius):
            mask = np.zeros((grid, grid), dtype=bool)
            for x0, x1, y0, y1 in rects:
                mask |= (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)
            heights = np.where(mask, np.maximum(heights, h), heights)
        cov = float((heights > 0).mean())
        if not ring or COVERAGE_RANGE[0] <= cov <= COVERAGE_RANGE[1]:
            return Scene(heights.astype(np.float32), extent, scene_id or f"seed{seed}", seed)
    raise RuntimeError(f"scene seed {seed}: coverage outside {COVERAGE_RANGE} after {max_retries} retries")


def empty_scene(grid: int = 128, extent: float = EXTENT_M) -> Scene:
    return Scene(np.zeros((grid, grid), dtype=np.float32), extent, "empty", 0)


# --------------------------------------------------------------------------
# potential-flow oracle


def freestream_potential(grid: int, extent: float, direction: int) -> np.ndarray:
    theta = math.radians(45.0 * direction)
    x, y = _cell_centers(grid, extent)
    return -U_INF * (x * math.sin(theta) + y * math.cos(theta))


def _neighbor_or_self(phi: np.ndarray, solid: np.ndarray, di: int, dj: int) -> np.ndarray:
    """Neighbor potential, mirrored (= own value) across solid faces and linearly
    extrapolated past the domain edge."""
    p = np.pad(phi, 1, mode="reflect", reflect_type="odd")
    s = np.pad(solid, 1, mode="constant", constant_values=False)
    G0, G1 = phi.shape
    nb = p[1 + di:1 + di + G0, 1 + dj:1 + dj + G1]
    ns = s[1 + di:1 + di + G0, 1 + dj:1 + dj + G1]
    return np.where(ns, phi, nb)


def solve_potential(scene: Scene, direction: int, omega: float = SOR_OMEGA, tol_factor: float = 1e-6,
                    max_sweeps: int = MAX_SWEEPS) -> tuple[np.ndarray, np.ndarray, int, float]:
    """SOR solve; returns (phi, dead mask, sweeps, last max update).

    ``dead`` marks solid cells plus fluid pockets with no path to the far field.
    """
    G = scene.grid
    solid = scene.solid
    fixed = np.zeros((G, G), dtype=bool)
    fixed[0, :] = fixed[-1, :] = fixed[:, 0] = fixed[:, -1] = True
    fixed &= ~solid
    labels, _ = ndimage.label(~solid)
    connected = np.isin(labels, np.unique(labels[fixed]))
    connected &= ~solid
    dead = ~connected
    kind = np.where(dead, 0, np.where(fixed, 2, 1)).astype(np.int8)
    phi = np.ascontiguousarray(freestream_potential(G, scene.extent, direction), dtype=np.float64)
    tol = tol_factor * U_INF * scene.cell
    sweeps, maxd = _kernels.sor_solve(phi, kind, float(omega), float(tol), int(max_sweeps))
    if maxd >= tol:
        raise ConvergenceError(f"{scene.scene_id} d={direction}: SOR not converged after {sweeps} sweeps "
                               f"(max update {maxd:.3e} >= {tol:.3e})")
    return phi, dead, int(sweeps), float(maxd)


def face_divergence(phi: np.ndarray, dead: np.ndarray, cell: float) -> np.ndarray:
    """Divergence of the face-centered velocities grad(phi) on interior cells.

    Faces touching a dead cell carry zero flux. Returned shape is (G-2, G-2).
    """
    out = np.zeros((phi.shape[0] - 2, phi.shape[1] - 2))
    c = phi[1:-1, 1:-1]
    for di, dj in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        nb = phi[1 + di:phi.shape[0] - 1 + di, 1 + dj:phi.shape[1] - 1 + dj]
        open_ = ~dead[1 + di:dead.shape[0] - 1 + di, 1 + dj:dead.shape[1] - 1 + dj]
        out += np.where(open_, nb - c, 0.0)
    return out / cell**2


def wind_oracle(scene: Scene, direction: int, **solver) -> WindField:
    """Velocity field (m/s) for inflow azimuth ``direction * 45`` degrees."""
    if not 0 <= direction < N_DIRECTIONS:
        raise ValueError(f"direction must be in 0..{N_DIRECTIONS - 1}")
    phi, dead, sweeps, maxd = solve_potential(scene, direction, **solver)
    h = scene.cell
    u = (_neighbor_or_self(phi, dead, 0, 1) - _neighbor_or_self(phi, dead, 0, -1)) / (2 * h)
    v = (_neighbor_or_self(phi, dead, 1, 0) - _neighbor_or_self(phi, dead, -1, 0)) / (2 * h)
    u[dead] = 0.0
    v[dead] = 0.0
    smooth = ndimage.gaussian_filter(scene.heights.astype(np.float64), SMOOTH_SIGMA, mode="nearest")
    dhdy, dhdx = np.gradient(smooth, h)
    w = -VERTICAL_GAIN * (u * dhdx + v * dhdy) / 10.0
    w[dead] = 0.0
    uvw = np.clip(np.stack([u, v, w]), -V_MAX, V_MAX)
    return WindField(uvw, sweeps, maxd)


# --------------------------------------------------------------------------
# rotation to the model frame


def _is_quarter(angle: float) -> bool:
    return math.isclose(angle % 90.0, 0.0, abs_tol=1e-12) or math.isclose(angle % 90.0, 90.0, abs_tol=1e-12)


def disc_mask(grid: int) -> np.ndarray:
    c = (np.arange(grid) - (grid - 1) / 2.0)
    return np.hypot(c[None, :], c[:, None]) <= grid / 2.0


def rotate_grid(a: np.ndarray, angle: float) -> np.ndarray:
    """Rotate a (..., G, G) array by ``angle`` degrees about the grid center.

    A field rotated by ``angle`` turns inflow azimuth theta into theta - angle.
    Multiples of 90 degrees are exact index permutations; other angles use
    bilinear resampling with zeros outside the inscribed circle.
    """
    if _is_quarter(angle):
        k = int(round(angle / 90.0)) % 4
        return np.ascontiguousarray(np.rot90(a, k=-k, axes=(-2, -1)))
    G = a.shape[-1]
    t = math.radians(angle)
    c = (np.arange(G) - (G - 1) / 2.0)
    x, y = np.meshgrid(c, c)
    xs = math.cos(t) * x + math.sin(t) * y
    ys = -math.sin(t) * x + math.cos(t) * y
    coords = np.stack([ys + (G - 1) / 2.0, xs + (G - 1) / 2.0])
    mask = disc_mask(G)
    flat = a.reshape(-1, G, G)
    out = np.stack([np.where(mask, ndimage.map_coordinates(p, coords, order=1, mode="constant", cval=0.0), 0)
                    for p in flat.astype(np.float64)])
    return out.reshape(a.shape).astype(a.dtype, copy=False)


def _cos_sin(angle: float) -> tuple[float, float]:
    if _is_quarter(angle):
        k = int(round(angle / 90.0)) % 4
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][k]
    t = math.radians(angle)
    return math.cos(t), math.sin(t)


def rotate_field(uvw: np.ndarray, angle: float) -> np.ndarray:
    """Rotate a (3, G, G) velocity field: positions and in-plane components."""
    moved = rotate_grid(uvw, angle)
    c, s = _cos_sin(angle)
    u, v, w = moved
    return np.stack([c * u - s * v, s * u + c * v, w])


def canonicalize(heights: np.ndarray, uvw: np.ndarray | None, direction: int) -> tuple[np.ndarray, np.ndarray | None]:
    """Rotate height map and world-frame field so the inflow points along -y."""
    angle = 45.0 * direction
    h = rotate_grid(heights, angle)
    f = None if uvw is None else rotate_field(uvw, angle)
    return h, f


# --------------------------------------------------------------------------
# quantization


def quantize(field: np.ndarray, v_max: float = V_MAX) -> np.ndarray:
    """m/s -> uint8, round half up after clamping to +-v_max."""
    f = np.clip(np.asarray(field, dtype=np.float64), -v_max, v_max)
    q = np.floor((f + v_max) / (2 * v_max) * 255.0 + 0.5)
    return q.astype(np.uint8)


def dequantize(q: np.ndarray, v_max: float = V_MAX) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) / 255.0 * 2 * v_max - v_max


# --------------------------------------------------------------------------
# dataset on disk


@dataclass
class DatasetManifest:
    splits: dict[str, list[str]]
    grid: int
    extent: float
    seed: int
    v_max: float = V_MAX
    u_inf: float = U_INF
    directions: int = N_DIRECTIONS
    frame: str = "canonical"
    disc_masked: bool = True
    format_version: int = FORMAT_VERSION
    scene_seeds: dict[str, int] = field(default_factory=dict)
    generator: dict = field(default_factory=dict)

    @property
    def n_scenes(self) -> int:
        return sum(len(v) for v in self.splits.values())

    @property
    def n_samples(self) -> int:
        return self.n_scenes * self.directions

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path: str | os.PathLike) -> DatasetManifest:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported dataset format version {d.get('format_version')}")
        return cls(**d)


def split_counts(n_scenes: int) -> tuple[int, int, int]:
    train = n_scenes * 8 // 10
    val = n_scenes // 10
    return train, val, n_scenes - train - val


def scene_id(index: int) -> str:
    return f"scene{index:04d}"


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def make_sample(scene: Scene, direction: int) -> tuple[np.ndarray, np.ndarray]:
    """(model-frame height map in meters, model-frame quantized target (G, G, 3))."""
    field_ = wind_oracle(scene, direction)
    h, f = canonicalize(scene.heights, field_.uvw, direction)
    mask = disc_mask(scene.grid)
    h = np.where(mask, h, 0).astype(np.float32)
    f = np.where(mask, f, 0.0)
    return h, quantize(f).transpose(1, 2, 0)


def _scene_job(args) -> tuple[str, bytes, list[bytes]]:
    sid, seed, grid, extent = args
    scene = generate_scene(seed, grid, extent, sid)
    planes = [np.ascontiguousarray(make_sample(scene, d)[1]).tobytes() for d in range(N_DIRECTIONS)]
    return sid, scene.heights.astype("<f4").tobytes(), planes


def build_dataset(n_scenes: int, grid: int, seed: int, out: str | os.PathLike, extent: float = EXTENT_M,
                  workers: int = 1, previews: bool = False) -> DatasetManifest:
    """Generate scenes x 8 directions under ``out`` and write ``manifest.json`` last."""
    if n_scenes < 10:
        raise ValueError("n_scenes must be >= 10")
    root = Path(out)
    ids = [scene_id(i) for i in range(n_scenes)]
    seeds = {sid: rngmod.derive_seed(seed, i) for i, sid in enumerate(ids)}
    order = rngmod.stream(seed, "split").permutation(n_scenes)
    n_train, n_val, _ = split_counts(n_scenes)
    splits = {
        "train": sorted(ids[i] for i in order[:n_train]),
        "val": sorted(ids[i] for i in order[n_train:n_train + n_val]),
        "test": sorted(ids[i] for i in order[n_train + n_val:]),
    }
    data_dir = root / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(sid, seeds[sid], grid, extent) for sid in ids]

    def store(result):
        sid, height_bytes, planes = result
        d = data_dir / sid
        d.mkdir(exist_ok=True)
        _atomic_write(d / "height.f32", height_bytes)
        for k, payload in enumerate(planes):
            _atomic_write(d / f"d{k}.u8", payload)
        if previews:
            write_previews(d, grid)

    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for result in pool.map(_scene_job, jobs):
                    store(result)
        else:
            for job in jobs:
                store(_scene_job(job))
    except OSError as exc:
        raise OSError(f"writing dataset under {root}: {exc}") from exc
    manifest = DatasetManifest(
        splits=splits, grid=grid, extent=extent, seed=seed, scene_seeds=seeds,
        generator={"footprints": [8, 25], "heights_m": [MIN_HEIGHT, MAX_HEIGHT], "coverage": list(COVERAGE_RANGE),
                   "sor_omega": SOR_OMEGA, "height_scale_m": HEIGHT_SCALE},
    )
    _atomic_write(root / "manifest.json", manifest.to_json().encode("utf-8"))
    return manifest


def write_previews(scene_dir: Path, grid: int) -> None:
    from PIL import Image

    h = read_height(scene_dir, grid)
    Image.fromarray(np.clip(h / MAX_HEIGHT * 255.0, 0, 255).astype(np.uint8), mode="L").save(scene_dir / "height.png")
    for k in range(N_DIRECTIONS):
        Image.fromarray(read_target(scene_dir, k, grid), mode="RGB").save(scene_dir / f"d{k}.png")


def read_height(scene_dir: str | os.PathLike, grid: int) -> np.ndarray:
    path = Path(scene_dir) / "height.f32"
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != grid * grid:
        raise ValueError(f"{path}: expected {grid * grid} values, found {raw.size}")
    return raw.reshape(grid, grid).astype(np.float32)


def read_target(scene_dir: str | os.PathLike, direction: int, grid: int) -> np.ndarray:
    """Quantized model-frame target, (G, G, 3) uint8 with pixel-interleaved u, v, w."""
    path = Path(scene_dir) / f"d{direction}.u8"
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size != grid * grid * 3:
        raise ValueError(f"{path}: expected {grid * grid * 3} bytes, found {raw.size}")
    return raw.reshape(grid, grid, 3)


def model_input(heights: np.ndarray, direction: int) -> np.ndarray:
    """World-frame height map (m) -> (1, G, G) model input in [0, 1]."""
    h, _ = canonicalize(heights, None, direction)
    h = np.where(disc_mask(heights.shape[0]), h, 0)
    return (h / HEIGHT_SCALE).astype(np.float32)[None]


def target_array(q: np.ndarray) -> np.ndarray:
    """(G, G, 3) uint8 -> (3, G, G) float32 training target q / 255."""
    return (q.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


@dataclass
class Sample:
    scene_id: str
    direction: int
    x: np.ndarray  # (1, G, G)
    y: np.ndarray  # (3, G, G)


class Dataset:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"{manifest_path}: dataset manifest not found")
        self.manifest = DatasetManifest.load(manifest_path)
        self._cache: dict[str, list[Sample]] = {}

    def scene_dir(self, sid: str) -> Path:
        return self.root / "data" / sid

    def split(self, name: str) -> list[Sample]:
        if name not in self.manifest.splits:
            raise KeyError(f"unknown split {name!r}")
        if name not in self._cache:
            g = self.manifest.grid
            samples = []
            for sid in self.manifest.splits[name]:
                heights = read_height(self.scene_dir(sid), g)
                for d in range(self.manifest.directions):
                    samples.append(Sample(sid, d, model_input(heights, d),
                                          target_array(read_target(self.scene_dir(sid), d, g))))
            self._cache[name] = samples
        return self._cache[name]
