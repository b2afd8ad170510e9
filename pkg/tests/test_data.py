import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from urbanwind import data as D

# velocity error allowed from stopping SOR at max update < 1e-6 * U * cell
SOLVER_TOL = 1e-4


def square_scene(G=64, half=6, h=30.0):
    heights = np.zeros((G, G), np.float32)
    c = G // 2
    heights[c - half:c + half, c - half:c + half] = h
    return D.Scene(heights, scene_id="square")


# -- scenes -----------------------------------------------------------------


def test_scene_deterministic():
    a, b = D.generate_scene(5, 128), D.generate_scene(5, 128)
    assert np.array_equal(a.heights, b.heights)
    assert not np.array_equal(a.heights, D.generate_scene(6, 128).heights)


def test_coverage_sweep_64_seeds():
    covs = [D.generate_scene(s, 128).coverage() for s in range(64)]
    assert min(covs) >= 0.15 and max(covs) <= 0.45


@pytest.mark.parametrize("seed", range(8))
def test_heights_zero_or_in_range(seed):
    h = D.generate_scene(seed, 128).heights
    built = h[h > 0]
    assert built.size and built.min() >= 6.0 and built.max() <= 100.0
    assert np.all((h == 0) | ((h >= 6.0) & (h <= 100.0)))


def test_ring_occupies_outer_annulus():
    s = D.generate_scene(0, 128)
    c = np.arange(128) - 63.5
    r = np.hypot(c[None, :], c[:, None]) * s.cell
    R = s.extent / 2
    annulus = (r >= 0.87 * R) & (r <= 0.95 * R)
    assert s.solid[annulus].mean() > 0.3
    assert not s.solid[r > R].any()


@pytest.mark.parametrize("grid", [32, 100])
def test_grid_must_be_multiple_of_64(grid):
    with pytest.raises(ValueError):
        D.generate_scene(0, grid)


# -- oracle -----------------------------------------------------------------


def test_empty_scene_uniform_flow():
    f = D.wind_oracle(D.empty_scene(64), 0)
    assert np.abs(f.u).max() < 1e-4
    assert np.abs(f.v + 5.0).max() < 1e-4
    assert np.abs(f.w).max() < 1e-4


@pytest.mark.parametrize("d", range(8))
def test_empty_scene_any_direction_is_freestream(d):
    f = D.wind_oracle(D.empty_scene(64), d)
    t = np.radians(45 * d)
    np.testing.assert_allclose(f.u, -5 * np.sin(t), atol=1e-9)
    np.testing.assert_allclose(f.v, -5 * np.cos(t), atol=1e-9)


def test_square_obstacle_mirror_symmetry():
    f = D.wind_oracle(square_scene(), 0)
    assert np.abs(f.u + f.u[:, ::-1]).max() < SOLVER_TOL
    assert np.abs(f.v - f.v[:, ::-1]).max() < SOLVER_TOL
    assert np.abs(f.w - f.w[:, ::-1]).max() < SOLVER_TOL


def test_flow_deflects_around_obstacle():
    f = D.wind_oracle(square_scene(), 0)
    c = 32
    assert abs(f.v[c - 10, c]) < 5.0  # stagnation upstream is slower than freestream
    assert abs(f.v[c, c + 7]) > 5.0  # speed-up on the flanks


@pytest.mark.parametrize("d", [0, 3])
def test_zero_on_obstacles_and_clamped(d):
    s = D.generate_scene(1, 64)
    f = D.wind_oracle(s, d)
    assert not f.uvw[:, s.solid].any()
    assert np.abs(f.uvw).max() <= 16.0


def test_oracle_deterministic():
    s = D.generate_scene(2, 64)
    assert np.array_equal(D.wind_oracle(s, 5).uvw, D.wind_oracle(s, 5).uvw)


@pytest.mark.parametrize("d", range(8))
def test_direction_consistency_under_quarter_turn(d):
    s = D.generate_scene(3, 64)
    turned = D.Scene(D.rotate_grid(s.heights, 90), s.extent)
    a = D.wind_oracle(turned, d).uvw
    b = D.rotate_field(D.wind_oracle(s, (d + 2) % 8).uvw, 90)
    assert np.abs(a - b).max() < SOLVER_TOL


@pytest.mark.parametrize("d", [0, 1, 6])
def test_divergence_free_away_from_obstacles(d):
    s = D.generate_scene(4, 64)
    phi, dead, _, _ = D.solve_potential(s, d)
    div = D.face_divergence(phi, dead, s.cell)
    far = ~ndimage.binary_dilation(dead, iterations=3)[1:-1, 1:-1]
    assert np.abs(div[far]).max() < 1e-3 * D.U_INF / s.cell


def test_enclosed_pocket_is_dead_and_still():
    h = np.zeros((64, 64), np.float32)
    h[20:40, 20:40] = 20.0
    h[25:35, 25:35] = 0.0  # courtyard with no opening
    s = D.Scene(h)
    _, dead, _, _ = D.solve_potential(s, 0)
    assert dead[30, 30] and not dead[5, 5]
    assert not D.wind_oracle(s, 0).uvw[:, 25:35, 25:35].any()


def test_non_convergence_raises():
    with pytest.raises(D.ConvergenceError, match="not converged"):
        D.wind_oracle(D.generate_scene(0, 64), 1, max_sweeps=3)


def test_bad_direction():
    with pytest.raises(ValueError):
        D.wind_oracle(D.empty_scene(64), 8)


# -- rotation ---------------------------------------------------------------


def test_canonicalize_d0_identity():
    s = D.generate_scene(0, 64)
    f = D.wind_oracle(s, 0).uvw
    h, g = D.canonicalize(s.heights, f, 0)
    assert np.array_equal(h, s.heights) and np.array_equal(g, f)


def test_canonicalize_d4_flips_and_negates():
    gen = np.random.default_rng(0)
    h = gen.random((64, 64))
    f = gen.standard_normal((3, 64, 64))
    h4, f4 = D.canonicalize(h, f, 4)
    assert np.array_equal(h4, h[::-1, ::-1])
    assert np.array_equal(f4[0], -f[0, ::-1, ::-1])
    assert np.array_equal(f4[1], -f[1, ::-1, ::-1])
    assert np.array_equal(f4[2], f[2, ::-1, ::-1])


@pytest.mark.parametrize("k", [1, 2, 3, -1])
def test_quarter_rotation_inverse_exact(k):
    a = np.random.default_rng(k % 4).standard_normal((3, 16, 16))
    assert np.array_equal(D.rotate_grid(D.rotate_grid(a, 90 * k), -90 * k), a)
    assert np.array_equal(D.rotate_field(D.rotate_field(a, 90 * k), -90 * k), a)


def test_rotate_grid_direction_convention():
    a = np.zeros((8, 8))
    a[0, 7] = 1.0  # top-right corner
    # 90 degrees moves it to the bottom-right, matching np.rot90 with k=-1
    assert D.rotate_grid(a, 90)[7, 7] == 1.0


@pytest.mark.parametrize("d", range(8))
def test_model_frame_inflow_is_minus_y(d):
    G = 64
    e = D.empty_scene(G)
    _, f = D.canonicalize(e.heights, D.wind_oracle(e, d).uvw, d)
    c = np.arange(G) - (G - 1) / 2
    inner = np.hypot(c[None, :], c[:, None]) < G / 2 - 2
    assert np.abs(f[0][inner]).max() < 1e-9
    assert np.abs(f[1][inner] + 5.0).max() < 1e-9


def test_oblique_rotation_zero_outside_disc():
    a = np.ones((32, 32))
    r = D.rotate_grid(a, 45)
    assert not r[~D.disc_mask(32)].any()


# -- quantization -----------------------------------------------------------


def test_quantize_examples():
    assert D.quantize(np.array([-16.0, 16.0, 0.0])).tolist() == [0, 255, 128]
    assert D.quantize(np.array([-40.0, 99.0])).tolist() == [0, 255]  # clamped first
    assert D.dequantize(np.array([0, 255])).tolist() == [-16.0, 16.0]


@given(st.lists(st.floats(-16, 16), min_size=1, max_size=64))
def test_quantize_round_trip_bound(vals):
    v = np.array(vals)
    assert np.abs(D.dequantize(D.quantize(v)) - v).max() <= 2 * 16 / 255


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=64))
def test_quantize_idempotent(vals):
    q = D.quantize(np.array(vals))
    assert np.array_equal(D.quantize(D.dequantize(q)), q)


# -- dataset ----------------------------------------------------------------


@pytest.mark.parametrize("n,expected", [(10, (8, 1, 1)), (163, (130, 16, 17)), (16, (12, 1, 3))])
def test_split_counts(n, expected):
    assert D.split_counts(n) == expected
    assert sum(D.split_counts(n)) * 8 == n * 8


def test_paper_scale_sample_count():
    assert sum(D.split_counts(163)) * D.N_DIRECTIONS == 1304


def test_too_few_scenes(tmp_path):
    with pytest.raises(ValueError):
        D.build_dataset(9, 64, 0, tmp_path)


def test_dataset_layout_and_manifest(small_dataset):
    m = json.loads((small_dataset / "manifest.json").read_text())
    assert m["grid"] == 64 and m["format_version"] == 1 and m["v_max"] == 16.0
    splits = m["splits"]
    assert [len(splits[k]) for k in ("train", "val", "test")] == [8, 1, 1]
    ids = sum(splits.values(), [])
    assert len(set(ids)) == 10
    for sid in ids:
        d = small_dataset / "data" / sid
        assert (d / "height.f32").stat().st_size == 64 * 64 * 4
        for k in range(8):
            assert (d / f"d{k}.u8").stat().st_size == 64 * 64 * 3


def test_dataset_samples(small_dataset):
    ds = D.Dataset(small_dataset)
    tr, va, te = ds.split("train"), ds.split("val"), ds.split("test")
    assert (len(tr), len(va), len(te)) == (64, 8, 8)
    # all directions of a scene share a split
    assert {s.scene_id for s in tr}.isdisjoint({s.scene_id for s in va} | {s.scene_id for s in te})
    x, y = tr[0].x, tr[0].y
    assert x.shape == (1, 64, 64) and y.shape == (3, 64, 64)
    assert x.min() >= 0 and x.max() <= 1 and y.min() >= 0 and y.max() <= 1
    with pytest.raises(KeyError):
        ds.split("holdout")


def test_stored_target_matches_oracle(small_dataset):
    ds = D.Dataset(small_dataset)
    sid = ds.manifest.splits["val"][0]
    scene = D.generate_scene(ds.manifest.scene_seeds[sid], 64, scene_id=sid)
    assert np.array_equal(D.read_height(ds.scene_dir(sid), 64), scene.heights)
    h, q = D.make_sample(scene, 3)
    assert np.array_equal(D.read_target(ds.scene_dir(sid), 3, 64), q)
    np.testing.assert_array_equal(ds.split("val")[3].x[0], h / 100.0)


def test_parallel_build_byte_identical(tmp_path, small_dataset):
    D.build_dataset(10, 64, 0, tmp_path, workers=2)
    for p in sorted(small_dataset.rglob("*")):
        if p.is_file():
            assert (tmp_path / p.relative_to(small_dataset)).read_bytes() == p.read_bytes(), p


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        D.Dataset(tmp_path)


def test_truncated_file_reports_path(small_dataset, tmp_path):
    bad = tmp_path / "s"
    bad.mkdir()
    (bad / "height.f32").write_bytes(b"\0" * 10)
    with pytest.raises(ValueError, match="height.f32"):
        D.read_height(bad, 64)


def test_previews(tmp_path):
    from PIL import Image

    D.build_dataset(10, 64, 1, tmp_path, previews=True)
    d = tmp_path / "data" / "scene0000"
    assert Image.open(d / "height.png").size == (64, 64)
    assert Image.open(d / "d0.png").mode == "RGB"
