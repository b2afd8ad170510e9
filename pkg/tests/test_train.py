import math
import statistics

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from urbanwind import data as D
from urbanwind import model as M
from urbanwind import tensor as T
from urbanwind import train as TR
from urbanwind.tensor import ParamRegistry, Tensor


def hand_adam(w, grad_fn, lr, b1, b2, eps, steps):
    """Textbook Adam (bias-corrected), independent of the library."""
    w = w.copy()
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        w = w - lr * mhat / (np.sqrt(vhat) + eps)
    return w


def quadratic_registry(w0):
    reg = ParamRegistry()
    reg.add("w", Tensor(w0.copy()), decay=True)
    return reg


# -- Huber ------------------------------------------------------------------


@pytest.mark.parametrize("e,expected", [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)])
def test_huber_examples(e, expected):
    assert TR.huber_values(np.array(e), 1.0) == expected
    assert float(TR.huber_loss(Tensor(np.array([e])), np.array([0.0])).data) == expected


@given(st.floats(-50, 50), st.floats(0.05, 5))
def test_huber_bounds(e, delta):
    h = float(TR.huber_values(np.array(e), delta))
    assert h <= 0.5 * e * e + 1e-12
    assert h <= delta * abs(e) + 1e-12


@given(st.floats(0.05, 5))
def test_huber_c1_at_threshold(delta):
    both = TR.huber_values(np.array([delta, -delta]), delta)
    np.testing.assert_allclose(both, 0.5 * delta**2)
    p = Tensor(np.array([delta, -delta]), requires_grad=True)
    TR.huber_loss(p, np.zeros(2), delta).backward()
    np.testing.assert_allclose(p.grad, np.array([delta, -delta]) / 2)


def test_huber_grad_check_away_from_kink():
    gen = np.random.default_rng(0)
    e = gen.uniform(-3, 3, (2, 3, 4, 4))
    e = np.where(np.abs(np.abs(e) - 1.0) < 1e-3, e + 0.01, e)
    target = gen.standard_normal(e.shape)
    pred = Tensor(target + e)
    assert T.grad_check(lambda p: TR.huber_loss(p, target, 1.0), [pred]) < 1e-4


def test_huber_shape_mismatch():
    with pytest.raises(ValueError):
        TR.huber_loss(Tensor(np.zeros((1, 3, 4, 4))), np.zeros((1, 3, 4, 5)))


# -- AdamW ------------------------------------------------------------------


def test_adamw_wd0_matches_hand_adam():
    a = np.array([1.0, 2.0, 0.5, 3.0, 0.1])
    c = np.array([0.3, -1.0, 2.0, 0.0, -0.5])
    w0 = np.array([1.0, 1.0, -1.0, 2.0, 0.0])

    def grad(w):
        return a * (w - c)

    cfg = TR.TrainConfig(learning_rate=0.01, weight_decay=0.0)
    reg = quadratic_registry(w0)
    state = TR.AdamState()
    w_lib = reg.get("w")
    for t in range(1, 101):
        TR.adamw_step(reg, {"w": grad(w_lib.data)}, state, cfg)
        ref = hand_adam(w0, grad, 0.01, 0.9, 0.999, 1e-8, t)
        assert np.abs(w_lib.data - ref).max() < 1e-10


def test_decoupled_decay_closed_form():
    w0 = np.array([1.0, -2.0, 3.0, 0.5, -0.25])
    cfg = TR.TrainConfig(learning_rate=1e-3, weight_decay=0.01)
    reg = quadratic_registry(w0)
    state = TR.AdamState()
    for t in range(1, 201):
        TR.adamw_step(reg, {"w": np.zeros(5)}, state, cfg)
        np.testing.assert_allclose(reg.get("w").data, w0 * (1 - 1e-5) ** t, rtol=0, atol=1e-12)


def test_zero_grad_no_decay_unchanged():
    w0 = np.arange(5.0)
    reg = quadratic_registry(w0)
    TR.adamw_step(reg, {"w": np.zeros(5)}, TR.AdamState(), TR.TrainConfig(weight_decay=0.0))
    assert np.array_equal(reg.get("w").data, w0)


def test_decay_skips_non_decay_params():
    reg = ParamRegistry()
    reg.add("b", Tensor(np.ones(3)), decay=False)
    TR.adamw_step(reg, {"b": np.zeros(3)}, TR.AdamState(), TR.TrainConfig(weight_decay=0.5))
    assert np.array_equal(reg.get("b").data, np.ones(3))


def test_first_step_sign():
    g = np.array([0.3, -2.0, 1e-3, -5.0, 40.0])
    reg = quadratic_registry(np.zeros(5))
    TR.adamw_step(reg, {"w": g}, TR.AdamState(), TR.TrainConfig(learning_rate=1e-3, weight_decay=0.0))
    np.testing.assert_allclose(reg.get("w").data, -1e-3 * np.sign(g), rtol=1e-4)


def test_non_finite_grad_rejected_without_change():
    reg = quadratic_registry(np.ones(5))
    state = TR.AdamState()
    with pytest.raises(T.NonFiniteError, match="rejected"):
        TR.adamw_step(reg, {"w": np.array([1, np.nan, 0, 0, 0.0])}, state, TR.TrainConfig())
    assert state.step == 0 and np.array_equal(reg.get("w").data, np.ones(5))


@pytest.mark.parametrize("kw", [{"learning_rate": -1}, {"epochs": 0}, {"batch_size": 0}, {"huber_delta": 0},
                                {"betas": (1.0, 0.9)}, {"eps": 0}, {"learning_rate": math.inf}])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TR.TrainConfig(**kw).validate()


# -- training loop ----------------------------------------------------------


@pytest.fixture(scope="module")
def splits(small_dataset):
    ds = D.Dataset(small_dataset)
    return ds.split("train")[:12], ds.split("val")


def tiny_model(seed=0, dropout=0.1, block="convnext"):
    return M.build_model(M.ModelConfig.tiny(block, "half_unet", width=4, dropout=dropout), seed=seed)


def test_training_deterministic(splits):
    tr, va = splits
    cfg = TR.TrainConfig(epochs=2, seed=3)
    a = TR.train(tiny_model(), tr, va, cfg).history
    b = TR.train(tiny_model(), tr, va, cfg).history
    assert a == b
    c = TR.train(tiny_model(), tr, va, TR.TrainConfig(epochs=2, seed=4)).history
    assert a != c


def test_lr0_constant_history(splits):
    tr, va = splits
    h = TR.train(tiny_model(), tr, va, TR.TrainConfig(epochs=3, learning_rate=0.0)).history
    assert len({r.val_loss for r in h}) == 1


def test_training_reduces_loss(splits):
    tr, va = splits
    m = tiny_model(dropout=0.0)
    before = TR.evaluate(m, va)
    res = TR.train(m, tr, va, TR.TrainConfig(epochs=3))
    assert res.final_val_loss < before
    assert [r.epoch for r in res.history] == [1, 2, 3]


def test_empty_split_rejected(splits):
    tr, va = splits
    with pytest.raises(ValueError, match="empty"):
        TR.train(tiny_model(), [], va, TR.TrainConfig(epochs=1))
    with pytest.raises(ValueError, match="empty"):
        TR.evaluate(tiny_model(), [])


def test_non_finite_loss_aborts(splits):
    tr, va = splits
    bad = [D.Sample(s.scene_id, s.direction, np.full_like(s.x, np.nan), s.y) for s in tr[:2]]
    with pytest.raises(T.NonFiniteError, match="epoch 1"):
        TR.train(tiny_model(), bad, va, TR.TrainConfig(epochs=1))


def test_loss_csv(splits, tmp_path):
    tr, va = splits
    p = tmp_path / "loss.csv"
    res = TR.train(tiny_model(), tr, va, TR.TrainConfig(epochs=2), loss_csv=p)
    lines = p.read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss" and len(lines) == 3
    assert float(lines[2].split(",")[2]) == res.final_val_loss


def test_batch_order_covers_all():
    batches = TR.batch_order(10, 4, 0, 0)
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))
    assert not np.array_equal(np.concatenate(batches), np.concatenate(TR.batch_order(10, 4, 0, 1)))


# -- evaluation -------------------------------------------------------------


class FixedModel:
    """Duck-typed model returning a fixed prediction per call."""

    def __init__(self, fn):
        self.fn = fn

    def predict(self, x):
        return self.fn(x)


def test_evaluate_exact_targets_is_zero(splits):
    _, va = splits
    lookup = {s.x.tobytes(): s.y for s in va}
    m = FixedModel(lambda x: lookup[x[0].tobytes()][None])
    assert TR.evaluate(m, va) == 0.0


def test_evaluate_zero_model_closed_form(splits):
    _, va = splits
    m = FixedModel(lambda x: np.zeros((1, 3) + x.shape[2:]))
    expected = np.mean([0.5 * np.mean(s.y.astype(np.float64) ** 2) for s in va])
    assert TR.evaluate(m, va) == pytest.approx(expected, rel=1e-12)


def test_evaluate_order_invariant(splits):
    tr, _ = splits
    m = tiny_model()
    m.eval()
    rev = list(reversed(tr))
    assert TR.evaluate(m, tr) == TR.evaluate(m, rev)


def test_constant_baseline(splits):
    tr, va = splits
    mean = np.mean(np.stack([s.y for s in tr]).astype(np.float64), axis=(0, 2, 3))
    m = FixedModel(lambda x: np.broadcast_to(mean[:, None, None], (1, 3) + x.shape[2:]))
    assert TR.constant_baseline_loss(tr, va) == pytest.approx(TR.evaluate(m, va), rel=1e-12)


# -- repeat protocol --------------------------------------------------------


def test_repeat_train_summary(splits):
    tr, va = splits
    cfg = M.ModelConfig.tiny("convnext", "half_unet", width=4)
    s = TR.repeat_train(cfg, tr[:4], va[:2], TR.TrainConfig(epochs=1), n_seeds=2, base_seed=5)
    assert s.seeds == [5, 6] and len(s.losses) == 2
    assert s.median == statistics.median(s.losses) and s.mean == statistics.fmean(s.losses)
    assert s.min <= s.median <= s.max
    same = TR.RepeatSummary([0] * 10, [0.25] * 10)
    assert same.max - same.min == 0.0


# -- checkpoints ------------------------------------------------------------


def test_checkpoint_round_trip_bit_identical(splits, tmp_path):
    tr, va = splits
    cfg = TR.TrainConfig(epochs=1)
    res = TR.train(tiny_model(), tr, va, cfg)
    ck = TR.make_checkpoint(res.model, res.optimizer, 1, cfg, res.history)
    p = tmp_path / "m.ckpt"
    TR.save_checkpoint(p, ck)
    back = TR.load_checkpoint(p)
    assert TR.encode_checkpoint(back) == p.read_bytes()
    assert back.epoch == 1 and back.step == 3 and back.config == res.model.config
    assert TR.evaluate(back.build(), va) == res.final_val_loss


def test_resume_matches_uninterrupted(splits, tmp_path):
    tr, va = splits
    cfg = TR.TrainConfig(epochs=2, seed=1)
    full = TR.train(tiny_model(), tr, va, cfg).history
    first = TR.train(tiny_model(), tr, va, TR.TrainConfig(epochs=1, seed=1))
    p = tmp_path / "half.ckpt"
    TR.save_checkpoint(p, TR.make_checkpoint(first.model, first.optimizer, 1, cfg, first.history))
    model, opt = TR.resume(TR.load_checkpoint(p))
    rest = TR.train(model, tr, va, cfg, optimizer=opt, start_epoch=1).history
    assert first.history + rest == full


@pytest.mark.parametrize("mutate,match", [
    (lambda b: b"NOTACKPT" + b[8:], "magic"),
    (lambda b: b[:12], "truncated"),
    (lambda b: b[:-4], "truncated"),
    (lambda b: b[:8] + (9).to_bytes(4, "little") + b[12:], "version"),
])
def test_corrupt_checkpoint(mutate, match):
    payload = TR.encode_checkpoint(TR.make_checkpoint(tiny_model()))
    with pytest.raises(TR.CheckpointError, match=match):
        TR.decode_checkpoint(mutate(payload))


# -- output-head start ------------------------------------------------------


def test_head_init_starts_at_constant_baseline(splits):
    tr, va = splits
    m = tiny_model()
    TR.init_output_head(m, tr)
    assert not m.head.final.weight.data.any()
    assert TR.evaluate(m, va) == pytest.approx(TR.constant_baseline_loss(tr, va), rel=1e-6)


def test_head_init_option(splits):
    tr, va = splits
    plain = tiny_model()
    w0 = plain.head.final.weight.data.copy()
    TR.train(plain, tr, va, TR.TrainConfig(epochs=1, learning_rate=0.0, head_init="none"))
    assert np.array_equal(plain.head.final.weight.data, w0)
    with pytest.raises(ValueError, match="head_init"):
        TR.TrainConfig(head_init="xavier").validate()


def test_target_mean_matches_stacked_mean(splits):
    tr, _ = splits
    ref = np.stack([s.y for s in tr]).astype(np.float64).mean(axis=(0, 2, 3))
    np.testing.assert_allclose(TR.target_mean(tr), ref, rtol=1e-12)
