import dataclasses
import math

import numpy as np
import pytest

from urbanwind import search as S
from urbanwind import train as TR
from urbanwind.model import ModelConfig, count_params
from urbanwind.tensor import NonFiniteError

ARCHS = ["Half-U-NeXt", "Half-U-Net", "U-NeXt", "U-Net"]
FAST = S.SearchSettings(epochs=1, bench_warmup=0, bench_repeats=1)


def micro_space(arch="Half-U-NeXt"):
    """Search space with the tested structure but tiny widths, so trials take seconds."""
    base = S.ParamSpace.for_arch(arch)
    width = (4,) * 5 if base.decoder_type == "half_unet" else (4, 8, 16, 32, 64)
    return dataclasses.replace(base, encoder_channels=(width,), encoder_blocks=((1,) * 5,),
                               decoder_blocks=((1,) * 5,), output_blocks=(1,), resmerge_blocks=(1,))


def strip_runtime(rows):
    return [dataclasses.replace(r, runtime_ms=0.0, history=[]) for r in rows]


# -- sampling ---------------------------------------------------------------


@pytest.mark.parametrize("arch", ARCHS)
def test_samples_are_members(arch):
    space = S.ParamSpace.for_arch(arch)
    gen = np.random.default_rng(0)
    for _ in range(200):
        assert space.contains(S.sample_config(space, gen))


@pytest.mark.parametrize("arch", ARCHS)
def test_128_samples_hit_two_values_per_axis(arch):
    space = S.ParamSpace.for_arch(arch)
    cfgs = [S.trial_config(space, 0, t) for t in range(128)]
    for axis in ("encoder_channels", "encoder_blocks", "decoder_blocks", "output_blocks", "resmerge_blocks",
                 "dropout"):
        assert len({str(getattr(c, axis)) for c in cfgs}) >= 2, axis


def test_unet_space_reverses_channels():
    space = S.ParamSpace.for_arch("U-Net")
    seen = {tuple(c.encoder_channels): c.decoder_channels for c in (S.trial_config(space, 0, t) for t in range(64))}
    assert list(seen[(32, 64, 128, 256, 512)]) == [512, 256, 128, 64, 32]


def test_half_space_constant_channels():
    space = S.ParamSpace.for_arch("Half-U-Net")
    for t in range(64):
        c = S.trial_config(space, 0, t)
        assert len(set(c.encoder_channels)) == 1 and list(c.decoder_channels) == list(c.encoder_channels)


def test_space_sizes_and_tiny():
    assert S.ParamSpace.for_arch("U-NeXt").size() == 3 * 3 * 3 * 3 * 3 * 3
    tiny = S.ParamSpace.for_arch("U-NeXt", tiny=True)
    assert tiny.encoder_channels == ((32, 64, 128, 256, 512),) and tiny.size() == 3**5
    assert S.ParamSpace.for_arch("Half-U-NeXt", tiny=True).encoder_channels == ((32,) * 5,)
    with pytest.raises(ValueError):
        S.ParamSpace.for_arch("ResNet")


def test_same_stream_same_config():
    space = S.ParamSpace.for_arch("U-NeXt")
    assert S.trial_config(space, 7, 3) == S.trial_config(space, 7, 3)
    assert S.trial_seed(7, 3) == S.trial_seed(7, 3) != S.trial_seed(7, 4)


def test_contains_rejects_outside():
    space = S.ParamSpace.for_arch("Half-U-NeXt")
    cfg = S.trial_config(space, 0, 0)
    assert not space.contains(dataclasses.replace(cfg, dropout=0.5))
    assert not S.ParamSpace.for_arch("U-NeXt").contains(cfg)


# -- running ----------------------------------------------------------------


@pytest.fixture(scope="module")
def three_trials(small_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("search") / "res.csv"
    rows = S.run_search(micro_space(), 3, small_dataset, 0, out, FAST)
    return out, rows


def test_single_trial_row_populated(small_dataset, tmp_path):
    rows = S.run_search(micro_space("U-Net"), 1, small_dataset, 0, tmp_path / "r.csv", FAST)
    assert len(rows) == 1
    r = rows[0]
    assert r.ok and r.loss > 0 and r.runtime_ms > 0 and r.macs > 0
    assert r.params == count_params(r.config) and r.arch == "U-Net"
    assert S.read_results(tmp_path / "r.csv")[0].config == r.config


def test_csv_layout(three_trials):
    out, rows = three_trials
    lines = out.read_text().splitlines()
    assert lines[0] == ",".join(S.RESULT_FIELDS) and len(lines) == 4
    assert [r.trial for r in S.read_results(out)] == [0, 1, 2]


def test_rerun_same_seed_same_losses(three_trials, small_dataset, tmp_path):
    _, rows = three_trials
    again = S.run_search(micro_space(), 3, small_dataset, 0, tmp_path / "again.csv", FAST)
    assert strip_runtime(again) == strip_runtime(rows)


def test_resume_after_interrupt(three_trials, small_dataset, tmp_path):
    out, rows = three_trials
    lines = out.read_text().splitlines(keepends=True)
    part = tmp_path / "part.csv"
    part.write_text("".join(lines[:3]) + lines[3][:17])  # header, trials 0-1, torn trial-2 row
    resumed = S.run_search(micro_space(), 3, small_dataset, 0, part, FAST)
    assert strip_runtime(resumed) == strip_runtime(rows)
    assert [r.runtime_ms for r in resumed[:2]] == [r.runtime_ms for r in rows[:2]]  # not rerun
    assert len(part.read_text().splitlines()) == 4


def test_resume_complete_file_runs_nothing(three_trials, small_dataset, tmp_path, monkeypatch):
    out, rows = three_trials
    copy = tmp_path / "copy.csv"
    copy.write_bytes(out.read_bytes())
    monkeypatch.setattr(S, "run_trial", lambda *a: pytest.fail("trial rerun"))
    assert S.run_search(micro_space(), 3, small_dataset, 0, copy, FAST) == [dataclasses.replace(r, history=[]) for r in rows]


def test_merge_keeps_other_architectures(three_trials, small_dataset, tmp_path):
    out, _ = three_trials
    shared = tmp_path / "shared.csv"
    shared.write_bytes(out.read_bytes())
    S.run_search(micro_space("U-Net"), 2, small_dataset, 0, shared, FAST)
    got = S.read_results(shared)
    assert [(r.arch, r.trial) for r in got] == [("Half-U-NeXt", 0), ("Half-U-NeXt", 1), ("Half-U-NeXt", 2),
                                               ("U-Net", 0), ("U-Net", 1)]


def test_failed_trial_recorded_and_search_continues(small_dataset, tmp_path, monkeypatch):
    real = TR.train
    calls = []

    def flaky(model, *a, **k):
        calls.append(1)
        if len(calls) == 1:
            raise NonFiniteError("non-finite training loss at epoch 1")
        return real(model, *a, **k)

    monkeypatch.setattr(TR, "train", flaky)
    rows = S.run_search(micro_space(), 2, small_dataset, 0, tmp_path / "f.csv", FAST)
    assert not rows[0].ok and "NonFiniteError" in rows[0].error and rows[0].params > 0
    assert rows[1].ok
    back = S.read_results(tmp_path / "f.csv")
    assert math.isnan(back[0].loss) and back[0].config == rows[0].config and "non-finite" in back[0].error


def test_corrupt_results_refuse_resume(small_dataset, tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match="corrupt"):
        S.run_search(micro_space(), 1, small_dataset, 0, p, FAST)


def test_paper_protocol_count():
    assert len(ARCHS) * 128 == 512


# -- selection --------------------------------------------------------------


def result(arch, trial, loss, rt):
    return S.TrialResult(trial, arch, loss, rt, 1, 1, 0, None)


def test_select_best_rules():
    rows = [result("U-Net", 0, 0.02, 5.0), result("U-Net", 1, 0.01, 9.0), result("U-Net", 2, 0.01, 3.0),
            result("U-Net", 3, 0.01, 3.0), result("U-NeXt", 0, 0.5, 1.0), result("Half-U-Net", 0, math.nan, math.nan)]
    best = S.select_best(rows)
    assert best["U-Net"].trial == 2
    assert best["U-NeXt"].trial == 0
    assert "Half-U-Net" not in best


def test_select_best_four_families():
    rows = [result(a, t, 0.1 + t, 1.0) for a in ARCHS for t in range(3)]
    best = S.select_best(rows)
    assert sorted(best) == sorted(ARCHS) and all(r.trial == 0 for r in best.values())


def test_model_config_from_row_round_trip():
    cfg = ModelConfig.tiny("unet", "unet", width=8)
    r = S.TrialResult(4, "U-Net", 0.25, 1.5, 10, 20, 99, cfg)
    back = S.TrialResult.from_row(dict(zip(S.RESULT_FIELDS, r.row())))
    assert back == r
    failed = S.TrialResult(5, "U-Net", math.nan, math.nan, 0, 0, 1, None, error="ConfigError: bad")
    back = S.TrialResult.from_row(dict(zip(S.RESULT_FIELDS, failed.row())))
    assert back.config is None and back.error == "ConfigError: bad" and not back.ok
