import json

import numpy as np
import pytest

from hdm.features import FeatureMatrix, LabelEvent, WindowSpec, window_tfd
from hdm.harness import (
    SCENARIO_B,
    EvalConfig,
    InsufficientDataError,
    ParseError,
    Recording,
    ScenarioConfig,
    confusion_table,
    dumps_report,
    fold_table,
    load_markers,
    load_recording,
    load_signals,
    performance_table,
    run_scenario,
    save_recording,
    swtt_evaluate,
)
from hdm.ml import LABELS, ModelSpec, encode, standard_models
from hdm.signal_model import SampledSignal
from hdm.synthetic import AtomRateBenchmark

LDA = ModelSpec("lda")


def block_recording(n_blocks=24, block_s=60.0, seed=0, informative=True, channels=("AFpz",), cyclic=False):
    """Blocks of random (or cycling) class; the signal level encodes the class when ``informative``."""
    rng = np.random.default_rng(seed)
    codes = np.arange(n_blocks) % 4 if cyclic else rng.integers(0, 4, n_blocks)
    markers = [LabelEvent(i * block_s, block_s, LABELS[c]) for i, c in enumerate(codes)]
    n = int(n_blocks * block_s * 10)
    level = np.repeat(codes.astype(float), int(block_s * 10)) if informative else np.zeros(n)
    signals = {ch: SampledSignal(0.1, 0.0, level + 0.1 * rng.normal(size=n)) for ch in channels}
    return Recording(signals, markers, f"s{seed}")


def test_roundtrip_bit_identical(tmp_path):
    rec = block_recording(4, channels=("AF7", "AFpz"))
    save_recording(rec, tmp_path / "s.csv", tmp_path / "m.csv", comment="seed 0")
    back = load_recording(tmp_path / "s.csv", tmp_path / "m.csv")
    for ch in rec.channels:
        assert back.channels[ch].samples.tobytes() == rec.channels[ch].samples.tobytes()
        assert back.channels[ch].T_h == 0.1
    assert back.markers == rec.markers


def test_overlapping_markers_rejected(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("onset_s,duration_s,label\n0,30,rest\n20,30,2-back\n")
    with pytest.raises(ParseError, match="overlap"):
        load_markers(p)


def test_unknown_label_has_line_number(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("# comment\nonset_s,duration_s,label\n0,30,rest\n30,30,1-back\n")
    with pytest.raises(ParseError) as err:
        load_markers(p)
    assert err.value.line == 4


def test_ragged_and_nonuniform_signals(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("time,AFpz\n0.0,1\n0.1,2,3\n")
    with pytest.raises(ParseError) as err:
        load_signals(p)
    assert err.value.line == 3
    p.write_text("time,AFpz\n0.0,1\n0.1,2\n0.25,3\n0.3,4\n")
    with pytest.raises(ParseError, match="non-uniform"):
        load_signals(p)
    p.write_text("time,AFpz\n0.0,1\n0.1,x\n")
    with pytest.raises(ParseError):
        load_signals(p)


def test_missing_channel_named():
    rec = block_recording(4)
    with pytest.raises(KeyError, match="AF7"):
        rec.select(("AF7", "AFpz"))


def test_class_determined_feature_is_learned():
    # cycling blocks so every class is in the training set before testing starts
    rec = block_recording(40, block_s=30.0, cyclic=True)
    rng = np.random.default_rng(5)
    fm = window_tfd(rec.channels, WindowSpec(), markers=rec.markers)
    codes = encode(fm.labels)
    # one column equals the class code plus small noise, the rest are noise
    cols = np.column_stack([codes + 0.05 * rng.normal(size=codes.size), rng.normal(size=(codes.size, 3))])
    fm = FeatureMatrix(cols, fm.labels, ["code", "n1", "n2", "n3"], fm.starts, fm.spec)
    res = swtt_evaluate(rec, ScenarioConfig(scheme="tfd", model=ModelSpec("cart", depth=6)), fm)
    assert res.confusion.counts.trace() / res.n_test >= 0.95


@pytest.mark.slow
def test_shuffled_labels_at_chance():
    rec = block_recording(200, block_s=10.0, seed=3, informative=False)
    # a balanced label set in shuffled order
    codes = np.random.default_rng(7).permutation(np.repeat(np.arange(4), 50))
    rec.markers = [LabelEvent(ev.onset, ev.duration, LABELS[c]) for ev, c in zip(rec.markers, codes)]
    res = swtt_evaluate(rec, ScenarioConfig(scheme="tfd", model=LDA))
    assert res.n_test >= 400
    assert abs(res.confusion.counts.trace() / res.n_test - 0.25) <= 0.05


def test_confusion_total_equals_tests():
    res = swtt_evaluate(block_recording(20), ScenarioConfig(scheme="tfd", model=LDA))
    assert res.confusion.total == res.n_test == len(res.predictions)


def test_doubling_step_halves_tests():
    rec = block_recording(40)
    a = swtt_evaluate(rec, ScenarioConfig(scheme="tfd", model=LDA, min_train_rows=30))
    w = WindowSpec(step=4.0)
    b = swtt_evaluate(rec, ScenarioConfig(scheme="tfd", model=LDA, window=w, min_train_rows=15))
    assert abs(b.n_test - a.n_test / 2) <= 1


def test_refit_every_and_trailing_run():
    rec = block_recording(30)
    a = swtt_evaluate(rec, ScenarioConfig(scheme="tfd", model=LDA, refit_every=10))
    b = swtt_evaluate(rec, ScenarioConfig(scheme="tfd", model=LDA, trailing=40))
    assert a.n_test > 0 and b.n_test > 0


def test_too_short_record():
    with pytest.raises(InsufficientDataError, match="at least"):
        swtt_evaluate(block_recording(2), ScenarioConfig(scheme="raw", model=LDA))


def test_scenario_config_validation():
    with pytest.raises(ValueError):
        ScenarioConfig(scheme="wavelet")
    with pytest.raises(ValueError):
        ScenarioConfig(refit_every=0)


@pytest.fixture(scope="module")
def small_report():
    bench = AtomRateBenchmark(n_rounds=2, block_s=60.0)
    signals, markers, _ = bench.generate(1)
    rec = Recording(signals, markers, "01")
    cfg = EvalConfig(channels=SCENARIO_B, models=standard_models(0), refit_every=20)
    return cfg, rec, run_scenario([rec], cfg)


@pytest.mark.slow
def test_report_matches_table_layout(small_report):
    _, _, report = small_report
    agg = report["aggregate"]
    assert set(agg) == {"raw", "tfd", "hdm"}
    for scheme in agg.values():
        assert len(scheme) == 7
        for block in scheme.values():
            assert set(block["metrics"]["recall"]) == set(LABELS)
            assert np.array(block["confusion"]).shape == (4, 4)
    table = performance_table(report)
    # 7 models x (4 activities + accuracy + rule) plus header and rule
    assert len(table.strip().splitlines()) == 2 + 7 * 6
    assert confusion_table(report).count("\n") == 1 + 3 * 7 * 4
    assert fold_table(report).startswith("subject,scheme,classifier,fold,accuracy")


@pytest.mark.slow
def test_report_deterministic(small_report):
    cfg, rec, report = small_report
    again = run_scenario([rec], cfg)
    assert dumps_report(again) == dumps_report(report)
    assert json.loads(dumps_report(report))["config"]["refit_every"] == 20
