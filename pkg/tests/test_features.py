import math

import numpy as np
import pytest

from hdm.decomposer import DecomposerConfig, Decomposition, decompose
from hdm.features import (
    HDM_SUMMARY,
    FeatureMatrix,
    HdmFeatureSpec,
    LabelEvent,
    WindowSpec,
    align_labels,
    window_hdm,
    window_raw,
    window_tfd,
)
from hdm.filterbank import POWER_FLOOR
from hdm.kernel import BaseKernel
from hdm.ml import LABELS
from hdm.signal_model import SampledSignal, reconstruct
from hdm.synthetic import AtomRateBenchmark, atom_with_peak

SPEC = WindowSpec()
BASE = BaseKernel()


def zeros(n=1200):
    return SampledSignal(0.1, 0.0, np.zeros(n))


def empty_decomposition(theta=0.0):
    return Decomposition([], theta, 0.0, [0.0], 0, BASE, True, 0.0)


def test_raw_columns():
    fm = window_raw({"AFpz": zeros()}, SPEC)
    assert fm.rows.shape[1] == 600
    six = {f"c{k}": zeros() for k in range(6)}
    assert window_raw(six, SPEC).rows.shape[1] == 3600
    assert not fm.rows.any()


def test_raw_row_is_history():
    y = SampledSignal(0.1, 0.0, np.arange(1200.0))
    fm = window_raw({"x": y}, SPEC)
    np.testing.assert_array_equal(fm.rows[3], np.arange(60.0, 660.0))


def test_window_count_and_bounds():
    fm = window_raw({"x": zeros(1200)}, SPEC)
    # last history + horizon must end inside the record
    assert len(fm) == (1200 - 620) // 20 + 1
    assert fm.horizon_end[-1] <= 1200
    assert window_raw({"x": zeros(500)}, SPEC).rows.shape[0] == 0


def test_tfd_columns_and_floor():
    six = {f"c{k}": zeros() for k in range(6)}
    fm = window_tfd(six, SPEC)
    assert fm.rows.shape[1] == 30
    np.testing.assert_allclose(fm.rows, math.log(POWER_FLOOR))


def test_hdm_empty_decomposition():
    fm = window_hdm({"x": empty_decomposition(0.3)}, {"x": zeros()}, SPEC)
    assert fm.rows.shape[1] == 3 * 8 + 7
    summary = dict(zip(HDM_SUMMARY, fm.rows[0, 24:]))
    assert summary["theta_eps"] == 0.3
    nonzero = {k for k, v in summary.items() if v != 0}
    assert nonzero <= {"theta_eps", "residual_rms"}
    assert not fm.rows[:, :24].any()


def test_hdm_single_atom_fills_one_slot():
    atom = atom_with_peak(1.3, 6.0, 40.0, BASE)
    y = reconstruct([atom], BASE, zeros())
    dec = Decomposition([atom], 0.0, 0.0, [0.0], 1, BASE, True, 0.0)
    fm = window_hdm({"x": dec}, {"x": y}, SPEC)
    row = fm.rows[0]  # history [0, 60) s holds the peak
    assert np.count_nonzero(row[:24]) == 3
    np.testing.assert_allclose(row[:3], [1.3, 6.0, atom.tau])
    assert row[24] == 1
    # history [42, 102) s misses it
    assert fm.rows[21, 24] == 0


def test_hdm_slots_ordered_by_amplitude():
    atoms = [atom_with_peak(a, 6.0, p, BASE) for a, p in ((0.5, 10.0), (-2.0, 25.0), (1.0, 40.0))]
    dec = Decomposition(atoms, 0.0, 0.0, [0.0], 3, BASE, True, 0.0)
    fm = window_hdm({"x": dec}, {"x": reconstruct(atoms, BASE, zeros())}, SPEC)
    assert list(fm.rows[0, [0, 3, 6]]) == [-2.0, 1.0, 0.5]
    summary = dict(zip(HDM_SUMMARY, fm.rows[0, 24:]))
    assert summary["sum_pos_a"] == 1.5 and summary["sum_neg_a"] == -2.0 and summary["max_abs_a"] == 2.0


def test_hdm_width_per_channel():
    decs = {f"c{k}": empty_decomposition() for k in range(6)}
    fm = window_hdm(decs, {k: zeros() for k in decs}, SPEC, HdmFeatureSpec(K_max=4))
    assert fm.rows.shape[1] == 6 * (3 * 4 + 7)


def test_row_counts_agree_across_schemes():
    y = {"x": zeros(2000)}
    n = {len(window_raw(y, SPEC)), len(window_tfd(y, SPEC)), len(window_hdm({"x": empty_decomposition()}, y, SPEC))}
    assert len(n) == 1


def test_causality_of_raw_and_tfd():
    rng = np.random.default_rng(0)
    x = rng.normal(size=1500)
    y = {"x": SampledSignal(0.1, 0.0, x)}
    raw, tfd = window_raw(y, SPEC), window_tfd(y, SPEC)
    j = 10
    cut = int(raw.horizon_start[j])
    x2 = x.copy()
    x2[cut:] = 99.0
    y2 = {"x": SampledSignal(0.1, 0.0, x2)}
    assert np.array_equal(raw.rows[j], window_raw(y2, SPEC).rows[j])
    assert np.array_equal(tfd.rows[j], window_tfd(y2, SPEC).rows[j])


def test_causal_hdm_drops_atoms_fitted_on_the_future():
    atom = atom_with_peak(1.0, 6.0, 55.0, BASE)
    dec = Decomposition([atom], 0.0, 0.0, [0.0], 1, BASE, True, 0.0, fit_windows=[(40.0, 70.0)])
    y = {"x": reconstruct([atom], BASE, zeros())}
    loose = window_hdm({"x": dec}, y, SPEC)
    strict = window_hdm({"x": dec}, y, SPEC, HdmFeatureSpec(causal=True))
    assert loose.rows[0, 24] == 1 and strict.rows[0, 24] == 0


def test_determinism():
    rng = np.random.default_rng(1)
    y = {"a": SampledSignal(0.1, 0.0, rng.normal(size=1000)), "b": SampledSignal(0.1, 0.0, rng.normal(size=1000))}
    assert window_tfd(y, SPEC).to_csv() == window_tfd(y, SPEC).to_csv()
    assert window_tfd(y, SPEC).columns[0].startswith("a:")


def test_misaligned_channels():
    with pytest.raises(ValueError):
        window_raw({"a": zeros(1000), "b": zeros(900)}, SPEC)
    with pytest.raises(ValueError):
        window_raw({"a": SampledSignal(0.2, 0.0, np.zeros(1000))}, SPEC)


def test_align_labels_rules():
    markers = [LabelEvent(0.0, 62.0, "2-back"), LabelEvent(62.8, 30.0, "3-back")]
    labels = align_labels(markers, SPEC, 1200)
    assert labels[0] == "2-back"  # horizon [60, 62) inside the block
    # horizon [62, 64): 0.8 s uncovered (rest), 1.2 s of 3-back
    assert labels[1] == "3-back"
    assert labels[-1] == "rest"  # horizon past every event
    assert set(labels) <= set(LABELS)


def test_align_labels_tie_goes_to_first_label():
    markers = [LabelEvent(61.0, 30.0, "0-back")]
    assert align_labels(markers, SPEC, 700)[0] == "rest"


def test_label_event_validation():
    with pytest.raises(ValueError):
        LabelEvent(0.0, 1.0, "1-back")
    with pytest.raises(ValueError):
        LabelEvent(0.0, -1.0, "rest")


def test_feature_csv_roundtrip():
    rng = np.random.default_rng(2)
    y = {"x": SampledSignal(0.1, 0.0, rng.normal(size=1000))}
    fm = window_tfd(y, SPEC, markers=[LabelEvent(0.0, 80.0, "0-back")])
    back = FeatureMatrix.from_csv(fm.to_csv(comment="run 1\nseed 3"))
    assert back.labels == fm.labels and back.columns == fm.columns
    np.testing.assert_array_equal(back.rows, fm.rows)
    np.testing.assert_array_equal(back.starts, fm.starts)


def rate_gap(seed, truth_atoms=False):
    bench = AtomRateBenchmark(rates_per_min={"rest": 1.0, "0-back": 4.0, "2-back": 4.0, "3-back": 4.0},
                              block_s=180.0, n_rounds=1)
    signals, markers, truth = bench.generate(seed)
    if truth_atoms:
        dec = Decomposition(truth["AFpz"], 0.0, 0.0, [1.0], 0, BASE, True, 0.0)
    else:
        dec = decompose(signals["AFpz"], DecomposerConfig(L=400))
    fm = window_hdm({"AFpz": dec}, signals, SPEC, markers=markers)
    lab = np.array(fm.labels)
    # windows whose history and horizon lie in one block
    inside = np.array([
        any(ev.onset <= s / 10 and (s + 620) / 10 <= ev.onset + ev.duration for ev in markers) for s in fm.starts
    ])
    count = fm.rows[:, 24]
    return count[inside & (lab != "rest")].mean() - count[inside & (lab == "rest")].mean()


@pytest.mark.slow
def test_atom_count_gap_tracks_ground_truth():
    for seed in range(3):
        assert abs(rate_gap(seed) - rate_gap(seed, truth_atoms=True)) <= 0.2


@pytest.mark.slow
@pytest.mark.xfail(strict=False, reason="4 vs 1 responses per minute gives an expected gap of exactly 3 counts "
                                        "per 60 s window, so the pooled mean falls on either side of 3")
def test_atom_count_gap_at_least_three():
    assert np.mean([rate_gap(seed) for seed in range(6)]) >= 3
