"""Trace model, CSV round-trip, resampling, split, and fold tests."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thermid.errors import (
    KTooLarge,
    MissingColumn,
    NonMonotoneTime,
    OutOfRangeValue,
    TooShort,
    UpsampleUnsupported,
)
from thermid.trace import (
    CSV_HEADER,
    DataSplit,
    Trace,
    concat,
    load_csv,
    make_folds,
    resample,
    save_csv,
    split,
    train_chunks,
)

from conftest import make_trace


def write_csv(path, rows, header=",".join(CSV_HEADER)):
    lines = [header] + [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def well_formed_rows(n, rate=32.0):
    rows = []
    for k in range(n):
        rows.append([k / rate, 2000.0, 1500.0] + [0.5] * 8 + [40.0 + k])
    return rows


class TestLoadCsv:
    def test_three_row_file_at_32hz(self, tmp_path):
        p = tmp_path / "t.csv"
        write_csv(p, well_formed_rows(3))
        tr = load_csv(p)
        assert tr.rate_hz == pytest.approx(32.0)
        assert len(tr) == 3
        assert tr.temp[2] == pytest.approx(42.0)

    def test_out_of_range_u3(self, tmp_path):
        rows = well_formed_rows(3)
        rows[1][5] = 1.2  # u3 column
        p = tmp_path / "t.csv"
        write_csv(p, rows)
        with pytest.raises(OutOfRangeValue, match="u3"):
            load_csv(p)

    def test_missing_column(self, tmp_path):
        p = tmp_path / "t.csv"
        header = ",".join(c for c in CSV_HEADER if c != "u5")
        p.write_text(header + "\n")
        with pytest.raises(MissingColumn, match="u5"):
            load_csv(p)

    def test_non_monotone_time(self, tmp_path):
        rows = well_formed_rows(4)
        rows[2][0] = rows[1][0]
        p = tmp_path / "t.csv"
        write_csv(p, rows)
        with pytest.raises(NonMonotoneTime):
            load_csv(p)

    def test_round_trip_traces_equal(self, tmp_path):
        tr = make_trace(64, rate_hz=4.0, seed=3)
        p = tmp_path / "rt.csv"
        save_csv(tr, p)
        back = load_csv(p)
        # Oracle: field-wise comparison after the round trip.
        np.testing.assert_array_equal(back.t, tr.t)
        np.testing.assert_array_equal(back.f_big, tr.f_big)
        np.testing.assert_array_equal(back.f_little, tr.f_little)
        np.testing.assert_array_equal(back.util, tr.util)
        np.testing.assert_array_equal(back.temp, tr.temp)
        assert back.rate_hz == pytest.approx(tr.rate_hz)


class TestTraceInvariants:
    def test_rejects_f_big_out_of_range(self):
        tr = make_trace(8)
        f = tr.f_big.copy()
        f[3] = 2100.0
        with pytest.raises(OutOfRangeValue, match="sample 3"):
            Trace(t=tr.t, f_big=f, f_little=tr.f_little, util=tr.util,
                  temp=tr.temp, rate_hz=tr.rate_hz)

    def test_rejects_nonuniform_spacing(self):
        tr = make_trace(8)
        t = tr.t.copy()
        t[5] += 0.01
        with pytest.raises(NonMonotoneTime):
            Trace(t=t, f_big=tr.f_big, f_little=tr.f_little, util=tr.util,
                  temp=tr.temp, rate_hz=tr.rate_hz)

    def test_base_matrix_layout(self):
        tr = make_trace(5, seed=9)
        m = tr.base_matrix()
        assert m.shape == (5, 10)
        np.testing.assert_array_equal(m[:, 0], tr.f_big)
        np.testing.assert_array_equal(m[:, 1], tr.f_little)
        np.testing.assert_array_equal(m[:, 2:], tr.util)


class TestResample:
    def test_constant_trace_32_to_1(self):
        n = 96
        tr = Trace(
            t=np.arange(n) / 32.0,
            f_big=np.full(n, 1800.0),
            f_little=np.full(n, 1500.0),
            util=np.full((n, 8), 0.25),
            temp=np.full(n, 55.0),
            rate_hz=32.0,
        )
        out = resample(tr, 1.0)
        assert len(out) == 3
        assert out.rate_hz == 1.0
        np.testing.assert_allclose(out.temp, 55.0)
        np.testing.assert_allclose(out.f_big, 1800.0)

    def test_identity_at_same_rate(self):
        tr = make_trace(10, rate_hz=32.0)
        out = resample(tr, 32.0)
        np.testing.assert_array_equal(out.temp, tr.temp)
        assert len(out) == len(tr)

    def test_hand_computed_window_mean(self):
        # 4 Hz temps [1,2,3,4] -> 1 Hz [2.5]; frozen by hand.
        tr = Trace(
            t=np.arange(4) / 4.0,
            f_big=np.full(4, 1000.0),
            f_little=np.full(4, 1000.0),
            util=np.zeros((4, 8)),
            temp=np.array([1.0, 2.0, 3.0, 4.0]),
            rate_hz=4.0,
        )
        out = resample(tr, 1.0)
        assert len(out) == 1
        assert out.temp[0] == pytest.approx(2.5)

    def test_upsample_rejected(self):
        tr = make_trace(10, rate_hz=1.0)
        with pytest.raises(UpsampleUnsupported):
            resample(tr, 2.0)

    def test_mean_preserved_with_equal_windows(self):
        tr = make_trace(320, rate_hz=32.0, seed=11)
        out = resample(tr, 2.0)
        assert len(out) == 20
        assert abs(np.mean(out.temp) - np.mean(tr.temp)) < 1e-9

    @given(
        n_windows=st.integers(min_value=1, max_value=12),
        ratio=st.integers(min_value=1, max_value=8),
        seed=st.integers(min_value=0, max_value=2**16),
    )
    @settings(max_examples=40, deadline=None)
    def test_mean_preservation_property(self, n_windows, ratio, seed):
        rate = float(ratio)
        tr = make_trace(n_windows * ratio, rate_hz=rate, seed=seed)
        out = resample(tr, 1.0)
        assert len(out) == n_windows
        assert abs(np.mean(out.temp) - np.mean(tr.temp)) < 1e-9
        assert abs(np.mean(out.util) - np.mean(tr.util)) < 1e-9


class TestSplit:
    def test_1000_samples(self):
        s = split(make_trace(1000))
        assert (len(s.dev), len(s.gap), len(s.test)) == (790, 10, 200)

    def test_100_samples(self):
        s = split(make_trace(100))
        assert (len(s.dev), len(s.gap), len(s.test)) == (79, 1, 20)

    def test_999_samples_recomputed(self):
        n = 999
        s = split(make_trace(n))
        assert len(s.dev) + len(s.gap) + len(s.test) == n
        assert len(s.dev) == round(0.79 * n)
        # dev and test stay within one sample of their nominal fractions
        assert abs(len(s.dev) - 0.79 * n) <= 1.0
        assert abs(len(s.test) - 0.20 * n) <= 1.0

    def test_too_short(self):
        with pytest.raises(TooShort):
            split(make_trace(99))

    def test_contiguity_and_order(self):
        tr = make_trace(512, seed=5)
        s = split(tr)
        assert s.dev.t[-1] < s.gap.t[0] < s.test.t[0]
        assert isinstance(s, DataSplit)
        assert s.fractions == (0.79, 0.01, 0.20)

    @given(n=st.integers(min_value=100, max_value=3000))
    @settings(max_examples=60, deadline=None)
    def test_split_concat_identity(self, n):
        tr = make_trace(n, seed=n)
        s = split(tr)
        back = concat([s.dev, s.gap, s.test])
        np.testing.assert_array_equal(back.t, tr.t)
        np.testing.assert_array_equal(back.temp, tr.temp)
        np.testing.assert_array_equal(back.util, tr.util)
        assert abs(len(s.dev) - 0.79 * n) <= 1.0
        assert abs(len(s.test) - 0.20 * n) <= 1.0


class TestFolds:
    def test_even_division(self):
        plan = make_folds(100, 10)
        sizes = [f.val_stop - f.val_start for f in plan.folds]
        assert sizes == [10] * 10

    def test_103_over_10(self):
        plan = make_folds(103, 10)
        sizes = [f.val_stop - f.val_start for f in plan.folds]
        assert set(sizes) <= {10, 11}
        assert sum(sizes) == 103

    def test_train_val_disjoint(self):
        plan = make_folds(103, 10)
        for f in plan.folds:
            assert not set(f.train_indices()) & set(f.val_indices())

    def test_k_too_large(self):
        with pytest.raises(KTooLarge):
            make_folds(5, 6)
        with pytest.raises(ValueError):
            make_folds(10, 1)

    def test_train_chunks_are_contiguous(self):
        tr = make_trace(100)
        plan = make_folds(tr, 4)
        chunks = train_chunks(tr, plan.folds[1])
        assert len(chunks) == 2
        assert len(chunks[0]) + len(chunks[1]) == 75

    @given(
        n=st.integers(min_value=10, max_value=500),
        k=st.integers(min_value=2, max_value=12),
    )
    @settings(max_examples=60, deadline=None)
    def test_fold_coverage_property(self, n, k):
        if k > n:
            with pytest.raises(KTooLarge):
                make_folds(n, k)
            return
        plan = make_folds(n, k)
        blocks = [f.val_indices() for f in plan.folds]
        allv = np.concatenate(blocks)
        # pairwise disjoint and covering dev exactly
        assert len(allv) == n
        np.testing.assert_array_equal(np.sort(allv), np.arange(n))
        for f in plan.folds:
            assert abs((f.val_stop - f.val_start) - n / k) <= 1.0
