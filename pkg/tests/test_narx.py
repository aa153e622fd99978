"""Open-loop NARX assembly, LM training, and closed-loop prediction."""

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thermid.errors import DimensionMismatch, SingularNormalEquations, TooShort
from thermid.narx import (
    LmConfig,
    NarxModel,
    _damped_step,
    _forward_hidden,
    _pack,
    _unpack,
    assemble_open_loop,
    forward,
    jacobian,
    predict_closed_loop,
    train_lm,
)
from thermid.trace import Trace

from conftest import make_trace


def small_model(seed: int, hidden: int = 3, n_x: int = 1, n_y: int = 1, m: int = 2) -> NarxModel:
    rng = np.random.default_rng(seed)
    d = m * (n_x + 1) + n_y
    return NarxModel(
        w1=rng.normal(0, 0.8, (hidden, d)),
        b1=rng.normal(0, 0.5, hidden),
        w2=rng.normal(0, 0.8, (1, hidden)),
        b2=float(rng.normal(0, 0.3)),
        n_x=n_x,
        n_y=n_y,
        in_mean=rng.normal(0, 1, d),
        in_std=rng.uniform(0.5, 2.0, d),
        out_mean=40.0,
        out_std=6.0,
    )


def quiet_train(*args, **kwargs) -> NarxModel:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return train_lm(*args, **kwargs)


def train_sse(model: NarxModel, x: np.ndarray, y: np.ndarray, val_frac: float = 0.2) -> float:
    n_train = len(x) - int(round(val_frac * len(x)))
    z = (x[:n_train] - model.in_mean) / model.in_std
    yn = (y[:n_train] - model.out_mean) / model.out_std
    pred, _ = _forward_hidden(model.w1, model.b1, model.w2, model.b2, z)
    return float(np.sum((pred - yn) ** 2))


def val_mse_degc(model: NarxModel, x: np.ndarray, y: np.ndarray, val_frac: float = 0.2) -> float:
    n_val = int(round(val_frac * len(x)))
    z = (x[-n_val:] - model.in_mean) / model.in_std
    pred, _ = _forward_hidden(model.w1, model.b1, model.w2, model.b2, z)
    return float(np.mean((model.out_mean + model.out_std * pred - y[-n_val:]) ** 2))


class TestLmConfig:
    def test_rejects_bad_damping(self):
        with pytest.raises(ValueError):
            LmConfig(lam0=0.0)
        with pytest.raises(ValueError):
            LmConfig(lam_up=0.9)
        with pytest.raises(ValueError):
            LmConfig(lam_down=1.5)
        with pytest.raises(ValueError):
            LmConfig(patience=0)


class TestNarxModel:
    def test_width_must_factor(self):
        rng = np.random.default_rng(0)
        with pytest.raises(DimensionMismatch):
            NarxModel(
                w1=rng.normal(size=(2, 6)),
                b1=np.zeros(2),
                w2=np.zeros((1, 2)),
                b2=0.0,
                n_x=1,
                n_y=1,
                in_mean=np.zeros(6),
                in_std=np.ones(6),
                out_mean=0.0,
                out_std=1.0,
            )

    def test_rejects_nonpositive_std(self):
        m = small_model(1)
        with pytest.raises(ValueError):
            NarxModel(
                w1=m.w1,
                b1=m.b1,
                w2=m.w2,
                b2=m.b2,
                n_x=m.n_x,
                n_y=m.n_y,
                in_mean=m.in_mean,
                in_std=np.zeros_like(m.in_std),
                out_mean=0.0,
                out_std=1.0,
            )

    def test_param_count(self):
        m = small_model(2, hidden=3, n_x=2, n_y=2, m=10)
        # 3*(10*3+2) + 3 + 3 + 1
        assert m.n_params == 103
        assert m.n_inputs == 10


class TestAssembleOpenLoop:
    def test_minimal_delays_give_eleven_columns(self):
        tr = make_trace(40, seed=0)
        x, y = assemble_open_loop(tr, 0, 1)
        assert x.shape == (39, 11)
        assert y.shape == (39,)

    def test_column_count_formula(self):
        tr = make_trace(40, seed=0)
        x, _ = assemble_open_loop(tr, 2, 2)
        assert x.shape[1] == 10 * 3 + 2

    def test_first_target_and_row_layout(self):
        tr = make_trace(30, seed=3)
        n_x, n_y = 2, 2
        x, y = assemble_open_loop(tr, n_x, n_y)
        t0 = max(n_x, n_y)
        assert y[0] == tr.temp[t0]
        base = tr.base_matrix()
        t = t0 + 4
        row = x[4]
        np.testing.assert_array_equal(row[0:10], base[t])
        np.testing.assert_array_equal(row[10:20], base[t - 1])
        np.testing.assert_array_equal(row[20:30], base[t - 2])
        assert row[30] == tr.temp[t - 1]
        assert row[31] == tr.temp[t - 2]

    def test_too_short(self):
        tr = make_trace(3, seed=0)
        with pytest.raises(TooShort):
            assemble_open_loop(tr, 3, 1)


class TestForward:
    def test_zero_output_weights_give_constant(self):
        m = small_model(4)
        const = NarxModel(
            w1=m.w1,
            b1=m.b1,
            w2=np.zeros_like(m.w2),
            b2=0.25,
            n_x=m.n_x,
            n_y=m.n_y,
            in_mean=m.in_mean,
            in_std=m.in_std,
            out_mean=40.0,
            out_std=6.0,
        )
        rng = np.random.default_rng(0)
        for _ in range(5):
            row = rng.normal(0, 3, m.w1.shape[1])
            assert forward(const, row) == pytest.approx(40.0 + 6.0 * 0.25, abs=1e-12)

    @given(st.lists(st.floats(-50, 50), min_size=5, max_size=5))
    @settings(max_examples=25, deadline=None)
    def test_zero_hidden_weights_constant_property(self, vals):
        m = small_model(5, hidden=1)
        const = NarxModel(
            w1=np.zeros_like(m.w1),
            b1=np.array([0.7]),
            w2=np.array([[2.0]]),
            b2=-0.1,
            n_x=m.n_x,
            n_y=m.n_y,
            in_mean=m.in_mean,
            in_std=m.in_std,
            out_mean=30.0,
            out_std=5.0,
        )
        sig = 1.0 / (1.0 + np.exp(-0.7))
        expected = 30.0 + 5.0 * (2.0 * sig - 0.1)
        assert forward(const, np.array(vals)) == pytest.approx(expected, abs=1e-12)

    def test_matches_direct_formula(self):
        m = small_model(6)
        rng = np.random.default_rng(1)
        for _ in range(10):
            row = rng.normal(0, 2, m.w1.shape[1])
            z = (row - m.in_mean) / m.in_std
            hid = 1.0 / (1.0 + np.exp(-(m.w1 @ z + m.b1)))
            expected = m.out_mean + m.out_std * (float(m.w2[0] @ hid) + m.b2)
            assert forward(m, row) == pytest.approx(expected, abs=1e-12)

    def test_row_length_checked(self):
        m = small_model(7)
        with pytest.raises(DimensionMismatch):
            forward(m, np.zeros(m.w1.shape[1] + 1))


def fd_jacobian(model: NarxModel, rows: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of the normalized output w.r.t. every parameter."""
    theta0 = _pack(model.w1, model.b1, model.w2, model.b2)
    out = np.empty((len(rows), theta0.size))
    hid, d = model.hidden, model.w1.shape[1]
    for p in range(theta0.size):
        tp = theta0.copy()
        tp[p] += h
        tm = theta0.copy()
        tm[p] -= h
        mp = _unpack(tp, hid, d)
        mm = _unpack(tm, hid, d)
        z = (rows - model.in_mean) / model.in_std
        yp, _ = _forward_hidden(*mp, z)
        ym, _ = _forward_hidden(*mm, z)
        out[:, p] = (yp - ym) / (2 * h)
    return out


class TestJacobian:
    def test_shape(self):
        m = small_model(8, hidden=4)
        rows = np.zeros((6, m.w1.shape[1]))
        assert jacobian(m, rows).shape == (6, m.n_params)

    def test_zero_weight_closed_form(self):
        m = small_model(9, hidden=2)
        zeroed = NarxModel(
            w1=np.zeros_like(m.w1),
            b1=np.array([0.3, -1.2]),
            w2=np.zeros_like(m.w2),
            b2=0.0,
            n_x=m.n_x,
            n_y=m.n_y,
            in_mean=np.zeros(m.w1.shape[1]),
            in_std=np.ones(m.w1.shape[1]),
            out_mean=0.0,
            out_std=1.0,
        )
        rows = np.zeros((3, m.w1.shape[1]))
        jac = jacobian(zeroed, rows)
        sig = 1.0 / (1.0 + np.exp(-np.array([0.3, -1.2])))
        h, d = 2, m.w1.shape[1]
        np.testing.assert_allclose(jac[:, h * d + h : h * d + 2 * h], np.tile(sig, (3, 1)))
        # W1 and b1 columns vanish because W2 is zero
        np.testing.assert_array_equal(jac[:, : h * d + h], 0.0)

    def test_matches_finite_differences_100_configs(self):
        # entries below 1e-3 of the largest are floored: central differences
        # carry ~1e-10 absolute rounding noise there
        worst = 0.0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            hid = int(rng.integers(1, 6))
            n_x = int(rng.integers(0, 3))
            n_y = int(rng.integers(1, 3))
            m_in = int(rng.integers(1, 5))
            d = m_in * (n_x + 1) + n_y
            model = NarxModel(
                w1=rng.normal(0, 1.0, (hid, d)),
                b1=rng.normal(0, 1.0, hid),
                w2=rng.normal(0, 1.0, (1, hid)),
                b2=float(rng.normal()),
                n_x=n_x,
                n_y=n_y,
                in_mean=rng.normal(0, 1, d),
                in_std=rng.uniform(0.5, 2.0, d),
                out_mean=30.0,
                out_std=5.0,
            )
            rows = rng.normal(0, 2.0, (4, d))
            ja = jacobian(model, rows)
            jf = fd_jacobian(model, rows)
            scale = np.maximum(np.abs(jf), 1e-3 * np.max(np.abs(jf)))
            worst = max(worst, float(np.max(np.abs(ja - jf) / scale)))
        assert worst < 1e-4

    def test_empty_rows_rejected(self):
        m = small_model(10)
        with pytest.raises(ValueError):
            jacobian(m, np.zeros((0, m.w1.shape[1])))


def teacher_data(seed: int, n: int = 600):
    rng = np.random.default_rng(seed)
    hid, n_x, n_y, m_in = 3, 1, 1, 2
    d = m_in * (n_x + 1) + n_y
    teacher = NarxModel(
        w1=rng.normal(0, 0.8, (hid, d)),
        b1=rng.normal(0, 0.5, hid),
        w2=rng.normal(0, 0.8, (1, hid)),
        b2=float(rng.normal(0, 0.3)),
        n_x=n_x,
        n_y=n_y,
        in_mean=np.zeros(d),
        in_std=np.ones(d),
        out_mean=40.0,
        out_std=8.0,
    )
    x = rng.normal(0, 1.0, (n, d))
    y = np.array([forward(teacher, r) for r in x])
    return teacher, x, y


class TestTrainLm:
    def test_teacher_student_training_sse(self):
        teacher, x, y = teacher_data(100)
        best = np.inf
        for seed in range(3):
            student = quiet_train(
                x, y, 1, 1, hidden=3, config=LmConfig(max_iters=400, patience=40), seed=seed
            )
            best = min(best, train_sse(student, x, y))
        assert best < 1e-6

    def test_deterministic_under_seed(self):
        _, x, y = teacher_data(101)
        cfg = LmConfig(max_iters=25)
        m1 = quiet_train(x, y, 1, 1, hidden=2, config=cfg, seed=4)
        m2 = quiet_train(x, y, 1, 1, hidden=2, config=cfg, seed=4)
        assert np.array_equal(m1.w1, m2.w1) and m1.b2 == m2.b2

    def test_heavy_damping_step_is_scaled_gradient(self):
        rng = np.random.default_rng(0)
        jac = rng.normal(size=(20, 6))
        grad = rng.normal(size=6)
        lam = 1e12
        step = _damped_step(jac.T @ jac, grad, lam)
        np.testing.assert_allclose(step, -grad / lam, rtol=1e-3)
        assert np.linalg.norm(step) < 1e-11

    def test_early_stop_returns_best_validation_weights(self):
        # validation tail reflected about the output mean: every step toward
        # the teacher strictly worsens it, so the arg-min epoch is epoch 1
        _, x, y = teacher_data(102, n=250)
        n_val = int(round(0.2 * len(x)))
        y_bad = y.copy()
        y_bad[-n_val:] = 2 * 40.0 - y[-n_val:]
        m_one = quiet_train(
            x, y_bad, 1, 1, hidden=2, config=LmConfig(max_iters=1, patience=10**6), seed=6
        )
        m_patient = quiet_train(
            x, y_bad, 1, 1, hidden=2, config=LmConfig(max_iters=200, patience=1), seed=6
        )
        assert np.array_equal(m_one.w1, m_patient.w1)
        assert np.array_equal(m_one.w2, m_patient.w2)
        assert m_one.b2 == m_patient.b2

    def test_validation_mse_non_increasing_in_budget(self):
        rng = np.random.default_rng(8)
        x = rng.normal(0, 1, (60, 7))
        latent = 1.5 * np.tanh(x @ rng.normal(0, 1, 7)) + 0.5
        y = 30 + 4 * (latent + rng.normal(0, 0.35, 60))
        prev = np.inf
        for budget in (1, 2, 4, 8, 16, 32):
            m = quiet_train(
                x, y, 1, 1, hidden=4, config=LmConfig(max_iters=budget, patience=10**6), seed=2
            )
            cur = val_mse_degc(m, x, y)
            assert cur <= prev + 1e-12
            prev = cur

    def test_accepted_steps_reduce_training_sse(self):
        _, x, y = teacher_data(103, n=300)
        m1 = quiet_train(x, y, 1, 1, hidden=3, config=LmConfig(max_iters=1, patience=10**6), seed=1)
        m20 = quiet_train(x, y, 1, 1, hidden=3, config=LmConfig(max_iters=20, patience=10**6), seed=1)
        assert train_sse(m20, x, y) < train_sse(m1, x, y)

    def test_warns_on_few_rows(self):
        _, x, y = teacher_data(104, n=60)
        with pytest.warns(UserWarning):
            train_lm(x, y, 1, 1, hidden=3, config=LmConfig(max_iters=2), seed=0)

    def test_non_finite_target_exhausts_damping(self):
        _, x, y = teacher_data(105, n=100)
        y = y.copy()
        y[10] = np.nan
        with pytest.raises(SingularNormalEquations):
            quiet_train(x, y, 1, 1, hidden=2, config=LmConfig(max_iters=5), seed=0)

    def test_normalization_invariance(self):
        rng = np.random.default_rng(5)
        x = rng.normal(10.0, 3.0, (400, 7))
        y = 25 + 2 * np.tanh(x[:, 0] - 10) + 0.5 * x[:, 1] + rng.normal(0, 0.1, 400)
        cfg = LmConfig(max_iters=40, patience=10)
        m1 = quiet_train(x, y, 1, 1, hidden=2, config=cfg, seed=3)
        m2 = quiet_train(3.7 * x - 12.0, y, 1, 1, hidden=2, config=cfg, seed=3)
        np.testing.assert_allclose(m1.w1, m2.w1, atol=1e-9)
        np.testing.assert_allclose(m1.w2, m2.w2, atol=1e-9)
        assert m1.b2 == pytest.approx(m2.b2, abs=1e-9)


def trace_with_temp(tr: Trace, temp: np.ndarray) -> Trace:
    return Trace(
        t=tr.t, f_big=tr.f_big, f_little=tr.f_little, util=tr.util, temp=temp, rate_hz=tr.rate_hz
    )


class TestPredictClosedLoop:
    def constant_model(self, value: float, n_x: int = 1, n_y: int = 1) -> NarxModel:
        d = 10 * (n_x + 1) + n_y
        w2 = np.array([[0.8]])
        b1 = np.array([0.4])
        sig = 1.0 / (1.0 + np.exp(-0.4))
        return NarxModel(
            w1=np.zeros((1, d)),
            b1=b1,
            w2=w2,
            b2=float(-w2[0, 0] * sig),
            n_x=n_x,
            n_y=n_y,
            in_mean=np.zeros(d),
            in_std=np.ones(d),
            out_mean=value,
            out_std=3.0,
        )

    def test_constant_net_holds_seed_value(self):
        tr = make_trace(50, seed=0)
        model = self.constant_model(37.5)
        out = predict_closed_loop(model, tr, np.array([37.5]))
        assert np.isnan(out[0])
        np.testing.assert_array_equal(out[1:], 37.5)

    def test_first_step_equals_open_loop_forward(self):
        tr = make_trace(60, seed=2)
        model = small_model(11, hidden=2, n_x=1, n_y=2, m=10)
        t0 = 2
        y_init = tr.temp[t0 - 2 : t0]
        out = predict_closed_loop(model, tr, y_init)
        base = tr.base_matrix()
        row = np.concatenate([base[t0], base[t0 - 1], [y_init[1], y_init[0]]])
        assert out[t0] == pytest.approx(forward(model, row), abs=1e-12)

    def test_teacher_student_closed_loop(self):
        rng = np.random.default_rng(77)
        n_x, n_y, hid = 1, 1, 3
        d = 10 * (n_x + 1) + n_y
        tr = make_trace(1100, seed=9)
        base = tr.base_matrix()
        in_mean = np.concatenate([base.mean(0), base.mean(0), [45.0]])
        in_std = np.concatenate([base.std(0) + 1e-9, base.std(0) + 1e-9, [8.0]])
        teacher = NarxModel(
            w1=rng.normal(0, 0.5, (hid, d)),
            b1=rng.normal(0, 0.3, hid),
            w2=rng.normal(0, 0.5, (1, hid)),
            b2=0.0,
            n_x=n_x,
            n_y=n_y,
            in_mean=in_mean,
            in_std=in_std,
            out_mean=45.0,
            out_std=4.0,
        )
        y_init = np.array([45.0])
        ref = predict_closed_loop(teacher, tr, y_init)
        temp = ref.copy()
        temp[0] = y_init[0]
        tr2 = trace_with_temp(tr, temp)
        x, y = assemble_open_loop(tr2, n_x, n_y)
        best = None
        for seed in range(3):
            st_model = quiet_train(
                x, y, n_x, n_y, hidden=hid, config=LmConfig(max_iters=300, patience=30), seed=seed
            )
            sse = train_sse(st_model, x, y)
            if best is None or sse < best[0]:
                best = (sse, st_model)
        student = best[1]
        pred = predict_closed_loop(student, tr2, y_init)
        assert np.nanmax(np.abs(pred[1:] - ref[1:])) < 1e-4

    def test_measured_temps_ignored_after_seed(self):
        tr = make_trace(80, seed=5)
        model = small_model(12, hidden=2, n_x=1, n_y=1, m=10)
        y_init = np.array([44.0])
        out1 = predict_closed_loop(model, tr, y_init)
        corrupted = trace_with_temp(tr, tr.temp + 1000.0)
        out2 = predict_closed_loop(model, corrupted, y_init)
        np.testing.assert_array_equal(out1[1:], out2[1:])

    def test_seed_length_checked(self):
        tr = make_trace(30, seed=1)
        model = small_model(13, n_x=1, n_y=2, m=10)
        with pytest.raises(DimensionMismatch):
            predict_closed_loop(model, tr, np.array([40.0]))

    def test_too_short(self):
        tr = make_trace(2, seed=1)
        model = small_model(14, n_x=2, n_y=1, m=10)
        with pytest.raises(TooShort):
            predict_closed_loop(model, tr, np.array([40.0]))
