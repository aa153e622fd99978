"""Thermal RC plant tests: power laws, integration, throttle, schedules."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thermid.errors import OutOfRangeValue, UnstableParams
from thermid.plant import (
    BIG_FREQ_LEVELS_MHZ,
    LITTLE_FREQ_LEVELS_MHZ,
    N_NODES,
    UTIL_LEVELS,
    BoardConfig,
    PlantParams,
    PowerModel,
    Throttle,
    WorkloadSchedule,
    count_configurations,
    default_params,
    linear_response,
    power,
    random_schedule,
    simulate,
    steady_state,
)


def oracle_steady(params: PlantParams, p: np.ndarray) -> np.ndarray:
    """Independent steady-state solve: build the Laplacian from scratch."""
    g = np.asarray(params.g)
    lap = np.diag(g.sum(axis=1)) - g
    lhs = lap + np.diag(np.asarray(params.g_amb))
    rhs = np.asarray(p) + np.asarray(params.g_amb) * params.t_amb_c
    return np.linalg.solve(lhs, rhs)


def const_schedule(duration: float, cfg: BoardConfig) -> WorkloadSchedule:
    segs = []
    left = duration
    while left > 0:
        d = min(60.0, left)
        segs.append((d, cfg))
        left -= d
    return WorkloadSchedule(segments=tuple(segs))


class TestPower:
    def test_zero_util_minimum_freq_static_plus_idle_only(self):
        pm = PowerModel(
            k_dyn_big=1e-6, k_dyn_little=1e-6, k_stat_big=2e-6,
            k_stat_little=3e-6, p_idle=0.9,
        )
        cfg = BoardConfig(f_big=200.0, f_little=200.0, u=(0.0,) * 8)
        p = power(cfg, pm)
        idle = 0.9 / 9
        stat_l = 3e-6 * 200.0**1.5
        stat_b = 2e-6 * 200.0**1.5
        np.testing.assert_allclose(p[:4], stat_l + idle)
        np.testing.assert_allclose(p[4:8], stat_b + idle)
        assert p[8] == pytest.approx(idle)

    def test_doubling_f_quadruples_dynamic_term(self):
        pm = PowerModel(
            k_dyn_big=1e-7, k_dyn_little=0.0, k_stat_big=0.0,
            k_stat_little=0.0, p_idle=0.0,
        )
        lo = power(BoardConfig(f_big=1000.0, f_little=200.0, u=(1.0,) * 8), pm)
        hi = power(BoardConfig(f_big=2000.0, f_little=200.0, u=(1.0,) * 8), pm)
        np.testing.assert_allclose(hi[4:8], 4.0 * lo[4:8])

    def test_hand_evaluated_formula(self):
        # f=1000 MHz, u=0.5, k_dyn=1e-7, k_stat=1e-5, p_idle=0
        # -> 1e-7*0.5*1000^2 + 1e-5*1000^1.5 = 0.05 + 0.31622776601683794 W
        pm = PowerModel(
            k_dyn_big=1e-7, k_dyn_little=1e-7, k_stat_big=1e-5,
            k_stat_little=1e-5, p_idle=0.0,
        )
        # 1000 MHz is on the big grid (200,400,...,2000)
        cfg = BoardConfig(f_big=1000.0, f_little=200.0, u=(0.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.5))
        p = power(cfg, pm)
        expected = 0.05 + 1e-5 * 1000.0**1.5
        assert expected == pytest.approx(0.3662277660168379)
        np.testing.assert_allclose(p[4:8], expected)


class TestConfigGrids:
    def test_grids_have_documented_sizes(self):
        assert len(BIG_FREQ_LEVELS_MHZ) == 10
        assert len(LITTLE_FREQ_LEVELS_MHZ) == 6
        assert len(UTIL_LEVELS) == 5
        assert BIG_FREQ_LEVELS_MHZ[0] == 200.0 and BIG_FREQ_LEVELS_MHZ[-1] == 2000.0
        assert LITTLE_FREQ_LEVELS_MHZ[0] == 200.0 and LITTLE_FREQ_LEVELS_MHZ[-1] == 1500.0

    def test_off_grid_rejected(self):
        with pytest.raises(OutOfRangeValue):
            BoardConfig(f_big=1234.0, f_little=200.0, u=(0.0,) * 8)
        with pytest.raises(OutOfRangeValue):
            BoardConfig(f_big=2000.0, f_little=200.0, u=(0.3,) * 8)


class TestCountConfigurations:
    def test_paper_grid(self):
        assert count_configurations(5, 8, 10, 6) == 23_437_500

    def test_degenerate(self):
        assert count_configurations(1, 8, 1, 1) == 1

    def test_nested_loop_oracle(self):
        # independent enumeration for a small grid
        count = 0
        for _ in range(4):  # nf_big
            for _ in range(5):  # nf_little
                n_u = 0
                for a in range(2):
                    for b in range(2):
                        for c in range(2):
                            n_u += 1
                count += n_u
        assert count == 160
        assert count_configurations(2, 3, 4, 5) == 160

    def test_big_integer_safe(self):
        assert count_configurations(5, 64, 10, 6) == 5**64 * 60


class TestSimulate:
    def test_zero_power_stays_at_ambient(self):
        params = default_params()
        pm = PowerModel(0.0, 0.0, 0.0, 0.0, 0.0)
        params = PlantParams(
            c_node=params.c_node, g=params.g, g_amb=params.g_amb,
            t_amb_c=params.t_amb_c, power_model=pm, w=params.w,
        )
        cfg = BoardConfig(f_big=200.0, f_little=200.0, u=(0.0,) * 8)
        tr = simulate(const_schedule(30.0, cfg), params, rate_hz=4.0, noise_std=0.0)
        np.testing.assert_allclose(tr.temp, 21.0, atol=1e-9)

    def test_steady_state_matches_linear_solve_oracle(self):
        params = default_params()
        cfg = BoardConfig(f_big=1800.0, f_little=1240.0, u=(0.75,) * 8)
        tr = simulate(const_schedule(600.0, cfg), params, rate_hz=2.0, noise_std=0.0)
        t_ss = oracle_steady(params, power(cfg, params.power_model))
        expected = float(np.asarray(params.w) @ t_ss)
        assert tr.temp[-1] == pytest.approx(expected, abs=1e-6)
        # module's own steady_state agrees with the independent oracle
        np.testing.assert_allclose(
            steady_state(params, power(cfg, params.power_model)), t_ss, atol=1e-9
        )

    def test_step_response_settles_near_100s(self):
        # step 0 -> 100% utilization at f_big=1800, f_little=1500
        params = default_params()
        w = np.asarray(params.w)
        cfg0 = BoardConfig(f_big=1800.0, f_little=1500.0, u=(0.0,) * 8)
        cfg1 = BoardConfig(f_big=1800.0, f_little=1500.0, u=(1.0,) * 8)
        t0 = steady_state(params, power(cfg0, params.power_model))
        p1 = power(cfg1, params.power_model)
        rate = 4.0
        k = int(300 * rate)
        temps = linear_response(params, np.tile(p1, (k, 1)), rate, t0=t0)
        y = temps @ w
        y0, yinf = y[0], float(w @ steady_state(params, p1))
        err = np.abs(y - yinf) / abs(yinf - y0)
        inside = err <= 0.02
        # settling time: start of the final run of samples inside the band
        settle_idx = len(inside)
        for i in range(len(inside) - 1, -1, -1):
            if inside[i]:
                settle_idx = i
            else:
                break
        settle_s = settle_idx / rate
        assert 80.0 <= settle_s <= 120.0

    def test_full_load_steady_output_below_throttle(self):
        params = default_params()
        cfg = BoardConfig(f_big=2000.0, f_little=1500.0, u=(1.0,) * 8)
        y = float(np.asarray(params.w) @ steady_state(params, power(cfg, params.power_model)))
        assert 80.0 <= y <= 88.0

    def test_throttle_clamps_f_big(self):
        base = default_params(throttle=Throttle(limit_c=90.0))
        hot_pm = PowerModel(
            k_dyn_big=base.power_model.k_dyn_big * 2.5,
            k_dyn_little=base.power_model.k_dyn_little,
            k_stat_big=base.power_model.k_stat_big,
            k_stat_little=base.power_model.k_stat_little,
            p_idle=base.power_model.p_idle,
        )
        params = PlantParams(
            c_node=base.c_node, g=base.g, g_amb=base.g_amb, t_amb_c=base.t_amb_c,
            power_model=hot_pm, w=base.w, throttle=base.throttle,
        )
        cfg = BoardConfig(f_big=2000.0, f_little=1500.0, u=(1.0,) * 8)
        tr = simulate(const_schedule(400.0, cfg), params, rate_hz=2.0, noise_std=0.0)
        crossed = np.flatnonzero(tr.temp >= 90.0)
        assert crossed.size > 0, "hot parameters must reach the throttle limit"
        first = crossed[0]
        assert np.all(tr.f_big[:first] == 2000.0)
        # at and after the first crossing the applied f_big sits below the request
        assert np.all(tr.f_big[crossed] < 2000.0)
        # the cap never recovers within a run
        assert np.all(np.diff(tr.f_big) <= 1e-9)
        # clamping stepped down through grid levels
        assert tr.f_big[-1] <= 1800.0

    def test_determinism(self):
        sched = random_schedule(120.0, seed=5)
        params = default_params()
        a = simulate(sched, params, rate_hz=4.0, noise_std=0.33, seed=9)
        b = simulate(sched, params, rate_hz=4.0, noise_std=0.33, seed=9)
        np.testing.assert_array_equal(a.temp, b.temp)
        np.testing.assert_array_equal(a.f_big, b.f_big)

    def test_unstable_params_rejected(self):
        base = default_params()
        params = PlantParams(
            c_node=base.c_node, g=base.g, g_amb=(0.0,) * 9,
            t_amb_c=base.t_amb_c, power_model=base.power_model, w=base.w,
        )
        cfg = BoardConfig(f_big=200.0, f_little=200.0, u=(0.0,) * 8)
        with pytest.raises(UnstableParams):
            simulate(const_schedule(20.0, cfg), params, rate_hz=2.0, noise_std=0.0)

    def test_row_count_matches_duration_times_rate(self):
        sched = random_schedule(90.0, seed=2)
        tr = simulate(sched, default_params(), rate_hz=8.0, noise_std=0.0)
        assert len(tr) == 720


class TestLinearNetworkProperties:
    def test_superposition(self):
        params = default_params()
        rng = np.random.default_rng(0)
        k = 40
        p1 = rng.uniform(0.0, 2.0, size=(k, N_NODES))
        p2 = rng.uniform(0.0, 2.0, size=(k, N_NODES))
        r1 = linear_response(params, p1, 4.0)
        r2 = linear_response(params, p2, 4.0)
        r12 = linear_response(params, p1 + p2, 4.0)
        np.testing.assert_allclose(r12, r1 + r2 - params.t_amb_c, atol=1e-9)

    def test_exact_step_halving(self):
        params = default_params()
        rng = np.random.default_rng(1)
        k = 30
        p = rng.uniform(0.0, 3.0, size=(k, N_NODES))
        coarse = linear_response(params, p, 2.0)
        fine = linear_response(params, np.repeat(p, 2, axis=0), 4.0)
        np.testing.assert_allclose(coarse, fine[::2], atol=1e-9)

    @given(
        seed=st.integers(min_value=0, max_value=2**16),
        core=st.integers(min_value=0, max_value=7),
    )
    @settings(max_examples=30, deadline=None)
    def test_monotone_in_utilization(self, seed, core):
        params = default_params()
        rng = np.random.default_rng(seed)
        f_big = BIG_FREQ_LEVELS_MHZ[rng.integers(0, 10)]
        f_little = LITTLE_FREQ_LEVELS_MHZ[rng.integers(0, 6)]
        u = [UTIL_LEVELS[i] for i in rng.integers(0, 5, size=8)]
        lo = list(u)
        lo[core] = 0.0
        hi = list(u)
        hi[core] = 1.0
        w = np.asarray(params.w)
        y_lo = w @ steady_state(
            params, power(BoardConfig(f_big, f_little, tuple(lo)), params.power_model)
        )
        y_hi = w @ steady_state(
            params, power(BoardConfig(f_big, f_little, tuple(hi)), params.power_model)
        )
        assert y_hi >= y_lo - 1e-12


class TestRandomSchedule:
    def test_3600s_bounds(self):
        sched = random_schedule(3600.0, seed=7)
        n = len(sched.segments)
        assert 60 <= n <= 360
        durs = [d for d, _ in sched.segments]
        assert all(10.0 <= d <= 60.0 for d in durs[:-1])
        assert 0.0 < durs[-1] <= 60.0
        assert sched.duration_s == pytest.approx(3600.0)

    def test_same_seed_identical(self):
        a = random_schedule(500.0, seed=3)
        b = random_schedule(500.0, seed=3)
        assert a == b

    def test_minimum_duration_single_segment(self):
        sched = random_schedule(10.0, seed=0)
        assert len(sched.segments) == 1
        assert sched.segments[0][0] == pytest.approx(10.0)

    def test_schedule_validation(self):
        cfg = BoardConfig(f_big=200.0, f_little=200.0, u=(0.0,) * 8)
        with pytest.raises(OutOfRangeValue):
            WorkloadSchedule(segments=((70.0, cfg),))
        with pytest.raises(OutOfRangeValue):
            WorkloadSchedule(segments=((5.0, cfg), (20.0, cfg)))
        # a short final segment is the documented truncation behavior
        WorkloadSchedule(segments=((20.0, cfg), (5.0, cfg)))
