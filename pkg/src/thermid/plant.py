"""Synthetic thermal RC-network plant for an octa-core big.LITTLE SoC.

Replaces the physical board + thermal camera rig as ground truth. Nine
nodes: cores 1-4 (little cluster), cores 5-8 (big cluster), and one board
node that couples to ambient. Power enters through square-law dynamic and
f^1.5 static terms; the network itself is linear, so the only nonlinearity
is the configuration-to-power map.

Default coefficients are calibration targets (2% step-response settling
near 100 s, full-load steady output near 85 deg C), not measured values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import OutOfRangeValue, UnstableParams
from .trace import Trace

N_NODES = 9
N_CORES = 8
BOARD = 8  # node index

BIG_FREQ_LEVELS_MHZ = tuple(np.linspace(200.0, 2000.0, 10))
LITTLE_FREQ_LEVELS_MHZ = tuple(np.linspace(200.0, 1500.0, 6))
UTIL_LEVELS = (0.0, 0.25, 0.5, 0.75, 1.0)

# cores 1-4 little, 5-8 big (trace column convention)
LITTLE_CORES = (0, 1, 2, 3)
BIG_CORES = (4, 5, 6, 7)

DEFAULT_THROTTLE_LIMIT_C = 90.0


def _on_grid(value: float, grid: Sequence[float]) -> bool:
    return bool(np.any(np.abs(np.asarray(grid) - value) < 1e-9))


@dataclass(frozen=True)
class BoardConfig:
    """One DVFS + utilization operating point, restricted to the discrete grids."""

    f_big: float
    f_little: float
    u: tuple[float, ...]

    def __post_init__(self) -> None:
        if not _on_grid(self.f_big, BIG_FREQ_LEVELS_MHZ):
            raise OutOfRangeValue(f"f_big {self.f_big} not on the 10-level grid")
        if not _on_grid(self.f_little, LITTLE_FREQ_LEVELS_MHZ):
            raise OutOfRangeValue(f"f_little {self.f_little} not on the 6-level grid")
        if len(self.u) != N_CORES:
            raise OutOfRangeValue(f"need {N_CORES} utilizations, got {len(self.u)}")
        for i, ui in enumerate(self.u):
            if not _on_grid(ui, UTIL_LEVELS):
                raise OutOfRangeValue(f"u{i + 1} = {ui} not on the utilization grid")


@dataclass(frozen=True)
class PowerModel:
    """Power-law coefficients: dynamic ~ u f^2, static ~ f^1.5, plus an idle floor."""

    k_dyn_big: float
    k_dyn_little: float
    k_stat_big: float
    k_stat_little: float
    p_idle: float

    def __post_init__(self) -> None:
        for name in ("k_dyn_big", "k_dyn_little", "k_stat_big", "k_stat_little", "p_idle"):
            if getattr(self, name) < 0:
                raise OutOfRangeValue(f"{name} must be >= 0")


@dataclass(frozen=True)
class Throttle:
    """Clamp f_big to the next lower grid level while output >= limit_c."""

    limit_c: float = DEFAULT_THROTTLE_LIMIT_C


@dataclass(frozen=True)
class PlantParams:
    c_node: tuple[float, ...]  # J/degC, length 9
    g: np.ndarray  # W/degC, 9x9 symmetric, zero diagonal
    g_amb: tuple[float, ...]  # W/degC to ambient, length 9
    t_amb_c: float
    power_model: PowerModel
    w: tuple[float, ...]  # output weights, sum to 1
    throttle: Throttle | None = None

    def __post_init__(self) -> None:
        g = np.asarray(self.g, dtype=np.float64)
        object.__setattr__(self, "g", g)
        if g.shape != (N_NODES, N_NODES):
            raise OutOfRangeValue(f"G must be {N_NODES}x{N_NODES}")
        if not np.allclose(g, g.T):
            raise OutOfRangeValue("G must be symmetric")
        if np.any(np.diag(g) != 0.0):
            raise OutOfRangeValue("G diagonal must be zero")
        if np.any(g < 0):
            raise OutOfRangeValue("G entries must be nonnegative")
        if len(self.c_node) != N_NODES or any(c <= 0 for c in self.c_node):
            raise OutOfRangeValue("C_node must be 9 positive capacitances")
        if len(self.g_amb) != N_NODES or any(ga < 0 for ga in self.g_amb):
            raise OutOfRangeValue("g_amb must be 9 nonnegative conductances")
        if len(self.w) != N_NODES or abs(sum(self.w) - 1.0) > 1e-9:
            raise OutOfRangeValue("output weights w must sum to 1")


def default_power_model() -> PowerModel:
    return PowerModel(
        k_dyn_big=6.25e-7,
        k_dyn_little=2.0e-7,
        k_stat_big=5.0e-6,
        k_stat_little=2.6e-6,
        p_idle=0.5,
    )


def default_params(throttle: Throttle | None = None) -> PlantParams:
    """Calibrated 9-node network: ~100 s 2% settling, ~85 degC full-load output."""
    g = np.zeros((N_NODES, N_NODES))
    # chain coupling within each cluster
    for a, b in ((0, 1), (1, 2), (2, 3), (4, 5), (5, 6), (6, 7)):
        g[a, b] = g[b, a] = 0.3
    # every core couples to the board node
    for i in range(N_CORES):
        g[i, BOARD] = g[BOARD, i] = 0.5
    c = (0.15, 0.15, 0.15, 0.15, 0.25, 0.25, 0.25, 0.25, 4.8)
    g_amb = (0.0,) * 8 + (0.25,)
    w = (0.04, 0.04, 0.04, 0.04, 0.2, 0.2, 0.2, 0.2, 0.04)
    return PlantParams(
        c_node=c,
        g=g,
        g_amb=g_amb,
        t_amb_c=21.0,
        power_model=default_power_model(),
        w=w,
        throttle=throttle,
    )


@dataclass(frozen=True)
class WorkloadSchedule:
    """Ordered (duration_s, config) segments; only the final one may run short."""

    segments: tuple[tuple[float, BoardConfig], ...]

    def __post_init__(self) -> None:
        if not self.segments:
            raise OutOfRangeValue("schedule must have at least one segment")
        for i, (d, _) in enumerate(self.segments):
            if d <= 0 or d > 60.0 + 1e-9:
                raise OutOfRangeValue(f"segment {i} duration {d} outside (0, 60] s")
            if i < len(self.segments) - 1 and d < 10.0 - 1e-9:
                raise OutOfRangeValue(
                    f"non-final segment {i} duration {d} below 10 s"
                )

    @property
    def duration_s(self) -> float:
        return float(sum(d for d, _ in self.segments))


def random_schedule(duration_s: float, seed: int) -> WorkloadSchedule:
    """Uniform random workload: durations U[10, 60] s, configs uniform on the grids.

    The final segment is truncated so the total equals duration_s exactly.
    Deterministic under seed.
    """
    if duration_s < 10.0:
        raise OutOfRangeValue(f"duration {duration_s} s below the 10 s minimum")
    rng = np.random.default_rng(seed)
    segments: list[tuple[float, BoardConfig]] = []
    elapsed = 0.0
    while elapsed < duration_s - 1e-9:
        d = float(rng.uniform(10.0, 60.0))
        f_big = BIG_FREQ_LEVELS_MHZ[int(rng.integers(0, len(BIG_FREQ_LEVELS_MHZ)))]
        f_little = LITTLE_FREQ_LEVELS_MHZ[
            int(rng.integers(0, len(LITTLE_FREQ_LEVELS_MHZ)))
        ]
        u = tuple(
            UTIL_LEVELS[int(k)] for k in rng.integers(0, len(UTIL_LEVELS), size=N_CORES)
        )
        d = min(d, duration_s - elapsed)
        segments.append((d, BoardConfig(f_big=f_big, f_little=f_little, u=u)))
        elapsed += d
    return WorkloadSchedule(segments=tuple(segments))


def count_configurations(u_levels: int, cores: int, nf_big: int, nf_little: int) -> int:
    """Size of the configuration space: u_levels^cores * nf_big * nf_little (exact)."""
    if min(u_levels, cores, nf_big, nf_little) < 1:
        raise OutOfRangeValue("all grid sizes must be >= 1")
    return u_levels**cores * nf_big * nf_little


def _power_raw(
    f_big: float, f_little: float, u: Sequence[float], model: PowerModel
) -> np.ndarray:
    p = np.full(N_NODES, model.p_idle / N_NODES)
    for i in LITTLE_CORES:
        p[i] += (
            model.k_dyn_little * u[i] * f_little**2
            + model.k_stat_little * f_little**1.5
        )
    for i in BIG_CORES:
        p[i] += model.k_dyn_big * u[i] * f_big**2 + model.k_stat_big * f_big**1.5
    return p


def power(config: BoardConfig, model: PowerModel) -> np.ndarray:
    """Per-node watts for one operating point.

    Core nodes draw k_dyn*u*f^2 + k_stat*f^1.5 plus an equal share of the
    idle floor; the board node draws only its idle share.
    """
    return _power_raw(config.f_big, config.f_little, config.u, model)


def _system_matrix(params: PlantParams) -> np.ndarray:
    """Continuous-time A = -C^-1 (Laplacian(G) + diag(g_amb)); checks stability."""
    g = params.g
    lap = np.diag(g.sum(axis=1)) - g
    a = -(lap + np.diag(params.g_amb)) / np.asarray(params.c_node)[:, None]
    eig = np.linalg.eigvals(a)
    if np.any(eig.real >= -1e-12):
        raise UnstableParams(
            f"continuous eigenvalue with nonnegative real part: {eig.real.max():.3e}"
        )
    return a


def _forcing(params: PlantParams, p: np.ndarray) -> np.ndarray:
    """b in dT/dt = A T + b for node powers p."""
    ga = np.asarray(params.g_amb)
    return (p + ga * params.t_amb_c) / np.asarray(params.c_node)


def _step_factors(a: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """(e^{Ah}, int_0^h e^{As} ds) via one augmented matrix exponential."""
    n = a.shape[0]
    m = np.zeros((2 * n, 2 * n))
    m[:n, :n] = a * h
    m[:n, n:] = np.eye(n) * h
    e = scipy.linalg.expm(m)
    return np.ascontiguousarray(e[:n, :n]), np.ascontiguousarray(e[:n, n:])


def steady_state(params: PlantParams, p: np.ndarray) -> np.ndarray:
    """Node temperatures with constant node powers p (linear solve)."""
    g = params.g
    lap = np.diag(g.sum(axis=1)) - g
    lhs = lap + np.diag(params.g_amb)
    rhs = np.asarray(p) + np.asarray(params.g_amb) * params.t_amb_c
    return np.linalg.solve(lhs, rhs)


def linear_response(
    params: PlantParams,
    powers: np.ndarray,
    rate_hz: float,
    t0: np.ndarray | None = None,
) -> np.ndarray:
    """Node temperatures at sample instants for piecewise-constant node powers.

    powers[k] (shape (K, 9)) applies on [k, k+1)/rate_hz. Returns (K+1, 9)
    temperatures with row 0 equal to the initial condition (ambient by
    default). Stepping is exact for piecewise-constant input, so halving the
    step leaves shared sample instants unchanged to float precision.
    """
    a = _system_matrix(params)
    ad, sd = _step_factors(a, 1.0 / rate_hz)
    powers = np.atleast_2d(np.asarray(powers, dtype=np.float64))
    temps = np.empty((powers.shape[0] + 1, N_NODES))
    temps[0] = np.full(N_NODES, params.t_amb_c) if t0 is None else np.asarray(t0)
    x = temps[0].copy()
    for k in range(powers.shape[0]):
        x = ad @ x + sd @ _forcing(params, powers[k])
        temps[k + 1] = x
    return temps


def _next_lower_big_level(f: float) -> float:
    levels = BIG_FREQ_LEVELS_MHZ
    for lv in reversed(levels):
        if lv < f - 1e-9:
            return lv
    return levels[0]


def simulate(
    schedule: WorkloadSchedule,
    params: PlantParams,
    rate_hz: float,
    noise_std: float = 0.33,
    seed: int = 0,
) -> Trace:
    """Integrate the network over a workload schedule and emit a measured trace.

    Exact matrix-exponential stepping per sample interval; segment boundaries
    inside an interval split the step so the result is independent of the
    sample rate. The measured output is w^T T plus Gaussian noise. With a
    throttle, any sample whose output reaches limit_c lowers the effective
    f_big cap by one grid level from that step onward (the cap never
    recovers within a run).
    """
    if rate_hz <= 0:
        raise OutOfRangeValue("rate_hz must be positive")
    a = _system_matrix(params)
    h = 1.0 / rate_hz
    factor_cache: dict[float, tuple[np.ndarray, np.ndarray]] = {}

    def factors(dt: float) -> tuple[np.ndarray, np.ndarray]:
        key = round(dt, 12)
        if key not in factor_cache:
            factor_cache[key] = _step_factors(a, dt)
        return factor_cache[key]

    durations = np.array([d for d, _ in schedule.segments])
    ends = np.cumsum(durations)
    configs = [c for _, c in schedule.segments]
    n = int(round(schedule.duration_s * rate_hz))
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, noise_std, size=n) if noise_std > 0 else np.zeros(n)

    w = np.asarray(params.w)
    x = np.full(N_NODES, params.t_amb_c)
    cap = np.inf
    power_cache: dict[tuple[int, float], np.ndarray] = {}
    t_arr = np.arange(n) / rate_hz
    f_big_arr = np.empty(n)
    f_little_arr = np.empty(n)
    util_arr = np.empty((n, N_CORES))
    temp_arr = np.empty(n)

    def seg_at(t: float) -> int:
        return min(int(np.searchsorted(ends, t, side="right")), len(configs) - 1)

    for k in range(n):
        tk = t_arr[k]
        y = float(w @ x) + noise[k]
        temp_arr[k] = y
        cfg = configs[seg_at(tk)]
        eff_f_big = min(cfg.f_big, cap)
        if params.throttle is not None and y >= params.throttle.limit_c:
            eff_f_big = _next_lower_big_level(eff_f_big)
            cap = eff_f_big
        f_big_arr[k] = eff_f_big
        f_little_arr[k] = cfg.f_little
        util_arr[k] = cfg.u
        if k == n - 1:
            break
        # integrate [tk, tk+h), splitting at any segment boundary inside
        t_cur = tk
        t_stop = tk + h
        while t_cur < t_stop - 1e-12:
            si = seg_at(t_cur)
            t_next = min(t_stop, ends[si]) if si < len(ends) else t_stop
            if t_next <= t_cur + 1e-12:
                t_next = t_stop
            cfg_cur = configs[si]
            pkey = (si, cap)
            if pkey not in power_cache:
                power_cache[pkey] = _forcing(
                    params,
                    _power_raw(
                        min(cfg_cur.f_big, cap),
                        cfg_cur.f_little,
                        cfg_cur.u,
                        params.power_model,
                    ),
                )
            ad, sd = factors(t_next - t_cur)
            x = ad @ x + sd @ power_cache[pkey]
            t_cur = t_next

    return Trace(
        t=t_arr,
        f_big=f_big_arr,
        f_little=f_little_arr,
        util=util_arr,
        temp=temp_arr,
        rate_hz=rate_hz,
    )
