"""FIR-structured GRU for feedback-free temperature prediction.

The model never sees its own output: each prediction is computed from a
fixed window of past base regressors sampled at log-spaced lags reaching
100 s back, unrolled through a single GRU layer, and read out linearly.
Memory is therefore finite by construction; changing the trace outside the
lag window cannot change the prediction.

GRU convention: update and reset gates use the logistic sigmoid, the
candidate uses tanh, and the new state is (1-z)*h + z*candidate. Training
is mini-batch Nadam on half the mean squared residual in degrees C, with
early stopping on a held-out tail. Inputs and the output are z-score
normalized inside the model, as in the NARX network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NonFiniteLoss, TooEarly
from .trace import Trace

DEFAULT_N_LAGS = 50
DEFAULT_HORIZON_S = 100.0


@dataclass(frozen=True)
class LagGrid:
    """Log-spaced lookback offsets, oldest first, snapped to the sample grid."""

    n_lags: int
    horizon_s: float
    rate_hz: float
    offsets_s: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.offsets_s) < 1:
            raise ValueError("grid needs at least one offset")
        if any(b >= a for a, b in zip(self.offsets_s, self.offsets_s[1:])):
            raise ValueError("offsets must decrease strictly oldest to newest")
        if self.offsets_s[0] > self.horizon_s + 1e-9:
            raise ValueError("max offset exceeds the horizon")
        if self.offsets_s[-1] <= 0:
            raise ValueError("offsets must be positive")

    def __len__(self) -> int:
        return len(self.offsets_s)

    def sample_offsets(self) -> np.ndarray:
        """Offsets as integer sample counts, oldest first."""
        return np.rint(np.array(self.offsets_s) * self.rate_hz).astype(int)


def lag_grid(
    n: int = DEFAULT_N_LAGS,
    horizon_s: float = DEFAULT_HORIZON_S,
    rate_hz: float = 1.0,
) -> LagGrid:
    """Geometric lag sequence from one sample period back to `horizon_s`.

    Offsets are snapped to whole samples and deduplicated, so the result
    may hold fewer than `n` entries when the grid is finer than the rate
    can resolve.
    """
    if n < 2:
        raise ValueError("need at least two lags")
    if horizon_s <= 0 or rate_hz <= 0:
        raise ValueError("horizon and rate must be positive")
    period = 1.0 / rate_hz
    raw = np.geomspace(period, horizon_s, n)
    snapped = np.rint(raw * rate_hz).astype(int)
    snapped = np.unique(snapped[snapped >= 1])
    offsets = tuple((snapped / rate_hz)[::-1])
    return LagGrid(n_lags=n, horizon_s=horizon_s, rate_hz=rate_hz, offsets_s=offsets)


@dataclass(frozen=True)
class FirRnnModel:
    """GRU weights, linear readout, lag grid, and normalization."""

    w_z: np.ndarray
    u_z: np.ndarray
    b_z: np.ndarray
    w_r: np.ndarray
    u_r: np.ndarray
    b_r: np.ndarray
    w_h: np.ndarray
    u_h: np.ndarray
    b_h: np.ndarray
    w_out: np.ndarray
    b_out: float
    grid: LagGrid
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: float
    out_std: float

    def __post_init__(self) -> None:
        arrays = (
            "w_z", "u_z", "b_z", "w_r", "u_r", "b_r",
            "w_h", "u_h", "b_h", "w_out", "in_mean", "in_std",
        )
        for name in arrays:
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        u, m = self.w_z.shape
        if u < 1:
            raise DimensionMismatch("need at least one unit")
        for name in ("w_r", "w_h"):
            if getattr(self, name).shape != (u, m):
                raise DimensionMismatch(f"{name} must be {u}x{m}")
        for name in ("u_z", "u_r", "u_h"):
            if getattr(self, name).shape != (u, u):
                raise DimensionMismatch(f"{name} must be {u}x{u}")
        for name in ("b_z", "b_r", "b_h"):
            if getattr(self, name).shape != (u,):
                raise DimensionMismatch(f"{name} must have {u} entries")
        if self.w_out.shape != (1, u):
            raise DimensionMismatch("w_out must be 1xU")
        if self.in_mean.shape != (m,) or self.in_std.shape != (m,):
            raise DimensionMismatch("normalization stats must have one entry per input")
        if not (np.all(self.in_std > 0) and self.out_std > 0):
            raise ValueError("normalization stds must be positive")

    @property
    def units(self) -> int:
        return self.w_z.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.w_z.shape[1]

    @property
    def n_params(self) -> int:
        u, m = self.w_z.shape
        return 3 * (u * m + u * u + u) + u + 1


@dataclass(frozen=True)
class NadamConfig:
    """Nadam step sizes and stopping rules."""

    rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    max_epochs: int = 150
    patience: int = 10

    def __post_init__(self) -> None:
        if self.rate < 0:
            raise ValueError("rate must be nonnegative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.eps <= 0 or self.batch_size < 1:
            raise ValueError("eps must be positive and batch_size at least 1")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be at least 1")


def window(trace: Trace, t: int, grid: LagGrid) -> np.ndarray:
    """Base-regressor vectors at t minus each offset, oldest first.

    Temperature is never included; the model has no output feedback.
    """
    if abs(trace.rate_hz - grid.rate_hz) > 1e-9:
        raise ValueError(
            f"trace rate {trace.rate_hz} Hz does not match grid rate {grid.rate_hz} Hz"
        )
    ks = grid.sample_offsets()
    if t < ks[0]:
        raise TooEarly(f"t={t} has no {ks[0]}-sample history")
    if t >= len(trace):
        raise ValueError(f"t={t} beyond trace of length {len(trace)}")
    return trace.base_matrix()[t - ks]


def assemble_windows(trace: Trace, grid: LagGrid) -> tuple[np.ndarray, np.ndarray]:
    """All usable (window, target) pairs of a trace, stacked.

    Returns sequences with shape (N, len(grid), 10) and the measured
    temperatures they predict; the first usable time is the max offset.
    """
    ks = grid.sample_offsets()
    k_max = int(ks[0])
    n = len(trace)
    if n <= k_max:
        raise TooEarly(f"trace has {n} samples, lag window needs more than {k_max}")
    base = trace.base_matrix()
    times = np.arange(k_max, n)
    x = base[times[:, None] - ks[None, :]]
    y = trace.temp[times].astype(float)
    return x, y


_PARAM_FIELDS = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h", "w_out")


def _pack_params(model_or_parts) -> np.ndarray:
    if isinstance(model_or_parts, FirRnnModel):
        parts = [getattr(model_or_parts, f) for f in _PARAM_FIELDS]
        parts.append(np.array([model_or_parts.b_out]))
    else:
        parts = list(model_or_parts[:-1]) + [np.array([model_or_parts[-1]])]
    return np.concatenate([np.ravel(p) for p in parts])


def _unpack_params(theta: np.ndarray, units: int, m: int):
    shapes = [
        (units, m), (units, units), (units,),
        (units, m), (units, units), (units,),
        (units, m), (units, units), (units,),
        (1, units),
    ]
    parts = []
    pos = 0
    for shape in shapes:
        size = int(np.prod(shape))
        parts.append(theta[pos : pos + size].reshape(shape))
        pos += size
    b_out = float(theta[pos])
    return (*parts, b_out)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # overflow-free logistic; also the exact form the training kernel uses
    return 0.5 * (np.tanh(0.5 * a) + 1.0)


def _gru_forward(params, z_seq: np.ndarray, keep_tape: bool):
    """Batched GRU over normalized sequences (B, L, m) -> normalized outputs.

    Returns (yn, tape); tape holds per-step intermediates for backprop.
    """
    w_z, u_z, b_z, w_r, u_r, b_r, w_h, u_h, b_h, w_out, b_out = params
    batch, length, _ = z_seq.shape
    units = w_z.shape[0]
    h = np.zeros((batch, units))
    tape = []
    for step in range(length):
        x = z_seq[:, step, :]
        zg = _sigmoid(x @ w_z.T + h @ u_z.T + b_z)
        rg = _sigmoid(x @ w_r.T + h @ u_r.T + b_r)
        rh = rg * h
        cand = np.tanh(x @ w_h.T + rh @ u_h.T + b_h)
        h_new = (1.0 - zg) * h + zg * cand
        if keep_tape:
            tape.append((x, h, zg, rg, rh, cand))
        h = h_new
    yn = h @ w_out[0] + b_out
    return yn, h, tape


def forward(model: FirRnnModel, sequence: np.ndarray) -> float:
    """Predict one temperature from a raw lag-window sequence."""
    sequence = np.asarray(sequence, dtype=float)
    if sequence.ndim != 2:
        raise DimensionMismatch("sequence must be 2-d (steps x features)")
    if sequence.shape[0] == 0:
        raise ValueError("sequence must be nonempty")
    if sequence.shape[1] != model.n_inputs:
        raise DimensionMismatch(
            f"sequence has {sequence.shape[1]} features, model expects {model.n_inputs}"
        )
    z = (sequence - model.in_mean) / model.in_std
    params = tuple(getattr(model, f) for f in _PARAM_FIELDS) + (model.b_out,)
    yn, _, _ = _gru_forward(params, z[None, :, :], keep_tape=False)
    return float(model.out_mean + model.out_std * yn[0])


def batch_loss(model: FirRnnModel, sequences: np.ndarray, targets: np.ndarray) -> float:
    """Half the mean squared residual in degrees C over the batch."""
    sequences = np.asarray(sequences, dtype=float)
    targets = np.asarray(targets, dtype=float)
    z = (sequences - model.in_mean) / model.in_std
    params = tuple(getattr(model, f) for f in _PARAM_FIELDS) + (model.b_out,)
    yn, _, _ = _gru_forward(params, z, keep_tape=False)
    res = (model.out_mean + model.out_std * yn) - targets
    return float(0.5 * np.mean(res**2))


def _loss_and_grad(params, z_seq: np.ndarray, targets_n: np.ndarray, out_std: float):
    """Loss and flat gradient on normalized sequences and residuals.

    targets_n are normalized targets; the loss is still half the mean
    squared residual in degrees C, so gradients carry an out_std^2 factor
    relative to a purely normalized objective.
    """
    w_z, u_z, b_z, w_r, u_r, b_r, w_h, u_h, b_h, w_out, b_out = params
    yn, h_last, tape = _gru_forward(params, z_seq, keep_tape=True)
    batch = z_seq.shape[0]
    res_c = out_std * (yn - targets_n)
    loss = float(0.5 * np.mean(res_c**2))

    dyn = res_c * out_std / batch
    g_w_out = (dyn @ h_last)[None, :]
    g_b_out = float(np.sum(dyn))
    dh = np.outer(dyn, w_out[0])

    g = {name: np.zeros_like(arr) for name, arr in zip(
        ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h"),
        (w_z, u_z, b_z, w_r, u_r, b_r, w_h, u_h, b_h),
    )}
    for x, h_prev, zg, rg, rh, cand in reversed(tape):
        dz = dh * (cand - h_prev)
        dc = dh * zg
        dh_prev = dh * (1.0 - zg)
        dah = dc * (1.0 - cand**2)
        g["w_h"] += dah.T @ x
        g["u_h"] += dah.T @ rh
        g["b_h"] += dah.sum(axis=0)
        drh = dah @ u_h
        dr = drh * h_prev
        dh_prev += drh * rg
        dar = dr * rg * (1.0 - rg)
        daz = dz * zg * (1.0 - zg)
        g["w_r"] += dar.T @ x
        g["u_r"] += dar.T @ h_prev
        g["b_r"] += dar.sum(axis=0)
        g["w_z"] += daz.T @ x
        g["u_z"] += daz.T @ h_prev
        g["b_z"] += daz.sum(axis=0)
        dh_prev += dar @ u_r + daz @ u_z
        dh = dh_prev
    flat = _pack_params(
        (
            g["w_z"], g["u_z"], g["b_z"],
            g["w_r"], g["u_r"], g["b_r"],
            g["w_h"], g["u_h"], g["b_h"],
            g_w_out, g_b_out,
        )
    )
    return loss, flat


def _epoch_kernel(
    theta: np.ndarray,
    mom: np.ndarray,
    vel: np.ndarray,
    step: int,
    zt: np.ndarray,
    ynt: np.ndarray,
    order: np.ndarray,
    batch_size: int,
    out_std: float,
    rate: float,
    beta1: float,
    beta2: float,
    eps: float,
    units: int,
    m: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, int, int]:
    """One epoch of mini-batch Nadam on normalized data.

    Written in the numba-compatible subset of numpy so the same source
    runs jitted when numba is installed and interpreted otherwise.
    Returns (theta, mom, vel, step, bad) where bad is the batch start
    index at which the loss went non-finite, or -1.
    """
    n_rows = order.shape[0]
    length = zt.shape[1]
    um = units * m
    uu = units * units
    for start in range(0, n_rows, batch_size):
        sel = order[start : min(start + batch_size, n_rows)]
        zb = zt[sel]
        yb = ynt[sel]
        batch = sel.shape[0]

        pos = 0
        w_z = theta[pos : pos + um].reshape(units, m)
        pos += um
        u_z = theta[pos : pos + uu].reshape(units, units)
        pos += uu
        b_z = theta[pos : pos + units]
        pos += units
        w_r = theta[pos : pos + um].reshape(units, m)
        pos += um
        u_r = theta[pos : pos + uu].reshape(units, units)
        pos += uu
        b_r = theta[pos : pos + units]
        pos += units
        w_h = theta[pos : pos + um].reshape(units, m)
        pos += um
        u_h = theta[pos : pos + uu].reshape(units, units)
        pos += uu
        b_h = theta[pos : pos + units]
        pos += units
        w_out = theta[pos : pos + units]
        pos += units
        b_out = theta[pos]
        wzT = np.ascontiguousarray(w_z.T)
        uzT = np.ascontiguousarray(u_z.T)
        wrT = np.ascontiguousarray(w_r.T)
        urT = np.ascontiguousarray(u_r.T)
        whT = np.ascontiguousarray(w_h.T)
        uhT = np.ascontiguousarray(u_h.T)

        hs = np.zeros((length + 1, batch, units))
        zgs = np.empty((length, batch, units))
        rgs = np.empty((length, batch, units))
        rhs = np.empty((length, batch, units))
        cands = np.empty((length, batch, units))
        for t in range(length):
            x = np.ascontiguousarray(zb[:, t, :])
            h = hs[t]
            zg = 0.5 * (np.tanh(0.5 * (x @ wzT + h @ uzT + b_z)) + 1.0)
            rg = 0.5 * (np.tanh(0.5 * (x @ wrT + h @ urT + b_r)) + 1.0)
            rh = rg * h
            cand = np.tanh(x @ whT + rh @ uhT + b_h)
            hs[t + 1] = (1.0 - zg) * h + zg * cand
            zgs[t] = zg
            rgs[t] = rg
            rhs[t] = rh
            cands[t] = cand
        yn = hs[length] @ w_out + b_out
        res_c = out_std * (yn - yb)
        loss = 0.5 * np.mean(res_c**2)
        if not np.isfinite(loss):
            return theta, mom, vel, step, start

        dyn = res_c * (out_std / batch)
        g_wout = dyn @ hs[length]
        g_bout = np.sum(dyn)
        dh = dyn.reshape(batch, 1) * w_out.reshape(1, units)
        g_wz = np.zeros((units, m))
        g_uz = np.zeros((units, units))
        g_bz = np.zeros(units)
        g_wr = np.zeros((units, m))
        g_ur = np.zeros((units, units))
        g_br = np.zeros(units)
        g_wh = np.zeros((units, m))
        g_uh = np.zeros((units, units))
        g_bh = np.zeros(units)
        for t in range(length - 1, -1, -1):
            x = np.ascontiguousarray(zb[:, t, :])
            h_prev = hs[t]
            zg = zgs[t]
            rg = rgs[t]
            rh = rhs[t]
            cand = cands[t]
            dz = dh * (cand - h_prev)
            dc = dh * zg
            dh_prev = dh * (1.0 - zg)
            dah = dc * (1.0 - cand * cand)
            dahT = np.ascontiguousarray(dah.T)
            g_wh += dahT @ x
            g_uh += dahT @ rh
            g_bh += dah.sum(axis=0)
            drh = dah @ u_h
            dr = drh * h_prev
            dh_prev = dh_prev + drh * rg
            dar = dr * rg * (1.0 - rg)
            daz = dz * zg * (1.0 - zg)
            darT = np.ascontiguousarray(dar.T)
            dazT = np.ascontiguousarray(daz.T)
            g_wr += darT @ x
            g_ur += darT @ h_prev
            g_br += dar.sum(axis=0)
            g_wz += dazT @ x
            g_uz += dazT @ h_prev
            g_bz += daz.sum(axis=0)
            dh = dh_prev + dar @ u_r + daz @ u_z
        grad = np.concatenate(
            (
                g_wz.ravel(), g_uz.ravel(), g_bz,
                g_wr.ravel(), g_ur.ravel(), g_br,
                g_wh.ravel(), g_uh.ravel(), g_bh,
                g_wout, np.full(1, g_bout),
            )
        )

        step += 1
        mom = beta1 * mom + (1.0 - beta1) * grad
        vel = beta2 * vel + (1.0 - beta2) * grad**2
        m_hat = beta1 * mom / (1.0 - beta1 ** (step + 1)) + (1.0 - beta1) * grad / (
            1.0 - beta1**step
        )
        v_hat = vel / (1.0 - beta2**step)
        theta = theta - rate * m_hat / (np.sqrt(v_hat) + eps)
    return theta, mom, vel, step, -1


try:
    from numba import njit

    _epoch_jit = njit(cache=True)(_epoch_kernel)
except ImportError:  # pragma: no cover - numba is an optional accelerator
    _epoch_jit = None


def gradients(model: FirRnnModel, sequences: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Exact gradient of `batch_loss` w.r.t. every parameter, flattened.

    Parameter order: w_z, u_z, b_z, w_r, u_r, b_r, w_h, u_h, b_h, w_out,
    b_out (row-major within each).
    """
    sequences = np.asarray(sequences, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if sequences.ndim != 3 or sequences.shape[0] == 0:
        raise ValueError("batch must be nonempty with shape (B, L, m)")
    if sequences.shape[2] != model.n_inputs or targets.shape != (sequences.shape[0],):
        raise DimensionMismatch("batch shape does not match the model")
    z = (sequences - model.in_mean) / model.in_std
    tn = (targets - model.out_mean) / model.out_std
    params = tuple(getattr(model, f) for f in _PARAM_FIELDS) + (model.b_out,)
    _, grad = _loss_and_grad(params, z, tn, model.out_std)
    return grad


def predict(model: FirRnnModel, trace: Trace) -> np.ndarray:
    """Temperature prediction at every time with full lag history.

    Aligned with `trace.t`; entries before the max lag offset are NaN.
    """
    x, _ = assemble_windows(trace, model.grid)
    z = (x - model.in_mean) / model.in_std
    params = tuple(getattr(model, f) for f in _PARAM_FIELDS) + (model.b_out,)
    yn, _, _ = _gru_forward(params, z, keep_tape=False)
    out = np.full(len(trace), np.nan)
    out[len(trace) - len(yn):] = model.out_mean + model.out_std * yn
    return out


def train_nadam(
    x: np.ndarray,
    y: np.ndarray,
    units: int,
    grid: LagGrid,
    config: NadamConfig | None = None,
    val_frac: float = 0.2,
    seed: int = 0,
) -> FirRnnModel:
    """Fit the GRU to (window, target) pairs with mini-batch Nadam.

    The tail `val_frac` of the rows is held out; after every epoch the
    validation MSE is checked and training stops once it has failed to
    improve `patience` epochs in a row (or at `max_epochs`). Returns the
    weights from the best validation epoch. Mini-batch order is reshuffled
    every epoch under `seed`.

    Weights start uniform within +-1/sqrt(fan-in) except the update-gate
    bias, which is set so per-unit carry times spread log-uniformly from 1
    step to the window length; a gate that starts near 0.5 forgets the old
    end of the window before the readout ever sees it.
    """
    cfg = NadamConfig() if config is None else config
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 3 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise DimensionMismatch("x must be (N, L, m) with matching targets")
    if units < 1:
        raise ValueError("need at least one unit")
    if not 0.0 < val_frac < 1.0:
        raise ValueError("val_frac must lie in (0, 1)")
    n, _, m = x.shape
    n_val = max(1, int(round(val_frac * n)))
    n_train = n - n_val
    if n_train < 1:
        raise ValueError("no training rows left after the validation split")

    in_mean = x[:n_train].reshape(-1, m).mean(axis=0)
    in_std = x[:n_train].reshape(-1, m).std(axis=0)
    in_std[in_std == 0.0] = 1.0
    out_mean = float(y[:n_train].mean())
    out_std = float(y[:n_train].std())
    if out_std == 0.0:
        out_std = 1.0
    z = (x - in_mean) / in_std
    yn = (y - out_mean) / out_std
    zt, ynt = z[:n_train], yn[:n_train]
    zv, ynv = z[n_train:], yn[n_train:]

    rng = np.random.default_rng(seed)

    def init(shape, fan_in):
        return rng.uniform(-1.0, 1.0, size=shape) / np.sqrt(fan_in)

    length = x.shape[1]
    parts = [
        init((units, m), m), init((units, units), units), init((units,), units),
        init((units, m), m), init((units, units), units), init((units,), units),
        init((units, m), m), init((units, units), units), init((units,), units),
        init((1, units), units), float(init((), units)),
    ]
    carry_steps = np.exp(rng.uniform(0.0, np.log(max(length, 2)), units))
    parts[2] = -np.log(carry_steps)
    theta = _pack_params(tuple(parts))

    mom = np.zeros_like(theta)
    vel = np.zeros_like(theta)
    step = 0
    best_theta = theta.copy()
    best_val = np.inf
    bad = 0
    run_epoch = _epoch_kernel if _epoch_jit is None else _epoch_jit

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n_train)
        theta, mom, vel, step, bad_at = run_epoch(
            theta, mom, vel, step, zt, ynt, order, cfg.batch_size, out_std,
            cfg.rate, cfg.beta1, cfg.beta2, cfg.eps, units, m,
        )
        if bad_at >= 0:
            raise NonFiniteLoss(
                f"loss became non-finite at epoch {epoch}, batch start {bad_at}"
            )

        params = _unpack_params(theta, units, m)
        yn_val, _, _ = _gru_forward(params, zv, keep_tape=False)
        val = float(np.mean((out_std * (yn_val - ynv)) ** 2))
        if not np.isfinite(val):
            raise NonFiniteLoss(f"validation loss became non-finite at epoch {epoch}")
        if val < best_val:
            best_val = val
            best_theta = theta.copy()
            bad = 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break

    parts = _unpack_params(best_theta, units, m)
    return FirRnnModel(
        w_z=parts[0], u_z=parts[1], b_z=parts[2],
        w_r=parts[3], u_r=parts[4], b_r=parts[5],
        w_h=parts[6], u_h=parts[7], b_h=parts[8],
        w_out=parts[9], b_out=parts[10],
        grid=grid,
        in_mean=in_mean, in_std=in_std, out_mean=out_mean, out_std=out_std,
    )
