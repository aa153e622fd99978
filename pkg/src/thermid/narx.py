"""Hammerstein-style NARX network for closed-loop temperature prediction.

A single sigmoid hidden layer feeds a linear output. During training the
network runs open loop: each regression row carries the current and delayed
base regressors together with delayed *measured* temperatures, so there is
no recurrence and the weights can be fit with Levenberg-Marquardt on the
one-step residuals. For prediction the loop is closed: the output-delay
slots are filled with the network's own previous predictions and measured
temperature is never read after the feedback buffer is seeded.

Inputs and the output are z-score normalized inside the model; the
statistics come from the training rows and travel with the weights, so
callers always pass physical units (MHz, utilization fraction, degrees C).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, SingularNormalEquations, TooShort
from .trace import Trace

LAMBDA_MAX = 1e10


@dataclass(frozen=True)
class LmConfig:
    """Levenberg-Marquardt damping schedule and stopping rules."""

    lam0: float = 1e-3
    lam_up: float = 10.0
    lam_down: float = 0.1
    max_iters: int = 1000
    patience: int = 6
    min_grad: float = 1e-10

    def __post_init__(self) -> None:
        if self.lam0 <= 0:
            raise ValueError("lam0 must be positive")
        if self.lam_up <= 1.0:
            raise ValueError("lam_up must exceed 1")
        if not 0.0 < self.lam_down < 1.0:
            raise ValueError("lam_down must lie in (0, 1)")
        if self.max_iters < 1 or self.patience < 1:
            raise ValueError("max_iters and patience must be at least 1")
        if self.min_grad < 0:
            raise ValueError("min_grad must be nonnegative")


@dataclass(frozen=True)
class NarxModel:
    """Trained network weights plus the normalization that they expect.

    ``w1`` has one column per input slot: the base regressors at delays
    0..n_x (delay-major, regressor-minor) followed by the output at delays
    1..n_y.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    n_x: int
    n_y: int
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: float
    out_std: float

    def __post_init__(self) -> None:
        for name in ("w1", "b1", "w2", "in_mean", "in_std"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.n_x < 0 or self.n_y < 1:
            raise ValueError("need n_x >= 0 and n_y >= 1")
        if self.w1.ndim != 2 or self.w1.shape[0] < 1:
            raise DimensionMismatch("w1 must be H x D with H >= 1")
        h, d = self.w1.shape
        if (d - self.n_y) % (self.n_x + 1) != 0 or d <= self.n_y:
            raise DimensionMismatch(
                f"{d} input slots do not factor as m*(n_x+1)+n_y"
            )
        if self.b1.shape != (h,) or self.w2.shape != (1, h):
            raise DimensionMismatch("b1 must be (H,), w2 must be (1, H)")
        if self.in_mean.shape != (d,) or self.in_std.shape != (d,):
            raise DimensionMismatch("normalization stats must have one entry per input")
        if not (np.all(self.in_std > 0) and self.out_std > 0):
            raise ValueError("normalization stds must be positive")

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def n_inputs(self) -> int:
        """Base regressor count m recovered from the weight shape."""
        return (self.w1.shape[1] - self.n_y) // (self.n_x + 1)

    @property
    def n_params(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + 1


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def assemble_open_loop(
    trace: Trace, n_x: int, n_y: int
) -> tuple[np.ndarray, np.ndarray]:
    """Build the open-loop regression problem from a measured trace.

    Row t holds the 10 base regressors at times t, t-1, ..., t-n_x and the
    measured temperature at times t-1, ..., t-n_y; the target is the
    temperature at t. Rows without full history are dropped, so the first
    target is at index max(n_x, n_y). Values stay in physical units.
    """
    if n_x < 0 or n_y < 1:
        raise ValueError("need n_x >= 0 and n_y >= 1")
    t0 = max(n_x, n_y)
    n = len(trace)
    if n <= t0:
        raise TooShort(f"trace has {n} samples, need more than {t0}")
    base = trace.base_matrix()
    blocks = [base[t0 - k : n - k] for k in range(n_x + 1)]
    blocks += [trace.temp[t0 - k : n - k, None] for k in range(1, n_y + 1)]
    x = np.hstack(blocks)
    y = trace.temp[t0:].astype(float)
    return x, y


def _forward_hidden(
    w1: np.ndarray, b1: np.ndarray, w2: np.ndarray, b2: float, z: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    hid = _sigmoid(z @ w1.T + b1)
    return hid @ w2[0] + b2, hid


def forward(model: NarxModel, row: np.ndarray) -> float:
    """One open-loop evaluation on a raw (unnormalized) input row."""
    row = np.asarray(row, dtype=float)
    if row.shape != (model.w1.shape[1],):
        raise DimensionMismatch(
            f"row has shape {row.shape}, model expects ({model.w1.shape[1]},)"
        )
    z = (row - model.in_mean) / model.in_std
    yn, _ = _forward_hidden(model.w1, model.b1, model.w2, model.b2, z[None, :])
    return float(model.out_mean + model.out_std * yn[0])


def _pack(w1: np.ndarray, b1: np.ndarray, w2: np.ndarray, b2: float) -> np.ndarray:
    return np.concatenate([w1.ravel(), b1, w2.ravel(), [b2]])


def _unpack(theta: np.ndarray, h: int, d: int):
    w1 = theta[: h * d].reshape(h, d)
    b1 = theta[h * d : h * d + h]
    w2 = theta[h * d + h : h * d + 2 * h].reshape(1, h)
    b2 = float(theta[-1])
    return w1, b1, w2, b2


def _jacobian_normalized(
    w1: np.ndarray, b1: np.ndarray, w2: np.ndarray, z: np.ndarray
) -> np.ndarray:
    """d(normalized output)/d(theta) for every normalized row in z."""
    n, d = z.shape
    h = w1.shape[0]
    hid = _sigmoid(z @ w1.T + b1)
    gate = hid * (1.0 - hid) * w2[0]
    jac = np.empty((n, h * d + 2 * h + 1))
    jac[:, : h * d] = np.einsum("nk,nj->nkj", gate, z).reshape(n, h * d)
    jac[:, h * d : h * d + h] = gate
    jac[:, h * d + h : h * d + 2 * h] = hid
    jac[:, -1] = 1.0
    return jac


def jacobian(model: NarxModel, rows: np.ndarray) -> np.ndarray:
    """Residual Jacobian, one row per sample and one column per parameter.

    Residuals live in normalized output space and the target does not
    depend on the weights, so this is the derivative of the normalized
    network output. Rows are raw; normalization is applied internally.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.shape[0] == 0:
        raise ValueError("rows must be nonempty")
    if rows.shape[1] != model.w1.shape[1]:
        raise DimensionMismatch(
            f"rows have {rows.shape[1]} columns, model expects {model.w1.shape[1]}"
        )
    z = (rows - model.in_mean) / model.in_std
    return _jacobian_normalized(model.w1, model.b1, model.w2, z)


def _damped_step(gram: np.ndarray, grad: np.ndarray, lam: float) -> np.ndarray:
    """Solve (J'J + lam*I) step = -grad."""
    a = gram + lam * np.eye(gram.shape[0])
    return np.linalg.solve(a, -grad)


def train_lm(
    x: np.ndarray,
    y: np.ndarray,
    n_x: int,
    n_y: int,
    hidden: int,
    config: LmConfig | None = None,
    val_frac: float = 0.2,
    seed: int = 0,
) -> NarxModel:
    """Fit the network to open-loop rows with Levenberg-Marquardt.

    The tail `val_frac` of the rows is held out; after every accepted step
    the validation MSE is checked and training stops once it has failed to
    improve `patience` times in a row (or at `max_iters`). The returned
    weights are the ones from the best validation epoch. Initialization is
    uniform within +-1/sqrt(fan-in), deterministic under `seed`.
    """
    cfg = LmConfig() if config is None else config
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise DimensionMismatch("x must be 2-d and y 1-d with matching rows")
    if hidden < 1:
        raise ValueError("hidden size must be at least 1")
    if not 0.0 < val_frac < 1.0:
        raise ValueError("val_frac must lie in (0, 1)")
    n, d = x.shape
    n_val = max(1, int(round(val_frac * n)))
    n_train = n - n_val
    if n_train < 1:
        raise TooShort("no training rows left after the validation split")

    n_params = hidden * d + 2 * hidden + 1
    if n_train < 10 * n_params:
        warnings.warn(
            f"{n_train} training rows for {n_params} parameters; "
            "10x is recommended",
            stacklevel=2,
        )

    in_mean = x[:n_train].mean(axis=0)
    in_std = x[:n_train].std(axis=0)
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
    w1 = rng.uniform(-1.0, 1.0, size=(hidden, d)) / np.sqrt(d)
    b1 = rng.uniform(-1.0, 1.0, size=hidden) / np.sqrt(d)
    w2 = rng.uniform(-1.0, 1.0, size=(1, hidden)) / np.sqrt(hidden)
    b2 = rng.uniform(-1.0, 1.0) / np.sqrt(hidden)
    theta = _pack(w1, b1, w2, b2)

    pred, _ = _forward_hidden(w1, b1, w2, b2, zt)
    res = pred - ynt
    sse = float(res @ res)
    lam = cfg.lam0
    best_theta = theta.copy()
    best_val = np.inf
    bad = 0

    for _ in range(cfg.max_iters):
        w1, b1, w2, b2 = _unpack(theta, hidden, d)
        jac = _jacobian_normalized(w1, b1, w2, zt)
        grad = jac.T @ res
        if np.max(np.abs(grad)) < cfg.min_grad:
            break
        gram = jac.T @ jac

        accepted = False
        while lam <= LAMBDA_MAX:
            try:
                step = _damped_step(gram, grad, lam)
            except np.linalg.LinAlgError:
                lam *= cfg.lam_up
                continue
            cand = theta + step
            cw1, cb1, cw2, cb2 = _unpack(cand, hidden, d)
            cpred, _ = _forward_hidden(cw1, cb1, cw2, cb2, zt)
            cres = cpred - ynt
            csse = float(cres @ cres)
            if np.isfinite(csse) and csse < sse:
                theta, res, sse = cand, cres, csse
                lam = max(lam * cfg.lam_down, 1e-20)
                accepted = True
                break
            lam *= cfg.lam_up
        if not accepted:
            raise SingularNormalEquations(
                "damping escalation exhausted without an acceptable step"
            )

        vw1, vb1, vw2, vb2 = _unpack(theta, hidden, d)
        vpred, _ = _forward_hidden(vw1, vb1, vw2, vb2, zv)
        vres = vpred - ynv
        val = float(vres @ vres) / len(ynv)
        if val < best_val:
            best_val = val
            best_theta = theta.copy()
            bad = 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break

    w1, b1, w2, b2 = _unpack(best_theta, hidden, d)
    return NarxModel(
        w1=w1,
        b1=b1,
        w2=w2,
        b2=b2,
        n_x=n_x,
        n_y=n_y,
        in_mean=in_mean,
        in_std=in_std,
        out_mean=out_mean,
        out_std=out_std,
    )


def predict_closed_loop(
    model: NarxModel, trace: Trace, y_init: np.ndarray
) -> np.ndarray:
    """Free-run temperature prediction with output feedback.

    `y_init` seeds the feedback buffer with the temperatures at indices
    t0-n_y .. t0-1 (time order), where t0 = max(n_x, n_y); from there every
    output-delay slot is filled with the model's own prediction and the
    trace's measured temperature is never read. Returns a series aligned
    with `trace.t`; entries before t0 are NaN.
    """
    y_init = np.asarray(y_init, dtype=float)
    if y_init.shape != (model.n_y,):
        raise DimensionMismatch(
            f"y_init has shape {y_init.shape}, model expects ({model.n_y},)"
        )
    t0 = max(model.n_x, model.n_y)
    n = len(trace)
    if n <= t0:
        raise TooShort(f"trace has {n} samples, need more than {t0}")
    base = trace.base_matrix()
    if base.shape[1] != model.n_inputs:
        raise DimensionMismatch(
            f"trace supplies {base.shape[1]} regressors, model expects {model.n_inputs}"
        )
    out = np.full(n, np.nan)
    # feedback buffer, oldest first
    buf = list(y_init)
    row = np.empty(model.w1.shape[1])
    m = model.n_inputs
    for t in range(t0, n):
        for k in range(model.n_x + 1):
            row[k * m : (k + 1) * m] = base[t - k]
        for k in range(1, model.n_y + 1):
            row[(model.n_x + 1) * m + k - 1] = buf[-k]
        pred = forward(model, row)
        out[t] = pred
        buf.append(pred)
        buf.pop(0)
    return out
