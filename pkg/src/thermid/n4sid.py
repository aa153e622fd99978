"""Subspace identification (N4SID) of discrete-time state-space models.

Textbook time-domain N4SID: block-Hankel matrices of past/future inputs and
outputs, oblique projection of the future outputs onto the past data along
the future inputs, SVD of the projection, state sequences from the dominant
directions, and a final least-squares solve for (A, B, C, D). All heavy
algebra runs on one data Gram matrix, so cost is a single tall matmul plus
small solves regardless of series length.

The identified model is raw: no input/output centering happens here. Flows
that need offset handling (plant temperatures sit tens of degrees above
zero) subtract training means before calling identify and add them back
around simulate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, RankDeficient, TooShort

RIDGE_DEFAULT = 1e-8


@dataclass(frozen=True)
class StateSpaceModel:
    """x(t+1) = A x(t) + B u(t); y(t) = C x(t) + D u(t)."""

    a: np.ndarray  # (n, n)
    b: np.ndarray  # (n, m)
    c: np.ndarray  # (1, n)
    d: np.ndarray  # (1, m)
    x0: np.ndarray  # (n,)
    dt: float = 1.0
    input_set: object | None = None  # RegressorSet when built from trace features

    def __post_init__(self) -> None:
        n = self.a.shape[0]
        if self.a.shape != (n, n) or self.b.shape[0] != n:
            raise DimensionMismatch("A must be square and match B rows")
        if self.c.shape != (1, n) or self.d.shape != (1, self.b.shape[1]):
            raise DimensionMismatch("C/D shapes inconsistent with A/B")
        if self.x0.shape != (n,):
            raise DimensionMismatch("x0 must be an n-vector")

    @property
    def order(self) -> int:
        return int(self.a.shape[0])

    @property
    def m(self) -> int:
        return int(self.b.shape[1])

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.a))))


@dataclass(frozen=True)
class OrderSweepResult:
    orders: tuple[int, ...]
    mse: tuple[float, ...]  # nan marks a failed order
    best_order: int


def _as_segments(
    inputs, output
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Normalize to a list of (U, y) contiguous segments."""
    if isinstance(inputs, np.ndarray):
        inputs, output = [inputs], [output]
    segs = []
    for u, y in zip(inputs, output, strict=True):
        u = np.asarray(u, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if u.ndim != 2 or u.shape[0] != y.shape[0]:
            raise DimensionMismatch(
                f"segment shapes disagree: inputs {u.shape}, output {y.shape}"
            )
        segs.append((u, y))
    return segs


def _ridge_solve(gram: np.ndarray, rhs: np.ndarray, lam: float) -> np.ndarray:
    """Solve (gram + lam*scale*I) x = rhs with scale from the mean diagonal."""
    k = gram.shape[0]
    scale = float(np.trace(gram)) / k if k else 1.0
    if scale <= 0.0:
        scale = 1.0
    return np.linalg.solve(gram + lam * scale * np.eye(k), rhs)


def _hankel_rows(arr: np.ndarray, n_blocks: int, j: int) -> np.ndarray:
    """Stack n_blocks shifted windows: rows r*m..(r+1)*m hold arr[r:r+j].T."""
    cols = arr.shape[1]
    out = np.empty((n_blocks * cols, j))
    for r in range(n_blocks):
        out[r * cols : (r + 1) * cols] = arr[r : r + j].T
    return out


def _fix_svd_signs(vecs: np.ndarray) -> np.ndarray:
    """Make the first nonzero component of each column positive (determinism)."""
    out = vecs.copy()
    for col in range(out.shape[1]):
        v = out[:, col]
        nz = np.flatnonzero(np.abs(v) > 1e-12)
        if nz.size and v[nz[0]] < 0:
            out[:, col] = -v
    return out


def identify(
    inputs,
    output,
    order: int,
    horizon: int | None = None,
    ridge: float = RIDGE_DEFAULT,
) -> StateSpaceModel:
    """Identify a state-space model of the given order from input/output data.

    Args:
        inputs: (T, m) array or list of contiguous segments (multi-segment
            training builds Hankel columns per segment and pools them).
        output: (T,) array or matching list.
        order: state dimension n.
        horizon: block rows i per Hankel half; defaults to 2*order. Must
            exceed the order.
        ridge: relative Tikhonov term applied to every internal solve.

    Raises TooShort when the pooled data cannot fill the Hankel matrices and
    RankDeficient when the projection does not support the requested order.
    Eigenvalues of the identified A with modulus >= 1 are radially
    contracted to 0.999 so free-run simulation cannot diverge.

    After the state-recursion solve, B, D, and the initial state are
    re-estimated by least squares on the simulated response with (A, C)
    held fixed; that problem is linear and directly minimizes free-run
    error. The recursion-based B, D are unreliable under slowly varying
    inputs (workload traces hold each configuration for tens of samples),
    while the re-estimate is exact whenever the recursion one is.
    """
    segs = _as_segments(inputs, output)
    m = segs[0][0].shape[1]
    i = 2 * order if horizon is None else int(horizon)
    if i <= order:
        raise ValueError(f"horizon {i} must exceed order {order}")
    usable = [(u, y) for u, y in segs if u.shape[0] >= 2 * i]
    if not usable:
        raise TooShort(f"no segment has the 2*i = {2 * i} samples required")
    j_total = sum(u.shape[0] - 2 * i + 1 for u, _ in usable)
    if j_total < 2 * i * (m + 1) + order:
        raise TooShort(
            f"pooled Hankel columns {j_total} < 2*i*(m+1)+n = {2 * i * (m + 1) + order}"
        )

    d_rows = 2 * i * (m + 1)
    r_gram = np.zeros((d_rows, d_rows))
    for u, y in usable:
        j = u.shape[0] - 2 * i + 1
        z = np.vstack(
            [_hankel_rows(u, 2 * i, j), _hankel_rows(y.reshape(-1, 1), 2 * i, j)]
        )
        r_gram += z @ z.T

    iu = 2 * i * m  # output rows sit below all input rows
    idx_up = np.arange(0, i * m)
    idx_uf = np.arange(i * m, 2 * i * m)
    idx_upp = np.arange(0, (i + 1) * m)
    idx_ufm = np.arange((i + 1) * m, 2 * i * m)
    idx_uii = np.arange(i * m, (i + 1) * m)
    idx_yp = iu + np.arange(0, i)
    idx_yf = iu + np.arange(i, 2 * i)
    idx_ypp = iu + np.arange(0, i + 1)
    idx_yfm = iu + np.arange(i + 1, 2 * i)
    idx_yii = iu + np.arange(i, i + 1)
    idx_wp = np.concatenate([idx_up, idx_yp])
    idx_wpp = np.concatenate([idx_upp, idx_ypp])

    def sub(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        return r_gram[np.ix_(rows, cols)]

    def perp_gram(a_idx: np.ndarray, b_idx: np.ndarray, f_idx: np.ndarray) -> np.ndarray:
        """<a, b> after projecting both onto the orthogonal complement of f."""
        coef = _ridge_solve(sub(f_idx, f_idx), sub(f_idx, b_idx), ridge)
        return sub(a_idx, b_idx) - sub(a_idx, f_idx) @ coef

    def oblique_coef(yf: np.ndarray, wp: np.ndarray, uf: np.ndarray) -> np.ndarray:
        """L with (Yf /_{Uf} Wp) = L @ Wp."""
        g_ww = perp_gram(wp, wp, uf)
        g_yw = perp_gram(yf, wp, uf)
        return _ridge_solve(g_ww, g_yw.T, ridge).T

    l_i = oblique_coef(idx_yf, idx_wp, idx_uf)  # (i, (m+1) i)
    # O O^T through the Gram of Wp
    o_ot = l_i @ sub(idx_wp, idx_wp) @ l_i.T
    o_ot = 0.5 * (o_ot + o_ot.T)
    eigval, eigvec = np.linalg.eigh(o_ot)
    orr = np.argsort(eigval)[::-1]
    eigval = np.clip(eigval[orr], 0.0, None)
    eigvec = _fix_svd_signs(eigvec[:, orr])
    sv = np.sqrt(eigval)  # singular values of the projection
    if sv.shape[0] < order or sv[order - 1] <= sv[0] * 1e-10 or sv[0] == 0.0:
        raise RankDeficient(
            f"projection supports rank < {order} (singular values {sv[: order]})"
        )
    u1 = eigvec[:, :order]
    s1_sqrt = np.sqrt(sv[:order])
    gamma = u1 * s1_sqrt  # observability estimate, (i, n)
    # state coefficients: X_i = K_i @ Wp
    k_i = (u1 / s1_sqrt).T @ l_i  # (n, (m+1) i)

    l_im1 = oblique_coef(idx_yfm, idx_wpp, idx_ufm)  # (i-1, (m+1)(i+1))
    gamma_up = gamma[:-1]  # (i-1, n)
    pinv_gamma_up = _ridge_solve(gamma_up.T @ gamma_up, gamma_up.T, ridge)
    k_ip = pinv_gamma_up @ l_im1  # (n, (m+1)(i+1))

    # Regression [X_{i+1}; Y_i|i] = M [X_i; U_i|i], all Grams from r_gram.
    def cross(ka, rows_a, kb, rows_b) -> np.ndarray:
        return ka @ sub(rows_a, rows_b) @ kb.T

    phi_phi = np.block(
        [
            [cross(k_i, idx_wp, k_i, idx_wp), k_i @ sub(idx_wp, idx_uii)],
            [sub(idx_uii, idx_wp) @ k_i.T, sub(idx_uii, idx_uii)],
        ]
    )
    theta_phi = np.block(
        [
            [cross(k_ip, idx_wpp, k_i, idx_wp), k_ip @ sub(idx_wpp, idx_uii)],
            [sub(idx_yii, idx_wp) @ k_i.T, sub(idx_yii, idx_uii)],
        ]
    )
    coef = _ridge_solve(phi_phi, theta_phi.T, ridge).T
    n = order
    a = _stabilize(coef[:n, :n])
    c = coef[n : n + 1, :n]
    b, d, x0 = _refit_b_d_x0(a, c, usable, ridge)
    return StateSpaceModel(a=a, b=b, c=c, d=d, x0=x0)


def _refit_b_d_x0(
    a: np.ndarray,
    c: np.ndarray,
    segs: list[tuple[np.ndarray, np.ndarray]],
    ridge: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Least squares for (B, D, per-segment x0) on the simulated response.

    With A and C fixed the free-run output is linear in B, D, and each
    segment's initial state. Returns the first segment's x0.
    """
    n = a.shape[0]
    m = segs[0][0].shape[1]
    n_seg = len(segs)
    cols = n * m + m + n * n_seg
    phi = np.zeros((sum(u.shape[0] for u, _ in segs), cols))
    tgt = np.empty(phi.shape[0])
    row0 = 0
    cvec = c[0]
    for s, (u, y) in enumerate(segs):
        t_len = u.shape[0]
        q = np.zeros((m, n))  # q[j] = sum_{s<t} C A^(t-1-s) u_j(s)
        k_row = cvec.copy()  # C A^t
        x0_cols = slice(n * m + m + s * n, n * m + m + (s + 1) * n)
        for t in range(t_len):
            phi[row0 + t, : n * m] = q.reshape(-1)
            phi[row0 + t, n * m : n * m + m] = u[t]
            phi[row0 + t, x0_cols] = k_row
            q = q @ a + np.outer(u[t], cvec)
            k_row = k_row @ a
        tgt[row0 : row0 + t_len] = y
        row0 += t_len
    theta = _ridge_solve(phi.T @ phi, phi.T @ tgt, ridge)
    b = theta[: n * m].reshape(m, n).T
    d = theta[n * m : n * m + m].reshape(1, m)
    x0 = theta[n * m + m : n * m + m + n]
    return b, d, x0


def _stabilize(a: np.ndarray) -> np.ndarray:
    """Radially contract eigenvalues with modulus >= 1 to 0.999."""
    lam, vec = np.linalg.eig(a)
    mod = np.abs(lam)
    if np.all(mod < 1.0):
        return a
    lam = np.where(mod >= 1.0, 0.999 * lam / mod, lam)
    try:
        a_new = vec @ np.diag(lam) @ np.linalg.inv(vec)
        return np.real(a_new)
    except np.linalg.LinAlgError:
        # defective A: fall back to uniform radial scaling
        return a * (0.999 / mod.max())


def _fit_x0(
    a: np.ndarray,
    b: np.ndarray,
    c: np.ndarray,
    d: np.ndarray,
    u: np.ndarray,
    y: np.ndarray,
    ridge: float,
) -> np.ndarray:
    """Least-squares initial state from the free+forced response decomposition."""
    n = a.shape[0]
    t = u.shape[0]
    forced = simulate(
        StateSpaceModel(a=a, b=b, c=c, d=d, x0=np.zeros(n)), u
    )
    resid = y - forced
    phi = np.empty((t, n))
    row = c.copy()
    for k in range(t):
        phi[k] = row[0]
        row = row @ a
    gram = phi.T @ phi
    return _ridge_solve(gram, phi.T @ resid, ridge)


def simulate(
    model: StateSpaceModel, inputs: np.ndarray, x0: np.ndarray | None = None
) -> np.ndarray:
    """Free-run simulation; never reads measured output."""
    u = np.asarray(inputs, dtype=np.float64)
    if u.ndim != 2 or u.shape[1] != model.m:
        raise DimensionMismatch(
            f"inputs must be (T, {model.m}), got {u.shape}"
        )
    x = model.x0.copy() if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    if x.shape != (model.order,):
        raise DimensionMismatch(f"x0 must have shape ({model.order},)")
    bu = u @ model.b.T  # (T, n)
    du = u @ model.d.T  # (T, 1)
    y = np.empty(u.shape[0])
    a = model.a
    cvec = model.c[0]
    for t in range(u.shape[0]):
        y[t] = cvec @ x + du[t, 0]
        x = a @ x + bu[t]
    return y


def steady_x0(model: StateSpaceModel, u0: np.ndarray) -> np.ndarray:
    """Equilibrium state for a constant input row (leak-free initialization)."""
    n = model.order
    return np.linalg.solve(np.eye(n) - model.a, model.b @ np.asarray(u0))


def fit_x0_to_measurements(
    model: StateSpaceModel,
    inputs: np.ndarray,
    measured: np.ndarray,
    n_fit: int | None = None,
    ridge: float = RIDGE_DEFAULT,
) -> np.ndarray:
    """Estimate x0 from the first n_fit samples of a measured response."""
    u = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(measured, dtype=np.float64).reshape(-1)
    if n_fit is not None:
        u, y = u[:n_fit], y[:n_fit]
    return _fit_x0(model.a, model.b, model.c, model.d, u, y, ridge)


def order_sweep(
    dev,
    regressor_set,
    orders: Sequence[int],
    folds,
    ridge: float = RIDGE_DEFAULT,
) -> OrderSweepResult:
    """Mean validation MSE per model order over contiguous CV folds.

    All orders share one horizon (2 * max order) so errors are comparable.
    Validation is free-run: simulate the whole dev span from a steady-state
    initial condition and score the held-out block, skipping the 100 s
    burn-in prefix where that initial condition is unreliable. Failed
    identifications are marked with NaN rather than aborting the sweep.
    """
    from .features import SCORE_BURN_IN_S, expand  # avoids a module cycle

    x_all = expand(dev, regressor_set)
    y_all = dev.temp.copy()
    burn_in = int(round(SCORE_BURN_IN_S * dev.rate_hz))
    orders = [int(o) for o in orders]
    horizon = 2 * max(orders)
    means = []
    for n in orders:
        fold_mse = []
        for fold in folds.folds:
            ranges = fold.train_ranges
            xm = np.concatenate([x_all[a:b] for a, b in ranges]).mean(axis=0)
            ym = float(np.concatenate([y_all[a:b] for a, b in ranges]).mean())
            try:
                model = identify(
                    [x_all[a:b] - xm for a, b in ranges],
                    [y_all[a:b] - ym for a, b in ranges],
                    order=n,
                    horizon=horizon,
                    ridge=ridge,
                )
                xc = x_all - xm
                yhat = simulate(model, xc, x0=steady_x0(model, xc[0])) + ym
                v = fold.val_indices()
                v = v[v >= burn_in]
                fold_mse.append(float(np.mean((yhat[v] - y_all[v]) ** 2)))
            except (RankDeficient, TooShort):
                fold_mse.append(np.nan)
        means.append(float(np.mean(fold_mse)))
    finite = [(mse, n) for mse, n in zip(means, orders) if np.isfinite(mse)]
    if not finite:
        raise RankDeficient("every order failed to identify")
    best = min(finite)[1]
    return OrderSweepResult(orders=tuple(orders), mse=tuple(means), best_order=best)
