"""Flat text serialization for trained models.

One `key = value` pair per line, `#` comments allowed. Scalars use repr
so floats round-trip exactly; arrays are space-separated in row-major
order with their shapes recoverable from the dimension keys. The loader
is strict: a missing or unknown key is an error, never a default.
"""

from pathlib import Path

import numpy as np

from .evaluate import FittedN4sid
from .fir_rnn import FirRnnModel, LagGrid
from .n4sid import StateSpaceModel
from .narx import NarxModel

FORMAT = "thermid-model-1"

_N4SID_KEYS = frozenset(
    ["format", "kind", "order", "n_inputs", "dt", "regressors",
     "in_mean", "out_mean", "a", "b", "c", "d", "x0"]
)
_NARX_KEYS = frozenset(
    ["format", "kind", "hidden", "n_x", "n_y",
     "in_mean", "in_std", "out_mean", "out_std", "w1", "b1", "w2", "b2"]
)
_FIR_KEYS = frozenset(
    ["format", "kind", "units", "n_inputs",
     "n_lags", "horizon_s", "grid_rate_hz", "offsets_s",
     "in_mean", "in_std", "out_mean", "out_std",
     "w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h",
     "w_out", "b_out"]
)


def _vec(a: np.ndarray) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(a, dtype=float).ravel())


def save_model(path, fitted) -> Path:
    """Write a trained model; the kind is recorded in the file."""
    lines = [f"format = {FORMAT}"]
    if isinstance(fitted, FittedN4sid):
        m = fitted.model
        lines += [
            "kind = polynomial_n4sid",
            f"order = {m.order}",
            f"n_inputs = {m.m}",
            f"dt = {m.dt!r}",
            f"regressors = {','.join(fitted.regressors)}",
            f"in_mean = {_vec(fitted.in_mean)}",
            f"out_mean = {fitted.out_mean!r}",
            f"a = {_vec(m.a)}",
            f"b = {_vec(m.b)}",
            f"c = {_vec(m.c)}",
            f"d = {_vec(m.d)}",
            f"x0 = {_vec(m.x0)}",
        ]
    elif isinstance(fitted, NarxModel):
        lines += [
            "kind = hammerstein_narx",
            f"hidden = {fitted.hidden}",
            f"n_x = {fitted.n_x}",
            f"n_y = {fitted.n_y}",
            f"in_mean = {_vec(fitted.in_mean)}",
            f"in_std = {_vec(fitted.in_std)}",
            f"out_mean = {fitted.out_mean!r}",
            f"out_std = {fitted.out_std!r}",
            f"w1 = {_vec(fitted.w1)}",
            f"b1 = {_vec(fitted.b1)}",
            f"w2 = {_vec(fitted.w2)}",
            f"b2 = {fitted.b2!r}",
        ]
    elif isinstance(fitted, FirRnnModel):
        g = fitted.grid
        lines += [
            "kind = fir_rnn",
            f"units = {fitted.units}",
            f"n_inputs = {fitted.n_inputs}",
            f"n_lags = {g.n_lags}",
            f"horizon_s = {g.horizon_s!r}",
            f"grid_rate_hz = {g.rate_hz!r}",
            f"offsets_s = {_vec(np.array(g.offsets_s))}",
            f"in_mean = {_vec(fitted.in_mean)}",
            f"in_std = {_vec(fitted.in_std)}",
            f"out_mean = {fitted.out_mean!r}",
            f"out_std = {fitted.out_std!r}",
        ]
        lines += [
            f"{name} = {_vec(getattr(fitted, name))}"
            for name in ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")
        ]
        lines += [f"w_out = {_vec(fitted.w_out)}", f"b_out = {fitted.b_out!r}"]
    else:
        raise TypeError(f"not a serializable model: {type(fitted).__name__}")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def _parse_pairs(path: Path) -> dict:
    pairs = {}
    for i, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{i}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in pairs:
            raise ValueError(f"{path}:{i}: duplicate key {key!r}")
        pairs[key] = value.strip()
    return pairs


def _check_keys(pairs: dict, expected: frozenset, path: Path) -> None:
    unknown = set(pairs) - expected
    if unknown:
        raise ValueError(f"{path}: unknown keys {sorted(unknown)}")
    missing = expected - set(pairs)
    if missing:
        raise ValueError(f"{path}: missing keys {sorted(missing)}")


def _arr(pairs: dict, key: str, shape: tuple, path: Path) -> np.ndarray:
    vals = np.array([float(v) for v in pairs[key].split()])
    if vals.size != int(np.prod(shape)):
        raise ValueError(
            f"{path}: {key} holds {vals.size} values, expected {int(np.prod(shape))}"
        )
    return vals.reshape(shape)


def load_model(path):
    """Read back a model written by save_model; the kind picks the type."""
    path = Path(path)
    pairs = _parse_pairs(path)
    if pairs.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} file")
    kind = pairs.get("kind")
    if kind == "polynomial_n4sid":
        _check_keys(pairs, _N4SID_KEYS, path)
        n, m = int(pairs["order"]), int(pairs["n_inputs"])
        model = StateSpaceModel(
            a=_arr(pairs, "a", (n, n), path),
            b=_arr(pairs, "b", (n, m), path),
            c=_arr(pairs, "c", (1, n), path),
            d=_arr(pairs, "d", (1, m), path),
            x0=_arr(pairs, "x0", (n,), path),
            dt=float(pairs["dt"]),
        )
        return FittedN4sid(
            model=model,
            regressors=tuple(pairs["regressors"].split(",")),
            in_mean=_arr(pairs, "in_mean", (m,), path),
            out_mean=float(pairs["out_mean"]),
        )
    if kind == "hammerstein_narx":
        _check_keys(pairs, _NARX_KEYS, path)
        h = int(pairs["hidden"])
        n_x, n_y = int(pairs["n_x"]), int(pairs["n_y"])
        d = 10 * (n_x + 1) + n_y
        return NarxModel(
            w1=_arr(pairs, "w1", (h, d), path),
            b1=_arr(pairs, "b1", (h,), path),
            w2=_arr(pairs, "w2", (1, h), path),
            b2=float(pairs["b2"]),
            n_x=n_x,
            n_y=n_y,
            in_mean=_arr(pairs, "in_mean", (d,), path),
            in_std=_arr(pairs, "in_std", (d,), path),
            out_mean=float(pairs["out_mean"]),
            out_std=float(pairs["out_std"]),
        )
    if kind == "fir_rnn":
        _check_keys(pairs, _FIR_KEYS, path)
        u, m = int(pairs["units"]), int(pairs["n_inputs"])
        offsets = tuple(float(v) for v in pairs["offsets_s"].split())
        grid = LagGrid(
            n_lags=int(pairs["n_lags"]),
            horizon_s=float(pairs["horizon_s"]),
            rate_hz=float(pairs["grid_rate_hz"]),
            offsets_s=offsets,
        )
        return FirRnnModel(
            w_z=_arr(pairs, "w_z", (u, m), path),
            u_z=_arr(pairs, "u_z", (u, u), path),
            b_z=_arr(pairs, "b_z", (u,), path),
            w_r=_arr(pairs, "w_r", (u, m), path),
            u_r=_arr(pairs, "u_r", (u, u), path),
            b_r=_arr(pairs, "b_r", (u,), path),
            w_h=_arr(pairs, "w_h", (u, m), path),
            u_h=_arr(pairs, "u_h", (u, u), path),
            b_h=_arr(pairs, "b_h", (u,), path),
            w_out=_arr(pairs, "w_out", (1, u), path),
            b_out=float(pairs["b_out"]),
            grid=grid,
            in_mean=_arr(pairs, "in_mean", (m,), path),
            in_std=_arr(pairs, "in_std", (m,), path),
            out_mean=float(pairs["out_mean"]),
            out_std=float(pairs["out_std"]),
        )
    raise ValueError(f"{path}: unknown model kind {kind!r}")
