"""Cross-validated benchmarking of the three identification methods.

One protocol for all methods: models are trained per fold on the
development partition (the fold's validation block drives early stopping
where the trainer has one), then free-run over the untouched test
partition. The first 100 s of the test span are an initialization window:
the state-space model fits its initial state to the measured temperatures
there, the output-feedback model seeds its buffer, and the lag-window
model accumulates history. Scoring starts after that window for every
method, so the numbers stay comparable.
"""

import csv
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from time import perf_counter
from typing import Sequence

import numpy as np

from . import fir_rnn as fr
from . import n4sid
from . import narx
from .errors import DimensionMismatch, LengthMismatch, ThermidError, TooShort
from .features import SCORE_BURN_IN_S, RegressorSet, eq1_set, expand
from .trace import DataSplit, Fold, FoldPlan, Trace

METHODS = ("polynomial_n4sid", "hammerstein_narx", "fir_rnn")

PLOT_WINDOW_S = 2000.0
PRED_TIMING_RUNS = 3


@dataclass(frozen=True)
class MethodSpec:
    """A method name plus the hyperparameters its trainer needs.

    Only the fields of the named family are read; the rest keep their
    defaults. An empty `regressors` means the 34-term selected set.
    """

    method: str
    order: int = 5
    regressors: tuple[str, ...] = ()
    hidden: int = 3
    n_x: int = 2
    n_y: int = 2
    lm: narx.LmConfig = field(default_factory=narx.LmConfig)
    units: int = 1
    n_lags: int = 50
    horizon_s: float = 100.0
    nadam: fr.NadamConfig = field(default_factory=fr.NadamConfig)

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.order < 1:
            raise ValueError("order must be at least 1")
        if self.hidden < 1:
            raise ValueError("hidden must be at least 1")
        if self.n_x < 0 or self.n_y < 1:
            raise ValueError("need n_x >= 0 and n_y >= 1")
        if self.units < 1:
            raise ValueError("units must be at least 1")
        if self.n_lags < 2:
            raise ValueError("need at least two lags")
        # predictions must exist once the scoring window opens
        if not 0.0 < self.horizon_s <= SCORE_BURN_IN_S:
            raise ValueError(f"horizon_s must lie in (0, {SCORE_BURN_IN_S}]")

    def regressor_set(self) -> RegressorSet:
        if self.regressors:
            return RegressorSet.from_tokens(self.regressors)
        return eq1_set()


@dataclass(frozen=True, eq=False)
class FittedN4sid:
    """State-space model plus the feature expansion and centering it was fit with."""

    model: n4sid.StateSpaceModel
    regressors: tuple[str, ...]
    in_mean: np.ndarray
    out_mean: float

    def predict(self, trace: Trace, burn: int) -> np.ndarray:
        """Free-run over a trace, initial state fit to the first `burn` temps."""
        x = expand(trace, RegressorSet.from_tokens(self.regressors)) - self.in_mean
        x0 = n4sid.fit_x0_to_measurements(
            self.model, x, trace.temp - self.out_mean, n_fit=burn
        )
        return n4sid.simulate(self.model, x, x0=x0) + self.out_mean


@dataclass(frozen=True, eq=False)
class BenchmarkResult:
    """Per-fold test MSEs with averaged resource figures for one method."""

    method: str
    fold_mse: tuple[float, ...]
    avg_mse: float
    train_time_s: float
    predict_time_s: float
    n_params: int
    plot_fold: int
    plot_pred: np.ndarray

    def __post_init__(self) -> None:
        if not self.fold_mse:
            raise ValueError("need at least one fold")
        if abs(self.avg_mse - float(np.mean(self.fold_mse))) > 1e-12:
            raise ValueError("avg_mse must equal the mean of fold_mse")
        if not 0 <= self.plot_fold < len(self.fold_mse):
            raise ValueError("plot_fold out of range")


def mse(predicted: np.ndarray, measured: np.ndarray) -> float:
    """Mean squared difference in degC squared."""
    p = np.asarray(predicted, dtype=float).reshape(-1)
    m = np.asarray(measured, dtype=float).reshape(-1)
    if p.shape != m.shape or p.size < 1:
        raise LengthMismatch(
            f"series lengths {p.size} and {m.size} must match and be at least 1"
        )
    return float(np.mean((p - m) ** 2))


def count_params(model) -> int:
    """Free scalars of a trained model, biases and initial state included."""
    if isinstance(model, n4sid.StateSpaceModel):
        n, m = model.order, model.m
        return n * n + n * m + n + m + n
    if isinstance(model, narx.NarxModel):
        return model.w1.size + model.b1.size + model.w2.size + 1
    if isinstance(model, fr.FirRnnModel):
        return model.n_params
    raise TypeError(f"not a trained model: {type(model).__name__}")


def _ordered_rows(n_rows: int, t_first: int, fold: Fold) -> tuple[np.ndarray, float]:
    """Row order putting the fold's validation rows last, plus their fraction.

    Rows are indexed by target time t_first + i; a row belongs to the
    validation tail when its target lies inside the fold's block.
    """
    times = t_first + np.arange(n_rows)
    val = (times >= fold.val_start) & (times < fold.val_stop)
    n_val = int(val.sum())
    if n_val == 0:
        raise TooShort("validation block has no usable rows")
    if n_val == n_rows:
        raise TooShort("no training rows outside the validation block")
    order = np.concatenate([np.nonzero(~val)[0], np.nonzero(val)[0]])
    return order, n_val / n_rows


def _train_fold(spec: MethodSpec, dev: Trace, fold: Fold, seed: int):
    if spec.method == "polynomial_n4sid":
        rset = spec.regressor_set()
        x = expand(dev, rset)
        y = dev.temp
        ranges = fold.train_ranges
        xm = np.concatenate([x[a:b] for a, b in ranges]).mean(axis=0)
        ym = float(np.concatenate([y[a:b] for a, b in ranges]).mean())
        model = n4sid.identify(
            [x[a:b] - xm for a, b in ranges],
            [y[a:b] - ym for a, b in ranges],
            order=spec.order,
        )
        return FittedN4sid(
            model=model, regressors=rset.tokens(), in_mean=xm, out_mean=ym
        )
    if spec.method == "hammerstein_narx":
        x, y = narx.assemble_open_loop(dev, spec.n_x, spec.n_y)
        order, vf = _ordered_rows(len(y), max(spec.n_x, spec.n_y), fold)
        return narx.train_lm(
            x[order], y[order], spec.n_x, spec.n_y, spec.hidden,
            config=spec.lm, val_frac=vf, seed=seed,
        )
    grid = fr.lag_grid(spec.n_lags, spec.horizon_s, dev.rate_hz)
    x, y = fr.assemble_windows(dev, grid)
    order, vf = _ordered_rows(len(y), int(grid.sample_offsets()[0]), fold)
    return fr.train_nadam(
        x[order], y[order], spec.units, grid,
        config=spec.nadam, val_frac=vf, seed=seed,
    )


def _predict_test(spec: MethodSpec, fitted, test: Trace, burn: int) -> np.ndarray:
    if spec.method == "polynomial_n4sid":
        return fitted.predict(test, burn)
    if spec.method == "hammerstein_narx":
        t0 = max(fitted.n_x, fitted.n_y)
        y_init = test.temp[t0 - fitted.n_y : t0]
        return narx.predict_closed_loop(fitted, test, y_init)
    return fr.predict(fitted, test)


def _fitted_model(spec: MethodSpec, fitted):
    return fitted.model if spec.method == "polynomial_n4sid" else fitted


def _eval_fold(task):
    spec, dev, test, fold, fold_idx, seed, burn = task
    try:
        start = perf_counter()
        fitted = _train_fold(spec, dev, fold, seed)
        train_time = perf_counter() - start
        runs = []
        for _ in range(PRED_TIMING_RUNS):
            start = perf_counter()
            pred = _predict_test(spec, fitted, test, burn)
            runs.append(perf_counter() - start)
        fold_mse = mse(pred[burn:], test.temp[burn:])
        n_params = count_params(_fitted_model(spec, fitted))
    except ThermidError as e:
        raise type(e)(f"{spec.method} fold {fold_idx}: {e}") from e
    return fold_mse, train_time, statistics.median(runs), n_params, pred


def crossval(
    spec: MethodSpec,
    split: DataSplit,
    folds: FoldPlan,
    seed: int = 0,
    jobs: int = 1,
) -> BenchmarkResult:
    """Train per fold on dev, free-run the shared test set, aggregate.

    Per-fold seeds are spawned from `seed`, so results are reproducible
    for any `jobs`; `jobs > 1` evaluates folds in separate processes. The
    kept prediction series is the fold whose MSE is closest to the
    average.
    """
    if folds.n != len(split.dev):
        raise DimensionMismatch(
            f"fold plan covers {folds.n} samples, dev has {len(split.dev)}"
        )
    burn = int(round(SCORE_BURN_IN_S * split.test.rate_hz))
    if len(split.test) <= burn:
        raise TooShort(
            f"test span of {len(split.test)} samples is all initialization window"
        )
    children = np.random.SeedSequence(seed).spawn(folds.k)
    tasks = [
        (spec, split.dev, split.test, fold, i, int(children[i].generate_state(1)[0]), burn)
        for i, fold in enumerate(folds.folds)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_eval_fold, tasks))
    else:
        rows = [_eval_fold(t) for t in tasks]

    fold_mse = tuple(r[0] for r in rows)
    avg = float(np.mean(fold_mse))
    counts = {r[3] for r in rows}
    if len(counts) != 1:
        raise ValueError(f"parameter count varies across folds: {sorted(counts)}")
    plot_fold = int(np.argmin([abs(v - avg) for v in fold_mse]))
    return BenchmarkResult(
        method=spec.method,
        fold_mse=fold_mse,
        avg_mse=avg,
        train_time_s=float(np.mean([r[1] for r in rows])),
        predict_time_s=float(np.mean([r[2] for r in rows])),
        n_params=counts.pop(),
        plot_fold=plot_fold,
        plot_pred=rows[plot_fold][4],
    )


def train_single(spec: MethodSpec, trace: Trace, seed: int = 0, val_frac: float = 0.2):
    """One model fit to a whole trace, the tail fraction held out for stopping.

    Returns a FittedN4sid, NarxModel, or FirRnnModel depending on spec.method.
    """
    if not 0.0 < val_frac < 1.0:
        raise ValueError("val_frac must lie in (0, 1)")
    n = len(trace)
    v0 = int(round((1.0 - val_frac) * n))
    fold = Fold(val_start=v0, val_stop=n, n=n)
    return _train_fold(spec, trace, fold, seed)


def _fmt(v: float) -> str:
    return repr(float(v))


def _svg_path(points: Sequence[tuple[float, float]]) -> str:
    return " ".join(f"{x:.2f},{y:.2f}" for x, y in points)


SVG_COLORS = ("#d62728", "#1f77b4", "#2ca02c", "#9467bd")


def _render_svg(
    t: np.ndarray, measured: np.ndarray, series: Sequence[tuple[str, np.ndarray]]
) -> str:
    """Line plot of measured vs predicted temperature, fixed 880x440 canvas."""
    width, height = 880.0, 440.0
    left, right, top, bottom = 60.0, 20.0, 24.0, 52.0
    pw, ph = width - left - right, height - top - bottom
    finite = [measured[np.isfinite(measured)]]
    finite += [y[np.isfinite(y)] for _, y in series if np.isfinite(y).any()]
    lo = min(float(a.min()) for a in finite if a.size)
    hi = max(float(a.max()) for a in finite if a.size)
    if hi - lo < 1e-9:
        hi = lo + 1.0
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    t0, t1 = float(t[0]), float(t[-1])

    def sx(v: float) -> float:
        return left + (v - t0) / (t1 - t0) * pw

    def sy(v: float) -> float:
        return top + (hi - v) / (hi - lo) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width:.0f} {height:.0f}" '
        f'font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{width:.0f}" height="{height:.0f}" fill="white"/>',
        f'<rect x="{left:.0f}" y="{top:.0f}" width="{pw:.0f}" height="{ph:.0f}" '
        'fill="none" stroke="#999"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        xv = t0 + frac * (t1 - t0)
        yv = lo + frac * (hi - lo)
        parts.append(
            f'<text x="{sx(xv):.2f}" y="{height - 34:.2f}" '
            f'text-anchor="middle">{xv:.0f}</text>'
        )
        parts.append(
            f'<text x="{left - 6:.2f}" y="{sy(yv) + 4:.2f}" '
            f'text-anchor="end">{yv:.1f}</text>'
        )
    parts.append(
        f'<text x="{left + pw / 2:.2f}" y="{height - 12:.2f}" '
        'text-anchor="middle">time [s]</text>'
    )
    parts.append(
        f'<text x="14" y="{top + ph / 2:.2f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {top + ph / 2:.2f})">temperature [degC]</text>'
    )

    def polylines(y: np.ndarray, color: str, dash: str = "") -> None:
        run: list[tuple[float, float]] = []
        for tv, yv in zip(t, y):
            if np.isfinite(yv):
                run.append((sx(float(tv)), sy(float(yv))))
            elif run:
                parts.append(
                    f'<polyline points="{_svg_path(run)}" fill="none" '
                    f'stroke="{color}" stroke-width="1.5"{dash}/>'
                )
                run = []
        if run:
            parts.append(
                f'<polyline points="{_svg_path(run)}" fill="none" '
                f'stroke="{color}" stroke-width="1.5"{dash}/>'
            )

    polylines(measured, "#444444", ' stroke-dasharray="4 3"')
    for j, (_, y) in enumerate(series):
        polylines(y, SVG_COLORS[j % len(SVG_COLORS)])

    ly = top + 14
    parts.append(
        f'<line x1="{left + 8:.0f}" y1="{ly:.0f}" x2="{left + 32:.0f}" y2="{ly:.0f}" '
        'stroke="#444444" stroke-width="1.5" stroke-dasharray="4 3"/>'
    )
    parts.append(f'<text x="{left + 38:.0f}" y="{ly + 4:.0f}">measured</text>')
    for j, (name, _) in enumerate(series):
        ly += 18
        color = SVG_COLORS[j % len(SVG_COLORS)]
        parts.append(
            f'<line x1="{left + 8:.0f}" y1="{ly:.0f}" x2="{left + 32:.0f}" y2="{ly:.0f}" '
            f'stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(f'<text x="{left + 38:.0f}" y="{ly + 4:.0f}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _markdown(k: int, rows) -> str:
    """Accuracy and resource tables; rows are
    (method, fold_vals, avg, train_s, pred_s, n_params)."""
    lines = ["# Benchmark results", "", "## Test MSE [degC^2] per fold", ""]
    header = ["method"] + [f"fold {i + 1}" for i in range(k)] + ["avg"]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    for method, fold_vals, avg, _, _, _ in rows:
        cells = [method] + [f"{v:.4g}" for v in fold_vals] + [f"{avg:.4g}"]
        lines.append("| " + " | ".join(cells) + " |")
    lines += ["", "## Resources (averages over folds)", ""]
    lines.append("| method | training time [s] | prediction time [s] | parameters |")
    lines.append("|---|---|---|---|")
    for method, _, _, train_s, pred_s, n_params in rows:
        lines.append(f"| {method} | {train_s:.3g} | {pred_s:.3g} | {n_params} |")
    lines.append("")
    return "\n".join(lines)


def report(
    results: Sequence[BenchmarkResult],
    test: Trace,
    out_dir: str | Path,
    window_s: float = PLOT_WINDOW_S,
) -> tuple[Path, ...]:
    """Write the benchmark bundle and return the paths written.

    `results.csv` holds the per-fold and average MSEs plus parameter
    counts; wall-clock timings go to `timings.csv` so the accuracy table
    stays identical across repeat runs. `pred_<method>.csv` and the SVG
    plot cover the last `window_s` seconds of the test set (less when the
    test set is shorter).
    """
    if not results:
        raise ValueError("need at least one result")
    ks = {len(r.fold_mse) for r in results}
    if len(ks) != 1:
        raise ValueError(f"results disagree on fold count: {sorted(ks)}")
    k = ks.pop()
    for r in results:
        if r.plot_pred.shape != (len(test),):
            raise DimensionMismatch(
                f"{r.method} predictions do not align with the test trace"
            )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    n_win = min(int(round(window_s * test.rate_hz)), len(test))
    w0 = len(test) - n_win
    t_win = test.t[w0:]

    path = out / "results.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["method"] + [f"fold_{i + 1}" for i in range(k)] + ["avg_mse", "n_params"]
        )
        for r in results:
            writer.writerow(
                [r.method] + [_fmt(v) for v in r.fold_mse]
                + [_fmt(r.avg_mse), str(r.n_params)]
            )
    written.append(path)

    path = out / "timings.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "train_time_s", "predict_time_s"])
        for r in results:
            writer.writerow([r.method, _fmt(r.train_time_s), _fmt(r.predict_time_s)])
    written.append(path)

    path = out / "results.md"
    rows = [
        (r.method, list(r.fold_mse), r.avg_mse, r.train_time_s,
         r.predict_time_s, r.n_params)
        for r in results
    ]
    path.write_text(_markdown(k, rows))
    written.append(path)

    for r in results:
        path = out / f"pred_{r.method}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "measured", "predicted"])
            for i in range(w0, len(test)):
                writer.writerow(
                    [_fmt(test.t[i]), _fmt(test.temp[i]), _fmt(r.plot_pred[i])]
                )
        written.append(path)

    svg = _render_svg(
        t_win,
        test.temp[w0:],
        [(r.method, r.plot_pred[w0:]) for r in results],
    )
    path = out / "pred_window.svg"
    path.write_text(svg)
    written.append(path)
    return tuple(written)


def regenerate(out_dir: str | Path) -> tuple[Path, ...]:
    """Re-render results.md and pred_window.svg from the stored CSV bundle."""
    out = Path(out_dir)
    with open(out / "results.csv", newline="") as fh:
        rows_csv = list(csv.reader(fh))
    if len(rows_csv) < 2:
        raise ValueError("results.csv holds no data rows")
    k = len(rows_csv[0]) - 3
    timings = {}
    with open(out / "timings.csv", newline="") as fh:
        for row in list(csv.reader(fh))[1:]:
            timings[row[0]] = (float(row[1]), float(row[2]))
    rows = []
    series = []
    t_win = None
    measured = None
    for row in rows_csv[1:]:
        method = row[0]
        fold_vals = [float(v) for v in row[1 : 1 + k]]
        train_s, pred_s = timings.get(method, (float("nan"), float("nan")))
        rows.append((method, fold_vals, float(row[1 + k]), train_s, pred_s,
                     int(row[2 + k])))
        with open(out / f"pred_{method}.csv", newline="") as fh:
            pred_rows = list(csv.reader(fh))[1:]
        t_win = np.array([float(r[0]) for r in pred_rows])
        measured = np.array([float(r[1]) for r in pred_rows])
        series.append((method, np.array([float(r[2]) for r in pred_rows])))

    md_path = out / "results.md"
    md_path.write_text(_markdown(k, rows))
    svg_path = out / "pred_window.svg"
    svg_path.write_text(_render_svg(t_win, measured, series))
    return (md_path, svg_path)
