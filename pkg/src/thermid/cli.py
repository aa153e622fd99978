"""Command-line front end.

Subcommands:
  simulate          synthesize a workload trace from the RC plant
  features search   run the regressor search pipeline on a trace
  train METHOD      fit one model to a trace and save it
  crossval          k-fold benchmark of the prediction methods
  report            re-render report files from stored run output

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluate, features, fir_rnn, narx, plant, serialize, trace as tr
from .errors import ThermidError
from .evaluate import METHODS, MethodSpec

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

PRESETS = ("bench-1h", "bench-6h")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Parser that reports usage errors through the exit-code contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


@dataclass(frozen=True)
class RunConfig:
    """Flat benchmark-run description, loadable from a key = value file."""

    duration_s: float = 3600.0
    rate_hz: float = 1.0
    noise_std: float = 0.33
    seed: int = 0
    k_folds: int = 10
    jobs: int = 0
    out_dir: str = "bench_out"
    methods: tuple[str, ...] = METHODS
    t_amb_c: float | None = None
    throttle_limit_c: float | None = None
    n4sid_order: int = 5
    narx_hidden: int = 3
    narx_n_x: int = 2
    narx_n_y: int = 2
    fir_units: int = 1
    fir_n_lags: int = 50
    fir_horizon_s: float = 100.0

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        if self.rate_hz <= 0:
            raise ValueError("rate_hz must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.k_folds < 1:
            raise ValueError("k_folds must be at least 1")
        if self.jobs < 0:
            raise ValueError("jobs must be non-negative")
        if not self.methods:
            raise ValueError("methods must not be empty")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")
        if len(set(self.methods)) != len(self.methods):
            raise ValueError("methods must not repeat")


_FLOAT_KEYS = {"duration_s", "rate_hz", "noise_std", "fir_horizon_s"}
_OPT_FLOAT_KEYS = {"t_amb_c", "throttle_limit_c"}
_INT_KEYS = {
    "seed",
    "k_folds",
    "jobs",
    "n4sid_order",
    "narx_hidden",
    "narx_n_x",
    "narx_n_y",
    "fir_units",
    "fir_n_lags",
}


def parse_config(path: str | Path) -> RunConfig:
    """Read a RunConfig from a key = value file.

    Blank lines and # comments are skipped.  Unknown or repeated keys are
    rejected.  out_dir is resolved relative to the file's directory.
    """
    path = Path(path)
    values: dict[str, object] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key in values:
                raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
            if key in _FLOAT_KEYS:
                values[key] = float(value)
            elif key in _OPT_FLOAT_KEYS:
                values[key] = float(value)
            elif key in _INT_KEYS:
                values[key] = int(value)
            elif key == "out_dir":
                out = Path(value)
                if not out.is_absolute():
                    out = path.parent / out
                values[key] = str(out)
            elif key == "methods":
                values[key] = tuple(t.strip() for t in value.split(",") if t.strip())
            else:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
    return RunConfig(**values)


def preset_config(name: str) -> RunConfig:
    if name == "bench-1h":
        return RunConfig(duration_s=3600.0, k_folds=10, out_dir="bench_1h")
    if name == "bench-6h":
        return RunConfig(duration_s=21600.0, k_folds=4, out_dir="bench_6h")
    raise ValueError(f"unknown preset {name!r}")


def _method_spec(method: str, cfg: RunConfig) -> MethodSpec:
    if method == "polynomial_n4sid":
        return MethodSpec(method=method, order=cfg.n4sid_order)
    if method == "hammerstein_narx":
        return MethodSpec(
            method=method,
            order=cfg.n4sid_order,
            hidden=cfg.narx_hidden,
            n_x=cfg.narx_n_x,
            n_y=cfg.narx_n_y,
        )
    return MethodSpec(
        method=method,
        units=cfg.fir_units,
        n_lags=cfg.fir_n_lags,
        horizon_s=cfg.fir_horizon_s,
    )


def _plant_params(t_amb_c: float | None, throttle_limit_c: float | None):
    throttle = None if throttle_limit_c is None else plant.Throttle(limit_c=throttle_limit_c)
    params = plant.default_params(throttle=throttle)
    if t_amb_c is not None:
        params = dataclasses.replace(params, t_amb_c=t_amb_c)
    return params


def _synth_trace(cfg: RunConfig) -> tr.Trace:
    schedule = plant.random_schedule(cfg.duration_s, seed=cfg.seed)
    params = _plant_params(cfg.t_amb_c, cfg.throttle_limit_c)
    return plant.simulate(
        schedule, params, cfg.rate_hz, noise_std=cfg.noise_std, seed=cfg.seed
    )


def _cmd_simulate(args) -> int:
    cfg = RunConfig(
        duration_s=args.duration,
        rate_hz=args.rate,
        noise_std=args.noise,
        seed=args.seed,
        t_amb_c=args.t_amb,
        throttle_limit_c=args.throttle,
    )
    out = _synth_trace(cfg)
    tr.save_csv(out, args.out)
    print(f"wrote {len(out)} samples to {args.out}")
    return EXIT_OK


def _cmd_features_search(args) -> int:
    data = tr.load_csv(args.data)
    sp = tr.split(data)
    record = features.randomized_search(
        sp.dev, iters=args.iters, order=args.order, seed=args.seed
    )
    if args.record is not None:
        features.save_record_csv(record, args.record)
    pruned = features.correlation_prune(record)
    selected = features.grid_search_select(sp.dev, pruned, order=args.order)
    with Path(args.out).open("w", encoding="utf-8") as fh:
        for token in selected.tokens():
            fh.write(token + "\n")
    print(f"selected {len(selected.tokens())} terms (from {len(pruned.tokens())} pruned)")
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    data = tr.load_csv(args.data)
    tokens: tuple[str, ...] = ()
    if args.regressors is not None:
        with Path(args.regressors).open("r", encoding="utf-8") as fh:
            tokens = tuple(line.strip() for line in fh if line.strip())
    lm = narx.LmConfig() if args.max_iters is None else narx.LmConfig(max_iters=args.max_iters)
    if args.max_epochs is None:
        nadam = fir_rnn.NadamConfig()
    else:
        nadam = fir_rnn.NadamConfig(max_epochs=args.max_epochs)
    spec = MethodSpec(
        method=args.method,
        order=args.order,
        regressors=tokens,
        hidden=args.hidden,
        n_x=args.n_x,
        n_y=args.n_y,
        lm=lm,
        units=args.units,
        n_lags=args.n_lags,
        horizon_s=args.horizon,
        nadam=nadam,
    )
    fitted = evaluate.train_single(spec, data, seed=args.seed)
    serialize.save_model(args.out, fitted)
    print(f"trained {args.method} on {len(data)} samples")
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_crossval(args) -> int:
    if args.config is not None:
        cfg = parse_config(args.config)
    else:
        cfg = preset_config(args.preset)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.jobs is not None:
        cfg = dataclasses.replace(cfg, jobs=args.jobs)
    if args.methods is not None:
        wanted = tuple(t.strip() for t in args.methods.split(",") if t.strip())
        cfg = dataclasses.replace(cfg, methods=wanted)
    jobs = cfg.jobs if cfg.jobs > 0 else (os.cpu_count() or 1)

    data = _synth_trace(cfg)
    sp = tr.split(data)
    folds = tr.make_folds(len(sp.dev), cfg.k_folds)
    # One independent stream per method so dropping a method never shifts
    # the seeds of the others.
    children = np.random.SeedSequence(cfg.seed).spawn(len(METHODS))
    seeds = {
        m: int(children[i].generate_state(1)[0]) for i, m in enumerate(METHODS)
    }
    results = []
    for method in cfg.methods:
        spec = _method_spec(method, cfg)
        result = evaluate.crossval(spec, sp, folds, seed=seeds[method], jobs=jobs)
        results.append(result)
        print(f"{method}: avg mse {result.avg_mse:.4g} over {cfg.k_folds} folds")
    paths = evaluate.report(results, sp.test, cfg.out_dir)
    print(f"wrote {len(paths)} files to {cfg.out_dir}")
    return EXIT_OK


def _cmd_report(args) -> int:
    md_path, svg_path = evaluate.regenerate(args.out)
    print(f"wrote {md_path}")
    print(f"wrote {svg_path}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="thermid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_sim = sub.add_parser("simulate", help="synthesize a workload trace")
    p_sim.add_argument("--duration", type=float, required=True, help="trace length [s]")
    p_sim.add_argument("--out", required=True, help="output trace CSV")
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--rate", type=float, default=1.0, help="sample rate [Hz]")
    p_sim.add_argument("--noise", type=float, default=0.33, help="sensor noise std [degC]")
    p_sim.add_argument("--t-amb", type=float, default=None, help="ambient [degC]")
    p_sim.add_argument("--throttle", type=float, default=None, help="throttle limit [degC]")
    p_sim.set_defaults(func=_cmd_simulate)

    p_feat = sub.add_parser("features", help="regressor selection tools")
    fsub = p_feat.add_subparsers(dest="features_command", required=True, parser_class=_Parser)
    p_search = fsub.add_parser("search", help="run the selection pipeline")
    p_search.add_argument("--data", required=True, help="input trace CSV")
    p_search.add_argument("--out", required=True, help="output token list, one per line")
    p_search.add_argument("--iters", type=int, default=features.DEFAULT_SEARCH_ITERS)
    p_search.add_argument("--order", type=int, default=5)
    p_search.add_argument("--seed", type=int, default=0)
    p_search.add_argument("--record", default=None, help="optional search-record CSV")
    p_search.set_defaults(func=_cmd_features_search)

    p_train = sub.add_parser("train", help="fit one model and save it")
    p_train.add_argument("method", choices=METHODS)
    p_train.add_argument("--data", required=True, help="input trace CSV")
    p_train.add_argument("--out", required=True, help="output model file")
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--order", type=int, default=5, help="state order")
    p_train.add_argument("--regressors", default=None, help="token list file")
    p_train.add_argument("--hidden", type=int, default=3, help="static-net hidden units")
    p_train.add_argument("--n-x", type=int, default=2, dest="n_x")
    p_train.add_argument("--n-y", type=int, default=2, dest="n_y")
    p_train.add_argument("--units", type=int, default=1, help="recurrent units")
    p_train.add_argument("--n-lags", type=int, default=50, dest="n_lags")
    p_train.add_argument("--horizon", type=float, default=100.0, help="lag horizon [s]")
    p_train.add_argument("--max-iters", type=int, default=None, help="LM iteration budget")
    p_train.add_argument("--max-epochs", type=int, default=None, help="Nadam epoch budget")
    p_train.set_defaults(func=_cmd_train)

    p_cv = sub.add_parser("crossval", help="k-fold benchmark on a synthetic trace")
    src = p_cv.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=PRESETS)
    src.add_argument("--config", help="run-config file")
    p_cv.add_argument("--out", default=None, help="output directory override")
    p_cv.add_argument("--seed", type=int, default=None)
    p_cv.add_argument("--jobs", type=int, default=None, help="fold workers (0 = all cores)")
    p_cv.add_argument("--methods", default=None, help="comma-separated method subset")
    p_cv.set_defaults(func=_cmd_crossval)

    p_rep = sub.add_parser("report", help="re-render report files from run output")
    p_rep.add_argument("--out", required=True, help="directory holding results.csv")
    p_rep.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ThermidError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    raise SystemExit(main(sys.argv[1:]))
