"""Polynomial regressor algebra and the input-feature selection pipeline.

Regressors are products u_i^a * f^b of a core's utilization and its
cluster's frequency, with f normalized to GHz-scale units (MHz / 1000) so
cubic features stay O(10). Selection runs in three stages: a randomized
search over exponent combinations scored by short state-space fits, a
correlation prune that drops terms whose inclusion correlates with worse
validation error, and an exhaustive grid search over the surviving
combinations.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import n4sid
from .errors import RankDeficient, SearchSpaceTooLarge, TooShort
from .trace import Trace, make_folds

FREQ_EXPONENTS = (0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
FREQ_NORM_MHZ = 1000.0
N_CORES = 8
LITTLE_CORES_1BASED = (1, 2, 3, 4)
BIG_CORES_1BASED = (5, 6, 7, 8)

# exponent pairs (util_exp, freq_exp) the searches draw from
SEARCH_COMBOS = tuple(
    (u, b) for u in (0, 1) for b in (1.0, 1.5, 2.0, 2.5, 3.0)
)

DEFAULT_SEARCH_ITERS = 500
DEFAULT_MODEL_ORDER = 5
SUBSET_CAP = 4096  # 2**12 grid-search subsets

# free-run scoring ignores this long a prefix: the plant may start far from
# its operating point and a steady-state initial guess is wrong there
SCORE_BURN_IN_S = 100.0


@dataclass(frozen=True)
class RegressorTerm:
    """One polynomial feature u^a * f^b tied to a core or a cluster.

    scope is "core1".."core8" or a cluster name "big"/"little"; cluster
    terms carry no utilization factor.
    """

    scope: str
    util_exp: int
    freq_exp: float

    def __post_init__(self) -> None:
        if self.scope in ("big", "little"):
            if self.util_exp != 0:
                raise ValueError(f"cluster term {self.scope} cannot have util_exp != 0")
        elif self.scope.startswith("core"):
            idx = self.scope[4:]
            if not (idx.isdigit() and 1 <= int(idx) <= N_CORES):
                raise ValueError(f"bad core scope {self.scope!r}")
        else:
            raise ValueError(f"bad scope {self.scope!r}")
        if self.util_exp not in (0, 1):
            raise ValueError(f"util_exp must be 0 or 1, got {self.util_exp}")
        if self.freq_exp not in FREQ_EXPONENTS:
            raise ValueError(f"freq_exp {self.freq_exp} not in {FREQ_EXPONENTS}")
        if self.util_exp == 0 and self.freq_exp == 0:
            raise ValueError("term with both exponents zero is constant")

    @property
    def is_cluster(self) -> bool:
        return self.scope in ("big", "little")

    @property
    def core(self) -> int | None:
        """1-based core index, or None for cluster terms."""
        return None if self.is_cluster else int(self.scope[4:])

    @property
    def cluster(self) -> str:
        """Cluster whose frequency the term uses."""
        if self.is_cluster:
            return self.scope
        return "little" if self.core in LITTLE_CORES_1BASED else "big"

    def sort_key(self) -> tuple:
        # cluster terms first (big before little), then core-major, exponent-minor
        if self.is_cluster:
            return (0, self.scope, self.util_exp, self.freq_exp)
        return (1, self.core, self.util_exp, self.freq_exp)

    def token(self) -> str:
        return f"{self.scope}:{self.util_exp}:{_fmt_exp(self.freq_exp)}"

    @staticmethod
    def from_token(token: str) -> "RegressorTerm":
        parts = token.strip().split(":")
        if len(parts) != 3:
            raise ValueError(f"bad regressor token {token!r}")
        return RegressorTerm(parts[0], int(parts[1]), float(parts[2]))


def _fmt_exp(b: float) -> str:
    return str(int(b)) if b == int(b) else str(b)


@dataclass(frozen=True)
class RegressorSet:
    """Deduplicated, canonically ordered collection of regressor terms."""

    terms: tuple[RegressorTerm, ...]

    def __post_init__(self) -> None:
        canon = tuple(sorted(set(self.terms), key=RegressorTerm.sort_key))
        object.__setattr__(self, "terms", canon)

    def __len__(self) -> int:
        return len(self.terms)

    def __contains__(self, term: RegressorTerm) -> bool:
        return term in self.terms

    def tokens(self) -> tuple[str, ...]:
        return tuple(t.token() for t in self.terms)

    @staticmethod
    def from_tokens(tokens: Iterable[str]) -> "RegressorSet":
        return RegressorSet(tuple(RegressorTerm.from_token(t) for t in tokens))

    def union(self, other: "RegressorSet") -> "RegressorSet":
        return RegressorSet(self.terms + other.terms)


@dataclass(frozen=True)
class SearchRecord:
    """Randomized-search log: one (regressor set, validation MSE) per iteration.

    MSE is in degC squared; NaN marks an iteration whose identification
    failed and was skipped.
    """

    iterations: tuple[tuple[RegressorSet, float], ...]

    def __post_init__(self) -> None:
        for _, mse in self.iterations:
            if math.isfinite(mse) and mse < 0:
                raise ValueError(f"negative MSE {mse}")


def base_set() -> RegressorSet:
    """The 10 raw inputs: both cluster frequencies and all core utilizations."""
    terms = [RegressorTerm("big", 0, 1.0), RegressorTerm("little", 0, 1.0)]
    terms += [RegressorTerm(f"core{i}", 1, 0.0) for i in range(1, N_CORES + 1)]
    return RegressorSet(tuple(terms))


def candidate_set() -> RegressorSet:
    """Base terms plus every nonlinear product in the exponent grid (68 total).

    Per core: u_i * f^b for b in {0.5..3}; per cluster: f^b for the same
    grid. Pure duplicates of base terms collapse in the set, leaving 58
    nonlinear terms.
    """
    terms = list(base_set().terms)
    for b in (0.5, 1.0, 1.5, 2.0, 2.5, 3.0):
        for i in range(1, N_CORES + 1):
            terms.append(RegressorTerm(f"core{i}", 1, b))
        for cl in ("big", "little"):
            terms.append(RegressorTerm(cl, 0, b))
    return RegressorSet(tuple(terms))


def eq1_set() -> RegressorSet:
    """The fixed 34-term production set: u_i, u_i f^1.5, u_i f^2, u_i f^3 per
    core plus each cluster frequency squared."""
    terms = [RegressorTerm("big", 0, 2.0), RegressorTerm("little", 0, 2.0)]
    for i in range(1, N_CORES + 1):
        for b in (0.0, 1.5, 2.0, 3.0):
            terms.append(RegressorTerm(f"core{i}", 1, b))
    return RegressorSet(tuple(terms))


def apply_combo(combo: tuple[int, float]) -> tuple[RegressorTerm, ...]:
    """Expand one (util_exp, freq_exp) pair uniformly over cores or clusters."""
    u, b = combo
    if u == 1:
        return tuple(RegressorTerm(f"core{i}", 1, b) for i in range(1, N_CORES + 1))
    return (RegressorTerm("big", 0, b), RegressorTerm("little", 0, b))


def expand(trace: Trace, rset: RegressorSet) -> np.ndarray:
    """Feature matrix (T x |set|): column j is term j evaluated on the trace."""
    f = {
        "big": trace.f_big / FREQ_NORM_MHZ,
        "little": trace.f_little / FREQ_NORM_MHZ,
    }
    cols = np.empty((len(trace), len(rset)))
    for j, term in enumerate(rset.terms):
        col = f[term.cluster] ** term.freq_exp if term.freq_exp else np.ones(len(trace))
        if term.util_exp:
            col = col * trace.util[:, term.core - 1]
        cols[:, j] = col
    return cols


def _column_index(rset: RegressorSet, subset: RegressorSet) -> np.ndarray:
    pos = {t: j for j, t in enumerate(rset.terms)}
    return np.array([pos[t] for t in subset.terms], dtype=int)


def _fit_and_score(
    x: np.ndarray,
    y: np.ndarray,
    train_ranges: Sequence[tuple[int, int]],
    val_idx: np.ndarray,
    order: int,
    burn_in: int = 0,
) -> float:
    """Identify on the train ranges, free-run over the whole span, score val.

    Data are centered with train-portion means; the simulation starts from
    the steady state of the first input row, so no measured output leaks
    into the prediction. Validation indices inside the burn-in prefix are
    excluded: the steady-state guess is wrong while the plant warms up.
    """
    x_tr = np.concatenate([x[a:b] for a, b in train_ranges])
    y_tr = np.concatenate([y[a:b] for a, b in train_ranges])
    xm = x_tr.mean(axis=0)
    ym = float(y_tr.mean())
    model = n4sid.identify(
        [x[a:b] - xm for a, b in train_ranges],
        [y[a:b] - ym for a, b in train_ranges],
        order=order,
    )
    xc = x - xm
    y_hat = n4sid.simulate(model, xc, x0=n4sid.steady_x0(model, xc[0])) + ym
    scored = val_idx[val_idx >= burn_in]
    if scored.size == 0:
        raise TooShort("validation block lies entirely inside the burn-in prefix")
    return float(np.mean((y_hat[scored] - y[scored]) ** 2))


def randomized_search(
    dev: Trace,
    iters: int = DEFAULT_SEARCH_ITERS,
    order: int = DEFAULT_MODEL_ORDER,
    seed: int = 0,
    combos_per_iter: int = 3,
) -> SearchRecord:
    """Score random exponent-combination triples with short state-space fits.

    Each iteration draws combos_per_iter distinct (util_exp, freq_exp)
    pairs, applies them to every core/cluster on top of the base inputs,
    fits a model of the given order on the first 80% of dev, and records
    the free-run MSE on the last 20%. Failed fits are recorded as NaN.
    """
    if len(dev) < 50:
        raise TooShort(f"dev trace of {len(dev)} samples cannot be split")
    rng = np.random.default_rng(seed)
    universe = base_set()
    for combo in SEARCH_COMBOS:
        universe = universe.union(RegressorSet(apply_combo(combo)))
    x_all = expand(dev, universe)
    y_all = dev.temp
    n_train = int(0.8 * len(dev))
    val_idx = np.arange(n_train, len(dev))
    burn_in = int(round(SCORE_BURN_IN_S * dev.rate_hz))

    records = []
    base = base_set()
    for _ in range(int(iters)):
        picks = rng.choice(len(SEARCH_COMBOS), size=combos_per_iter, replace=False)
        rset = base
        for p in sorted(picks):
            rset = rset.union(RegressorSet(apply_combo(SEARCH_COMBOS[p])))
        idx = _column_index(universe, rset)
        try:
            mse = _fit_and_score(
                x_all[:, idx], y_all, [(0, n_train)], val_idx, order, burn_in
            )
        except (RankDeficient, TooShort, np.linalg.LinAlgError):
            mse = float("nan")
        records.append((rset, mse))
    return SearchRecord(tuple(records))


def term_correlations(record: SearchRecord) -> dict[RegressorTerm, float]:
    """Pearson correlation of each term's inclusion indicator with the MSE.

    Terms present in every finite-MSE iteration (or in none) have zero
    indicator variance; they are omitted from the result.
    """
    finite = [(rs, mse) for rs, mse in record.iterations if math.isfinite(mse)]
    if len(finite) < 2:
        raise ValueError("need at least 2 finite-MSE iterations")
    mses = np.array([mse for _, mse in finite])
    terms = sorted(
        {t for rs, _ in finite for t in rs.terms}, key=RegressorTerm.sort_key
    )
    out: dict[RegressorTerm, float] = {}
    for term in terms:
        ind = np.array([1.0 if term in rs else 0.0 for rs, _ in finite])
        if ind.min() == ind.max() or mses.min() == mses.max():
            continue
        out[term] = float(np.corrcoef(ind, mses)[0, 1])
    return out


def correlation_prune(record: SearchRecord) -> RegressorSet:
    """Keep base terms plus terms whose inclusion correlates with lower MSE.

    Terms with degenerate indicator variance never enter the correlation
    test and are retained conservatively.
    """
    distinct = {rs.tokens() for rs, _ in record.iterations}
    if len(distinct) < 2:
        raise ValueError("record must contain at least 2 distinct sets")
    corr = term_correlations(record)
    finite_terms = {
        t
        for rs, mse in record.iterations
        if math.isfinite(mse)
        for t in rs.terms
    }
    kept = list(base_set().terms)
    for term in finite_terms:
        if term in corr:
            if corr[term] < 0:
                kept.append(term)
        else:
            kept.append(term)  # degenerate variance: retain
    return RegressorSet(tuple(kept))


def nonbase_combos(rset: RegressorSet) -> tuple[tuple[int, float], ...]:
    """Distinct (util_exp, freq_exp) pairs of the non-base terms."""
    base = set(base_set().terms)
    combos = {
        (t.util_exp, t.freq_exp) for t in rset.terms if t not in base
    }
    return tuple(sorted(combos))


def cv_mse(
    dev: Trace,
    rset: RegressorSet,
    order: int = DEFAULT_MODEL_ORDER,
    k: int = 3,
) -> float:
    """Mean free-run validation MSE of a regressor set over contiguous folds."""
    x = expand(dev, rset)
    y = dev.temp
    plan = make_folds(len(dev), k)
    burn_in = int(round(SCORE_BURN_IN_S * dev.rate_hz))
    scores = []
    for fold in plan.folds:
        scores.append(
            _fit_and_score(x, y, fold.train_ranges, fold.val_indices(), order, burn_in)
        )
    return float(np.mean(scores))


def grid_search_select(
    dev: Trace,
    pruned: RegressorSet,
    order: int = DEFAULT_MODEL_ORDER,
    k: int = 3,
    subset_cap: int = SUBSET_CAP,
) -> RegressorSet:
    """Exhaustively score every subset of the pruned exponent combinations.

    Each subset is applied uniformly to all cores/clusters on top of the
    base inputs and scored by contiguous k-fold cross-validation. Ties
    break toward fewer terms, then lexicographic token order. Raises
    SearchSpaceTooLarge when the subset count exceeds subset_cap.
    """
    combos = nonbase_combos(pruned)
    if 2 ** len(combos) > subset_cap:
        raise SearchSpaceTooLarge(
            f"{len(combos)} combinations => {2 ** len(combos)} subsets > cap {subset_cap}"
        )
    best: tuple[float, int, tuple[str, ...]] | None = None
    best_set = base_set()
    for r in range(len(combos) + 1):
        for chosen in itertools.combinations(combos, r):
            rset = base_set()
            for combo in chosen:
                rset = rset.union(RegressorSet(apply_combo(combo)))
            try:
                mse = cv_mse(dev, rset, order=order, k=k)
            except (RankDeficient, TooShort, np.linalg.LinAlgError):
                continue
            key = (mse, len(rset), rset.tokens())
            if best is None or key < best:
                best, best_set = key, rset
    return best_set


def save_record_csv(record: SearchRecord, path: str | Path) -> None:
    """Write a search record as CSV rows (iter, terms, mse)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "terms", "mse"])
        for i, (rset, mse) in enumerate(record.iterations):
            writer.writerow([i, " ".join(rset.tokens()), repr(float(mse))])


def load_record_csv(path: str | Path) -> SearchRecord:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["iter", "terms", "mse"]:
            raise ValueError(f"bad search record header: {header}")
        iterations = []
        for row in reader:
            rset = RegressorSet.from_tokens(row[1].split())
            iterations.append((rset, float(row[2])))
    return SearchRecord(tuple(iterations))
