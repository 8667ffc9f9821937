"""Signal-region and cut-level helpers, and choice of the Bernstein order.

The order is picked by running the bump-hunt test on many null subsamples of
a validation background and keeping the order whose rejection rate is
closest to the nominal level.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtri

from .bumphunt import (
    DEFAULT_BINS_PER_SIDE,
    SignalRegionSpec,
    bin_data,
    censored_mle_em,
    delta_method_test,
)
from .errors import InvalidArgumentError, InvalidConfigurationError, OtbumpError
from .estimators import BinomialInterval, clopper_pearson
from .simulate import STREAM_CALIBRATION, make_rng

DEFAULT_K_GRID = (5, 10, 15, 20, 25, 30, 35, 40)
MAX_FAILURE_RATE = 0.01


def select_signal_region(signal_masses, q_lo: float = 0.1, q_hi: float = 0.9) -> SignalRegionSpec:
    """Window between two empirical quantiles of the signal masses."""
    m = np.asarray(signal_masses, dtype=float).ravel()
    if m.size == 0:
        raise InvalidArgumentError("signal_masses is empty")
    if not 0.0 < q_lo < q_hi < 1.0:
        raise InvalidConfigurationError(f"need 0 < q_lo < q_hi < 1, got ({q_lo}, {q_hi})")
    lo, hi = np.quantile(m, [q_lo, q_hi])
    if not hi > lo:
        raise InvalidConfigurationError(f"signal quantiles coincide at {lo!r}; region is empty")
    return SignalRegionSpec(float(lo), float(hi))


def cut_quantile(background_scores, t: float) -> float:
    """Empirical ``t``-quantile; keeping ``score >= q`` drops a fraction ``t``."""
    s = np.asarray(background_scores, dtype=float).ravel()
    if s.size == 0:
        raise InvalidArgumentError("background_scores is empty")
    if not 0.0 <= t < 1.0:
        raise InvalidArgumentError(f"t must lie in [0, 1), got {t}")
    return float(np.quantile(s, t))


def apply_cut(scores, threshold: float) -> np.ndarray:
    """Boolean mask of events at or above ``threshold``."""
    return np.asarray(scores, dtype=float) >= threshold


@dataclass(frozen=True)
class CalibrationConfig:
    """Settings for :func:`select_k`.

    ``region`` may be given directly; otherwise :func:`select_k` needs it as
    an argument. ``cut_levels`` is carried for downstream use and echoed in
    reports.
    """

    alpha: float = 0.05
    n_datasets: int = 500
    n: int = 20_000
    k_grid: tuple = DEFAULT_K_GRID
    region_quantiles: tuple = (0.1, 0.9)
    cut_levels: tuple = (0.0, 0.5, 0.9)
    seed: int = 0
    bins_per_side: int = DEFAULT_BINS_PER_SIDE
    region: tuple | None = None
    level: float = 0.95

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise InvalidConfigurationError("alpha must lie in (0, 1)")
        if int(self.n_datasets) < 1:
            raise InvalidConfigurationError("n_datasets must be >= 1")
        if int(self.n) < 1:
            raise InvalidConfigurationError("n must be >= 1")
        if len(self.k_grid) == 0 or any(int(k) < 0 for k in self.k_grid):
            raise InvalidConfigurationError("k_grid must be a nonempty list of orders >= 0")
        q_lo, q_hi = self.region_quantiles
        if not 0.0 < q_lo < q_hi < 1.0:
            raise InvalidConfigurationError("region quantiles must satisfy 0 < q_lo < q_hi < 1")
        if any(not 0.0 <= t < 1.0 for t in self.cut_levels):
            raise InvalidConfigurationError("cut levels must lie in [0, 1)")

    def to_dict(self):
        d = asdict(self)
        d["k_grid"] = [int(k) for k in self.k_grid]
        d["region_quantiles"] = list(self.region_quantiles)
        d["cut_levels"] = list(self.cut_levels)
        d["region"] = None if self.region is None else list(self.region)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("k_grid", "region_quantiles", "cut_levels"):
            if key in d:
                d[key] = tuple(d[key])
        if d.get("region") is not None:
            d["region"] = tuple(d["region"])
        return cls(**d)


@dataclass(frozen=True)
class SelectionReport:
    """Per-order null rejection rates and the chosen order."""

    config: CalibrationConfig
    region: SignalRegionSpec
    k_grid: tuple
    rejections: tuple
    successes: tuple  # fits that converged and produced a statistic
    failures: tuple
    intervals: tuple
    excluded: tuple
    selected_k: int | None
    p_values: dict = field(repr=False)
    statistics: dict = field(repr=False)

    @property
    def rejection_rates(self):
        return tuple(r / s if s else float("nan") for r, s in zip(self.rejections, self.successes))

    def interval_for(self, k) -> BinomialInterval:
        return self.intervals[self.k_grid.index(k)]

    def to_dict(self):
        per_k = []
        for i, k in enumerate(self.k_grid):
            ci = self.intervals[i]
            per_k.append({
                "K": int(k),
                "rejections": int(self.rejections[i]),
                "successful_fits": int(self.successes[i]),
                "failed_fits": int(self.failures[i]),
                "rejection_rate": self.rejection_rates[i],
                "ci_lower": None if ci is None else ci.lower,
                "ci_upper": None if ci is None else ci.upper,
                "excluded": bool(self.excluded[i]),
                "p_values": [float(v) for v in self.p_values[k]],
                "statistics": [float(v) for v in self.statistics[k]],
            })
        return {
            "selected_k": self.selected_k,
            "alpha": self.config.alpha,
            "region": [self.region.lower, self.region.upper],
            "per_k": per_k,
            "config": self.config.to_dict(),
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


def _one_replicate(masses, config, region, index):
    rng = make_rng(config.seed, STREAM_CALIBRATION, index)
    sub = masses[rng.choice(masses.size, size=config.n, replace=False)]
    counts = bin_data(sub, region, config.bins_per_side)
    out = []
    for k in config.k_grid:
        try:
            em = censored_mle_em(counts, int(k))
            if not em.converged:
                out.append(None)
                continue
            fit = delta_method_test(counts, em.density, em_result=em)
            out.append((fit.statistic, fit.p_value))
        except OtbumpError:
            out.append(None)
    return out


def run_replicates(fn, n_replicates: int, workers: int = 1):
    """Evaluate ``fn(i)`` for each replicate index, results in index order."""
    if workers <= 1:
        return [fn(i) for i in range(n_replicates)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n_replicates)))


def select_k(validation_background_masses, config: CalibrationConfig,
             region: SignalRegionSpec | None = None, *, workers: int = 1) -> SelectionReport:
    """Pick the Bernstein order whose null rejection rate is closest to ``alpha``.

    Each replicate subsamples ``config.n`` masses without replacement using
    its own counter-based stream, and every order is tested on the same
    subsample. An order whose fits fail on more than 1% of replicates is
    excluded. Ties go to the smaller order.
    """
    masses = np.asarray(validation_background_masses, dtype=float).ravel()
    if region is None:
        if config.region is None:
            raise InvalidConfigurationError("a signal region is required")
        region = SignalRegionSpec(*config.region)
    if masses.size < config.n:
        raise InvalidConfigurationError(
            f"validation set has {masses.size} events, fewer than n={config.n}")
    crit = float(ndtri(1.0 - config.alpha))
    results = run_replicates(lambda i: _one_replicate(masses, config, region, i),
                             int(config.n_datasets), workers)

    k_grid = tuple(int(k) for k in config.k_grid)
    rejections, successes, failures, intervals, excluded = [], [], [], [], []
    p_values, statistics = {}, {}
    for j, k in enumerate(k_grid):
        ok = [r[j] for r in results if r[j] is not None]
        stat = np.array([s for s, _ in ok], dtype=float)
        p_values[k] = np.array([p for _, p in ok], dtype=float)
        statistics[k] = stat
        n_fail = len(results) - len(ok)
        rej = int(np.sum(stat > crit))
        rejections.append(rej)
        successes.append(len(ok))
        failures.append(n_fail)
        intervals.append(clopper_pearson(rej, len(ok), config.level) if ok else None)
        excluded.append(n_fail > MAX_FAILURE_RATE * len(results))

    best = None
    best_gap = np.inf
    for j, k in enumerate(k_grid):
        if excluded[j]:
            continue
        gap = abs(config.alpha - rejections[j] / successes[j])
        # strict comparison plus ascending scan keeps the smaller order on ties
        if gap < best_gap - 1e-15 or (abs(gap - best_gap) <= 1e-15 and best is not None and k < best):
            best, best_gap = k, gap
    return SelectionReport(
        config=config, region=region, k_grid=k_grid, rejections=tuple(rejections),
        successes=tuple(successes), failures=tuple(failures), intervals=tuple(intervals),
        excluded=tuple(excluded), selected_k=best, p_values=p_values, statistics=statistics,
    )


__all__ = [
    "CalibrationConfig", "DEFAULT_K_GRID", "SelectionReport", "apply_cut", "cut_quantile",
    "run_replicates", "select_k", "select_signal_region",
]
