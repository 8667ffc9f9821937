"""Synthetic events, a toy classifier and the power-analysis harness.

Background masses follow a truncated exponential (or a Bernstein mixture)
on the unit interval and signal masses a truncated Gaussian bump. Scores
come from Beta laws; in the correlated model the background score grows
with mass, so cutting on the raw score reshapes the background mass
distribution.

Every random draw goes through :func:`make_rng`, a Philox generator keyed by
``(seed, stream, index)``, so any replicate can be regenerated on its own.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Literal, Sequence

import numpy as np
from scipy import stats

from .errors import InvalidArgumentError, SchemaError

# named streams keep independent uses of one seed apart
STREAM_EVENTS = 0
STREAM_VALIDATION = 1
STREAM_POOL = 2
STREAM_REPLICATE = 3
STREAM_CALIBRATION = 4
STREAM_TRAIN = 5


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for ``seed`` and an optional integer key path."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))))


# -- events -----------------------------------------------------------------------

@dataclass(frozen=True)
class LabeledEvent:
    mass: float
    score: float
    label: int | None = None
    weight: float = 1.0


@dataclass(frozen=True)
class EventSet:
    """Columnar event table.

    ``label`` uses -1 for unknown. ``extra`` holds any further columns, kept
    as strings from CSV input and written back unchanged.
    """

    mass: np.ndarray
    score: np.ndarray
    label: np.ndarray
    weight: np.ndarray
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.mass)
        for name in ("score", "label", "weight"):
            if len(getattr(self, name)) != n:
                raise SchemaError(f"column {name!r} has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self):
        return len(self.mass)

    def __getitem__(self, i) -> LabeledEvent:
        lab = int(self.label[i])
        return LabeledEvent(float(self.mass[i]), float(self.score[i]),
                            None if lab < 0 else lab, float(self.weight[i]))

    def __iter__(self) -> Iterator[LabeledEvent]:
        return (self[i] for i in range(len(self)))

    @property
    def has_labels(self) -> bool:
        return bool(np.all(self.label >= 0))

    def take(self, idx) -> "EventSet":
        idx = np.asarray(idx)
        return EventSet(self.mass[idx], self.score[idx], self.label[idx], self.weight[idx],
                        {k: np.asarray(v)[idx] for k, v in self.extra.items()})

    def with_column(self, name, values) -> "EventSet":
        extra = dict(self.extra)
        extra[name] = np.asarray(values)
        return replace(self, extra=extra)

    @classmethod
    def from_events(cls, events: Sequence[LabeledEvent]) -> "EventSet":
        return cls(
            mass=np.array([e.mass for e in events], dtype=float),
            score=np.array([e.score for e in events], dtype=float),
            label=np.array([-1 if e.label is None else e.label for e in events], dtype=np.int64),
            weight=np.array([e.weight for e in events], dtype=float),
        )


CSV_COLUMNS = ("mass", "score", "label", "weight")


def _fmt(x):
    return repr(float(x))


def write_csv(events: EventSet, path_or_buffer) -> None:
    """Write the four standard columns, then extra columns in insertion order.

    Floats are written with ``repr`` so a read-back is exact.
    """
    names = list(CSV_COLUMNS) + list(events.extra)
    own = isinstance(path_or_buffer, (str, Path))
    fh = open(path_or_buffer, "w", newline="") if own else path_or_buffer
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        extras = [np.asarray(v) for v in events.extra.values()]
        for i in range(len(events)):
            lab = int(events.label[i])
            row = [_fmt(events.mass[i]), _fmt(events.score[i]), "" if lab < 0 else str(lab),
                   _fmt(events.weight[i])]
            for col in extras:
                v = col[i]
                row.append(_fmt(v) if isinstance(v, (float, np.floating)) else str(v))
            w.writerow(row)
    finally:
        if own:
            fh.close()


def read_csv(path_or_buffer, require=("mass", "score")) -> EventSet:
    """Read an event table; ``label`` and ``weight`` are optional columns."""
    if isinstance(path_or_buffer, (str, Path)):
        text = Path(path_or_buffer).read_text()
    else:
        text = path_or_buffer.read()
    reader = csv.DictReader(io.StringIO(text))
    names = reader.fieldnames or []
    for col in require:
        if col not in names:
            raise SchemaError(f"missing required column {col!r}")
    rows = list(reader)
    n = len(rows)

    def floats(col, default):
        if col not in names:
            return np.full(n, default, dtype=float)
        try:
            return np.array([float(r[col]) for r in rows], dtype=float)
        except ValueError as exc:
            raise SchemaError(f"column {col!r} has a non-numeric entry: {exc}") from None

    if "label" in names:
        try:
            label = np.array([int(r["label"]) if r["label"] not in ("", None) else -1
                              for r in rows], dtype=np.int64)
        except ValueError as exc:
            raise SchemaError(f"column 'label' has a non-integer entry: {exc}") from None
    else:
        label = np.full(n, -1, dtype=np.int64)
    extra = {c: np.array([r[c] for r in rows], dtype=object) for c in names
             if c not in CSV_COLUMNS}
    return EventSet(mass=floats("mass", np.nan), score=floats("score", np.nan), label=label,
                    weight=floats("weight", 1.0), extra=extra)


# -- generator ----------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorSpec:
    """Synthetic mixture ``(1 - lam) b(m) + lam s(m)`` with mass-dependent scores.

    Attributes
    ----------
    background : {"exponential", "bernstein"}
        Truncated exponential with ``background_rate`` on [0, 1], or a
        Bernstein mixture with weights ``background_gamma``.
    signal_mean, signal_sigma : float
        Gaussian bump truncated to [0, 1].
    score_model : {"correlated", "independent"}
        Correlated: background score ~ Beta(1 + slope * m, 3). Independent:
        background score ~ Beta(2, 3). Signal score ~ Beta(6, 2) in both.
    lam : float
        Signal fraction.
    seed : int
    """

    background: Literal["exponential", "bernstein"] = "exponential"
    background_rate: float = 3.0
    background_gamma: tuple = ()
    signal_mean: float = 0.5
    signal_sigma: float = 0.04
    score_model: Literal["correlated", "independent"] = "correlated"
    score_slope: float = 4.0
    lam: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidArgumentError(f"lam must lie in [0, 1], got {self.lam}")
        if not self.signal_sigma > 0:
            raise InvalidArgumentError("signal_sigma must be positive")
        if self.background == "exponential":
            if not np.isfinite(self.background_rate):
                raise InvalidArgumentError("background_rate must be finite")
        elif self.background == "bernstein":
            g = np.asarray(self.background_gamma, dtype=float)
            if g.size == 0 or np.any(g < 0) or abs(g.sum() - g.size) > 1e-9 * g.size:
                raise InvalidArgumentError("background_gamma must be nonnegative and sum to K+1")
        else:
            raise InvalidArgumentError(f"unknown background family {self.background!r}")
        if self.score_model not in ("correlated", "independent"):
            raise InvalidArgumentError(f"unknown score model {self.score_model!r}")

    def to_dict(self):
        return {
            "background": self.background, "background_rate": self.background_rate,
            "background_gamma": list(self.background_gamma), "signal_mean": self.signal_mean,
            "signal_sigma": self.signal_sigma, "score_model": self.score_model,
            "score_slope": self.score_slope, "lam": self.lam, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["background_gamma"] = tuple(d.get("background_gamma", ()))
        return cls(**d)

    # distribution helpers, also used by tests and the power harness

    def background_cdf(self, x):
        x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
        if self.background == "exponential":
            r = self.background_rate
            if abs(r) < 1e-12:
                return x
            return np.expm1(-r * x) / np.expm1(-r)
        from .bumphunt import basis_interval_masses
        g = np.asarray(self.background_gamma, dtype=float)
        flat = x.ravel()
        k = g.size - 1
        cdf = np.array([g @ basis_interval_masses(k, [0.0, v])[:, 0] if v > 0 else 0.0
                        for v in flat])
        return cdf.reshape(x.shape)

    def signal_cdf(self, x):
        a, b = self._signal_bounds()
        return stats.truncnorm.cdf(np.asarray(x, dtype=float), a, b,
                                   loc=self.signal_mean, scale=self.signal_sigma)

    def _signal_bounds(self):
        return ((0.0 - self.signal_mean) / self.signal_sigma,
                (1.0 - self.signal_mean) / self.signal_sigma)

    def sample_background_mass(self, rng, n):
        u = rng.random(n)
        if self.background == "exponential":
            r = self.background_rate
            if abs(r) < 1e-12:
                return u
            return np.clip(-np.log1p(u * np.expm1(-r)) / r, 0.0, 1.0)
        g = np.asarray(self.background_gamma, dtype=float)
        k = g.size - 1
        comp = np.searchsorted(np.cumsum(g) / g.sum(), u, side="right")
        comp = np.minimum(comp, k)
        return rng.beta(comp + 1, k - comp + 1)

    def sample_signal_mass(self, rng, n):
        a, b = self._signal_bounds()
        u = rng.random(n)
        return stats.truncnorm.ppf(u, a, b, loc=self.signal_mean, scale=self.signal_sigma)

    def sample_scores(self, rng, mass, label):
        mass = np.asarray(mass, dtype=float)
        label = np.asarray(label)
        out = np.empty(mass.size)
        sig = label == 1
        out[sig] = rng.beta(6.0, 2.0, size=int(sig.sum()))
        bkg = ~sig
        if self.score_model == "correlated":
            out[bkg] = rng.beta(1.0 + self.score_slope * mass[bkg], 3.0)
        else:
            out[bkg] = rng.beta(2.0, 3.0, size=int(bkg.sum()))
        return out


def _events(spec: GeneratorSpec, rng, n_signal, n_background) -> EventSet:
    mass = np.concatenate([spec.sample_signal_mass(rng, n_signal),
                           spec.sample_background_mass(rng, n_background)])
    label = np.concatenate([np.ones(n_signal, np.int64), np.zeros(n_background, np.int64)])
    order = rng.permutation(mass.size)
    mass, label = mass[order], label[order]
    score = spec.sample_scores(rng, mass, label)
    return EventSet(mass=mass, score=score, label=label, weight=np.ones(mass.size))


def sample_events(spec: GeneratorSpec, n: int, *, stream: int = STREAM_EVENTS,
                  index: int = 0) -> EventSet:
    """Draw ``n`` labeled events; labels are Bernoulli(``spec.lam``)."""
    if int(n) < 1:
        raise InvalidArgumentError("n must be >= 1")
    rng = make_rng(spec.seed, stream, index)
    n_signal = int(rng.binomial(int(n), spec.lam))
    return _events(spec, rng, n_signal, int(n) - n_signal)


def sample_class(spec: GeneratorSpec, n: int, label: int, *, stream: int, index: int = 0) -> EventSet:
    """Draw ``n`` events of one class."""
    rng = make_rng(spec.seed, stream, index)
    return _events(spec, rng, n if label == 1 else 0, 0 if label == 1 else n)


def transform_mass(m, b: float, r: float):
    """Map masses above ``b`` into [0, 1) by ``1 - exp(-r (m - b))``."""
    m = np.asarray(m, dtype=float)
    if not r > 0:
        raise InvalidArgumentError("r must be positive")
    if np.any(m < b):
        bad = m[m < b]
        raise InvalidArgumentError(f"{bad.size} masses below b={b}, e.g. {float(bad.flat[0])!r}")
    out = -np.expm1(-r * (m - b))
    return out if out.ndim else float(out)


# -- toy classifier ---------------------------------------------------------------------

@dataclass(frozen=True)
class NaiveBayesClassifier:
    """Binned naive-Bayes posterior of the signal class.

    Each feature is cut at pooled quantiles; per-class bin frequencies use
    add-one smoothing.
    """

    edges: tuple  # per feature, inner bin edges
    log_ratio: tuple  # per feature, log P(bin | sig) - log P(bin | bkg)
    log_prior_odds: float

    def predict(self, features) -> np.ndarray:
        x = np.atleast_2d(np.asarray(features, dtype=float))
        if x.shape[0] != len(self.edges) and x.shape[1] == len(self.edges):
            x = x.T
        logit_ = np.full(x.shape[1], self.log_prior_odds)
        for j, (e, lr) in enumerate(zip(self.edges, self.log_ratio)):
            logit_ += lr[np.searchsorted(e, x[j], side="right")]
        return 1.0 / (1.0 + np.exp(-logit_))

    __call__ = predict


def builtin_classifier(features, labels, n_bins: int = 20) -> NaiveBayesClassifier:
    """Fit the toy classifier on ``features`` (n x d or length n) and 0/1 ``labels``."""
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(labels).astype(int).ravel()
    if x.shape[0] != y.size:
        raise InvalidArgumentError("features and labels differ in length")
    n_sig = int(np.sum(y == 1))
    n_bkg = int(np.sum(y == 0))
    if n_sig == 0 or n_bkg == 0:
        raise InvalidArgumentError("both classes must be present")
    edges, ratios = [], []
    for j in range(x.shape[1]):
        inner = np.unique(np.quantile(x[:, j], np.linspace(0, 1, n_bins + 1)[1:-1]))
        idx = np.searchsorted(inner, x[:, j], side="right")
        nb = inner.size + 1
        cs = np.bincount(idx[y == 1], minlength=nb) + 1.0
        cb = np.bincount(idx[y == 0], minlength=nb) + 1.0
        edges.append(inner)
        ratios.append(np.log(cs / cs.sum()) - np.log(cb / cb.sum()))
    return NaiveBayesClassifier(tuple(edges), tuple(ratios), float(np.log(n_sig / n_bkg)))


def auc(signal_scores, background_scores) -> float:
    """Probability a signal score exceeds a background score (ties count half)."""
    s = np.asarray(signal_scores, dtype=float).ravel()
    b = np.asarray(background_scores, dtype=float).ravel()
    ranks = stats.rankdata(np.concatenate([s, b]))
    u = ranks[: s.size].sum() - s.size * (s.size + 1) / 2.0
    return float(u / (s.size * b.size))


def gaussian_auc(mean_gap: float, sigma: float = 1.0) -> float:
    """AUC of two equal-variance Gaussians, ``Phi(gap / (sigma sqrt 2))``."""
    return float(stats.norm.cdf(mean_gap / (sigma * np.sqrt(2.0))))


# -- power analysis -------------------------------------------------------------------

DEFAULT_MASS_BINS = tuple(np.linspace(0.0, 1.0, 21))


@dataclass(frozen=True)
class PowerConfig:
    """Settings for :func:`power_analysis`.

    The map, cut thresholds, signal region and Bernstein order are all fitted
    on validation samples that never enter a test replicate. Replicates draw
    without replacement from fixed test pools. A pool much larger than ``n``
    keeps the shared pool fluctuation small next to the per-replicate noise.

    The fitted map is also shared by every replicate, so its estimation bias
    acts as a fixed shift of the test statistic. The default location-scale
    map on 1e5 training events keeps that shift well below the replicate
    noise on the default generator. The kernel-only split map does not: its
    smoothing bias in mass over-rejects after cuts even at 3e5 events.
    """

    lambdas: tuple = (0.0, 0.01, 0.02, 0.05)
    cut_levels: tuple = (0.0, 0.5, 0.9)
    decorrelated: tuple = (True, False)
    n_datasets: int = 500
    n: int = 20_000
    alpha: float = 0.05
    K: int | None = None
    k_grid: tuple = (5, 10, 15, 20, 25, 30, 35, 40)
    calibration_datasets: int | None = None
    region: tuple | None = None
    region_quantiles: tuple = (0.1, 0.9)
    approach: str = "locscale"
    splits: tuple = (0.2, 0.4, 0.6)
    n_train: int = 100_000
    n_cut_sample: int = 100_000
    n_validation: int = 1_000_000
    n_validation_signal: int = 20_000
    pool_background: int = 1_000_000
    pool_signal: int = 50_000
    bins_per_side: int = 50
    mass_bins: tuple = DEFAULT_MASS_BINS
    min_events: int = 500
    low_statistics_fraction: float = 0.1
    seed: int | None = None

    def __post_init__(self):
        if int(self.n_datasets) < 1 or int(self.n) < 1:
            raise InvalidArgumentError("n_datasets and n must be >= 1")
        if any(not 0.0 <= lam <= 1.0 for lam in self.lambdas):
            raise InvalidArgumentError("lambdas must lie in [0, 1]")
        if any(not 0.0 <= t < 1.0 for t in self.cut_levels):
            raise InvalidArgumentError("cut levels must lie in [0, 1)")
        if self.approach not in ("split", "locscale"):
            raise InvalidArgumentError(f"unknown approach {self.approach!r}")
        n_sig_max = max(int(round(lam * self.n)) for lam in self.lambdas)
        if self.pool_background < self.n or self.pool_signal < n_sig_max:
            raise InvalidArgumentError("test pools are smaller than one replicate")

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = [float(x) if isinstance(x, (float, np.floating)) else x for x in v]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class PowerCell:
    lam: float
    cut: float
    decorrelated: bool
    rejections: int
    successes: int
    failures: int
    interval: object
    mean_lambda_hat: float
    mean_surviving: float
    low_statistics: bool
    mean_one_over_jsd: float | None = None

    @property
    def power(self) -> float:
        return self.rejections / self.successes if self.successes else float("nan")

    def to_dict(self):
        return {
            "lambda": self.lam, "cut": self.cut, "decorrelated": self.decorrelated,
            "power": self.power, "ci_lo": self.interval.lower if self.interval else None,
            "ci_hi": self.interval.upper if self.interval else None,
            "n_reps": self.successes, "rejections": self.rejections,
            "failures": self.failures, "mean_lambda_hat": self.mean_lambda_hat,
            "mean_surviving": self.mean_surviving, "low_statistics": self.low_statistics,
            "mean_one_over_jsd": self.mean_one_over_jsd,
        }


@dataclass(frozen=True)
class PowerReport:
    cells: tuple
    K: int
    region: tuple
    thresholds: dict  # {"raw": [...], "decorrelated": [...]} aligned with cut levels
    config: PowerConfig
    spec: GeneratorSpec
    calibration: dict | None = None

    def cell(self, lam, cut, decorrelated) -> PowerCell:
        for c in self.cells:
            if (np.isclose(c.lam, lam) and np.isclose(c.cut, cut)
                    and c.decorrelated == bool(decorrelated)):
                return c
        raise KeyError((lam, cut, decorrelated))

    def to_dict(self):
        return {
            "K": self.K, "region": list(self.region), "thresholds": self.thresholds,
            "cells": [c.to_dict() for c in self.cells], "config": self.config.to_dict(),
            "generator": self.spec.to_dict(), "calibration": self.calibration,
        }

    def write_csv(self, path_or_buffer):
        own = isinstance(path_or_buffer, (str, Path))
        fh = open(path_or_buffer, "w", newline="") if own else path_or_buffer
        try:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lambda", "cut", "decorrelated", "power", "ci_lo", "ci_hi", "n_reps"])
            for c in self.cells:
                w.writerow([repr(float(c.lam)), repr(float(c.cut)), str(c.decorrelated).lower(),
                            repr(float(c.power)),
                            repr(float(c.interval.lower)) if c.interval else "",
                            repr(float(c.interval.upper)) if c.interval else "",
                            c.successes])
        finally:
            if own:
                fh.close()


def _base_spec(specs) -> tuple[GeneratorSpec, tuple | None]:
    if isinstance(specs, GeneratorSpec):
        return specs, None
    specs = list(specs)
    if not specs:
        raise InvalidArgumentError("empty generator grid")
    base = replace(specs[0], lam=0.0)
    for s in specs[1:]:
        if replace(s, lam=0.0) != base:
            raise InvalidArgumentError("generator grid entries may differ only in lam")
    return base, tuple(float(s.lam) for s in specs)


CUT_BOUNDARY_POINTS = 1025


def _boundary_grid(masses):
    """Linear mass grid, refined geometrically toward zero for log-mass maps."""
    lo, hi = float(np.min(masses)), float(np.max(masses))
    grid = np.linspace(lo, hi, CUT_BOUNDARY_POINTS)
    positive = masses[masses > 0]
    if positive.size and hi > positive.min():
        grid = np.union1d(grid, np.geomspace(positive.min(), hi, CUT_BOUNDARY_POINTS))
    return grid


def _cut_boundary(tmap, level, grid, z_lo, z_hi, iters=32):
    """Smallest score passing ``transport >= level`` at each grid mass.

    The transport is nondecreasing in the score, so a cut on it is a
    mass-dependent cut on the raw score. Bisection finds that edge on a mass
    grid much finer than any bandwidth, and events are then compared with
    the interpolated edge instead of being transported one by one. Masses
    where no score in ``[z_lo, z_hi]`` passes get an edge above ``z_hi``.
    """
    lo = np.full(grid.size, float(z_lo))
    hi = np.full(grid.size, float(z_hi))
    none_pass = tmap.transport(hi, grid) < level
    all_pass = tmap.transport(lo, grid) >= level
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        up = tmap.transport(mid, grid) >= level
        hi = np.where(up, mid, hi)
        lo = np.where(up, lo, mid)
    edge = np.where(all_pass, float(z_lo), hi)
    return np.where(none_pass, float(z_hi) + 1.0, edge)


def power_analysis(specs, config: PowerConfig = PowerConfig(), *, workers: int = 1,
                   tmap=None) -> PowerReport:
    """Rejection rates over the (signal fraction, cut level, decorrelated) grid.

    ``specs`` is one :class:`GeneratorSpec`, whose signal fraction is ignored
    in favour of ``config.lambdas``, or a list of specs that differ only in
    their signal fraction. A pre-fitted transport map may be supplied.
    Replicate ``r`` uses the same background draw in every cell and nested
    signal draws across signal fractions, so cells are paired.
    """
    from .bumphunt import SignalRegionSpec, bin_data, censored_mle_em, delta_method_test
    from .calibration import (CalibrationConfig, cut_quantile, run_replicates, select_k,
                              select_signal_region)
    from .cdot import fit_cdot_locscale, fit_cdot_split, one_over_jsd
    from .errors import OtbumpError, UndefinedMetricError
    from .estimators import clopper_pearson

    spec, lambdas = _base_spec(specs)
    if lambdas is not None:
        config = replace(config, lambdas=lambdas)
    seed = config.seed if config.seed is not None else spec.seed
    spec = replace(spec, seed=seed)

    # validation material
    if tmap is None and any(config.decorrelated):
        train = sample_class(spec, config.n_train, 0, stream=STREAM_TRAIN)
        if config.approach == "split":
            tmap = fit_cdot_split(train.score, train.mass, splits=config.splits)
        else:
            tmap = fit_cdot_locscale(train.score, train.mass, clamp=True)
    cut_sample = sample_class(spec, config.n_cut_sample, 0, stream=STREAM_VALIDATION, index=0)
    thresholds = {"raw": [cut_quantile(cut_sample.score, t) for t in config.cut_levels]}
    if tmap is not None:
        moved = tmap.transport(cut_sample.score, cut_sample.mass)
        thresholds["decorrelated"] = [cut_quantile(moved, t) for t in config.cut_levels]

    if config.region is None:
        sig_val = sample_class(spec, config.n_validation_signal, 1, stream=STREAM_VALIDATION,
                               index=1)
        region = select_signal_region(sig_val.mass, *config.region_quantiles)
    else:
        region = SignalRegionSpec(*config.region)

    calibration = None
    K = config.K
    if K is None:
        val = sample_class(spec, config.n_validation, 0, stream=STREAM_VALIDATION, index=2)
        ccfg = CalibrationConfig(
            alpha=config.alpha, n=config.n, k_grid=tuple(config.k_grid),
            n_datasets=config.calibration_datasets or config.n_datasets,
            region_quantiles=tuple(config.region_quantiles), seed=seed,
            bins_per_side=config.bins_per_side, cut_levels=tuple(config.cut_levels))
        sel = select_k(val.mass, ccfg, region, workers=workers)
        if sel.selected_k is None:
            raise OtbumpError("no Bernstein order passed the convergence screen")
        K = sel.selected_k
        calibration = sel.to_dict()

    # test pools
    bkg_pool = sample_class(spec, config.pool_background, 0, stream=STREAM_POOL, index=0)
    sig_pool = sample_class(spec, config.pool_signal, 1, stream=STREAM_POOL, index=1)
    # (background score, signal score, threshold) per pipeline and cut level;
    # an event passes when its score is at least the threshold
    cut_inputs = {False: [(bkg_pool.score, sig_pool.score, q) for q in thresholds["raw"]]}
    if tmap is not None:
        m_all = np.concatenate([bkg_pool.mass, sig_pool.mass])
        z_all = np.concatenate([bkg_pool.score, sig_pool.score])
        grid = _boundary_grid(m_all)
        cut_inputs[True] = []
        for q in thresholds["decorrelated"]:
            if not np.isfinite(q):
                cut_inputs[True].append((bkg_pool.score, sig_pool.score, q))
                continue
            edge = _cut_boundary(tmap, q, grid, z_all.min(), z_all.max())
            cut_inputs[True].append((bkg_pool.score - np.interp(bkg_pool.mass, grid, edge),
                                     sig_pool.score - np.interp(sig_pool.mass, grid, edge),
                                     0.0))
    n_sig = [int(round(lam * config.n)) for lam in config.lambdas]
    crit = float(stats.norm.isf(config.alpha))
    edges = np.asarray(config.mass_bins, dtype=float)

    def replicate(r):
        rng = make_rng(seed, STREAM_REPLICATE, r)
        b_idx = rng.choice(bkg_pool.mass.size, size=config.n, replace=False)
        s_idx = rng.choice(sig_pool.mass.size, size=max(n_sig), replace=False)
        out = {}
        for li, ns in enumerate(n_sig):
            bi, si = b_idx[: config.n - ns], s_idx[:ns]
            mass = np.concatenate([bkg_pool.mass[bi], sig_pool.mass[si]])
            for dec in config.decorrelated:
                for ti, (sb, ss, q) in enumerate(cut_inputs[dec]):
                    score = np.concatenate([sb[bi], ss[si]])
                    keep = score >= q
                    n_keep = int(keep.sum())
                    jsd = None
                    if ns == 0 and config.cut_levels[ti] > 0:
                        try:
                            jsd = one_over_jsd(score, mass, None, edges, cut=q)
                        except UndefinedMetricError:
                            jsd = None
                    try:
                        counts = bin_data(mass[keep], region, config.bins_per_side)
                        em = censored_mle_em(counts, K)
                        if not em.converged:
                            raise OtbumpError("fit did not converge")
                        fit = delta_method_test(counts, em.density, em_result=em)
                        res = (fit.statistic > crit, fit.lam)
                    except OtbumpError:
                        res = None
                    out[(li, dec, ti)] = (res, n_keep, jsd)
        return out

    results = run_replicates(replicate, int(config.n_datasets), workers)

    cells = []
    for li, lam in enumerate(config.lambdas):
        for dec in config.decorrelated:
            for ti, t in enumerate(config.cut_levels):
                rows = [r[(li, dec, ti)] for r in results]
                ok = [x[0] for x in rows if x[0] is not None]
                rej = int(sum(bool(a) for a, _ in ok))
                survivors = np.array([x[1] for x in rows], dtype=float)
                jsds = [x[2] for x in rows if x[2] is not None]
                cells.append(PowerCell(
                    lam=float(lam), cut=float(t), decorrelated=bool(dec), rejections=rej,
                    successes=len(ok), failures=len(rows) - len(ok),
                    interval=clopper_pearson(rej, len(ok)) if ok else None,
                    mean_lambda_hat=float(np.mean([b for _, b in ok])) if ok else float("nan"),
                    mean_surviving=float(survivors.mean()),
                    low_statistics=bool(np.mean(survivors < config.min_events)
                                        > config.low_statistics_fraction),
                    mean_one_over_jsd=float(np.mean(jsds)) if jsds else None,
                ))
    return PowerReport(cells=tuple(cells), K=int(K), region=(region.lower, region.upper),
                       thresholds=thresholds, config=config, spec=spec,
                       calibration=calibration)


__all__ = [
    "CSV_COLUMNS", "EventSet", "GeneratorSpec", "LabeledEvent", "NaiveBayesClassifier",
    "PowerCell", "PowerConfig", "PowerReport", "power_analysis",
    "auc", "builtin_classifier", "gaussian_auc", "make_rng", "read_csv", "sample_class",
    "sample_events", "transform_mass", "write_csv",
]
