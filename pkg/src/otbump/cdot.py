"""Optimal-transport decorrelation of a classifier score from a protected mass.

For each mass ``m`` the monotone map ``T_m(z) = F^-1(F(z | m))`` carries the
conditional score distribution of background events onto their marginal
score distribution, so the transported score is independent of mass while
keeping the marginal unchanged. The conditional CDF is estimated either
cell by cell over a partition of the mass range, or through a
location-scale model on the logit scale with standardized residuals.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.spatial.distance import jensenshannon
from scipy.special import logit

from .errors import (
    FitFailureError,
    InvalidArgumentError,
    InvalidConfigurationError,
    SchemaError,
    UndefinedMetricError,
)
from .estimators import (
    ConditionalCdfEstimator,
    RegressionFn,
    StepCdf,
    default_bandwidth_grid,
    empirical_cdf,
    fit_conditional_cdf,
    inverse_cdf,
    loocv_regression_bandwidth,
    lscv_bandwidths,
    nonparametric_regression,
)

MAP_SCHEMA_VERSION = 1
MIN_CELL_EVENTS = 50
SCORE_CLAMP = 1e-6


@dataclass(frozen=True)
class BandwidthGrids:
    """Candidate bandwidths for the score axis and the mass axis.

    ``None`` on either axis means a default geometric grid around the
    normal-reference bandwidth of that axis in the data being fitted.
    """

    h_z: Sequence[float] | None = None
    h_m: Sequence[float] | None = None
    n_points: int = 8

    def resolve(self, z, m):
        hz = default_bandwidth_grid(z, self.n_points) if self.h_z is None else np.asarray(self.h_z, float)
        hm = default_bandwidth_grid(m, self.n_points) if self.h_m is None else np.asarray(self.h_m, float)
        return hz, hm


def clamp_scores(scores, eps: float = SCORE_CLAMP):
    """Clip scores into ``[eps, 1 - eps]``, warning with the number changed."""
    s = np.asarray(scores, dtype=float)
    out = np.clip(s, eps, 1.0 - eps)
    n_changed = int(np.count_nonzero(out != s))
    if n_changed:
        warnings.warn(f"clamped {n_changed} scores into [{eps}, {1 - eps}]", stacklevel=2)
    return out, n_changed


@dataclass(frozen=True)
class SplitModel:
    """Conditional CDF estimators with one bandwidth pair per mass cell.

    All cells share the full training sample. A query uses the bandwidths of
    the cell its mass falls in.
    """

    splits: tuple
    cells: tuple  # of ConditionalCdfEstimator

    def cell_index(self, m):
        return np.searchsorted(np.asarray(self.splits, dtype=float), m, side="right")

    def conditional_cdf(self, z, m):
        out = np.empty(z.shape)
        flags = np.zeros(z.shape, dtype=bool)
        idx = self.cell_index(m)
        for c, est in enumerate(self.cells):
            sel = idx == c
            if sel.any():
                out[sel], flags[sel] = est.evaluate(z[sel], m[sel], return_flags=True)
        return out, flags


@dataclass(frozen=True)
class LocScaleModel:
    """``g(z) = mu(x) + sigma(x) eps`` with ``g`` = logit and ``x`` = log mass.

    Either transform can be switched off, in which case the identity is used.
    """

    mean: RegressionFn
    variance: RegressionFn
    residual_cdf: ConditionalCdfEstimator
    use_logit: bool = True
    use_log_mass: bool = True

    def score_axis(self, z):
        return logit(z) if self.use_logit else z

    def mass_axis(self, m):
        if self.use_log_mass:
            if np.any(m <= 0):
                raise InvalidArgumentError("log-mass model needs positive masses")
            return np.log(m)
        return m

    def conditional_cdf(self, z, m):
        x = self.mass_axis(m)
        mu, f1 = self.mean.predict(x, return_flags=True)
        var, f2 = self.variance.predict(x, return_flags=True)
        eps = (self.score_axis(z) - mu) / np.sqrt(var)
        vals, f3 = self.residual_cdf.evaluate(eps, x, return_flags=True)
        return vals, f1 | f2 | f3


@dataclass(frozen=True)
class TransportMap:
    """Fitted decorrelation transform.

    Attributes
    ----------
    marginal : StepCdf
        Score ECDF of the training background.
    model : SplitModel or LocScaleModel
        Conditional CDF of score given mass.
    mass_range : tuple of float
        Smallest and largest training mass. Queries outside are evaluated
        at the nearest bound and flagged.
    train_scores, train_masses : ndarray
        Training sample as given (after clamping), kept for serialization.
    info : dict
        Fit diagnostics: selected bandwidths and clamp counts.
    """

    marginal: StepCdf
    model: SplitModel | LocScaleModel
    mass_range: tuple
    train_scores: np.ndarray = field(repr=False)
    train_masses: np.ndarray = field(repr=False)
    info: dict = field(default_factory=dict)

    @property
    def approach(self) -> str:
        return "split" if isinstance(self.model, SplitModel) else "locscale"

    def _prepare(self, score, mass):
        z, m = np.broadcast_arrays(np.asarray(score, dtype=float), np.asarray(mass, dtype=float))
        z = z.astype(float).ravel()
        m = m.astype(float).ravel()
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(m))):
            raise InvalidArgumentError("scores and masses must be finite")
        lo, hi = self.mass_range
        outside = (m < lo) | (m > hi)
        m = np.clip(m, lo, hi)
        n_clamped = 0
        if self.approach == "locscale" and self.model.use_logit:
            z, n_clamped = clamp_scores(z)
        return z, m, outside, n_clamped

    def conditional_cdf(self, score, mass):
        z, m, _, _ = self._prepare(score, mass)
        return self.model.conditional_cdf(z, m)[0]

    def transport(self, score, mass, return_info=False):
        """Transported scores; with ``return_info`` also a diagnostics dict.

        The diagnostics hold a boolean ``flagged`` array (mass outside the
        training range or no training mass within the kernel window) and
        the number of clamped scores.
        """
        shape = np.broadcast(np.asarray(score), np.asarray(mass)).shape
        z, m, outside, n_clamped = self._prepare(score, mass)
        cdf, flags = self.model.conditional_cdf(z, m)
        out = np.asarray(inverse_cdf(self.marginal, cdf)).reshape(shape)
        if return_info:
            return out, {"flagged": (flags | outside).reshape(shape), "n_clamped": n_clamped}
        return out if out.ndim else float(out)

    __call__ = transport

    def morph(self, score, mass, theta):
        """Point on the transport geodesic: ``theta * score + (1 - theta) * T(score)``."""
        return morph(self, score, mass, theta)

    # -- persistence ----------------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "schema_version": MAP_SCHEMA_VERSION,
            "kind": "transport_map",
            "approach": self.approach,
            "train_scores": self.train_scores.tolist(),
            "train_masses": self.train_masses.tolist(),
            "info": self.info,
        }
        if isinstance(self.model, SplitModel):
            d["splits"] = list(self.model.splits)
            d["bandwidths"] = [[c.h_z, c.h_m] for c in self.model.cells]
        else:
            md = self.model
            d.update(
                use_logit=md.use_logit, use_log_mass=md.use_log_mass,
                h_mean=md.mean.bandwidth, h_variance=md.variance.bandwidth,
                h_z=md.residual_cdf.h_z, h_m=md.residual_cdf.h_m,
            )
        return d

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def from_dict(cls, d) -> "TransportMap":
        if d.get("kind") != "transport_map":
            raise SchemaError("not a transport map document")
        if d.get("schema_version") != MAP_SCHEMA_VERSION:
            raise SchemaError(f"unsupported map schema version {d.get('schema_version')!r}")
        z = np.asarray(d["train_scores"], dtype=float)
        m = np.asarray(d["train_masses"], dtype=float)
        if d["approach"] == "split":
            return _build_split(z, m, tuple(d["splits"]), [tuple(b) for b in d["bandwidths"]],
                                dict(d.get("info", {})))
        if d["approach"] == "locscale":
            return _build_locscale(z, m, d["h_mean"], d["h_variance"], d["h_z"], d["h_m"],
                                   d["use_logit"], d["use_log_mass"], dict(d.get("info", {})))
        raise SchemaError(f"unknown approach {d['approach']!r}")

    @classmethod
    def load(cls, path) -> "TransportMap":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _as_pairs(scores, masses):
    z = np.asarray(scores, dtype=float).ravel()
    m = np.asarray(masses, dtype=float).ravel()
    if z.size != m.size:
        raise InvalidArgumentError(f"{z.size} scores but {m.size} masses")
    if z.size == 0:
        raise InvalidArgumentError("empty background sample")
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(m))):
        raise InvalidArgumentError("scores and masses must be finite")
    return z, m


def _build_split(z, m, splits, bandwidths, info):
    # Every cell smooths over all training pairs with its own bandwidths.
    # Restricting a cell to its own events would make the estimate one-sided
    # at each split, and that bias shows up as a step in the cut efficiency.
    cells = [fit_conditional_cdf(z, m, h_z, h_m) for h_z, h_m in bandwidths]
    model = SplitModel(splits=tuple(float(s) for s in splits), cells=tuple(cells))
    return TransportMap(marginal=empirical_cdf(z), model=model,
                        mass_range=(float(m.min()), float(m.max())),
                        train_scores=z, train_masses=m, info=info)


def fit_cdot_split(scores, masses, splits: Sequence[float] = (),
                   bandwidth_grids: BandwidthGrids | None = None) -> TransportMap:
    """Fit the cell-wise conditional CDF model.

    Cells are ``[min m, s_1), [s_1, s_2), ..., [s_k, max m]``; each gets its
    own bandwidth pair by least-squares cross-validation and must hold at
    least 50 events.
    """
    z, m = _as_pairs(scores, masses)
    grids = bandwidth_grids or BandwidthGrids()
    splits = np.asarray(splits, dtype=float).ravel()
    lo, hi = float(m.min()), float(m.max())
    if splits.size and (np.any(np.diff(splits) <= 0) or splits[0] <= lo or splits[-1] >= hi):
        raise InvalidConfigurationError(
            f"splits must increase strictly inside the mass range ({lo}, {hi}): {splits.tolist()}"
        )
    edges = np.concatenate([[lo], splits, [hi]])
    idx = np.searchsorted(splits, m, side="right")
    bandwidths, chosen = [], []
    for c in range(splits.size + 1):
        sel = idx == c
        count = int(sel.sum())
        if count < MIN_CELL_EVENTS:
            raise InvalidConfigurationError(
                f"mass cell {c} [{edges[c]}, {edges[c + 1]}] holds {count} events, "
                f"need at least {MIN_CELL_EVENTS}"
            )
        hz_grid, hm_grid = grids.resolve(z[sel], m[sel])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = lscv_bandwidths(z[sel], m[sel], hz_grid, hm_grid)
        bandwidths.append((res.h_z, res.h_m))
        chosen.append({"cell": c, "n": count, "h_z": res.h_z, "h_m": res.h_m,
                       "h_z_at_grid_edge": res.h_z in (hz_grid.min(), hz_grid.max()),
                       "h_m_at_grid_edge": res.h_m in (hm_grid.min(), hm_grid.max())})
    return _build_split(z, m, tuple(splits.tolist()), bandwidths, {"cells": chosen})


def _build_locscale(z, m, h_mean, h_var, h_z, h_m, use_logit, use_log_mass, info):
    y = logit(z) if use_logit else z
    if use_log_mass:
        if np.any(m <= 0):
            raise InvalidArgumentError("log-mass model needs positive masses")
        x = np.log(m)
    else:
        x = m
    mean = nonparametric_regression(x, y, h_mean)
    eta = y - mean.predict(x)
    variance = nonparametric_regression(x, eta * eta, h_var)
    var_at_x = variance.predict(x)
    if not np.all(var_at_x > 0):
        raise FitFailureError("fitted residual variance is not positive",
                              {"min_variance": float(np.min(var_at_x))})
    eps = eta / np.sqrt(var_at_x)
    resid = fit_conditional_cdf(eps, x, h_z, h_m)
    model = LocScaleModel(mean=mean, variance=variance, residual_cdf=resid,
                          use_logit=use_logit, use_log_mass=use_log_mass)
    return TransportMap(marginal=empirical_cdf(z), model=model,
                        mass_range=(float(m.min()), float(m.max())),
                        train_scores=z, train_masses=m, info=info)


def fit_cdot_locscale(scores, masses, bandwidth_grids: BandwidthGrids | None = None, *,
                      regression_grid_points: int = 8, use_logit: bool = True,
                      use_log_mass: bool = True, clamp: bool = False) -> TransportMap:
    """Fit the location-scale model.

    The mean and variance regressions use leave-one-out CV bandwidths; the
    residual conditional CDF gets one bandwidth pair by least-squares
    cross-validation. Scores of exactly 0 or 1 are rejected unless
    ``clamp`` is set, in which case they are clipped with a counted warning.
    """
    z, m = _as_pairs(scores, masses)
    n_clamped = 0
    if use_logit:
        if clamp:
            z, n_clamped = clamp_scores(z)
        elif np.any((z <= 0) | (z >= 1)):
            raise InvalidArgumentError("scores must lie strictly inside (0, 1) for the logit")
    if use_log_mass and np.any(m <= 0):
        raise InvalidArgumentError("masses must be positive for the log-mass model")
    y = logit(z) if use_logit else z
    x = np.log(m) if use_log_mass else m
    h_mean, _ = loocv_regression_bandwidth(x, y, default_bandwidth_grid(x, regression_grid_points))
    mean = nonparametric_regression(x, y, h_mean)
    eta2 = (y - mean.predict(x)) ** 2
    h_var, _ = loocv_regression_bandwidth(x, eta2, default_bandwidth_grid(x, regression_grid_points))
    variance = nonparametric_regression(x, eta2, h_var)
    var_at_x = variance.predict(x)
    if not np.all(var_at_x > 0):
        raise FitFailureError("fitted residual variance is not positive",
                              {"min_variance": float(np.min(var_at_x))})
    eps = (y - mean.predict(x)) / np.sqrt(var_at_x)
    grids = bandwidth_grids or BandwidthGrids()
    hz_grid, hm_grid = grids.resolve(eps, x)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = lscv_bandwidths(eps, x, hz_grid, hm_grid)
    info = {"h_mean": h_mean, "h_variance": h_var, "h_z": res.h_z, "h_m": res.h_m,
            "n_clamped": n_clamped}
    return _build_locscale(z, m, h_mean, h_var, res.h_z, res.h_m, use_logit, use_log_mass, info)


def transport(tmap: TransportMap, score, mass):
    """Apply ``T_m(z)``; masses outside the training range use the nearest bound."""
    return tmap.transport(score, mass)


def morph(tmap: TransportMap, score, mass, theta: float):
    """``theta * score + (1 - theta) * T_m(score)``; ``theta = 1`` is the raw score."""
    theta = float(theta)
    if not 0.0 <= theta <= 1.0:
        raise InvalidArgumentError(f"theta must lie in [0, 1], got {theta}")
    h = np.asarray(score, dtype=float)
    moved = tmap.transport(score, mass)
    out = theta * h + (1.0 - theta) * moved
    return out if np.ndim(out) else float(out)


# -- diagnostics and metrics ----------------------------------------------------

def independence_diagnostic(scores, masses, n_mass_slices: int = 10) -> float:
    """Largest KS distance between a mass slice's scores and all scores.

    Slices hold equal counts (up to one event) in mass order.
    """
    z, m = _as_pairs(scores, masses)
    k = int(n_mass_slices)
    if k < 2:
        raise InvalidConfigurationError("need at least two mass slices")
    if z.size // k < 20:
        raise InvalidConfigurationError(
            f"{z.size} events over {k} slices leaves fewer than 20 per slice"
        )
    order = np.argsort(m, kind="stable")
    return float(max(stats.ks_2samp(z[part], z, method="asymp").statistic
                     for part in np.array_split(order, k)))


def _signal_cut(signal_scores):
    s = np.asarray(signal_scores, dtype=float).ravel()
    if s.size == 0:
        raise InvalidArgumentError("signal scores are empty")
    return float(np.median(s))


def r50(signal_scores, background_scores, cut: float | None = None) -> float:
    """Inverse background efficiency at the signal-median cut.

    Events pass when their score is at least the cut. Returns ``inf`` when
    no background passes.
    """
    b = np.asarray(background_scores, dtype=float).ravel()
    if b.size == 0:
        raise InvalidArgumentError("background scores are empty")
    cut = _signal_cut(signal_scores) if cut is None else float(cut)
    frac = np.count_nonzero(b >= cut) / b.size
    return float("inf") if frac == 0 else 1.0 / frac


def one_over_jsd(background_scores, background_masses, signal_scores, mass_bins,
                 cut: float | None = None) -> float:
    """Reciprocal base-2 Jensen-Shannon divergence of pass/fail background mass histograms.

    Background events are split at the signal-median score cut (or ``cut``);
    each side's masses are histogrammed on ``mass_bins`` and normalized.
    Masses outside the bin range are ignored. Returns ``inf`` when the two
    histograms coincide.
    """
    z, m = _as_pairs(background_scores, background_masses)
    edges = np.asarray(mass_bins, dtype=float).ravel()
    if edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise InvalidArgumentError("mass_bins must be a strictly increasing edge list")
    cut = _signal_cut(signal_scores) if cut is None else float(cut)
    above = z >= cut
    if above.all() or not above.any():
        raise UndefinedMetricError("every background event falls on one side of the cut")
    h_hi = np.histogram(m[above], edges)[0].astype(float)
    h_lo = np.histogram(m[~above], edges)[0].astype(float)
    if h_hi.sum() == 0 or h_lo.sum() == 0:
        raise UndefinedMetricError("no background mass falls inside the bins on one side")
    jsd = jensenshannon(h_hi / h_hi.sum(), h_lo / h_lo.sum(), base=2) ** 2
    return float("inf") if jsd <= 0 else float(1.0 / jsd)


@dataclass(frozen=True)
class DecorrelationMetrics:
    one_over_jsd: float
    r50: float
    cut: float
    mass_bins: tuple

    def to_dict(self):
        return {"one_over_jsd": self.one_over_jsd, "r50": self.r50, "cut": self.cut,
                "mass_bins": list(self.mass_bins)}


def decorrelation_metrics(signal_scores, background_scores, background_masses,
                          mass_bins) -> DecorrelationMetrics:
    cut = _signal_cut(signal_scores)
    return DecorrelationMetrics(
        one_over_jsd=one_over_jsd(background_scores, background_masses, signal_scores,
                                  mass_bins, cut),
        r50=r50(signal_scores, background_scores, cut),
        cut=cut,
        mass_bins=tuple(float(e) for e in np.asarray(mass_bins, dtype=float)),
    )

