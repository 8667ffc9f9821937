"""Nonparametric building blocks.

Empirical CDFs and their interpolated inverses, a kernel estimator of the
conditional CDF of a score given a mass with least-squares cross-validated
bandwidths, Nadaraya-Watson regression, and Clopper-Pearson intervals.

All fitted objects are frozen dataclasses holding numpy arrays; they are
never mutated after construction and can be evaluated from several threads.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import signal, sparse, stats
from scipy.special import ndtr

from . import _kernels
from .errors import DegenerateWeightsError, InvalidArgumentError

#: Gaussian kernels are truncated at this many bandwidths.  Beyond it the
#: weight is below 1.3e-14 of the peak; a query with no training point inside
#: the window falls back to the nearest training location and is flagged.
KERNEL_CUTOFF = 8.0


def _as_finite_1d(values, name):
    arr = np.asarray(values, dtype=float).ravel()
    if arr.size == 0:
        raise InvalidArgumentError(f"{name} must be nonempty")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class StepCdf:
    """Right-continuous empirical CDF.

    Attributes
    ----------
    values : ndarray
        Distinct sample values, ascending.
    probs : ndarray
        Cumulative probability at each value; ties accumulate and the last
        entry is exactly 1.
    """

    values: np.ndarray
    probs: np.ndarray

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(self.values, x, side="right")
        out = np.where(idx > 0, self.probs[np.maximum(idx - 1, 0)], 0.0)
        return out if out.ndim else float(out)

    @property
    def n_values(self):
        return len(self.values)


def empirical_cdf(samples) -> StepCdf:
    """Build the ECDF of ``samples`` with jumps of 1/n per observation."""
    arr = _as_finite_1d(samples, "samples")
    values, counts = np.unique(arr, return_counts=True)
    probs = np.cumsum(counts) / arr.size
    probs[-1] = 1.0
    return StepCdf(values=values, probs=probs)


def inverse_cdf(cdf: StepCdf, p):
    """Quantile function of ``cdf``, linear between order statistics.

    Knots sit at the midpoint of each jump, so the map is strictly increasing
    on the interior and clamps to the smallest and largest sample at the
    extremes (p=0 and p=1 in particular).
    """
    p = np.asarray(p, dtype=float)
    lower = np.concatenate(([0.0], cdf.probs[:-1]))
    knots = 0.5 * (lower + cdf.probs)
    out = np.interp(np.clip(p, 0.0, 1.0), knots, cdf.values)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class ConditionalCdfEstimator:
    """Kernel estimator of F(z | m).

    ``F(z|m) = sum_i K((m - m_i)/h_m) G((z - z_i)/h_z) / sum_i K((m - m_i)/h_m)``
    with a Gaussian ``K`` truncated at ``KERNEL_CUTOFF`` bandwidths and ``G``
    the standard normal CDF. Training pairs are stored sorted by mass.
    """

    z: np.ndarray
    m: np.ndarray
    h_z: float
    h_m: float
    kernel: str = "gaussian"

    def evaluate(self, z, m, return_flags=False):
        """Evaluate at paired points ``(z[k], m[k])`` (broadcast together).

        With ``return_flags`` a boolean array marks queries that had no
        training mass within the kernel window and were evaluated at the
        nearest training mass instead.
        """
        z, m = np.broadcast_arrays(np.asarray(z, dtype=float), np.asarray(m, dtype=float))
        shape = z.shape
        vals, flags = _kernels.kernel_ccdf(
            self.m, self.z, np.ascontiguousarray(z.ravel()),
            np.ascontiguousarray(m.ravel()), float(self.h_z), float(self.h_m), KERNEL_CUTOFF,
        )
        vals = vals.reshape(shape)
        if return_flags:
            return vals, flags.reshape(shape).astype(bool)
        return vals

    __call__ = evaluate

    def mass_range(self):
        return float(self.m[0]), float(self.m[-1])


def fit_conditional_cdf(z, m, h_z, h_m) -> ConditionalCdfEstimator:
    """Store training pairs and bandwidths for a conditional CDF estimator."""
    z = _as_finite_1d(z, "z")
    m = _as_finite_1d(m, "m")
    if z.size != m.size:
        raise InvalidArgumentError(f"z and m lengths differ ({z.size} != {m.size})")
    if z.size < 2:
        raise InvalidArgumentError("need at least two training pairs")
    if not (h_z > 0 and h_m > 0):
        raise InvalidArgumentError("bandwidths must be positive")
    if np.ptp(m) == 0 and h_m < 1e-12 * max(1.0, abs(m[0])):
        raise DegenerateWeightsError(
            "all training masses are identical and h_m is too small for the "
            "kernel weights to be resolved"
        )
    order = np.argsort(m, kind="stable")
    return ConditionalCdfEstimator(
        z=np.ascontiguousarray(z[order]), m=np.ascontiguousarray(m[order]),
        h_z=float(h_z), h_m=float(h_m),
    )


@dataclass(frozen=True)
class LscvResult:
    """Outcome of the bandwidth grid search.

    ``scores[i, j]`` is the cross-validation criterion at
    ``(h_z_grid[i], h_m_grid[j])``. ``single_point`` is set when the grid had
    one cell, so nothing was actually compared.
    """

    h_z: float
    h_m: float
    h_z_grid: np.ndarray
    h_m_grid: np.ndarray
    scores: np.ndarray
    n_bins: int
    single_point: bool = False

    def __iter__(self):
        yield self.h_z
        yield self.h_m


class _BinnedAxis:
    """Linear binning of a 1-d sample for fast leave-one-out kernel sums.

    Kernel-weighted sums over the sample, evaluated back at the sample
    points, are approximated by binning the points linearly onto an even
    grid, convolving with the truncated Gaussian kernel, and interpolating.
    The error is second order in the bin width, which is kept at a fixed
    fraction of the smallest bandwidth.
    """

    def __init__(self, x, h_min, bins_per_bandwidth=10, max_bins=1 << 15):
        lo, hi = float(x.min()), float(x.max())
        span = max(hi - lo, h_min)
        self.n_bins = int(min(max_bins, max(16, np.ceil(span * bins_per_bandwidth / h_min) + 2)))
        self.delta = span / (self.n_bins - 1)
        pos = (x - lo) / self.delta
        self.left = np.clip(np.floor(pos).astype(np.int64), 0, self.n_bins - 2)
        self.frac = np.clip(pos - self.left, 0.0, 1.0)
        n = x.size
        rows = np.concatenate([self.left, self.left + 1])
        cols = np.concatenate([np.arange(n), np.arange(n)])
        weights = np.concatenate([1.0 - self.frac, self.frac])
        self._binner = sparse.csr_matrix((weights, (rows, cols)), shape=(self.n_bins, n))

    def bin(self, values):
        return self._binner @ values

    def smooth_at_points(self, binned, h):
        """Kernel sum over all points, evaluated at every point (own term included)."""
        reach = int(min(self.n_bins - 1, np.ceil(KERNEL_CUTOFF * h / self.delta)))
        offsets = np.arange(-reach, reach + 1) * self.delta / h
        kern = np.exp(-0.5 * offsets * offsets)
        if binned.ndim == 2:
            kern = kern[:, None]
        smooth = signal.fftconvolve(binned, kern, mode="same", axes=0)
        a = 1.0 - self.frac
        b = self.frac
        if binned.ndim == 2:
            a, b = a[:, None], b[:, None]
        return a * smooth[self.left] + b * smooth[self.left + 1]


def lscv_bandwidths(z, m, h_z_grid, h_m_grid, *, n_zgrid=64, bins_per_bandwidth=10,
                    max_bins=1 << 15) -> LscvResult:
    """Grid search minimizing the leave-one-out CV criterion.

    The criterion is ``mean_j sum_g (1{z_j <= z_g} - F_{-j}(z_g | m_j))^2 dz``
    on ``n_zgrid`` equally spaced points spanning the observed z range,
    averaged over every training pair. Kernel sums in m are computed on a
    linearly binned mass axis with at least ``bins_per_bandwidth`` bins per
    smallest ``h_m`` and evaluated at each ``m_j`` by linear interpolation;
    the held-out pair's own term is removed exactly. Ties go to the smaller
    ``h_m`` and then the smaller ``h_z``.
    """
    z = _as_finite_1d(z, "z")
    m = _as_finite_1d(m, "m")
    if z.size != m.size:
        raise InvalidArgumentError("z and m lengths differ")
    if z.size < 3:
        raise InvalidArgumentError("need at least three training pairs")
    hz = np.sort(np.asarray(h_z_grid, dtype=float).ravel())
    hm = np.sort(np.asarray(h_m_grid, dtype=float).ravel())
    if hz.size == 0 or hm.size == 0 or np.any(hz <= 0) or np.any(hm <= 0):
        raise InvalidArgumentError("bandwidth grids must be nonempty and positive")

    n = z.size
    zgrid = np.linspace(z.min(), z.max(), n_zgrid)
    dz = zgrid[1] - zgrid[0] if n_zgrid > 1 else 1.0
    indicator = z[:, None] <= zgrid[None, :]

    axis = _BinnedAxis(m, hm[0], bins_per_bandwidth, max_bins)
    ones = np.ones(n)
    counts = axis.bin(ones)

    scores = np.empty((hz.size, hm.size))
    for i, h_z in enumerate(hz):
        own = ndtr((zgrid[None, :] - z[:, None]) / h_z)
        binned = axis.bin(own)
        for j, h_m in enumerate(hm):
            num = axis.smooth_at_points(binned, h_m) - own
            den = axis.smooth_at_points(counts, h_m) - 1.0
            # an isolated pair has no neighbours once held out; predict 1/2
            ok = den > 1e-8
            f = np.full_like(num, 0.5)
            f[ok] = np.clip(num[ok] / den[ok, None], 0.0, 1.0)
            scores[i, j] = np.sum((indicator - f) ** 2) * dz / n

    # scan (h_m, h_z) in ascending order; values equal up to rounding are ties
    j, i = divmod(_first_near_min(scores.T.ravel()), hz.size)
    single = hz.size * hm.size == 1
    if single:
        warnings.warn("bandwidth grid has a single cell; returning it unchecked",
                      stacklevel=2)
    return LscvResult(h_z=float(hz[i]), h_m=float(hm[j]), h_z_grid=hz, h_m_grid=hm,
                      scores=scores, n_bins=axis.n_bins, single_point=single)


def _first_near_min(values, rtol=1e-12):
    """Index of the first entry within ``rtol`` of the minimum."""
    low = np.min(values)
    return int(np.flatnonzero(values <= low + rtol * max(abs(low), 1e-300))[0])


def default_bandwidth_grid(x, n_points=8, low=0.25, high=4.0):
    """Geometric grid around the normal-reference bandwidth of ``x``."""
    x = _as_finite_1d(x, "x")
    scale = np.std(x)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    if iqr > 0:
        scale = min(scale, iqr / 1.349)
    if scale <= 0:
        scale = 1.0
    ref = 1.06 * scale * x.size ** (-0.2)
    return ref * np.geomspace(low, high, n_points)


@dataclass(frozen=True)
class RegressionFn:
    """Local-constant (Nadaraya-Watson) regression with a Gaussian kernel."""

    x: np.ndarray
    y: np.ndarray
    bandwidth: float

    def predict(self, x0, return_flags=False):
        x0 = np.asarray(x0, dtype=float)
        vals, flags = _kernels.kernel_nw(
            self.x, self.y, np.ascontiguousarray(x0.ravel()), float(self.bandwidth),
            KERNEL_CUTOFF,
        )
        vals = vals.reshape(x0.shape)
        if return_flags:
            return vals, flags.reshape(x0.shape).astype(bool)
        return vals if vals.ndim else float(vals)

    __call__ = predict


def nonparametric_regression(x, y, bandwidth) -> RegressionFn:
    x = _as_finite_1d(x, "x")
    y = _as_finite_1d(y, "y")
    if x.size != y.size:
        raise InvalidArgumentError("x and y lengths differ")
    if x.size < 2:
        raise InvalidArgumentError("need at least two points")
    if not bandwidth > 0:
        raise InvalidArgumentError("bandwidth must be positive")
    order = np.argsort(x, kind="stable")
    return RegressionFn(x=np.ascontiguousarray(x[order]), y=np.ascontiguousarray(y[order]),
                        bandwidth=float(bandwidth))


def loocv_regression_bandwidth(x, y, grid, *, bins_per_bandwidth=10):
    """Pick the grid bandwidth minimizing leave-one-out squared error.

    Returns the chosen bandwidth and the mean squared error at every grid
    point (ascending grid order). Ties go to the smaller bandwidth.
    """
    x = _as_finite_1d(x, "x")
    y = _as_finite_1d(y, "y")
    if x.size != y.size:
        raise InvalidArgumentError("x and y lengths differ")
    grid = np.sort(np.asarray(grid, dtype=float).ravel())
    if grid.size == 0 or np.any(grid <= 0):
        raise InvalidArgumentError("bandwidth grid must be nonempty and positive")
    axis = _BinnedAxis(x, grid[0], bins_per_bandwidth)
    bin_y = axis.bin(y)
    bin_1 = axis.bin(np.ones_like(y))
    errs = np.empty(grid.size)
    for j, h in enumerate(grid):
        num = axis.smooth_at_points(bin_y, h) - y
        den = axis.smooth_at_points(bin_1, h) - 1.0
        ok = den > 1e-8
        pred = np.where(ok, num / np.where(ok, den, 1.0), np.mean(y))
        errs[j] = np.mean((y - pred) ** 2)
    return float(grid[_first_near_min(errs)]), errs


@dataclass(frozen=True)
class BinomialInterval:
    lower: float
    upper: float
    level: float
    successes: int = field(default=0)
    trials: int = field(default=1)

    @property
    def estimate(self):
        return self.successes / self.trials

    def contains(self, value):
        return self.lower <= value <= self.upper


def clopper_pearson(successes, trials, level=0.95) -> BinomialInterval:
    """Exact binomial interval from beta quantiles."""
    k, n = int(successes), int(trials)
    if n < 1 or not 0 <= k <= n:
        raise InvalidArgumentError(f"need 0 <= successes <= trials, trials >= 1 (got {k}/{n})")
    if not 0 < level < 1:
        raise InvalidArgumentError("level must lie in (0, 1)")
    tail = (1.0 - level) / 2.0
    lower = 0.0 if k == 0 else float(stats.beta.ppf(tail, k, n - k + 1))
    upper = 1.0 if k == n else float(stats.beta.ppf(1.0 - tail, k + 1, n - k))
    return BinomialInterval(lower=lower, upper=upper, level=level, successes=k, trials=n)
