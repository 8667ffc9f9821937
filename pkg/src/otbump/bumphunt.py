"""Semi-parametric bump hunt on the unit interval.

The background density is a Bernstein mixture fitted only from the control
region (the complement of the signal window); the signal strength is the
relative deficit of observed control-region counts against the fitted
background mass there. Inference uses either a known background (a
counting experiment) or the delta method on binned control counts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy.special import betainc, gammaln, ndtr, xlog1py, xlogy

from . import _kernels
from .errors import (
    DegenerateVarianceError,
    InvalidArgumentError,
    InvalidConfigurationError,
    NumericFailureError,
)

#: Predicted bin masses below this contribute nothing to the EM update.
MASS_FLOOR = 1e-30
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100_000
DEFAULT_BINS_PER_SIDE = 50


@dataclass(frozen=True)
class SignalRegionSpec:
    """Closed signal window ``[lower, upper]`` inside the open unit interval."""

    lower: float
    upper: float

    def __post_init__(self):
        lo, hi = float(self.lower), float(self.upper)
        if not (np.isfinite(lo) and np.isfinite(hi) and 0.0 < lo < hi < 1.0):
            raise InvalidConfigurationError(
                f"signal region needs 0 < lower < upper < 1, got [{lo}, {hi}]"
            )
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        return (x >= self.lower) & (x <= self.upper)

    @property
    def width(self):
        return self.upper - self.lower


@dataclass(frozen=True)
class BernsteinDensity:
    """Order-``K`` Bernstein mixture ``sum_k gamma_k C(K,k) x^k (1-x)^(K-k)``.

    Weights are nonnegative and sum to ``K + 1`` so the density integrates
    to one.
    """

    gamma: np.ndarray

    def __post_init__(self):
        g = np.array(self.gamma, dtype=float).ravel()
        if g.size == 0:
            raise InvalidArgumentError("need at least one weight")
        if not np.all(np.isfinite(g)) or np.any(g < 0):
            raise InvalidArgumentError("weights must be finite and nonnegative")
        total = g.sum()
        if abs(total - g.size) > 1e-9 * g.size:
            raise InvalidArgumentError(f"weights must sum to K+1={g.size}, got {total}")
        g.setflags(write=False)
        object.__setattr__(self, "gamma", g)

    @property
    def order(self) -> int:
        return self.gamma.size - 1

    @classmethod
    def uniform(cls, order: int) -> "BernsteinDensity":
        return cls(np.ones(order + 1))

    @classmethod
    def from_unnormalized(cls, weights) -> "BernsteinDensity":
        """Rescale nonnegative weights onto the constraint surface."""
        w = np.asarray(weights, dtype=float)
        return cls(w * (w.size / w.sum()))

    def __call__(self, x):
        return bernstein_eval(self, x)

    def interval_mass(self, a, b):
        return bernstein_interval_mass(self, a, b)


def bernstein_basis(x, order: int) -> np.ndarray:
    """Basis values ``C(K,k) x^k (1-x)^(K-k)``, shape ``(K+1,) + x.shape``."""
    x = np.asarray(x, dtype=float)
    if np.any((x < 0) | (x > 1)):
        raise InvalidArgumentError("basis is defined on [0, 1]")
    k = np.arange(order + 1).reshape((-1,) + (1,) * x.ndim)
    log_binom = gammaln(order + 1) - gammaln(k + 1) - gammaln(order - k + 1)
    return np.exp(log_binom + xlogy(k, x) + xlog1py(order - k, -x))


def bernstein_eval(density: BernsteinDensity, x):
    """Density value at ``x`` in [0, 1]."""
    x = np.asarray(x, dtype=float)
    out = np.tensordot(density.gamma, bernstein_basis(x, density.order), axes=1)
    return out if out.ndim else float(out)


def basis_interval_masses(order: int, edges) -> np.ndarray:
    """Integral of each basis element over consecutive ``edges``.

    Returns shape ``(K+1, len(edges)-1)``; each basis element integrates to
    ``1/(K+1)`` over the unit interval.
    """
    edges = np.asarray(edges, dtype=float)
    k = np.arange(order + 1)[:, None]
    cdf = betainc(k + 1, order - k + 1, edges[None, :])
    return np.diff(cdf, axis=1) / (order + 1)


def bernstein_interval_mass(density: BernsteinDensity, a: float, b: float) -> float:
    """Exact mass of the density on ``[a, b]``."""
    if not 0.0 <= a < b <= 1.0:
        raise InvalidArgumentError(f"need 0 <= a < b <= 1, got [{a}, {b}]")
    masses = basis_interval_masses(density.order, [a, b])[:, 0]
    return float(density.gamma @ masses)


def control_masses(density: BernsteinDensity, region: SignalRegionSpec) -> float:
    """Background mass outside the signal window."""
    return 1.0 - bernstein_interval_mass(density, region.lower, region.upper)


# -- known background -------------------------------------------------------

@dataclass(frozen=True)
class CountingResult:
    lam: float
    statistic: float
    p_value: float

    def __iter__(self):
        yield from (self.lam, self.statistic, self.p_value)


def counting_test(n_signal_region: int, n_total: int,
                  known_background_signal_mass: float) -> CountingResult:
    """Signal-strength estimate and one-sided test against a known background."""
    n_s, n = int(n_signal_region), int(n_total)
    b_s = float(known_background_signal_mass)
    if n < 1 or not 0 <= n_s <= n:
        raise InvalidArgumentError(f"need 0 <= n_signal_region <= n_total, got {n_s}/{n}")
    if not 0.0 < b_s < 1.0:
        raise InvalidArgumentError("known background mass must lie in (0, 1)")
    if n_s in (0, n):
        raise DegenerateVarianceError(
            f"signal-region count {n_s} of {n} gives zero variance"
        )
    f_s = n_s / n
    lam = 1.0 - (1.0 - f_s) / (1.0 - b_s)
    stat = np.sqrt(n) * (f_s - b_s) / np.sqrt(f_s * (1.0 - f_s))
    return CountingResult(lam=float(lam), statistic=float(stat), p_value=float(ndtr(-stat)))


# -- binning ------------------------------------------------------------------

@dataclass(frozen=True)
class BinnedCounts:
    """Control-region histogram plus the signal-window count.

    ``lower_edges`` spans ``[0, lower]`` and ``upper_edges`` spans
    ``[upper, 1]``, each with ``bins_per_side + 1`` entries. ``counts`` lists
    the lower-side bins first, then the upper side.
    """

    region: SignalRegionSpec
    lower_edges: np.ndarray
    upper_edges: np.ndarray
    counts: np.ndarray
    n_signal: int
    n_total: int

    @property
    def n_bins(self) -> int:
        return self.counts.size

    @property
    def bins_per_side(self) -> int:
        return self.lower_edges.size - 1

    def bin_intervals(self):
        lo = np.column_stack([self.lower_edges[:-1], self.lower_edges[1:]])
        hi = np.column_stack([self.upper_edges[:-1], self.upper_edges[1:]])
        return np.vstack([lo, hi])

    @property
    def probabilities(self) -> np.ndarray:
        return self.counts / self.n_total

    @property
    def control_fraction(self) -> float:
        return float(self.counts.sum()) / self.n_total

    def scaled(self, factor: int) -> "BinnedCounts":
        return BinnedCounts(self.region, self.lower_edges, self.upper_edges,
                            self.counts * int(factor), self.n_signal * int(factor),
                            self.n_total * int(factor))

    def to_dict(self):
        return {
            "region": [self.region.lower, self.region.upper],
            "bins_per_side": self.bins_per_side,
            "counts": self.counts.tolist(),
            "n_signal": self.n_signal,
            "n_total": self.n_total,
        }


def bin_data(masses, region: SignalRegionSpec,
             bins_per_control_side: int = DEFAULT_BINS_PER_SIDE) -> BinnedCounts:
    """Histogram masses into equal-width control bins on each side of the window.

    The signal window is closed, so a mass equal to either bound counts as
    signal-region; the outermost control bins include 0 and 1.
    """
    if int(bins_per_control_side) < 1:
        raise InvalidConfigurationError("bins_per_control_side must be >= 1")
    n_side = int(bins_per_control_side)
    x = np.asarray(masses, dtype=float).ravel()
    bad = ~((x >= 0.0) & (x <= 1.0))
    if bad.any():
        shown = ", ".join(repr(float(v)) for v in x[bad][:10])
        more = "" if bad.sum() <= 10 else f" (and {int(bad.sum()) - 10} more)"
        raise InvalidArgumentError(f"masses outside [0, 1]: {shown}{more}")
    lower_edges = np.linspace(0.0, region.lower, n_side + 1)
    upper_edges = np.linspace(region.upper, 1.0, n_side + 1)
    in_sr = region.contains(x)
    low = x[x < region.lower]
    high = x[x > region.upper]
    # right-closed final bins so 0 and 1 are included; window bounds excluded
    idx_lo = np.minimum((low / region.lower * n_side).astype(np.int64), n_side - 1)
    width_hi = 1.0 - region.upper
    idx_hi = np.clip(((high - region.upper) / width_hi * n_side).astype(np.int64), 0, n_side - 1)
    counts = np.concatenate([
        np.bincount(idx_lo, minlength=n_side),
        np.bincount(idx_hi, minlength=n_side),
    ]).astype(np.int64)
    return BinnedCounts(region=region, lower_edges=lower_edges, upper_edges=upper_edges,
                        counts=counts, n_signal=int(in_sr.sum()), n_total=int(x.size))


# -- censored MLE ---------------------------------------------------------------

@dataclass(frozen=True)
class EMResult:
    """Censored-MLE fixed point and iteration diagnostics.

    Unpacks as ``(density, lam)``.
    """

    density: BernsteinDensity
    lam: float
    iterations: int
    last_step: float
    converged: bool
    residual: float
    zero_mass_bins: bool
    control_mass: float
    loglik_trace: np.ndarray | None = None

    def __iter__(self):
        yield self.density
        yield self.lam


def _design(counts: BinnedCounts, order: int):
    edges_lo, edges_hi = counts.lower_edges, counts.upper_edges
    phi = np.hstack([basis_interval_masses(order, edges_lo),
                     basis_interval_masses(order, edges_hi)])
    phi_c = phi.sum(axis=1)
    return np.ascontiguousarray(phi), phi_c


def _check_phi_c(phi_c):
    if np.any(~(phi_c > 0)):
        k = np.flatnonzero(~(phi_c > 0))
        raise InvalidConfigurationError(
            f"basis elements {k.tolist()} have no mass in the control region"
        )


def _foc_residual(gamma, phi, p, phi_c):
    b = gamma @ phi
    ok = b >= MASS_FLOOR
    r = np.zeros_like(p)
    r[ok] = p[ok] / b[ok]
    a = phi @ r
    b_c = gamma @ phi_c
    p_c = p.sum()
    return float(np.max(gamma * np.abs(a * b_c / (phi_c * p_c) - 1.0)))


def censored_loglik(gamma, phi, p, phi_c) -> float:
    """Censored log-likelihood per event, profiled over the signal strength.

    Equals ``sum_l p_l log B(C_l) - P(C) log B(C)`` up to a data-only constant.
    """
    gamma = np.asarray(gamma, dtype=float)
    b = gamma @ phi
    obs = p > 0
    return float(np.sum(p[obs] * np.log(np.maximum(b[obs], MASS_FLOOR)))
                 - p.sum() * np.log(gamma @ phi_c))


def _line_search_1d(psi, pp, q, k, max_iter=60):
    """Maximize the concave objective along ``w -> (1-t) w + t e_k`` for t in [0, 1)."""
    diff = psi[k] - q
    lo, hi = 0.0, 1.0
    for _ in range(max_iter):
        t = 0.5 * (lo + hi)
        slope = np.sum(pp * diff / (q + t * diff))
        if slope > 0:
            lo = t
        else:
            hi = t
    return lo


def _solve_active_set(phi, p, phi_c, max_iter=1000):
    """Maximize the profiled censored likelihood by active-set Newton.

    In the mixture weights ``w_k = gamma_k phi_k(C) / B(C)`` the objective
    ``sum_l p_l log(sum_k w_k phi_k(C_l) / phi_k(C))`` is concave on the
    simplex. Each step solves the equality-constrained Newton system on the
    current face, clips at the boundary, and releases a zero weight when its
    gradient exceeds the multiplier. Returns ``(gamma, iterations, trace)``
    where the trace holds the objective after every accepted step.
    """
    obs = p > 0
    psi = (phi / phi_c[:, None])[:, obs]
    pp = p[obs]
    p_c = pp.sum()
    k1 = phi.shape[0]
    w = phi_c / phi_c.sum()  # uniform gamma
    free = np.ones(k1, dtype=bool)

    def objective(weights):
        q = weights @ psi
        return float(pp @ np.log(q)) if np.all(q > 0) else -np.inf

    value = objective(w)
    trace = [value]
    it = 0
    while it < max_iter:
        it += 1
        q = w @ psi
        grad = psi @ (pp / q)
        idx = np.flatnonzero(free)
        hess = (psi[idx] * (pp / q**2)) @ psi[idx].T
        kkt = np.zeros((idx.size + 1, idx.size + 1))
        kkt[:-1, :-1] = hess
        kkt[:-1, -1] = 1.0
        kkt[-1, :-1] = 1.0
        sol = np.linalg.lstsq(kkt, np.concatenate([grad[idx], [0.0]]), rcond=None)[0]
        d = np.zeros(k1)
        d[idx] = sol[:-1]
        moved = False
        if grad @ d > 1e-15 * max(1.0, abs(value)):
            neg = d < 0
            t_max = np.min(-w[neg] / d[neg]) if neg.any() else np.inf
            t = min(1.0, t_max)
            while t > 1e-14:
                cand = np.maximum(w + t * d, 0.0)
                cand /= cand.sum()
                cand_value = objective(cand)
                if cand_value > value:
                    if t == t_max:
                        hit = np.flatnonzero(neg)[np.argmin(-w[neg] / d[neg])]
                        cand[hit] = 0.0
                        cand /= cand.sum()
                        cand_value = objective(cand)
                        free[hit] = False
                    if cand_value >= value:
                        w, value, moved = cand, cand_value, True
                    break
                t *= 0.5
        if moved:
            trace.append(value)
            continue
        # stationary on this face: release the worst violator, if any
        violators = np.flatnonzero(~free & (grad > p_c * (1.0 + 1e-12)))
        if violators.size == 0:
            break
        k = violators[np.argmax(grad[violators])]
        free[k] = True
        t = _line_search_1d(psi, pp, q, k)
        cand = (1.0 - t) * w
        cand[k] += t
        cand_value = objective(cand)
        if cand_value > value:
            w, value = cand, cand_value
            trace.append(value)
    gamma = w / phi_c
    return gamma * (k1 / gamma.sum()), it, np.asarray(trace)


def _run_em(phi, p, phi_c, gamma0, max_iter, tol, track):
    if max_iter < 0 or not tol > 0:
        raise InvalidArgumentError("need max_iter >= 0 and tol > 0")
    return _kernels.dagostini(phi, np.ascontiguousarray(p, dtype=float),
                              np.ascontiguousarray(phi_c, dtype=float),
                              np.ascontiguousarray(gamma0, dtype=float),
                              int(max_iter), float(tol), MASS_FLOOR, bool(track))


def _finish(em_out, phi, p, phi_c, track, pre_iterations=0, pre_trace=None):
    gamma, it, step, converged, zero_mass, trace = em_out
    # renormalize away any drift accumulated over many iterations
    density = BernsteinDensity.from_unnormalized(gamma)
    b_c = float(density.gamma @ phi_c)
    p_c = float(p.sum())
    if track:
        trace = np.asarray(trace)
        if pre_trace is not None:
            trace = np.concatenate([pre_trace, trace[1:]])
    return EMResult(
        density=density, lam=1.0 - p_c / b_c, iterations=int(it) + int(pre_iterations),
        last_step=float(step), converged=bool(converged),
        residual=_foc_residual(density.gamma, phi, p, phi_c),
        zero_mass_bins=bool(zero_mass), control_mass=b_c,
        loglik_trace=trace if track else None,
    )


def _fit(phi, p, phi_c, gamma0, max_iter, tol, track, solver):
    """Run the chosen solver, always finishing with D'Agostini steps.

    ``solver="active-set"`` locates the maximizer by Newton steps first, so
    the closing D'Agostini iteration only has to confirm the fixed point;
    ``solver="dagostini"`` runs the plain iteration from ``gamma0``.
    """
    _check_phi_c(phi_c)
    if solver == "dagostini":
        out = _run_em(phi, p, phi_c, gamma0, max_iter, tol, track)
        return _finish(out, phi, p, phi_c, track)
    if solver != "active-set":
        raise InvalidArgumentError(f"unknown solver {solver!r}")
    # the Newton objective equals the profiled log-likelihood, so traces join
    start, newton_iter, newton_trace = _solve_active_set(phi, p, phi_c)
    out = _run_em(phi, p, phi_c, start, max_iter, tol, track)
    return _finish(out, phi, p, phi_c, track, newton_iter, newton_trace if track else None)


def censored_mle_em(counts: BinnedCounts, K: int, region: SignalRegionSpec | None = None,
                    max_iter: int = DEFAULT_MAX_ITER, tol: float = DEFAULT_TOL, *,
                    gamma0=None, track: bool = False,
                    solver: Literal["active-set", "dagostini"] = "active-set") -> EMResult:
    """Binned censored MLE by the normalized D'Agostini iteration.

    Starts from uniform weights unless ``gamma0`` is given. Stops when the
    largest weight change falls to ``tol``; ``converged`` is false if
    ``max_iter`` ran out first, in which case the last iterate is returned.
    With ``track`` the profiled log-likelihood of every iterate is kept.

    The default ``solver="active-set"`` reaches the maximizer with a few
    Newton steps before the D'Agostini iteration; the plain iteration can
    need far more than ``max_iter`` steps at large ``K`` when the optimum
    puts zero weight on some basis elements.
    """
    if region is not None and region != counts.region:
        raise InvalidConfigurationError("region differs from the one used for binning")
    if int(K) < 0:
        raise InvalidArgumentError("K must be >= 0")
    if counts.counts.sum() == 0:
        raise InvalidConfigurationError("no events in the control region")
    phi, phi_c = _design(counts, int(K))
    p = counts.probabilities
    g0 = np.ones(K + 1) if gamma0 is None else np.asarray(gamma0, dtype=float)
    if gamma0 is not None and solver == "active-set":
        raise InvalidArgumentError("gamma0 only applies to the plain iteration")
    return _fit(phi, p, phi_c, g0, max_iter, tol, track, solver)


def censored_mle_unbinned(masses, K: int, region: SignalRegionSpec,
                          max_iter: int = DEFAULT_MAX_ITER, tol: float = DEFAULT_TOL, *,
                          track: bool = False,
                          solver: Literal["active-set", "dagostini"] = "active-set") -> EMResult:
    """Unbinned censored MLE: the same iteration with one term per event.

    Each control-region event enters with weight ``1/n`` and its basis
    densities take the place of the bin masses.
    """
    x = np.asarray(masses, dtype=float).ravel()
    if np.any(~((x >= 0) & (x <= 1))):
        raise InvalidArgumentError("masses must lie in [0, 1]")
    if int(K) < 0:
        raise InvalidArgumentError("K must be >= 0")
    ctrl = np.sort(x[~region.contains(x)])
    if ctrl.size == 0:
        raise InvalidConfigurationError("no events in the control region")
    basis = np.ascontiguousarray(bernstein_basis(ctrl, int(K)))
    in_sr = basis_interval_masses(int(K), [region.lower, region.upper])[:, 0]
    phi_c = 1.0 / (K + 1) - in_sr
    p = np.full(ctrl.size, 1.0 / x.size)
    return _fit(basis, p, phi_c, np.ones(K + 1), max_iter, tol, track, solver)


# -- inference ------------------------------------------------------------------

@dataclass(frozen=True)
class FitResult:
    """Censored-MLE test outcome."""

    density: BernsteinDensity
    lam: float
    std_error: float
    statistic: float
    p_value: float
    iterations: int
    residual: float
    converged: bool
    n_total: int
    bins_per_side: int
    region: SignalRegionSpec
    gradient_method: str
    gradient: np.ndarray = field(repr=False)

    def to_dict(self):
        return {
            "order": self.density.order,
            "gamma": self.density.gamma.tolist(),
            "lambda": self.lam,
            "std_error": self.std_error,
            "statistic": self.statistic,
            "p_value": self.p_value,
            "em_iterations": self.iterations,
            "foc_residual": self.residual,
            "converged": self.converged,
            "n_total": self.n_total,
            "bins_per_side": self.bins_per_side,
            "region": [self.region.lower, self.region.upper],
            "gradient_method": self.gradient_method,
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


def _lambda_of(p, phi, phi_c, gamma0, max_iter, tol, solver):
    if solver == "active-set":
        gamma0 = _solve_active_set(phi, p, phi_c)[0]
    out = _run_em(phi, p, phi_c, gamma0, max_iter, tol, False)
    g = out[0] * ((phi_c.size) / out[0].sum())
    return 1.0 - p.sum() / float(g @ phi_c), bool(out[3])


def lambda_gradient_fd(counts: BinnedCounts, gamma_star, fd_step=1e-4, tol=DEFAULT_TOL,
                       max_iter=DEFAULT_MAX_ITER, solver="dagostini") -> np.ndarray:
    """Central finite differences of the signal strength in each control-bin probability.

    Each probability is moved by ``fd_step`` times itself while the other
    control bins stay fixed (the signal cell absorbs the change); the EM is
    warm-started at ``gamma_star`` with tolerance ``tol / 10``. Empty bins
    get a zero derivative since they carry zero variance.

    With ``solver="active-set"`` each perturbed problem is first solved by
    Newton steps, which keeps the differences accurate when the plain
    iteration contracts slowly.
    """
    if not fd_step > 0:
        raise InvalidArgumentError("fd_step must be positive")
    gamma_star = np.asarray(getattr(gamma_star, "gamma", gamma_star), dtype=float)
    phi, phi_c = _design(counts, gamma_star.size - 1)
    p = counts.probabilities
    grad = np.zeros(p.size)
    for l in np.flatnonzero(p > 0):
        h = fd_step * p[l]
        up, down = p.copy(), p.copy()
        up[l] += h
        down[l] -= h
        lam_up, _ = _lambda_of(up, phi, phi_c, gamma_star, max_iter, tol / 10, solver)
        lam_dn, _ = _lambda_of(down, phi, phi_c, gamma_star, max_iter, tol / 10, solver)
        grad[l] = (lam_up - lam_dn) / (2.0 * h)
    return grad


def lambda_gradient_implicit(counts: BinnedCounts, gamma_star) -> np.ndarray:
    """Exact gradient of the signal strength by differentiating the fixed point.

    Solves ``(I - dPhi/dgamma) dgamma/dp = dPhi/dp`` for the EM map ``Phi``
    at ``gamma_star`` and applies the chain rule to ``1 - P(C)/B(C)``.
    """
    gamma = np.asarray(getattr(gamma_star, "gamma", gamma_star), dtype=float)
    phi, phi_c = _design(counts, gamma.size - 1)
    p = counts.probabilities
    k1 = gamma.size
    b = gamma @ phi
    ok = b >= MASS_FLOOR
    inv_b = np.where(ok, 1.0 / np.where(ok, b, 1.0), 0.0)
    r = p * inv_b
    a = phi @ r
    hess = (phi * (r * inv_b)) @ phi.T
    gt = gamma * a / phi_c
    s = gt.sum()
    d_gt_d_gamma = (np.diag(a) - gamma[:, None] * hess) / phi_c[:, None]
    d_gt_d_p = (gamma[:, None] * phi * inv_b[None, :]) / phi_c[:, None]
    proj = (k1 / s) * (np.eye(k1) - np.outer(gt, np.ones(k1)) / s)
    jac_g = proj @ d_gt_d_gamma
    jac_p = proj @ d_gt_d_p
    lhs = np.eye(k1) - jac_g
    try:
        dgamma = np.linalg.solve(lhs, jac_p)
    except np.linalg.LinAlgError:
        dgamma = np.linalg.lstsq(lhs, jac_p, rcond=None)[0]
    b_c = gamma @ phi_c
    p_c = p.sum()
    return -1.0 / b_c + (p_c / b_c**2) * (phi_c @ dgamma)


def delta_variance(gradient, probs) -> float:
    """``g' D g`` for the multinomial covariance ``D`` of the control probabilities.

    ``D = diag(p) - p p'`` restricted to the control bins; the signal cell is
    the implied last category. Computed as a centred sum to avoid
    cancellation.
    """
    g = np.asarray(gradient, dtype=float)
    p = np.asarray(probs, dtype=float)
    p_c = p.sum()
    if p_c <= 0:
        return 0.0
    mean = float(p @ g) / p_c
    return float(p @ (g - mean) ** 2 + p_c * (1.0 - p_c) * mean**2)


def delta_method_test(counts: BinnedCounts, gamma_star, region: SignalRegionSpec | None = None,
                      fd_step: float = 1e-4, *,
                      gradient: Literal["implicit", "fd"] = "implicit",
                      em_result: EMResult | None = None, solver: str = "active-set",
                      tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> FitResult:
    """One-sided test of zero signal strength from binned counts.

    ``T = sqrt(n) lam / sqrt(g' D g)`` with ``g`` the gradient of the signal
    strength in the control-bin probabilities; ``gradient`` picks exact
    implicit differentiation or central finite differences with relative
    step ``fd_step``.
    """
    if region is not None and region != counts.region:
        raise InvalidConfigurationError("region differs from the one used for binning")
    density = gamma_star if isinstance(gamma_star, BernsteinDensity) else \
        BernsteinDensity.from_unnormalized(gamma_star)
    phi, phi_c = _design(counts, density.order)
    p = counts.probabilities
    b_c = float(density.gamma @ phi_c)
    lam = 1.0 - p.sum() / b_c
    if gradient == "implicit":
        grad = lambda_gradient_implicit(counts, density)
    elif gradient == "fd":
        grad = lambda_gradient_fd(counts, density, fd_step, tol, max_iter, solver)
    else:
        raise InvalidArgumentError(f"unknown gradient method {gradient!r}")
    var = delta_variance(grad, p)
    # below rounding level of the second moment the variance is zero
    if not (np.isfinite(var) and var > 1e-12 * float(p @ grad**2)):
        raise NumericFailureError(
            "delta-method variance is not positive",
            {"variance": var, "lambda": lam, "gradient_norm": float(np.linalg.norm(grad)),
             "control_fraction": counts.control_fraction},
        )
    n = counts.n_total
    se = np.sqrt(var / n)
    stat = lam / se
    return FitResult(
        density=density, lam=float(lam), std_error=float(se), statistic=float(stat),
        p_value=float(ndtr(-stat)),
        iterations=em_result.iterations if em_result is not None else 0,
        residual=em_result.residual if em_result is not None else
        _foc_residual(density.gamma, phi, p, phi_c),
        converged=em_result.converged if em_result is not None else True,
        n_total=n, bins_per_side=counts.bins_per_side, region=counts.region,
        gradient_method=gradient, gradient=grad,
    )


def bump_test(masses, region: SignalRegionSpec, K: int,
              bins_per_side: int = DEFAULT_BINS_PER_SIDE, *,
              gradient: Literal["implicit", "fd"] = "implicit", fd_step: float = 1e-4,
              solver: str = "active-set", tol: float = DEFAULT_TOL,
              max_iter: int = DEFAULT_MAX_ITER) -> FitResult:
    """Bin, fit and test in one call."""
    counts = bin_data(masses, region, bins_per_side)
    em = censored_mle_em(counts, K, max_iter=max_iter, tol=tol, solver=solver)
    return delta_method_test(counts, em.density, fd_step=fd_step, gradient=gradient,
                             em_result=em, solver=solver, tol=tol, max_iter=max_iter)


def fit_result_from_dict(d) -> FitResult:
    """Rebuild a :class:`FitResult` from :meth:`FitResult.to_dict` output."""
    return FitResult(
        density=BernsteinDensity(np.asarray(d["gamma"], dtype=float)),
        lam=d["lambda"], std_error=d["std_error"], statistic=d["statistic"],
        p_value=d["p_value"], iterations=d["em_iterations"], residual=d["foc_residual"],
        converged=d["converged"], n_total=d["n_total"], bins_per_side=d["bins_per_side"],
        region=SignalRegionSpec(*d["region"]), gradient_method=d["gradient_method"],
        gradient=np.asarray(d.get("gradient", []), dtype=float),
    )


__all__: Sequence[str] = [
    "BernsteinDensity", "BinnedCounts", "CountingResult", "EMResult", "FitResult",
    "SignalRegionSpec", "basis_interval_masses", "bernstein_basis", "bernstein_eval",
    "bernstein_interval_mass", "bin_data", "bump_test", "censored_loglik",
    "censored_mle_em", "censored_mle_unbinned", "control_masses", "counting_test",
    "delta_method_test", "delta_variance", "fit_result_from_dict",
    "lambda_gradient_fd", "lambda_gradient_implicit",
]
