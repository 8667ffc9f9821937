"""The compiled and numpy kernels must agree."""

import numpy as np
import pytest

from otbump import _kernels
from otbump._kernels import backends
from otbump.bumphunt import MASS_FLOOR, _design, bin_data, SignalRegionSpec

CUTOFF = 8.0


def _ccdf_case(rng, n=400, nq=300):
    m = np.sort(rng.normal(size=n))
    z = m + rng.normal(size=n)
    mq = rng.uniform(-4, 4, nq)
    zq = rng.uniform(-5, 5, nq)
    return m, z, zq, mq


def test_selected_backend_is_listed():
    assert _kernels.BACKEND in backends()


def test_kernel_ccdf_matches_direct_sum(kernel_backend, rng):
    m, z, zq, mq = _ccdf_case(rng)
    h_z, h_m = 0.3, 0.2
    vals, flags = kernel_backend.kernel_ccdf(m, z, zq, mq, h_z, h_m, CUTOFF)
    from scipy.special import ndtr
    w = np.exp(-0.5 * ((mq[:, None] - m[None, :]) / h_m) ** 2)
    w[np.abs(mq[:, None] - m[None, :]) > CUTOFF * h_m] = 0.0
    ok = w.sum(1) > 0
    ref = (w * ndtr((zq[:, None] - z[None, :]) / h_z)).sum(1)[ok] / w.sum(1)[ok]
    np.testing.assert_allclose(vals[ok], ref, rtol=0, atol=1e-12)
    assert not flags[ok].any()


def test_kernel_ccdf_flags_far_queries(kernel_backend):
    m = np.array([0.0, 0.1, 0.2])
    z = np.array([0.0, 1.0, 2.0])
    vals, flags = kernel_backend.kernel_ccdf(m, z, np.array([1.0]), np.array([50.0]),
                                             0.5, 0.01, CUTOFF)
    assert flags[0] == 1
    # evaluated at the nearest training mass (0.2), whose window holds only itself
    from scipy.special import ndtr
    assert vals[0] == pytest.approx(ndtr((1.0 - 2.0) / 0.5))


@pytest.mark.skipif(len(backends()) < 2, reason="compiled backend not built")
def test_backends_agree_on_all_kernels(rng):
    py, cy = backends()["python"], backends()["cython"]
    m, z, zq, mq = _ccdf_case(rng)
    a, fa = py.kernel_ccdf(m, z, zq, mq, 0.25, 0.15, CUTOFF)
    b, fb = cy.kernel_ccdf(m, z, zq, mq, 0.25, 0.15, CUTOFF)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-13)
    np.testing.assert_array_equal(fa, fb)

    a, fa = py.kernel_nw(m, z, mq, 0.15, CUTOFF)
    b, fb = cy.kernel_nw(m, z, mq, 0.15, CUTOFF)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)
    np.testing.assert_array_equal(fa, fb)

    region = SignalRegionSpec(0.4, 0.6)
    counts = bin_data(rng.beta(1.5, 3.0, 5000), region, 20)
    phi, phi_c = _design(counts, 6)
    p = counts.probabilities
    args = (phi, p, phi_c, np.ones(7), 500, 1e-10, MASS_FLOOR, True)
    ra, rb = py.dagostini(*args), cy.dagostini(*args)
    np.testing.assert_allclose(ra[0], rb[0], rtol=1e-10)
    assert ra[1] == rb[1]
    np.testing.assert_allclose(ra[5], rb[5], rtol=1e-12)


def test_kernel_nw_constant_response(kernel_backend, rng):
    x = np.sort(rng.uniform(size=200))
    vals, _ = kernel_backend.kernel_nw(x, np.full(200, 3.5), rng.uniform(size=50), 0.05, CUTOFF)
    np.testing.assert_allclose(vals, 3.5, rtol=1e-14)
