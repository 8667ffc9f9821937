"""Pure numpy versions of the compiled kernels in ``_ckernels``.

Same signatures, same truncation rules; results agree with the compiled
path to rounding (summation order differs).
"""

import numpy as np
from scipy.special import ndtr

# upper bound on the size of a (queries x training) block held in memory
_BLOCK = 1 << 22


def _windows(train, queries, reach):
    lo = np.searchsorted(train, queries - reach, side="left")
    hi = np.searchsorted(train, queries + reach, side="right")
    return lo, hi


def _nearest(train, x):
    i = np.clip(np.searchsorted(train, x, side="left"), 1, len(train) - 1)
    left, right = train[i - 1], train[i]
    out = np.where(x - left <= right - x, left, right)
    out = np.where(x <= train[0], train[0], out)
    return np.where(x >= train[-1], train[-1], out)


def _prepare(train, queries, reach):
    queries = queries.copy()
    lo, hi = _windows(train, queries, reach)
    flags = (lo >= hi).astype(np.uint8)
    if flags.any():
        bad = flags.astype(bool)
        queries[bad] = _nearest(train, queries[bad])
        lo[bad], hi[bad] = _windows(train, queries[bad], reach)
    return queries, lo, hi, flags


def _blocked_sum(train_x, values_fn, queries, h, cutoff, extra=None):
    queries, lo, hi, flags = _prepare(train_x, queries, cutoff * h)
    order = np.argsort(queries, kind="stable")
    out = np.empty(len(queries))
    start = 0
    while start < len(order):
        # grow the block until the training slice times block size hits the cap
        stop = start + 1
        while stop < len(order):
            span = hi[order[stop]] - lo[order[start]]
            if (stop - start + 1) * max(span, 1) > _BLOCK:
                break
            stop += 1
        idx = order[start:stop]
        a, b = lo[idx].min(), hi[idx].max()
        cols = np.arange(a, b)
        mask = (cols[None, :] >= lo[idx, None]) & (cols[None, :] < hi[idx, None])
        u = (queries[idx, None] - train_x[None, a:b]) / h
        w = np.exp(-0.5 * u * u) * mask
        vals = values_fn(idx, a, b)
        out[idx] = (w * vals).sum(axis=1) / w.sum(axis=1)
        start = stop
    return out, flags


def kernel_ccdf(m_train, z_train, zq, mq, h_z, h_m, cutoff):
    m_train = np.asarray(m_train, dtype=float)
    z_train = np.asarray(z_train, dtype=float)
    zq = np.asarray(zq, dtype=float)

    def values(idx, a, b):
        return ndtr((zq[idx, None] - z_train[None, a:b]) / h_z)

    return _blocked_sum(m_train, values, np.asarray(mq, dtype=float), h_m, cutoff)


def kernel_nw(x_train, y_train, xq, h, cutoff):
    x_train = np.asarray(x_train, dtype=float)
    y_train = np.asarray(y_train, dtype=float)

    def values(idx, a, b):
        return y_train[None, a:b]

    return _blocked_sum(x_train, values, np.asarray(xq, dtype=float), h, cutoff)


def dagostini(phi, p, phi_c, gamma0, max_iter, tol, floor, track):
    phi = np.asarray(phi, dtype=float)
    p = np.asarray(p, dtype=float)
    phi_c = np.asarray(phi_c, dtype=float)
    g = np.array(gamma0, dtype=float)
    k1 = phi.shape[0]
    pc = p.sum()
    observed = p > 0
    trace = []
    it = 0
    step = np.inf
    converged = False
    zero_mass = False
    while True:
        b = g @ phi
        if track:
            ll = np.sum(p[observed] * np.log(np.maximum(b[observed], floor)))
            trace.append(ll - pc * np.log(g @ phi_c))
        if converged or it >= max_iter:
            break
        small = b < floor
        if np.any(small & observed):
            zero_mass = True
        r = np.where(small, 0.0, p / np.where(small, 1.0, b))
        gt = g * (phi @ r) / phi_c
        new = gt * k1 / gt.sum()
        step = np.max(np.abs(new - g))
        g = new
        it += 1
        if step <= tol:
            converged = True
    return g, it, step, converged, zero_mass, np.asarray(trace)
