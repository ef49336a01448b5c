"""Hot loops: the round simulator and the simplex grid search.

Each kernel has a numba version and a pure-numpy version that consume the
same inputs in the same order and return identical results.  Set
``SPECLK_DISABLE_NUMBA=1`` to force the numpy path.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba as nb
except ImportError:  # pragma: no cover
    nb = None

HAVE_NUMBA = nb is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get("SPECLK_DISABLE_NUMBA", "0") not in ("1", "true", "yes")
BACKEND = "numba" if USE_NUMBA else "numpy"

# residual mass below which the bonus token is drawn from the target instead
NO_REJECTION_MASS = 1e-12

_CHUNK = 4096


# -- round simulator -----------------------------------------------------------


def _simulate_rounds_numpy(p_tab, q_tab, ctx, uniforms, greedy):
    n_rounds = ctx.shape[0]
    n_pos = q_tab.shape[1]
    drafted = np.empty((n_rounds, n_pos), dtype=np.int64)
    betas = np.empty((n_rounds, n_pos))
    accepted = np.empty(n_rounds, dtype=np.int64)
    bonus = np.empty(n_rounds, dtype=np.int64)
    for lo in range(0, n_rounds, _CHUNK):
        hi = min(lo + _CHUNK, n_rounds)
        c = ctx[lo:hi]
        u = uniforms[lo:hi]
        rows = np.arange(hi - lo)
        alive = np.ones(hi - lo, dtype=bool)
        count = np.zeros(hi - lo, dtype=np.int64)
        bon = np.full(hi - lo, -1, dtype=np.int64)
        for i in range(n_pos):
            q = q_tab[c, i]
            p = p_tab[c, i]
            if greedy:
                x = np.argmax(q, axis=1)
                beta = np.minimum(1.0, p[rows, x])
            else:
                cdf = np.cumsum(q, axis=1)
                x = (cdf <= (u[:, i] * cdf[:, -1])[:, None]).sum(axis=1)
                x = np.minimum(x, q.shape[1] - 1)
                px = p[rows, x]
                qx = q[rows, x]
                beta = np.where(px >= qx, 1.0, px / qx)
            drafted[lo:hi, i] = x
            betas[lo:hi, i] = beta
            ok = u[:, n_pos + i] < beta
            rejected = alive & ~ok
            if rejected.any():
                r = np.maximum(p[rejected] - q[rejected], 0.0)
                rcdf = np.cumsum(r, axis=1)
                degenerate = rcdf[:, -1] < NO_REJECTION_MASS
                if degenerate.any():
                    rcdf[degenerate] = np.cumsum(p[rejected][degenerate], axis=1)
                ub = u[rejected, 2 * n_pos]
                tok = (rcdf <= (ub * rcdf[:, -1])[:, None]).sum(axis=1)
                bon[rejected] = np.minimum(tok, r.shape[1] - 1)
            count += alive & ok
            alive &= ok
        if alive.any():
            p = p_tab[c[alive], n_pos]
            pcdf = np.cumsum(p, axis=1)
            ub = u[alive, 2 * n_pos]
            tok = (pcdf <= (ub * pcdf[:, -1])[:, None]).sum(axis=1)
            bon[alive] = np.minimum(tok, p.shape[1] - 1)
        accepted[lo:hi] = count
        bonus[lo:hi] = bon
    return drafted, betas, accepted, bonus


if HAVE_NUMBA:

    @nb.njit(cache=True)
    def _inverse_cdf(w, u):
        v = w.shape[0]
        total = 0.0
        for j in range(v):
            total += w[j]
        target = u * total
        acc = 0.0
        count = 0
        for j in range(v):
            acc += w[j]
            if acc <= target:
                count += 1
        if count > v - 1:
            count = v - 1
        return count

    @nb.njit(cache=True)
    def _simulate_rounds_numba(p_tab, q_tab, ctx, uniforms, greedy):
        n_rounds = ctx.shape[0]
        n_pos = q_tab.shape[1]
        v = q_tab.shape[2]
        drafted = np.empty((n_rounds, n_pos), dtype=np.int64)
        betas = np.empty((n_rounds, n_pos))
        accepted = np.empty(n_rounds, dtype=np.int64)
        bonus = np.empty(n_rounds, dtype=np.int64)
        resid = np.empty(v)
        for r in range(n_rounds):
            c = ctx[r]
            alive = True
            count = 0
            bon = -1
            for i in range(n_pos):
                q = q_tab[c, i]
                p = p_tab[c, i]
                if greedy:
                    x = 0
                    for j in range(1, v):
                        if q[j] > q[x]:
                            x = j
                    beta = min(1.0, p[x])
                else:
                    x = _inverse_cdf(q, uniforms[r, i])
                    beta = 1.0 if p[x] >= q[x] else p[x] / q[x]
                drafted[r, i] = x
                betas[r, i] = beta
                if alive:
                    if uniforms[r, n_pos + i] < beta:
                        count += 1
                    else:
                        alive = False
                        mass = 0.0
                        for j in range(v):
                            resid[j] = max(p[j] - q[j], 0.0)
                            mass += resid[j]
                        if mass < NO_REJECTION_MASS:
                            bon = _inverse_cdf(p, uniforms[r, 2 * n_pos])
                        else:
                            bon = _inverse_cdf(resid, uniforms[r, 2 * n_pos])
            if alive:
                bon = _inverse_cdf(p_tab[c, n_pos], uniforms[r, 2 * n_pos])
            accepted[r] = count
            bonus[r] = bon
        return drafted, betas, accepted, bonus


def simulate_rounds(p_tab, q_tab, ctx, uniforms, greedy=False, backend=None):
    """Run independent speculation rounds over position-indexed distributions.

    Parameters
    ----------
    p_tab : (C, K+1, V) target distributions per context and draft position;
        the last position feeds the bonus token after a full acceptance.
    q_tab : (C, K, V) draft distributions.
    ctx : (R,) context index of each round.
    uniforms : (R, 2K+1) variates: K for drafting, K for acceptance, 1 bonus.
    greedy : draft the argmax and accept with probability ``p(x*)``.

    Returns ``(drafted, betas, accepted_count, bonus)``.
    """
    p_tab = np.ascontiguousarray(p_tab, dtype=np.float64)
    q_tab = np.ascontiguousarray(q_tab, dtype=np.float64)
    ctx = np.ascontiguousarray(ctx, dtype=np.int64)
    uniforms = np.ascontiguousarray(uniforms, dtype=np.float64)
    k = q_tab.shape[1]
    if p_tab.shape[1] != k + 1 or p_tab.shape[2] != q_tab.shape[2]:
        raise ValueError("p_tab must have one more position than q_tab")
    if uniforms.shape != (ctx.shape[0], 2 * k + 1):
        raise ValueError("uniforms must have shape (rounds, 2K+1)")
    backend = backend or BACKEND
    if backend == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba is not installed")
        return _simulate_rounds_numba(p_tab, q_tab, ctx, uniforms, bool(greedy))
    return _simulate_rounds_numpy(p_tab, q_tab, ctx, uniforms, bool(greedy))


# -- simplex grid search -------------------------------------------------------


def _compositions(n, parts):
    """All non-negative integer vectors of length ``parts`` summing to ``n``, lexicographic."""
    if parts == 1:
        return np.array([[n]], dtype=np.int64)
    blocks = []
    for first in range(n + 1):
        rest = _compositions(n - first, parts - 1)
        blocks.append(np.column_stack([np.full(len(rest), first, dtype=np.int64), rest]))
    return np.vstack(blocks)


def _simplex_grid_numpy(targets, n):
    c, v = targets.shape
    best_val = -1.0
    best = np.zeros(v, dtype=np.int64)
    for first in range(n + 1):
        tail = _compositions(n - first, v - 1) if v > 1 else np.zeros((1, 0), dtype=np.int64)
        comp = np.column_stack([np.full(len(tail), first, dtype=np.int64), tail])
        q = comp / n
        total = np.zeros(len(comp))
        for ci in range(c):
            for j in range(v):
                total += np.minimum(targets[ci, j], q[:, j])
        idx = int(np.argmax(total))
        if total[idx] > best_val:
            best_val = float(total[idx])
            best = comp[idx].copy()
    return best, best_val / c


if HAVE_NUMBA:

    @nb.njit(cache=True)
    def _simplex_grid_numba(targets, n):
        c, v = targets.shape
        comp = np.zeros(v, dtype=np.int64)
        comp[v - 1] = n
        best = comp.copy()
        best_val = -1.0
        while True:
            total = 0.0
            for ci in range(c):
                for j in range(v):
                    total += min(targets[ci, j], comp[j] / n)
            if total > best_val:
                best_val = total
                best[:] = comp
            # advance to the next composition in lexicographic order
            # find rightmost slot (excluding last) that can be incremented
            k = v - 2
            while k >= 0:
                rest = comp[v - 1]
                if rest > 0:
                    comp[k] += 1
                    comp[v - 1] = rest - 1
                    break
                # carry: move slot k's mass to the last slot and go left
                comp[v - 1] += comp[k]
                comp[k] = 0
                k -= 1
            if k < 0:
                break
        return best, best_val / c


def simplex_grid_argmax(targets, n, backend=None):
    """Maximize mean acceptance ``mean_c sum_i min(p_ci, q_i)`` over the grid ``q = m / n``.

    Returns the best integer composition ``m`` and its objective value.
    Ties go to the lexicographically first grid point.
    """
    targets = np.ascontiguousarray(targets, dtype=np.float64)
    backend = backend or BACKEND
    if backend == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba is not installed")
        return _simplex_grid_numba(targets, int(n))
    return _simplex_grid_numpy(targets, int(n))
