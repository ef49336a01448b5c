"""Desk-scale fitting problems where the draft family cannot match the target.

Two settings:

* continuous: a single Gaussian fitted to a Gaussian mixture, where the
  acceptance rate is the area under the minimum of the two densities;
* discrete: one shared categorical draft serving several conflicting
  target contexts, with a brute-force acceptance optimum.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize, special

from . import _kernels
from .losses import acceptance_rate, kl_forward

CONTINUOUS_OBJECTIVES = ("forward_kl", "reverse_kl", "tv")
_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


class GridError(ValueError):
    """The quadrature grid does not cover the densities."""


@dataclass(frozen=True)
class Gaussian1D:
    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    def logpdf(self, x):
        z = (np.asarray(x, dtype=np.float64) - self.mu) / self.sigma
        return -0.5 * z * z - math.log(self.sigma) - _LOG_SQRT_2PI

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def cdf(self, x):
        return special.ndtr((np.asarray(x, dtype=np.float64) - self.mu) / self.sigma)


@dataclass(frozen=True)
class GaussianMixture:
    """Weighted sum of 1-D Gaussians given as ``(weight, mu, sigma)`` triples."""

    components: tuple

    def __post_init__(self):
        comps = tuple((float(w), float(m), float(s)) for w, m, s in self.components)
        object.__setattr__(self, "components", comps)
        w = np.array([c[0] for c in comps])
        if len(comps) == 0 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if any(c[2] <= 0 for c in comps):
            raise ValueError("component sigmas must be positive")

    @classmethod
    def single(cls, mu: float, sigma: float):
        return cls(((1.0, mu, sigma),))

    def logpdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        terms = [math.log(w) + Gaussian1D(m, s).logpdf(x) for w, m, s in self.components if w > 0]
        return np.logaddexp.reduce(np.stack(terms), axis=0)

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def cdf(self, x):
        return sum(w * Gaussian1D(m, s).cdf(x) for w, m, s in self.components)

    def to_dict(self):
        return {"components": [list(c) for c in self.components]}


# two unit-width modes, mixture mean 0; separated and unbalanced enough that
# mass covering, mode seeking and overlap maximization pick different fits
CANONICAL_MIXTURE = GaussianMixture(((0.6, -2.8, 1.0), (0.4, 4.2, 1.0)))


@dataclass(frozen=True)
class QuadratureGrid:
    lo: float
    hi: float
    n: int = 20001

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")
        if self.n < 100:
            raise ValueError("need at least 100 nodes")

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n)

    @classmethod
    def covering(cls, *dists, n: int = 20001, width: float = 8.0):
        """Grid reaching ``width`` standard deviations past every component mean."""
        lo, hi = np.inf, -np.inf
        for d in dists:
            comps = d.components if isinstance(d, GaussianMixture) else ((1.0, d.mu, d.sigma),)
            for _, m, s in comps:
                lo = min(lo, m - width * s)
                hi = max(hi, m + width * s)
        return cls(float(lo), float(hi), n)

    def refined(self) -> "QuadratureGrid":
        return QuadratureGrid(self.lo, self.hi, 2 * self.n - 1)


BOUNDARY_DENSITY = 1e-10


def boundary_issues(grid: QuadratureGrid, *dists) -> list:
    """Messages for every density that is not negligible at the grid edges."""
    out = []
    for d in dists:
        edge = d.pdf(np.array([grid.lo, grid.hi]))
        if np.any(edge > BOUNDARY_DENSITY):
            out.append(f"density {edge.max():.3g} at grid boundary [{grid.lo}, {grid.hi}]; widen the grid")
    return out


def _check_boundary(grid: QuadratureGrid, *dists):
    issues = boundary_issues(grid, *dists)
    if issues:
        raise GridError(issues[0])


def _crossings(f, x):
    """Roots of ``f`` located by sign changes of ``f`` on the nodes ``x``."""
    fx = f(x)
    roots = list(x[fx == 0.0])
    s = np.sign(fx)
    idx = np.nonzero(s[:-1] * s[1:] < 0)[0]
    for i in idx:
        roots.append(optimize.brentq(f, x[i], x[i + 1], xtol=1e-14, rtol=4 * np.finfo(float).eps))
    return np.sort(np.array(roots))


def overlap_alpha_continuous(target, draft, grid: QuadratureGrid, check: bool = True) -> float:
    """``integral of min(p(x), q(x)) dx``.

    Crossing points of the two densities are located on the grid and
    refined by root finding; between crossings the integral of the smaller
    density is taken exactly from its CDF.
    """
    if check:
        _check_boundary(grid, target, draft)

    # log densities keep the sign of p - q defined where both underflow
    def diff(x):
        return target.logpdf(x) - draft.logpdf(x)

    cuts = np.concatenate([[-np.inf], _crossings(diff, grid.nodes), [np.inf]])
    total = 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b <= a:
            continue
        if np.isinf(a) and np.isinf(b):
            mid = 0.5 * (grid.lo + grid.hi)
        elif np.isinf(a):
            mid = b - 1.0
        elif np.isinf(b):
            mid = a + 1.0
        else:
            mid = 0.5 * (a + b)
        smaller = target if diff(mid) <= 0 else draft
        total += float(smaller.cdf(b) - smaller.cdf(a))
    return min(max(total, 0.0), 1.0)


def _kl_quadrature(p, q, x):
    lp = p.logpdf(x)
    lq = q.logpdf(x)
    integrand = np.exp(lp) * (lp - lq)
    return float(integrate.simpson(integrand, x=x))


def divergence_continuous(kind: str, target, draft, grid: QuadratureGrid, check: bool = True) -> float:
    """Forward KL, reverse KL or TV between a mixture target and a Gaussian draft."""
    if check:
        _check_boundary(grid, target, draft)
    if kind == "forward_kl":
        return _kl_quadrature(target, draft, grid.nodes)
    if kind == "reverse_kl":
        return _kl_quadrature(draft, target, grid.nodes)
    if kind == "tv":
        return 1.0 - overlap_alpha_continuous(target, draft, grid, check=False)
    raise ValueError(f"unknown continuous objective {kind!r}")


@dataclass(frozen=True)
class SearchConfig:
    mu_range: tuple = (-6.0, 6.0)
    sigma_range: tuple = (0.25, 5.0)
    n_mu: int = 49
    n_sigma: int = 39
    tol: float = 1e-6


def _objective(kind, target, grid):
    def f(mu, sigma):
        if sigma <= 0:
            return np.inf
        return divergence_continuous(kind, target, Gaussian1D(mu, sigma), grid, check=False)

    return f


def fit_gaussian(target, objective: str, grid: QuadratureGrid | None = None, search: SearchConfig = SearchConfig()):
    """Best single Gaussian under ``objective``.

    A coarse grid over ``(mu, sigma)`` seeds a Nelder-Mead polish whose
    simplex starts at the grid spacing and stops at ``search.tol``.
    Returns the fitted :class:`Gaussian1D` and its overlap acceptance rate.
    """
    if grid is None:
        grid = search_grid(target, search)
    f = _objective(objective, target, grid)
    mus = np.linspace(*search.mu_range, search.n_mu)
    sigmas = np.linspace(*search.sigma_range, search.n_sigma)
    best = (np.inf, 0.0, 1.0)
    for mu in mus:
        for s in sigmas:
            val = f(mu, s)
            if val < best[0]:
                best = (val, mu, s)
    _, mu, s = best
    dmu, ds = mus[1] - mus[0], sigmas[1] - sigmas[0]
    res = optimize.minimize(
        lambda x: f(x[0], x[1]),
        [mu, s],
        method="Nelder-Mead",
        options={
            "xatol": search.tol,
            "fatol": 1e-13,
            "initial_simplex": [[mu, s], [mu + dmu, s], [mu, s + ds]],
            "maxiter": 2000,
        },
    )
    mu, s = res.x
    fit = Gaussian1D(float(mu), float(s))
    return fit, overlap_alpha_continuous(target, fit, grid, check=False)


def search_grid(target, search: SearchConfig = SearchConfig(), n: int = 20001) -> QuadratureGrid:
    """Quadrature grid wide enough for every draft inside the search box."""
    lo_draft = Gaussian1D(search.mu_range[0], search.sigma_range[1])
    hi_draft = Gaussian1D(search.mu_range[1], search.sigma_range[1])
    return QuadratureGrid.covering(target, lo_draft, hi_draft, n=n)


def landscape_grid(objective: str, target, mu_range, sigma_range, resolution: int, grid=None):
    """Loss on a ``resolution x resolution`` grid; rows index mu, columns sigma."""
    if resolution < 10:
        raise ValueError("resolution must be at least 10 per axis")
    mus = np.linspace(*mu_range, resolution)
    sigmas = np.linspace(*sigma_range, resolution)
    if grid is None:
        grid = search_grid(target, SearchConfig(tuple(mu_range), tuple(sigma_range)))
    f = _objective(objective, target, grid)
    values = np.array([[f(m, s) for s in sigmas] for m in mus])
    return mus, sigmas, values


# -- discrete capacity-limited tasks -------------------------------------------

FAMILIES = ("shared", "linear", "table")


@dataclass
class ToyTask:
    """Context-indexed targets plus the draft family that must serve them.

    ``shared``: one categorical for every context.  ``linear``: logits are
    ``features @ W`` with ``features`` of shape ``(C, F)``.  ``table``: one
    free logit row per context (realizable).
    """

    V: int
    targets: np.ndarray
    family: str = "shared"
    features: np.ndarray | None = None
    seed: int | None = None
    concentration: float | None = None
    draft_vocab: list | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.targets.ndim != 2 or self.targets.shape[1] != self.V:
            raise ValueError("targets must have shape (C, V)")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown draft family {self.family!r}")
        if self.family == "linear":
            if self.features is None:
                raise ValueError("linear family needs context features")
            self.features = np.asarray(self.features, dtype=np.float64)

    @property
    def C(self) -> int:
        return self.targets.shape[0]

    def to_dict(self) -> dict:
        return {
            "V": self.V,
            "family": self.family,
            "seed": self.seed,
            "concentration": self.concentration,
            "targets": self.targets.tolist(),
            "features": None if self.features is None else self.features.tolist(),
            "draft_vocab": self.draft_vocab,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToyTask":
        return cls(
            V=d["V"],
            targets=np.array(d["targets"]),
            family=d.get("family", "shared"),
            features=None if d.get("features") is None else np.array(d["features"]),
            seed=d.get("seed"),
            concentration=d.get("concentration"),
            draft_vocab=d.get("draft_vocab"),
            meta=d.get("meta", {}),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def load(cls, path) -> "ToyTask":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def make_capacity_task(V: int, C: int, concentration: float = 0.3, seed: int = 0, family: str = "shared", n_features=None):
    """Targets drawn from a symmetric Dirichlet, deterministic in ``seed``."""
    if V < 2:
        raise ValueError("need V >= 2")
    if C < 1:
        raise ValueError("need at least one context")
    rng = np.random.default_rng(seed)
    targets = rng.dirichlet(np.full(V, concentration), size=C)
    targets /= targets.sum(axis=1, keepdims=True)
    features = None
    if family == "linear":
        f = n_features or max(1, C // 2)
        features = rng.normal(size=(C, f))
    return ToyTask(V, targets, family, features, seed, concentration)


def mean_alpha(targets, q) -> float:
    """Mean over contexts of the acceptance rate of a shared draft ``q``."""
    return float(np.mean(acceptance_rate(np.asarray(targets), np.asarray(q))))


def _refine_simplex(targets, q, start_step, min_step=1e-10):
    """Pairwise mass transfers with halving steps; the objective is concave."""
    q = q.astype(np.float64).copy()
    best = mean_alpha(targets, q)
    v = len(q)
    step = start_step
    while step >= min_step:
        improved = False
        for i in range(v):
            for j in range(v):
                if i == j or q[j] <= 0:
                    continue
                d = min(step, q[j])
                cand = q.copy()
                cand[i] += d
                cand[j] -= d
                val = mean_alpha(targets, cand)
                if val > best + 1e-15:
                    q, best, improved = cand, val, True
        if not improved:
            step /= 2
    return q, best


def brute_force_optimal_alpha(task: ToyTask, resolution: float = 0.01, backend=None):
    """Exhaustive simplex-grid maximization of mean acceptance for a shared draft."""
    if task.family != "shared":
        raise ValueError("brute force applies to the shared-categorical family only")
    if task.V > 5:
        raise ValueError("brute force is limited to V <= 5")
    if resolution > 0.01:
        raise ValueError("resolution must be 0.01 or finer")
    n = int(round(1.0 / resolution))
    comp, _ = _kernels.simplex_grid_argmax(task.targets, n, backend)
    q, alpha = _refine_simplex(task.targets, comp / n, resolution)
    return q / q.sum(), alpha


def kl_optimal_shared_q(task: ToyTask) -> np.ndarray:
    """Minimizer of mean forward KL over contexts: the average target."""
    if task.family != "shared":
        raise ValueError("closed form applies to the shared-categorical family only")
    return task.targets.mean(axis=0)


def mean_kl(targets, q) -> float:
    return float(np.mean(kl_forward(np.asarray(targets), np.asarray(q))))
