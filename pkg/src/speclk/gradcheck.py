"""Finite-difference verification of the analytic loss gradients and the
gradient-magnitude analysis of the diffuse-draft / concentrated-target regime.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .dist import softmax

# Losses whose gradients are checked by default.
DEFAULT_KINDS = (
    L.LossKind.forward_kl(),
    L.LossKind.tv(),
    L.LossKind.lk_alpha(),
    L.LossKind.hybrid_fixed(0.5),
    L.LossKind.hybrid_adaptive(3.0),
)

TIE_TOL = 1e-7


def _frozen_lam(kind: L.LossKind, p, q):
    if kind.adaptive:
        return L.lambda_schedule(L.acceptance_rate(p, q), kind.eta)
    return None


def _uses_tv(kind: L.LossKind) -> bool:
    return kind.name in ("tv", "lk_alpha", "lk_hybrid_adaptive") or (
        kind.name == "lk_hybrid_fixed" and kind.lam < 1.0
    )


def finite_diff_grad(kind: L.LossKind, p, z_q, step: float = 1e-6, lam=None) -> np.ndarray:
    """Central differences of the loss w.r.t. every draft logit.

    For the adaptive hybrid the blend weight is frozen at its value at
    ``z_q`` (pass ``lam`` to override), matching the stop-gradient.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    p = np.asarray(p, dtype=np.float64)
    z = np.asarray(z_q, dtype=np.float64)
    if lam is None:
        lam = _frozen_lam(kind, p, softmax(z))
    eye = np.eye(z.shape[-1]) * step
    f_plus = np.asarray(L.loss_value(kind, p, softmax(z + eye), lam=lam))
    f_minus = np.asarray(L.loss_value(kind, p, softmax(z - eye), lam=lam))
    if not (np.all(np.isfinite(f_plus)) and np.all(np.isfinite(f_minus))):
        raise FloatingPointError("loss is not finite at a perturbed point")
    return (f_plus - f_minus) / (2 * step)


def analytic_grad(kind: L.LossKind, p, z_q) -> np.ndarray:
    q = softmax(z_q)
    return L.loss_and_grad(kind, p, q).grad


def _kink_coords(p, z, step) -> np.ndarray:
    """Coordinates whose +/- perturbation flips the sign pattern of ``q - p``."""
    eye = np.eye(z.shape[-1]) * step
    s_plus = np.sign(softmax(z + eye) - p)
    s_minus = np.sign(softmax(z - eye) - p)
    return np.any(s_plus != s_minus, axis=-1)


def rel_error(a, n) -> float:
    """Max componentwise error, relative to the larger of the two gradients' max-norm."""
    a = np.asarray(a)
    n = np.asarray(n)
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max(), 1e-12)
    return float(np.abs(a - n).max() / scale)


@dataclass
class GradReport:
    max_rel_error: float
    worst_case: dict | None
    passed: bool
    tolerance: float
    trials: int = 0
    checks: int = 0
    skipped_coords: int = 0
    per_kind: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tolerance": self.tolerance,
            "trials": self.trials,
            "checks": self.checks,
            "skipped_coords": self.skipped_coords,
            "max_rel_error": self.max_rel_error,
            "per_kind": self.per_kind,
            "worst_case": self.worst_case,
        }


def random_pair(rng: np.random.Generator, v: int):
    """A random target distribution and draft logits of size ``v``."""
    conc = rng.uniform(0.2, 2.0)
    p = rng.dirichlet(np.full(v, conc))
    p = p / p.sum()
    z = rng.normal(0.0, 1.5, size=v)
    return p, z


def check_one(kind, p, z, step=1e-6):
    """Compare analytic and numeric gradients at one point.

    Returns ``(rel_error, worst_index, n_skipped)``.
    """
    q = softmax(z)
    a = analytic_grad(kind, p, z)
    n = finite_diff_grad(kind, p, z, step)
    keep = np.ones(len(z), dtype=bool)
    if _uses_tv(kind):
        keep &= np.abs(q - p) >= TIE_TOL
        keep &= ~_kink_coords(p, z, step)
    if not keep.any():
        return 0.0, None, int((~keep).sum())
    scale = max(np.abs(a).max(), np.abs(n).max(), 1e-12)
    err = np.abs(a - n) / scale
    err[~keep] = 0.0
    j = int(np.argmax(err))
    return float(err[j]), j, int((~keep).sum())


def check_all_gradients(
    num_trials: int,
    v_range=(2, 64),
    rng: np.random.Generator | None = None,
    tolerance: float = 1e-5,
    step: float = 1e-6,
    kinds=DEFAULT_KINDS,
) -> GradReport:
    """Random analytic-vs-numeric comparisons for every loss kind."""
    if tolerance < 0:
        raise ValueError("tolerance must be non-negative")
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    worst_case = None
    checks = skipped = 0
    per_kind = {str(k): 0.0 for k in kinds}
    for trial in range(num_trials):
        v = int(rng.integers(v_range[0], v_range[1] + 1))
        p, z = random_pair(rng, v)
        for kind in kinds:
            err, j, nskip = check_one(kind, p, z, step)
            checks += 1
            skipped += nskip
            per_kind[str(kind)] = max(per_kind[str(kind)], err)
            if err > worst or worst_case is None:
                worst = max(worst, err)
                worst_case = {
                    "loss": str(kind),
                    "trial": trial,
                    "V": v,
                    "index": j,
                    "p": p.tolist(),
                    "z_q": z.tolist(),
                }
    return GradReport(worst, worst_case, worst <= tolerance, tolerance, num_trials, checks, skipped, per_kind)


# -- magnitude regimes -------------------------------------------------------


@dataclass(frozen=True)
class RegimeSpec:
    V: int
    k: int

    def __post_init__(self):
        if not 1 <= self.k < self.V:
            raise ValueError("need 1 <= k < V")


def make_regime(spec: RegimeSpec):
    """Uniform draft over ``V`` tokens and a target uniform over the first ``k``."""
    q = np.full(spec.V, 1.0 / spec.V)
    p = np.zeros(spec.V)
    p[: spec.k] = 1.0 / spec.k
    return p, q


def regime_gradients(spec: RegimeSpec) -> dict:
    p, q = make_regime(spec)
    return {
        "forward_kl": L.grad_kl(p, q),
        "tv": L.grad_tv(p, q),
        "lk_alpha": L.loss_lk_alpha(p, q).grad,
    }


def magnitude_report(spec: RegimeSpec) -> dict:
    """Measured vs predicted gradient norms: ``1/sqrt(k)``, ``sqrt(k)/V``, ``1/sqrt(k)``."""
    grads = regime_gradients(spec)
    pred = {
        "forward_kl": 1.0 / np.sqrt(spec.k),
        "tv": np.sqrt(spec.k) / spec.V,
        "lk_alpha": 1.0 / np.sqrt(spec.k),
    }
    return {name: (float(np.linalg.norm(g)), float(pred[name])) for name, g in grads.items()}


def component_table(spec: RegimeSpec) -> dict:
    """Mean gradient component on and off the target support, with predictions.

    Predicted values: KL ``-1/k`` and ``+1/V``; TV ``-1/V`` and ``~0``;
    negative log acceptance ``-1/k`` and ``+1/V``.
    """
    grads = regime_gradients(spec)
    k, v = spec.k, spec.V
    pred = {
        "forward_kl": (-1.0 / k, 1.0 / v),
        "tv": (-1.0 / v, 0.0),
        "lk_alpha": (-1.0 / k, 1.0 / v),
    }
    out = {}
    for name, g in grads.items():
        out[name] = {
            "on_support": float(g[:k].mean()),
            "off_support": float(g[k:].mean()),
            "pred_on_support": pred[name][0],
            "pred_off_support": pred[name][1],
        }
    return out
