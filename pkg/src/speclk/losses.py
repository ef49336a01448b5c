"""Draft-model training objectives and their gradients w.r.t. draft logits.

All functions work on the last axis, so ``p`` and ``q`` may be single
distributions of shape ``(V,)`` or batches of shape ``(B, V)``.  Gradients
are taken with respect to the draft logits ``z`` where ``q = softmax(z)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dist import LOG_FLOOR

LOSS_NAMES = (
    "forward_kl",
    "reverse_kl",
    "tv",
    "lk_alpha",
    "lk_hybrid_fixed",
    "lk_hybrid_adaptive",
)


class ZeroAcceptance(ValueError):
    """Acceptance rate underflowed; ``-log(alpha)`` is undefined."""


@dataclass(frozen=True)
class LossKind:
    """Which objective to train with.

    ``lam`` is only meaningful for ``lk_hybrid_fixed`` and ``eta`` for
    ``lk_hybrid_adaptive``.
    """

    name: str
    lam: float | None = None
    eta: float | None = None

    def __post_init__(self):
        if self.name not in LOSS_NAMES:
            raise ValueError(f"unknown loss {self.name!r}")
        if self.name == "lk_hybrid_fixed":
            if self.lam is None or not 0.0 <= self.lam <= 1.0:
                raise ValueError("fixed hybrid needs lam in [0, 1]")
        if self.name == "lk_hybrid_adaptive":
            if self.eta is None or not self.eta > 0:
                raise ValueError("adaptive hybrid needs eta > 0")

    @classmethod
    def forward_kl(cls):
        return cls("forward_kl")

    @classmethod
    def reverse_kl(cls):
        return cls("reverse_kl")

    @classmethod
    def tv(cls):
        return cls("tv")

    @classmethod
    def lk_alpha(cls):
        return cls("lk_alpha")

    @classmethod
    def hybrid_fixed(cls, lam: float):
        return cls("lk_hybrid_fixed", lam=float(lam))

    @classmethod
    def hybrid_adaptive(cls, eta: float = 3.0):
        return cls("lk_hybrid_adaptive", eta=float(eta))

    @property
    def adaptive(self) -> bool:
        return self.name == "lk_hybrid_adaptive"

    @classmethod
    def parse(cls, text: str) -> "LossKind":
        """Parse labels like ``tv``, ``lk_hybrid_fixed:lam=0.5`` or ``lk_hybrid_adaptive:eta=3``."""
        name, _, rest = text.strip().partition(":")
        kwargs = {}
        for part in filter(None, rest.split(",")):
            key, _, val = part.partition("=")
            kwargs[key.strip()] = float(val)
        if name == "lk_hybrid_adaptive" and "eta" not in kwargs:
            kwargs["eta"] = 3.0
        return cls(name, **kwargs)

    def __str__(self) -> str:
        if self.name == "lk_hybrid_fixed":
            return f"{self.name}:lam={self.lam:g}"
        if self.name == "lk_hybrid_adaptive":
            return f"{self.name}:eta={self.eta:g}"
        return self.name


@dataclass
class LossOutput:
    """Loss value, gradient w.r.t. draft logits, and diagnostics.

    For batched inputs ``value``, ``alpha`` and ``support_violation`` are
    arrays with the batch shape and ``grad`` has shape ``(B, V)``.
    """

    value: float | np.ndarray
    grad: np.ndarray
    alpha: float | np.ndarray
    lam: float | None = None
    support_violation: bool | np.ndarray = field(default=False)


def _scalar(x):
    x = np.asarray(x)
    return x.item() if x.ndim == 0 else x


def _pq(p, q):
    return np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)


def support_violation(p, q):
    """True where ``p`` puts mass on a token that ``q`` gives zero probability."""
    p, q = _pq(p, q)
    return _scalar(np.any((p > 0) & (q <= 0), axis=-1))


def kl_forward(p, q):
    """``KL(p || q)``; ``+inf`` where the support of ``p`` is not covered by ``q``."""
    p, q = _pq(p, q)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.maximum(p, LOG_FLOOR)) - np.log(q)), 0.0)
    out = terms.sum(axis=-1)
    out = np.where(support_violation(p, q), np.inf, out)
    return _scalar(out)


def kl_reverse(p, q):
    """``KL(q || p)``, the mode-seeking direction."""
    return kl_forward(q, p)


def tv(p, q):
    p, q = _pq(p, q)
    return _scalar(0.5 * np.abs(p - q).sum(axis=-1))


def acceptance_rate(p, q):
    """Expected acceptance probability ``sum_i min(p_i, q_i)``."""
    p, q = _pq(p, q)
    return _scalar(np.minimum(p, q).sum(axis=-1))


def grad_kl(p, q) -> np.ndarray:
    p, q = _pq(p, q)
    return q - p


def grad_tv(p, q) -> np.ndarray:
    """``0.5 * q * (s - E_q[s])`` with ``s = sign(q - p)`` and ``sign(0) = 0``."""
    p, q = _pq(p, q)
    s = np.sign(q - p)
    mean_s = (q * s).sum(axis=-1, keepdims=True)
    return 0.5 * q * (s - mean_s)


def lambda_schedule(alpha, eta: float):
    """Blend weight ``exp(-eta * alpha)``; a constant as far as gradients go."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    return _scalar(np.exp(-eta * np.asarray(alpha, dtype=np.float64)))


def per_position_alpha(batch_alphas) -> float:
    """Aggregate per-example acceptance rates of one head position (arithmetic mean)."""
    a = np.asarray(batch_alphas, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError("empty batch")
    return float(a.mean())


def mask_target(p, allowed) -> np.ndarray:
    """Restrict ``p`` to the draft vocabulary and renormalize.

    Equivalent to re-running the target softmax with logits outside
    ``allowed`` set to ``-inf``.
    """
    p = np.asarray(p, dtype=np.float64)
    keep = np.zeros(p.shape[-1], dtype=bool)
    keep[np.asarray(list(allowed), dtype=np.int64)] = True
    out = np.where(keep, p, 0.0)
    mass = out.sum(axis=-1, keepdims=True)
    if np.any(mass <= 0):
        raise ValueError("target has no mass inside the draft vocabulary")
    return out / mass


def loss_lk_alpha(p, q) -> LossOutput:
    """Negative log acceptance rate and its gradient ``grad_tv / alpha``."""
    p, q = _pq(p, q)
    alpha = np.minimum(p, q).sum(axis=-1)
    if np.any(alpha < LOG_FLOOR):
        raise ZeroAcceptance("draft and target supports are disjoint")
    grad = grad_tv(p, q) / alpha[..., None]
    return LossOutput(_scalar(-np.log(alpha)), grad, _scalar(alpha))


def loss_lk_hybrid(p, q, lam: float, p_kl=None) -> LossOutput:
    """``lam * KL + (1 - lam) * TV`` with ``lam`` held constant.

    ``p_kl`` replaces the target inside the KL term only (the renormalized
    target under vocabulary truncation); TV and alpha always use ``p``.
    """
    p, q = _pq(p, q)
    p_kl = p if p_kl is None else np.asarray(p_kl, dtype=np.float64)
    kl = np.asarray(kl_forward(p_kl, q))
    t = np.asarray(tv(p, q))
    if lam == 0.0:
        value = t.copy()
    elif lam == 1.0:
        value = kl.copy()
    else:
        value = lam * kl + (1.0 - lam) * t
    grad = lam * grad_kl(p_kl, q) + (1.0 - lam) * grad_tv(p, q)
    return LossOutput(
        _scalar(value),
        grad,
        acceptance_rate(p, q),
        lam=float(lam),
        support_violation=support_violation(p_kl, q),
    )


def loss_and_grad(kind: LossKind, p, q, *, sched_alpha=None, p_kl=None) -> LossOutput:
    """Evaluate any trainable objective.

    ``sched_alpha`` feeds the adaptive schedule; when omitted the mean
    acceptance rate of the given batch is used.  ``p_kl`` is the masked
    target used by KL terms under vocabulary truncation.
    """
    p, q = _pq(p, q)
    name = kind.name
    if name == "forward_kl":
        return loss_lk_hybrid(p, q, 1.0, p_kl)
    if name == "tv":
        return loss_lk_hybrid(p, q, 0.0, p_kl)
    if name == "lk_alpha":
        return loss_lk_alpha(p, q)
    if name == "lk_hybrid_fixed":
        return loss_lk_hybrid(p, q, kind.lam, p_kl)
    if name == "lk_hybrid_adaptive":
        if sched_alpha is None:
            sched_alpha = per_position_alpha(acceptance_rate(p, q))
        return loss_lk_hybrid(p, q, lambda_schedule(float(sched_alpha), kind.eta), p_kl)
    raise ValueError(f"{name} is not a trainable objective")


def loss_value(kind: LossKind, p, q, *, lam=None, p_kl=None):
    """Loss value only, with ``lam`` frozen for hybrids (used by finite differences)."""
    p, q = _pq(p, q)
    if kind.name == "lk_alpha":
        return -np.log(np.maximum(acceptance_rate(p, q), LOG_FLOOR))
    if kind.name == "reverse_kl":
        return kl_reverse(p, q)
    if lam is None:
        lam = {"forward_kl": 1.0, "tv": 0.0, "lk_hybrid_fixed": kind.lam}.get(kind.name)
        if lam is None:
            raise ValueError("adaptive hybrid needs a frozen lam")
    p_kl = p if p_kl is None else p_kl
    kl = np.asarray(kl_forward(p_kl, q)) if lam > 0 else 0.0
    t = np.asarray(tv(p, q)) if lam < 1 else 0.0
    return _scalar(lam * kl + (1.0 - lam) * t)


@dataclass(frozen=True)
class HeadAggregation:
    """Exponentially decaying weights across draft heads: head n gets ``gamma**(n-1)``."""

    gamma: float = 0.8
    num_heads: int = 1

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.num_heads < 1:
            raise ValueError("need at least one head")

    @property
    def weights(self) -> np.ndarray:
        return self.gamma ** np.arange(self.num_heads, dtype=np.float64)


def aggregate_heads(per_head, agg: HeadAggregation) -> float:
    per_head = np.asarray(per_head, dtype=np.float64)
    if per_head.shape != (agg.num_heads,):
        raise ValueError(f"expected {agg.num_heads} head losses, got {per_head.shape}")
    return float(math.fsum(agg.weights * per_head))
