"""Finite categorical distributions.

Distributions are plain float64 numpy arrays whose last axis is the
vocabulary.  Functions accept a single vector or a batch ``(..., V)``.
"""
from __future__ import annotations

import numpy as np

# floor applied before taking logs of probabilities
LOG_FLOOR = 1e-300


class NoRejectionMass(ValueError):
    """Raised when ``max(0, p - q)`` carries no mass to resample from."""


def as_categorical(probs, atol: float = 1e-12) -> np.ndarray:
    """Validate and return ``probs`` as a float64 array."""
    d = np.asarray(probs, dtype=np.float64)
    if d.shape[-1] < 1:
        raise ValueError("empty distribution")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ValueError("probabilities must be finite and non-negative")
    if np.any(np.abs(d.sum(axis=-1) - 1.0) > atol):
        raise ValueError("probabilities must sum to one")
    return d


def softmax(z, t: float = 1.0) -> np.ndarray:
    """Temperature softmax over the last axis.

    Entries equal to ``-inf`` (masked tokens) get probability exactly 0.
    Temperature 0 is rejected; greedy decoding goes through
    :func:`point_mass_at_argmax`.
    """
    if t <= 0:
        raise ValueError("temperature must be positive; use point_mass_at_argmax for t=0")
    z = np.asarray(z, dtype=np.float64)
    if np.any(np.isnan(z)) or np.any(z == np.inf):
        raise ValueError("logits must be finite or -inf")
    zmax = z.max(axis=-1, keepdims=True)
    if np.any(zmax == -np.inf):
        raise ValueError("all logits are -inf")
    e = np.exp((z - zmax) / t)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z, t: float = 1.0) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64) / t
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def mask_logits(z, allowed) -> np.ndarray:
    """Set logits outside ``allowed`` (token indices) to ``-inf``."""
    z = np.asarray(z, dtype=np.float64)
    allowed = np.asarray(sorted(set(int(i) for i in allowed)), dtype=np.int64)
    if allowed.size == 0:
        raise ValueError("vocabulary mask must be non-empty")
    if allowed.min() < 0 or allowed.max() >= z.shape[-1]:
        raise ValueError("mask index out of range")
    out = np.full_like(z, -np.inf)
    out[..., allowed] = z[..., allowed]
    return out


def masked_softmax(z, allowed, t: float = 1.0) -> np.ndarray:
    return softmax(mask_logits(z, allowed), t)


def point_mass_at_argmax(d) -> np.ndarray:
    """One-hot at the argmax; ties go to the lowest index."""
    d = np.asarray(d, dtype=np.float64)
    out = np.zeros_like(d)
    idx = np.argmax(d, axis=-1)  # numpy returns the first maximum
    np.put_along_axis(out, np.expand_dims(idx, -1), 1.0, axis=-1)
    return out


def sample_with(d, u: float) -> int:
    """Inverse-CDF draw of one token given a uniform variate ``u`` in [0, 1)."""
    cdf = np.cumsum(d)
    i = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    return min(i, len(cdf) - 1)


def sample(d, rng: np.random.Generator) -> int:
    """Draw one token; consumes exactly one uniform variate from ``rng``."""
    return sample_with(np.asarray(d, dtype=np.float64), rng.random())


def residual_distribution(p, q, tol: float = 1e-12) -> np.ndarray:
    """Normalized ``max(0, p - q)``, the distribution resampled after a rejection."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    r = np.maximum(p - q, 0.0)
    mass = r.sum(axis=-1, keepdims=True)
    if np.any(mass < tol):
        raise NoRejectionMass("p and q leave no rejection mass")
    return r / mass
