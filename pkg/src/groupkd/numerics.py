"""Numerically stable scalar/vector primitives shared by every loss."""

import numpy as np


def log_sum_exp(z):
    """log(sum(exp(z))) with max-shift so any finite input is safe."""
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        raise ValueError("empty logits")
    m = np.max(z)
    return float(m + np.log(np.sum(np.exp(z - m))))


def softmax(z, temperature=1.0):
    """Temperature-scaled softmax of a 1-D logit vector."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    z = np.asarray(z, dtype=np.float64) / temperature
    z = z - np.max(z)
    e = np.exp(z)
    return e / e.sum()


def kl_divergence(p, q):
    """KL(p || q) with the 0*log(0/q) = 0 convention.

    Positive mass where q is zero raises instead of returning inf, to
    surface support bugs early.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    pos = p > 0
    if np.any(pos & (q == 0)):
        raise ValueError("KL undefined (support mismatch)")
    # roundoff can push the sum a few ulp below zero; the true value is >= 0
    return max(0.0, float(np.sum(p[pos] * np.log(p[pos] / q[pos]))))


def validate_prob_vector(p, atol=1e-12):
    """Raise unless p is a probability vector (entries in [0,1], sums to 1)."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise ValueError("probability vector must be 1-D and non-empty")
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    if abs(p.sum() - 1.0) > max(atol, 1e-9):
        raise ValueError(f"probabilities sum to {p.sum()}, not 1")
    return p


def validate_logit_vector(z):
    """Raise unless z is a finite 1-D logit vector of length >= 2."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.size < 2:
        raise ValueError("logit vector must be 1-D with length >= 2")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    return z
