"""Cosine classification heads: additive-angular-margin, cosine-margin, and
plain scaled softmax, with analytic gradients through the normalization."""

import math
from dataclasses import dataclass

import numpy as np

COS_EPS = 1e-7  # clamp before any acos/sqrt to keep derivatives finite

HEAD_KINDS = ("arcface", "cosface", "plain")


@dataclass
class CosineHead:
    weights: np.ndarray  # (C, d) class prototypes
    scale: float = 64.0
    margin: float = 0.5
    kind: str = "arcface"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("head weights must be (C, d)")
        if self.scale <= 0:
            raise ValueError("scale must be > 0")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.kind == "arcface" and self.margin >= math.pi / 2:
            raise ValueError("arcface margin must be < pi/2")
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}")

    @property
    def num_classes(self):
        return self.weights.shape[0]


def _normalize_rows(x, what):
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError(f"zero-norm {what}")
    return x / norms, norms


def batch_cosine_logits(embeddings, head):
    """Clamped cosines between normalized embeddings and prototypes.

    Returns (cosines (B, C), cache) where the cache carries everything
    batch_cosine_backward needs.
    """
    E = np.asarray(embeddings, dtype=np.float64)
    e_hat, e_norms = _normalize_rows(E, "embedding")
    w_hat, w_norms = _normalize_rows(head.weights, "prototype")
    raw = e_hat @ w_hat.T
    cos = np.clip(raw, -1.0 + COS_EPS, 1.0 - COS_EPS)
    cache = {"e_hat": e_hat, "e_norms": e_norms, "w_hat": w_hat,
             "w_norms": w_norms, "raw": raw, "active": cos == raw}
    return cos, cache


def batch_apply_margin(cosines, labels, head):
    """Perturb the target-class cosine, then multiply everything by scale."""
    cos = np.asarray(cosines, dtype=np.float64)
    labels = np.asarray(labels)
    out = cos.copy()
    rows = np.arange(cos.shape[0])
    c_y = cos[rows, labels]
    m = head.margin
    if head.kind == "arcface":
        # cos(theta + m) while monotone; hard fallback past theta + m = pi
        sin_y = np.sqrt(np.clip(1.0 - c_y**2, 0.0, None))
        phi = c_y * math.cos(m) - sin_y * math.sin(m)
        out[rows, labels] = np.where(c_y > math.cos(math.pi - m), phi, c_y - m * math.sin(m))
    elif head.kind == "cosface":
        out[rows, labels] = c_y - m
    return head.scale * out


def _margin_target_deriv(c_y, head):
    """d(margined target cosine)/d(cosine), before the scale factor."""
    m = head.margin
    if head.kind == "arcface":
        sin_y = np.sqrt(np.clip(1.0 - c_y**2, COS_EPS**2, None))
        d = math.cos(m) + c_y * math.sin(m) / sin_y
        return np.where(c_y > math.cos(math.pi - m), d, 1.0)
    return np.ones_like(c_y)  # cosface offset and plain have unit slope


def batch_ce(margined_logits, labels):
    """Per-sample softmax cross-entropy of margined logits."""
    z = np.asarray(margined_logits, dtype=np.float64)
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= z.shape[1]):
        raise ValueError("label out of range")
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(z - m), axis=1))
    return lse - z[np.arange(z.shape[0]), labels]


def batch_margin_ce_grad(cosines, labels, head):
    """CE losses through the margin, and gradients w.r.t. the cosines."""
    labels = np.asarray(labels)
    margined = batch_apply_margin(cosines, labels, head)
    losses = batch_ce(margined, labels)
    z = margined - margined.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    rows = np.arange(p.shape[0])
    g = p.copy()
    g[rows, labels] -= 1.0
    dcos = g * head.scale
    dcos[rows, labels] *= _margin_target_deriv(
        np.asarray(cosines)[rows, labels], head
    )
    return losses, dcos


def batch_cosine_backward(cache, dcos):
    """Push gradients w.r.t. clamped cosines back to embeddings and weights.

    Entries where the clamp was active get zero gradient.
    """
    d = np.where(cache["active"], dcos, 0.0)
    e_hat, w_hat = cache["e_hat"], cache["w_hat"]
    raw = cache["raw"]
    # d cos_bj / d e_b = (w_hat_j - cos_bj * e_hat_b) / ||e_b||
    grad_e = (d @ w_hat - np.sum(d * raw, axis=1, keepdims=True) * e_hat) / cache["e_norms"]
    # d cos_bj / d w_j = (e_hat_b - cos_bj * w_hat_j) / ||w_j||
    grad_w = (d.T @ e_hat - np.sum(d * raw, axis=0)[:, None] * w_hat) / cache["w_norms"]
    return grad_e, grad_w


# --- per-sample surface ------------------------------------------------------

def cosine_logits(embedding, head):
    cos, _ = batch_cosine_logits(np.asarray(embedding)[None, :], head)
    return cos[0]


def apply_margin(cosines, label, head):
    return batch_apply_margin(np.asarray(cosines)[None, :], [label], head)[0]


def ce_loss(margined_logits, label):
    return float(batch_ce(np.asarray(margined_logits)[None, :], [label])[0])


def head_backward(embedding, label, head):
    """Gradient of ce_loss(apply_margin(cosine_logits(e))) w.r.t. e and W."""
    E = np.asarray(embedding, dtype=np.float64)[None, :]
    cos, cache = batch_cosine_logits(E, head)
    _, dcos = batch_margin_ce_grad(cos, [label], head)
    grad_e, grad_w = batch_cosine_backward(cache, dcos)
    return grad_e[0], grad_w
