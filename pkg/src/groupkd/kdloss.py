"""Grouped distillation losses.

The full teacher/student KL splits exactly into three parts once the classes
are partitioned into a head group (phi) and tail group (psi):

    full = p_phi_t * primary + p_psi_t * secondary + binary

where primary/secondary are KLs of the within-group renormalized
distributions and binary is the KL of the two-element group-mass
distributions.  The training loss keeps only the primary and binary parts.

Per-sample functions operate on 1-D logit vectors; the ``batch_*`` functions
are vectorized over a leading batch axis and are what the trainer uses.
"""

from dataclasses import dataclass

import numpy as np

from .grouping import Partition, build_partition
from .numerics import kl_divergence, log_sum_exp, softmax, validate_logit_vector

VARIANTS = ("full_kd", "primary_only", "primary_binary", "primary_secondary_binary")


@dataclass
class KDConfig:
    tau: float = 0.93
    lambda1: float = 8.0
    lambda2: float = 1.0
    temperature: float = 1.0
    lambda1_mode: str = "constant"  # "constant" | "teacher_mass"

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must be in (0, 1], got {self.tau}")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda weights must be >= 0")
        if self.lambda1_mode not in ("constant", "teacher_mass"):
            raise ValueError(f"unknown lambda1_mode {self.lambda1_mode!r}")


@dataclass(frozen=True)
class GroupedProbs:
    p_hat_t: np.ndarray   # teacher, renormalized over phi
    p_hat_s: np.ndarray
    p_check_t: np.ndarray  # teacher, renormalized over psi (empty if psi empty)
    p_check_s: np.ndarray
    pb_t: np.ndarray       # [p_phi_t, p_psi_t]
    pb_s: np.ndarray


@dataclass(frozen=True)
class DecompositionReport:
    full_kd: float
    primary: float
    secondary: float
    binary: float
    p_phi_t: float
    p_psi_t: float
    residual: float


def _group_softmax(z, idx, temperature):
    """Softmax restricted to logits at idx, plus the group's log-mass term."""
    a = np.asarray(z, dtype=np.float64)[idx] / temperature
    lse = log_sum_exp(a) if a.size else -np.inf
    return np.exp(a - lse), lse


def grouped_probs(z_t, z_s, part, temperature=1.0):
    z_t = validate_logit_vector(z_t)
    z_s = validate_logit_vector(z_s)
    if z_t.size != z_s.size:
        raise ValueError("teacher/student logit lengths differ")
    if part.num_classes != z_t.size:
        raise ValueError("partition does not match logit length")

    p_hat_t, lse_phi_t = _group_softmax(z_t, part.phi, temperature)
    p_hat_s, lse_phi_s = _group_softmax(z_s, part.phi, temperature)
    p_check_t, lse_psi_t = _group_softmax(z_t, part.psi, temperature)
    p_check_s, lse_psi_s = _group_softmax(z_s, part.psi, temperature)

    lse_t = log_sum_exp(z_t / temperature)
    lse_s = log_sum_exp(z_s / temperature)
    pb_t = np.array([np.exp(lse_phi_t - lse_t), np.exp(lse_psi_t - lse_t)])
    pb_s = np.array([np.exp(lse_phi_s - lse_s), np.exp(lse_psi_s - lse_s)])
    return GroupedProbs(p_hat_t, p_hat_s, p_check_t, p_check_s, pb_t, pb_s)


def classic_kd(z_t, z_s, temperature=1.0):
    """KL between full softened predictions, teacher as target."""
    p_t = softmax(validate_logit_vector(z_t), temperature)
    p_s = softmax(validate_logit_vector(z_s), temperature)
    return kl_divergence(p_t, p_s)


def decompose(z_t, z_s, part, temperature=1.0):
    gp = grouped_probs(z_t, z_s, part, temperature)
    full = classic_kd(z_t, z_s, temperature)
    primary = kl_divergence(gp.p_hat_t, gp.p_hat_s)
    if part.psi.size:
        secondary = kl_divergence(gp.p_check_t, gp.p_check_s)
        binary = kl_divergence(gp.pb_t, gp.pb_s)
    else:
        secondary = 0.0
        binary = 0.0
    recon = gp.pb_t[0] * primary + gp.pb_t[1] * secondary + binary
    return DecompositionReport(
        full_kd=full,
        primary=primary,
        secondary=secondary,
        binary=binary,
        p_phi_t=float(gp.pb_t[0]),
        p_psi_t=float(gp.pb_t[1]),
        residual=abs(full - recon),
    )


def _lambda1(cfg, p_phi_t):
    return p_phi_t if cfg.lambda1_mode == "teacher_mass" else cfg.lambda1


def gkd_loss(z_t, z_s, cfg):
    """lambda1 * primary + lambda2 * binary; the tail KL is omitted."""
    part = build_partition(z_s, cfg.tau, cfg.temperature)
    rep = decompose(z_t, z_s, part, cfg.temperature)
    return _lambda1(cfg, rep.p_phi_t) * rep.primary + cfg.lambda2 * rep.binary


def ablation_loss(variant, z_t, z_s, cfg):
    """Assemble a chosen subset of the decomposition terms.

    full_kd and primary_secondary_binary reconstruct the classic KD value
    (the latter through the exact-reconstruction coefficients); primary_only
    and primary_binary use the lambda weights.
    """
    if variant == "full_kd":
        return classic_kd(z_t, z_s, cfg.temperature)
    part = build_partition(z_s, cfg.tau, cfg.temperature)
    rep = decompose(z_t, z_s, part, cfg.temperature)
    lam1 = _lambda1(cfg, rep.p_phi_t)
    if variant == "primary_only":
        return lam1 * rep.primary
    if variant == "primary_binary":
        return lam1 * rep.primary + cfg.lambda2 * rep.binary
    if variant == "primary_secondary_binary":
        return rep.p_phi_t * rep.primary + rep.p_psi_t * rep.secondary + rep.binary
    raise ValueError(f"unknown variant {variant!r}")


def kd_backward(z_t, z_s, temperature=1.0):
    """d classic_kd / d z_s = (p_s - p_t) / T."""
    p_t = softmax(validate_logit_vector(z_t), temperature)
    p_s = softmax(validate_logit_vector(z_s), temperature)
    return (p_s - p_t) / temperature


def gkd_backward(z_t, z_s, cfg):
    """Gradient of gkd_loss w.r.t. student logits.

    The partition and (in teacher_mass mode) the primary weight are constants
    of the forward pass: no gradient flows through ranking or the teacher.
    """
    out = batch_kd("primary_binary", np.asarray(z_t)[None], np.asarray(z_s)[None], cfg)
    return out["grad"][0]


# --- batched implementations -------------------------------------------------

def batch_partition_mask(z_s, tau, temperature=1.0):
    """Per-row head-group membership mask and k for a (B, C) logit array."""
    a = np.asarray(z_s, dtype=np.float64) / temperature
    a = a - a.max(axis=1, keepdims=True)
    p = np.exp(a)
    p /= p.sum(axis=1, keepdims=True)
    order = np.argsort(-p, axis=1, kind="stable")
    cum = np.cumsum(np.take_along_axis(p, order, axis=1), axis=1)
    k = np.argmin(np.abs(cum - tau), axis=1) + 1
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(a.shape[1])[None, :], axis=1)
    return ranks < k[:, None], k


def _masked_lse(a, mask):
    neg = np.where(mask, a, -np.inf)
    m = neg.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)  # rows with empty mask
    s = np.sum(np.where(mask, np.exp(neg - m), 0.0), axis=1)
    with np.errstate(divide="ignore"):
        return m[:, 0] + np.log(s)


def batch_kd(variant, z_t, z_s, cfg):
    """Per-sample loss terms and student-logit gradients for (B, C) inputs.

    Returns a dict of per-sample arrays: loss, grad (B, C), primary,
    secondary, binary, full_kd, k, p_phi_t, residual.  "scratch" yields
    zero loss and gradient but still reports the decomposition terms.
    """
    T = cfg.temperature
    a_t = np.asarray(z_t, dtype=np.float64) / T
    a_s = np.asarray(z_s, dtype=np.float64) / T
    if a_t.shape != a_s.shape:
        raise ValueError("teacher/student logit shapes differ")
    B, C = a_s.shape

    in_phi, k = batch_partition_mask(z_s, cfg.tau, T)
    in_psi = ~in_phi
    has_psi = in_psi.any(axis=1)

    lse_t = _masked_lse(a_t, np.ones_like(in_phi))
    lse_s = _masked_lse(a_s, np.ones_like(in_phi))
    p_t = np.exp(a_t - lse_t[:, None])
    p_s = np.exp(a_s - lse_s[:, None])

    lse_phi_t = _masked_lse(a_t, in_phi)
    lse_phi_s = _masked_lse(a_s, in_phi)
    lse_psi_t = _masked_lse(a_t, in_psi)
    lse_psi_s = _masked_lse(a_s, in_psi)
    # rows with an empty tail have lse_psi = -inf; substitute 0 so the dead
    # branches of np.where stay NaN-free (their results are masked out)
    lse_psi_t = np.where(has_psi, lse_psi_t, 0.0)
    lse_psi_s = np.where(has_psi, lse_psi_s, 0.0)

    log_ph_t = a_t - lse_phi_t[:, None]
    log_ph_s = a_s - lse_phi_s[:, None]
    p_hat_t = np.where(in_phi, np.exp(log_ph_t), 0.0)
    p_hat_s = np.where(in_phi, np.exp(log_ph_s), 0.0)
    p_check_t = np.where(in_psi, np.exp(a_t - lse_psi_t[:, None]), 0.0)
    p_check_s = np.where(in_psi, np.exp(a_s - lse_psi_s[:, None]), 0.0)

    primary = np.sum(np.where(in_phi, p_hat_t * (log_ph_t - log_ph_s), 0.0), axis=1)
    secondary = np.where(
        has_psi,
        np.sum(
            np.where(
                in_psi,
                p_check_t * ((a_t - lse_psi_t[:, None]) - (a_s - lse_psi_s[:, None])),
                0.0,
            ),
            axis=1,
        ),
        0.0,
    )

    p_phi_t = np.exp(lse_phi_t - lse_t)
    p_phi_s = np.exp(lse_phi_s - lse_s)
    p_psi_t = np.where(has_psi, np.exp(lse_psi_t - lse_t), 0.0)
    p_psi_s = np.where(has_psi, np.exp(lse_psi_s - lse_s), 0.0)
    binary = p_phi_t * ((lse_phi_t - lse_t) - (lse_phi_s - lse_s))
    binary = binary + np.where(
        has_psi, p_psi_t * ((lse_psi_t - lse_t) - (lse_psi_s - lse_s)), 0.0
    )

    full = np.sum(p_t * ((a_t - lse_t[:, None]) - (a_s - lse_s[:, None])), axis=1)
    residual = np.abs(full - (p_phi_t * primary + p_psi_t * secondary + binary))

    if cfg.lambda1_mode == "teacher_mass":
        lam1, lam1_col = p_phi_t, p_phi_t[:, None]
    else:
        lam1 = lam1_col = cfg.lambda1
    lam2 = cfg.lambda2

    grad_primary = (p_hat_s - p_hat_t) / T
    # group-mass mismatch spread over the group by within-group student probs
    w = np.where(in_phi, p_hat_s, p_check_s)
    mass_gap = np.where(in_phi, (p_phi_s - p_phi_t)[:, None], (p_psi_s - p_psi_t)[:, None])
    grad_binary = mass_gap * w / T
    grad_full = (p_s - p_t) / T

    if variant == "scratch":
        loss = np.zeros(B)
        grad = np.zeros_like(a_s)
    elif variant == "full_kd":
        loss = full
        grad = grad_full
    elif variant == "primary_only":
        loss = lam1 * primary
        grad = lam1_col * grad_primary
    elif variant == "primary_binary":
        loss = lam1 * primary + lam2 * binary
        grad = lam1_col * grad_primary + lam2 * grad_binary
    elif variant == "primary_secondary_binary":
        # exact reconstruction of the full KL for a fixed partition
        loss = p_phi_t * primary + p_psi_t * secondary + binary
        grad = grad_full
    else:
        raise ValueError(f"unknown variant {variant!r}")

    return {
        "loss": loss,
        "grad": grad,
        "primary": primary,
        "secondary": secondary,
        "binary": binary,
        "full_kd": full,
        "k": k,
        "p_phi_t": p_phi_t,
        "residual": residual,
    }
