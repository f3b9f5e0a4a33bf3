"""Rank class probabilities and split them into a head group and a tail group
via a cumulative-probability threshold."""

from dataclasses import dataclass

import numpy as np

from .numerics import softmax, validate_logit_vector, validate_prob_vector


@dataclass(frozen=True)
class RankedPrediction:
    """Descending-probability ordering plus running cumulative sums."""

    order: np.ndarray       # permutation of class indices
    cumulative: np.ndarray  # cumulative[i] = sum of the i+1 largest probs


@dataclass(frozen=True)
class Partition:
    """Index split into head group phi and tail group psi."""

    phi: np.ndarray
    psi: np.ndarray
    k: int
    tau: float

    @property
    def num_classes(self):
        return self.phi.size + self.psi.size


def rank(p):
    """Stable descending sort of probabilities; ties keep ascending index."""
    p = validate_prob_vector(p)
    order = np.argsort(-p, kind="stable")
    cumulative = np.cumsum(p[order])
    return RankedPrediction(order=order, cumulative=cumulative)


def select_k(ranked, tau):
    """Smallest k in {1..C} whose cumulative ranked mass is closest to tau."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    # argmin returns the first minimiser, which is the smallest k on ties
    return int(np.argmin(np.abs(ranked.cumulative - tau))) + 1


def build_partition(student_logits, tau, temperature=1.0):
    """Partition classes by the student's softened prediction.

    The same index sets are applied to the teacher downstream; only the
    student's probabilities decide the split.
    """
    z = validate_logit_vector(student_logits)
    ranked = rank(softmax(z, temperature))
    k = select_k(ranked, tau)
    return Partition(
        phi=np.sort(ranked.order[:k]),
        psi=np.sort(ranked.order[k:]),
        k=k,
        tau=float(tau),
    )
