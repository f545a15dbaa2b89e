"""Mixup interpolation, joint labeled/unlabeled mixing, label guessing, sharpening."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import AugmentSpec, augment
from .numeric import Rng, sample_beta, softmax

LABELED = 0
UNLABELED = 1


def mix_pair(x1, y1, x2, y2, lam: float):
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    x1, x2 = np.asarray(x1, dtype=np.float64), np.asarray(x2, dtype=np.float64)
    y1, y2 = np.asarray(y1, dtype=np.float64), np.asarray(y2, dtype=np.float64)
    if x1.shape != x2.shape or y1.shape != y2.shape:
        raise ValueError("mix_pair endpoints must have matching shapes")
    return lam * x1 + (1.0 - lam) * x2, lam * y1 + (1.0 - lam) * y2


@dataclass
class MixedBatch:
    x_tilde: np.ndarray
    y_tilde: np.ndarray
    origin: np.ndarray  # LABELED / UNLABELED per row, following the dominant endpoint
    lam: float  # the max(lam, 1 - lam) weight on the dominant endpoint
    partner: np.ndarray  # row index into the concatenated batch used as x2

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.origin == LABELED


def mixmatch_mix(x_lab, y_lab, x_unl, q_unl, alpha: float, rng: Rng) -> MixedBatch:
    """Mix every row of [labeled; unlabeled] with a shuffled partner from the same pool.

    One lambda ~ Beta(alpha, alpha) per call, folded to max(lam, 1 - lam) so
    each mixed point stays closer to its own (dominant) endpoint.
    """
    x_lab, y_lab = np.asarray(x_lab, dtype=np.float64), np.asarray(y_lab, dtype=np.float64)
    x_unl, q_unl = np.asarray(x_unl, dtype=np.float64), np.asarray(q_unl, dtype=np.float64)
    if len(x_lab) == 0 or len(x_unl) == 0:
        raise ValueError("both labeled and unlabeled batches must be nonempty")
    if x_lab.shape[1] != x_unl.shape[1] or y_lab.shape[1] != q_unl.shape[1]:
        raise ValueError("labeled and unlabeled batches disagree in input or class dimension")
    x_all = np.vstack([x_lab, x_unl])
    y_all = np.vstack([y_lab, q_unl])
    origin = np.concatenate([np.full(len(x_lab), LABELED), np.full(len(x_unl), UNLABELED)])
    lam = sample_beta(alpha, rng)
    lam = max(lam, 1.0 - lam)
    partner = rng.permutation(len(x_all))
    x_tilde = lam * x_all + (1.0 - lam) * x_all[partner]
    y_tilde = lam * y_all + (1.0 - lam) * y_all[partner]
    return MixedBatch(x_tilde, y_tilde, origin, lam, partner)


def guess_labels(model, u_batch, P: int, aug: AugmentSpec, rng: Rng, return_views: bool = False):
    """Average softmax prediction over ``P`` augmented copies (a constant target)."""
    if P < 1:
        raise ValueError("P must be >= 1")
    views = [augment(u_batch, aug, rng) for _ in range(P)]
    q = sum(softmax(model(v)) for v in views) / P
    if return_views:
        return q, views
    return q


def sharpen(q, tau: float) -> np.ndarray:
    """Row-wise temperature sharpening q^(1/tau) / sum(q^(1/tau)), computed in log space."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    q = np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logq = np.log(q) / tau
    logq -= logq.max(axis=-1, keepdims=True)
    e = np.exp(logq)
    return e / e.sum(axis=-1, keepdims=True)
