"""Training losses over a batch score tensor.

The batch tensor P has shape (M, K, M): entry [l, m, n] is the probability
assigned to test utterance m of speaker l against the enrollment set of
speaker n built at the same held-out index m. A cell is a target pair
exactly when l == n.

Both losses are sums over their terms, matching their definitions; any
normalization before an optimizer step is the trainer's concern.
"""

from dataclasses import dataclass

import numpy as np

PROB_CLIP = 1e-12


@dataclass(frozen=True)
class LossValue:
    total: float
    bce: float
    ge2e: float
    weight: float  # share of the set-softmax term in the total


def check_batch_scores(P) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 3 or P.shape[0] != P.shape[2]:
        raise ValueError(
            f"batch scores must have shape (M, K, M), got {P.shape}"
        )
    if not np.all(np.isfinite(P)):
        raise ValueError("batch scores contain non-finite entries")
    return P


def bce_loss(P):
    """Binary cross-entropy summed over every (test, enrollment) cell.

    Returns (value, dL/dP). Probabilities are clipped to
    [PROB_CLIP, 1 - PROB_CLIP] before the logs.
    """
    P = check_batch_scores(P)
    M = P.shape[0]
    Pc = np.clip(P, PROB_CLIP, 1.0 - PROB_CLIP)
    target = np.zeros_like(P, dtype=bool)
    idx = np.arange(M)
    target[idx, :, idx] = True
    value = -(np.log(Pc[target]).sum() + np.log1p(-Pc[~target]).sum())
    grad = np.where(target, -1.0 / Pc, 1.0 / (1.0 - Pc))
    return float(value), grad


def ge2e_loss(P):
    """Set-softmax loss: each test trial's probability against its own
    speaker's centroid is pushed above its probability against every other
    centroid. Computed with log-sum-exp stabilization.

    Returns (value, dL/dP).
    """
    P = check_batch_scores(P)
    M = P.shape[0]
    idx = np.arange(M)
    shift = P.max(axis=2, keepdims=True)
    ex = np.exp(P - shift)
    denom = ex.sum(axis=2)
    lse = shift[:, :, 0] + np.log(denom)  # (M, K)
    own = P[idx, :, idx]  # (M, K)
    value = float((lse - own).sum())
    grad = ex / denom[:, :, None]  # softmax over enrollment speakers
    grad[idx, :, idx] -= 1.0
    return value, grad


def combined_loss(P, weight: float):
    """Weighted sum of the set-softmax and binary cross-entropy losses.

    Returns (LossValue, dL/dP). `weight` is the coefficient of the
    set-softmax term; the default used throughout the package is 0.6.
    """
    if not 0.0 <= weight <= 1.0:
        raise ValueError(f"loss weight must be in [0, 1], got {weight}")
    bce_value, bce_grad = bce_loss(P)
    ge2e_value, ge2e_grad = ge2e_loss(P)
    total = weight * ge2e_value + (1.0 - weight) * bce_value
    grad = weight * ge2e_grad + (1.0 - weight) * bce_grad
    return LossValue(total=total, bce=bce_value, ge2e=ge2e_value, weight=weight), grad
