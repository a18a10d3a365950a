"""Training losses with analytic gradients.

Both losses return (value, gradient) so the training loop never needs a
separate backward call: chip classification uses sigmoid cross entropy on
logits, segmentation uses the soft dice loss on probabilities (robust to the
heavy class imbalance of per-pixel landslide masks).
"""

from __future__ import annotations

import numpy as np

from .errors import DataError


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x.dtype, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def bce_with_logits(logits, labels) -> tuple[float, np.ndarray]:
    """Mean binary cross entropy in the stable log-sum-exp form.

    Returns (loss, d loss / d logits).  Labels must be 0/1 and shaped like
    the logits.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if logits.shape != labels.shape:
        raise DataError(
            f"logits shape {logits.shape} != labels shape {labels.shape}"
        )
    if not np.isfinite(logits).all():
        raise DataError("non-finite logits in cross entropy")
    if not np.isin(labels, (0.0, 1.0)).all():
        raise DataError("labels must be binary 0/1")
    n = max(logits.size, 1)
    # max(x, 0) - x*y + log(1 + exp(-|x|)) is exact and never overflows.
    per_elem = np.maximum(logits, 0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))
    grad = (sigmoid(logits) - labels) / n
    return float(per_elem.mean()), grad


def dice_loss(probs, target, smoothing: float = 1.0) -> tuple[float, np.ndarray]:
    """Soft dice loss, computed per chip and averaged over the batch.

    probs are per-pixel probabilities in [0, 1]; target is the binary mask.
    Returns (loss, d loss / d probs).  The smoothing constant keeps empty
    masks well-defined (loss 0 when both sides are empty).
    """
    probs = np.asarray(probs, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if probs.shape != target.shape:
        raise DataError(
            f"probs shape {probs.shape} != target shape {target.shape}"
        )
    if probs.size == 0:
        raise DataError("empty input to dice loss")
    if probs.min() < -1e-9 or probs.max() > 1 + 1e-9:
        raise DataError("probs must lie in [0, 1] for dice loss")
    if not np.isin(target, (0.0, 1.0)).all():
        raise DataError("target mask must be binary 0/1")
    if smoothing <= 0:
        raise DataError(f"smoothing must be > 0, got {smoothing}")

    unbatched = probs.ndim == 2
    if unbatched:
        probs = probs[None]
        target = target[None]
    b = probs.shape[0]
    flat_p = probs.reshape(b, -1)
    flat_t = target.reshape(b, -1)
    num = 2.0 * (flat_p * flat_t).sum(axis=1) + smoothing
    den = flat_p.sum(axis=1) + flat_t.sum(axis=1) + smoothing
    loss = float((1.0 - num / den).mean())
    # d/dp_i of (1 - N/D) = (N - 2 t_i D) / D^2, averaged over the batch.
    grad = (num[:, None] - 2.0 * flat_t * den[:, None]) / (den[:, None] ** 2) / b
    grad = grad.reshape(probs.shape)
    return loss, (grad[0] if unbatched else grad)
