"""Segmentation losses over pixel logits, with analytic gradients.

Every loss returns ``(value, grad)`` where grad is the derivative of the
scalar value w.r.t. the input logits (or embeddings, for the triplet
loss).  Internals run in float64 regardless of input dtype so gradient
checks hold to tight tolerances; callers cast back as needed.  All
formulas are stable for |logit| up to at least 100: log-probabilities go
through logaddexp, and 1 - sigmoid(z) is computed as sigmoid(-z).
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import EmptyBatch, InsufficientPixels, ShapeMismatch


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function, elementwise."""
    z = np.asarray(z)
    if z.dtype not in (np.float32, np.float64):
        z = z.astype(np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class PixelBatch:
    """A batch of pixel logits with boolean labels of the same shape."""

    logits: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.logits.shape != self.labels.shape:
            raise ShapeMismatch(
                f"logits {self.logits.shape} vs labels {self.labels.shape}")


@dataclass(frozen=True)
class FocalParams:
    """Class-balance weight alpha and focusing exponent gamma."""

    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


@dataclass(frozen=True)
class TripletSpec:
    """Triplet sampling parameters for the embedding loss."""

    margin: float = 1.0
    samples_per_image: int = 256
    seed: int = 0


def _check_nonempty(batch: PixelBatch):
    if batch.logits.size == 0:
        raise EmptyBatch("loss over an empty pixel batch")


def ce_loss(batch: PixelBatch) -> Tuple[float, np.ndarray]:
    """Mean binary cross-entropy over the batch.

    Returns:
        (loss, grad) where grad = (sigmoid(z) - y) / n, matching the mean
        reduction.
    """
    _check_nonempty(batch)
    z, y = batch.logits, batch.labels
    # -log p = softplus(-z), -log(1-p) = softplus(z)
    pix = np.where(y, np.logaddexp(0.0, -z), np.logaddexp(0.0, z))
    grad = (sigmoid(z) - y) / z.size
    return float(pix.mean()), grad


def focal_loss(batch: PixelBatch,
               params: FocalParams) -> Tuple[float, np.ndarray]:
    """Alpha-balanced focal loss, mean over pixels.

    Per pixel: -alpha * (1-p)^gamma * y * log(p)
               - (1-alpha) * p^gamma * (1-y) * log(1-p)
    with p = sigmoid(logit).  At gamma = 0, alpha = 0.5 this is exactly
    0.5 * ce_loss.  The gradient differentiates through the modulating
    factor, not just the log term.
    """
    _check_nonempty(batch)
    z, y = batch.logits, batch.labels
    a, g = params.alpha, params.gamma
    p = sigmoid(z)
    q = sigmoid(-z)
    log_p = -np.logaddexp(0.0, -z)
    log_q = -np.logaddexp(0.0, z)
    pix = np.where(y, -a * q ** g * log_p, -(1.0 - a) * p ** g * log_q)
    # d/dz, derived per class (q = 1 - p, dp/dz = p*q):
    #   y=1: a * (g * q^g * p * log p - q^(g+1))
    #   y=0: (1-a) * (p^(g+1) - g * p^g * q * log(1-p))
    gpos = a * (g * q ** g * (p * log_p) - q ** (g + 1.0))
    gneg = (1.0 - a) * (p ** (g + 1.0) - g * p ** g * (q * log_q))
    grad = np.where(y, gpos, gneg) / z.size
    return float(pix.mean()), grad


def focal_weights(batch: PixelBatch, params: FocalParams) -> np.ndarray:
    """Per-pixel focal weight alpha * (1 - p_t)^gamma.

    p_t is the probability assigned to the true class (p for foreground
    pixels, 1-p for background), so every weight lies in [0, alpha].
    """
    _check_nonempty(batch)
    z, y = batch.logits, batch.labels
    one_minus_pt = np.where(y, sigmoid(-z), sigmoid(z))
    return params.alpha * one_minus_pt ** params.gamma


def dice_loss(batch: PixelBatch, eps: float = 1.0) -> Tuple[float, np.ndarray]:
    """Soft Dice loss: 1 - (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps).

    The overlap is computed on probabilities (no thresholding), so the
    loss is differentiable; eps keeps the all-empty case finite (and
    exactly 0 when both prediction and labels are empty).
    """
    _check_nonempty(batch)
    z = batch.logits
    y = batch.labels.astype(np.float64)
    p = sigmoid(z)
    q = sigmoid(-z)
    inter = float((p * y).sum())
    total = float(p.sum() + y.sum())
    loss = 1.0 - (2.0 * inter + eps) / (total + eps)
    dldp = ((2.0 * inter + eps) - 2.0 * y * (total + eps)) / (total + eps) ** 2
    grad = dldp * p * q
    return loss, grad


def triplet_loss(embeddings: np.ndarray, mask: np.ndarray, spec: TripletSpec,
                 rng: Optional[np.random.Generator] = None,
                 ) -> Tuple[float, np.ndarray]:
    """Margin triplet loss over per-pixel embeddings.

    Samples ``spec.samples_per_image`` triplets (anchor and positive from
    foreground, negative from background, drawn with replacement) and
    averages max(0, d(a,p) - d(a,n) + margin) over them.  Distances are
    euclidean.  The subgradient is 0 both at the hinge corner and at zero
    pairwise distance.

    Args:
        embeddings: (D, H, W) float array of per-pixel embeddings.
        mask: (H, W) boolean foreground mask.
        spec: sampling parameters; ``spec.seed`` seeds sampling when no
            rng is passed.

    Returns:
        (loss, grad) with grad shaped like ``embeddings``.

    Raises:
        InsufficientPixels: fewer than 2 foreground or 1 background pixel.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if emb.ndim != 3 or emb.shape[1:] != mask.shape:
        raise ShapeMismatch(
            f"embeddings {emb.shape} incompatible with mask {mask.shape}")
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    flat_mask = mask.ravel()
    fg = np.flatnonzero(flat_mask)
    bg = np.flatnonzero(~flat_mask)
    if fg.size < 2 or bg.size < 1:
        raise InsufficientPixels(
            f"need >=2 foreground and >=1 background pixels, "
            f"got {fg.size}/{bg.size}")
    d = emb.shape[0]
    flat = emb.reshape(d, -1).T  # (H*W, D)
    k = spec.samples_per_image
    ai = rng.choice(fg, size=k)
    pi = rng.choice(fg, size=k)
    ni = rng.choice(bg, size=k)
    dap = flat[ai] - flat[pi]
    dan = flat[ai] - flat[ni]
    nap = np.linalg.norm(dap, axis=1)
    nan_ = np.linalg.norm(dan, axis=1)
    viol = nap - nan_ + spec.margin
    loss = float(np.maximum(viol, 0.0).mean())
    # unit vectors, zero where the pair distance is zero
    uap = np.where(nap[:, None] > 0.0, dap / np.maximum(nap, 1e-300)[:, None], 0.0)
    uan = np.where(nan_[:, None] > 0.0, dan / np.maximum(nan_, 1e-300)[:, None], 0.0)
    active = viol > 0.0
    grad_flat = np.zeros_like(flat)
    scale = 1.0 / k
    np.add.at(grad_flat, ai[active], (uap[active] - uan[active]) * scale)
    np.add.at(grad_flat, pi[active], -uap[active] * scale)
    np.add.at(grad_flat, ni[active], uan[active] * scale)
    return loss, grad_flat.T.reshape(emb.shape)
