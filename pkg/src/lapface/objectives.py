"""Training losses: confidence-calibrated reconstruction and its relaxed,
region-weighted variant.

Both losses model the per-pixel photometric residual with a Laplacian of
learned scale sigma, in negative-log form: ln(sqrt(2) sigma) + sqrt(2) e / sigma.
The relaxed variant multiplies the residual by a {0, 0.3, 1} mask so
background pixels drop out entirely and expression-prone regions
(mouth/eyes/brows) are down-weighted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import EmptyDomain, EmptyMask, ShapeMismatch
from .tensor import Tensor

SQRT2 = float(np.sqrt(2.0))
RELAX_WEIGHT = 0.3
MIN_FACE_FRACTION = 0.10
LAMBDA_FLIP = 0.5
SIGMA_CLAMP = 5.0


@dataclass
class ConfidencePair:
    """Per-pixel Laplacian scales for the plain and the flipped render."""

    sigma: Tensor
    sigma_flip: Tensor


def sigma_from_raw(raw):
    """Raw map -> strictly positive scale, exp(clamp(raw, -5, 5))."""
    return T.exp(T.clamp(raw, -SIGMA_CLAMP, SIGMA_CLAMP))


class RelaxedMask:
    """Per-pixel loss weights in {0, relax, 1}.

    0 marks background, 1 the stable visible face, and the relax weight
    (default 0.3) the mouth/eye/brow regions that vary across photos.
    """

    def __init__(self, weights):
        self.weights = np.asarray(weights, dtype=np.float64)

    @property
    def face_fraction(self):
        return float((self.weights > 0).sum()) / self.weights.size

    @property
    def total_weight(self):
        return float(self.weights.sum())


def _channel_residual(rendered, target):
    rendered, target = T.as_tensor(rendered), T.as_tensor(target)
    if rendered.shape != target.shape:
        raise ShapeMismatch("residual", rendered.shape, target.shape)
    return T.absolute(rendered - target).mean(axis=0)


def recon_nll(rendered, target, sigma, omega_mask=None):
    """Calibrated reconstruction loss over the pixel domain.

    e = channel-mean |rendered - target|; per-pixel term
    ln(sqrt(2) sigma) + sqrt(2) e / sigma, averaged over the domain
    (all pixels, or where omega_mask == 1).
    """
    e = _channel_residual(rendered, target)
    sigma = T.as_tensor(sigma)
    if sigma.shape != e.shape:
        raise ShapeMismatch("recon_nll", sigma.shape, e.shape)
    term = T.log(SQRT2 * sigma) + SQRT2 * e / sigma
    if omega_mask is None:
        return term.mean().reshape((1,))
    mask = np.asarray(omega_mask, dtype=np.float64)
    count = float(mask.sum())
    if count == 0:
        raise EmptyDomain("recon_nll: omega mask selects zero pixels")
    return ((term * Tensor(mask)).sum() / count).reshape((1,))


def relaxed_consistency(rendered, target, sigma, mask):
    """Region-relaxed reconstruction loss.

    The residual is scaled by the mask weight before entering the Laplacian
    term; pixels with zero weight contribute nothing (also no sigma
    regularization), and the sum is normalized by the total mask weight.
    """
    e = _channel_residual(rendered, target)
    sigma = T.as_tensor(sigma)
    weights = mask.weights
    if weights.shape != e.shape or sigma.shape != e.shape:
        raise ShapeMismatch("relaxed_consistency", weights.shape, sigma.shape, e.shape)
    total = mask.total_weight
    if total == 0:
        raise EmptyMask("relaxed_consistency: mask weights sum to zero")
    active = (weights > 0).astype(np.float64)
    term = T.log(SQRT2 * sigma) + SQRT2 * (Tensor(weights) * e) / sigma
    return ((term * Tensor(active)).sum() / total).reshape((1,))


def total_objective(render_out, render_flip, target, conf, mask=None,
                    lambda_flip=LAMBDA_FLIP, kind="recon", omega_mask=None):
    """Plain term plus `lambda_flip` times the flipped-render term.

    kind="recon" uses `recon_nll`; kind="rcl" uses `relaxed_consistency`
    (mask required).  sigma_flip applies to the flipped render as-is: it is
    an independent prediction, not a spatial flip of sigma.
    """
    if kind == "rcl":
        if mask is None:
            raise EmptyMask("total_objective: rcl needs a relaxed mask")
        main = relaxed_consistency(render_out.image, target, conf.sigma, mask)
        flip = relaxed_consistency(render_flip.image, target, conf.sigma_flip, mask)
    else:
        main = recon_nll(render_out.image, target, conf.sigma, omega_mask)
        flip = recon_nll(render_flip.image, target, conf.sigma_flip, omega_mask)
    return main + lambda_flip * flip


def mask_filter(mask, min_face_fraction=MIN_FACE_FRACTION):
    """Accept a sample only if enough of the frame is face.

    Degenerate parses (tiny face region) are dropped for stable learning.
    """
    return mask.face_fraction >= min_face_fraction
