"""Training losses for the pose-error scorer."""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CONFIDENCE_EPS = 1e-7
GOOD_POSE_DEG = 10.0


def soft_clamp(x, scale):
    """tanh(x / scale): near-linear below scale, saturating above."""
    return ad.tanh(x * (1.0 / scale))


def loss_soft_l1(pred_r, pred_t, true_r, true_t, scale):
    """L1 between soft-clamped predicted and true pose errors.

    pred_r, pred_t: Tensors of shape (B,), degrees.  true_r, true_t:
    arrays of shape (B,), degrees.  Errors far beyond `scale` contribute
    a bounded penalty, so a wildly wrong hypothesis cannot dominate.
    """
    tr = np.asarray(true_r, dtype=np.float64)
    tt = np.asarray(true_t, dtype=np.float64)
    dr = ad.absolute(soft_clamp(pred_r, scale) - Tensor(np.tanh(tr / scale)))
    dt = ad.absolute(soft_clamp(pred_t, scale) - Tensor(np.tanh(tt / scale)))
    return (dr + dt).mean()


def loss_weighted_ce(confidence, true_r, true_t, weight=2.0):
    """Confidence-weighted binary cross entropy on pose quality.

    Label is 1 when max(true_r, true_t) < 10 degrees.  The (1+f)^w
    factor pushes harder on hypotheses the net already trusts.
    """
    tr = np.asarray(true_r, dtype=np.float64)
    tt = np.asarray(true_t, dtype=np.float64)
    y = (np.maximum(tr, tt) < GOOD_POSE_DEG).astype(np.float64)
    f = ad.clamp(confidence, CONFIDENCE_EPS, 1.0 - CONFIDENCE_EPS)
    scale = (1.0 + f) ** weight
    ce = Tensor(y) * ad.log(f) + Tensor(1.0 - y) * ad.log(1.0 - f)
    return -(scale * ce).mean()


def total_loss(pred_r, pred_t, confidence, true_r, true_t, clamp_scale,
               ce_weight=2.0, ce_coeff=0.25):
    reg = loss_soft_l1(pred_r, pred_t, true_r, true_t, clamp_scale)
    ce = loss_weighted_ce(confidence, true_r, true_t, ce_weight)
    return reg + ce * ce_coeff
