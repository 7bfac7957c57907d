"""Numerical verification of the analytic gradients.

Runs the full pipeline (features, attention, epipolar attention,
regressor, both losses) on a deterministic miniature batch and compares
every sampled parameter's analytic gradient against a central finite
difference.
"""

from dataclasses import dataclass

import numpy as np

from ..rng import stream
from . import losses, model
from .autodiff import Tensor


@dataclass
class GradCheckResult:
    checked: int
    max_rel_err: float
    worst_param: str
    passed: bool
    redrawn: int = 0


def _loss_value(p, config, images_a, images_b, fmats, true_r, true_t, loss="total"):
    fa = model.extract_features(p, Tensor(images_a))
    fb = model.extract_features(p, Tensor(images_b))
    fa, fb = model.transform_pair(p, fa, fb, config)
    e_r, e_t, conf = model.forward_batch(p, fa, fb, fmats, config)
    if loss == "soft_l1":
        return losses.loss_soft_l1(e_r, e_t, true_r, true_t, config.clamp_scale)
    if loss == "weighted_ce":
        return losses.loss_weighted_ce(conf, true_r, true_t)
    return losses.total_loss(e_r, e_t, conf, true_r, true_t, config.clamp_scale)


def run_gradcheck(seed=0, samples_per_tensor=3, min_checked=200, h=1e-5, tol=1e-4,
                  config=None, loss_kind="total"):
    """Central-difference check of d(loss)/d(theta) across all tensors."""
    if config is None:
        # Tiny geometry keeps the finite-difference loop fast; the op
        # graph is identical to the full-size network.
        config = model.NetworkConfig(image_size=16, channels=8, transformer_depth=1,
                                     heads=2, epipolar_samples=5, regressor_width=16)
    if config.precision != 64:
        raise ValueError("gradient checking requires a 64-bit configuration")
    p = model.init_weights(config, seed)
    rng = stream(seed, "gradcheck-data")
    bsz = 2
    # The gradient graph is independent of the spatial extent, so the probe
    # batch uses the smallest legal image size. Beyond speed this keeps the
    # finite differences trustworthy: with ~1e6 activation units some relu is
    # always within h of its kink, which corrupts the h=1e-5 stencil.
    s = min(config.image_size, 16)
    images_a = rng.uniform(0.0, 1.0, (bsz, 3, s, s))
    images_b = rng.uniform(0.0, 1.0, (bsz, 3, s, s))
    fmats = rng.normal(0.0, 1.0, (bsz, 3, 3))
    fmats /= np.linalg.norm(fmats, axis=(1, 2), keepdims=True)
    true_r = rng.uniform(0.0, 90.0, bsz)
    true_t = rng.uniform(0.0, 90.0, bsz)

    loss = _loss_value(p, config, images_a, images_b, fmats, true_r, true_t, loss=loss_kind)
    loss.backward()

    base = loss.item()

    def central(flat, i, step):
        orig = flat[i]
        flat[i] = orig + step
        lp = _loss_value(p, config, images_a, images_b, fmats, true_r, true_t, loss=loss_kind).item()
        flat[i] = orig - step
        lm = _loss_value(p, config, images_a, images_b, fmats, true_r, true_t, loss=loss_kind).item()
        flat[i] = orig
        sp = (lp - base) / step
        sm = (base - lm) / step
        return (lp - lm) / (2.0 * step), sp, sm

    def rel_err(analytic, numeric):
        if max(abs(analytic), abs(numeric)) < 1e-7:
            # Both below the finite-difference noise floor.
            return 0.0
        return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)

    names = sorted(p)
    per_tensor = max(samples_per_tensor, int(np.ceil(min_checked / len(names))))
    checked = 0
    redrawn = 0
    worst = 0.0
    worst_name = ""
    for name in names:
        t = p[name]
        flat = t.data.reshape(-1)
        gflat = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
        order = rng.permutation(flat.size)
        want = min(per_tensor, flat.size)
        taken = 0
        pos = 0
        while taken < want and pos < flat.size:
            i = order[pos]
            pos += 1
            numeric, sp, sm = central(flat, i, h)
            rel = rel_err(gflat[i], numeric)
            if rel >= tol and pos < flat.size:
                # A central difference is meaningless when [x-h, x+h] straddles
                # a kink (relu / max / bilinear cell edge). A kink inside the
                # interval makes the two one-sided slopes differ by the slope
                # jump, far beyond the h*f'' a smooth loss allows; such samples
                # are redrawn. The threshold is coupled to tol: a jump small
                # enough to pass it skews the central difference by less than
                # tol, so it cannot fail a correct gradient. A wrong analytic
                # gradient leaves the one-sided slopes consistent with each
                # other and still fails the check.
                if abs(sp - sm) > 2.0 * tol * max(abs(sp), abs(sm), 1e-8):
                    redrawn += 1
                    continue
            checked += 1
            taken += 1
            if rel > worst:
                worst = rel
                worst_name = f"{name}[{i}]"
    return GradCheckResult(checked, worst, worst_name, worst < tol, redrawn)
