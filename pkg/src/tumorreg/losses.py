"""Tumor-conditioned registration losses.

Four terms drive the optimization, each averaged over the recurrent
steps and computed in both directions: masked image similarity,
deformation smoothness, a rigidity penalty over moving-image tumor
voxels (forward flow), and the same penalty over fixed-image tumor
voxels (inverse flow). Tumor regions are excluded from similarity so
non-corresponding tumors exert no matching force.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .deformation import DeformationField, jacobian_det


@dataclass
class LossWeights:
    lambda_smooth: float = 25.0
    lambda_pre: float = 1000.0
    lambda_ob: float = 1000.0

    def __post_init__(self):
        for name in ("lambda_smooth", "lambda_pre", "lambda_ob"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


@dataclass
class StepRecord:
    """Everything one recurrent step produced.

    Images and masks are [D,H,W] tensors; masks warped trilinearly keep
    their soft values so the losses stay differentiable.
    """

    phi_t: DeformationField
    phi_hat_t: DeformationField
    warped_moving: Tensor
    warped_moving_mask: Tensor
    warped_fixed: Tensor
    warped_fixed_mask: Tensor


def _check_steps(steps):
    if not steps:
        raise ValueError("need at least one step record")


def masked_similarity(steps, ref_image: Tensor, ref_mask: Tensor,
                      direction: str = "forward", metric: str = "mse") -> Tensor:
    """Mean squared intensity difference outside the tumor regions.

    Both images are masked by the complement of the union of the
    reference tumor mask and the (soft) resampled tumor mask, so voxels
    covered by a tumor on either side are excluded from matching. The
    per-step values are averaged over steps.
    """
    _check_steps(steps)
    if metric != "mse":
        raise ValueError(f"unsupported similarity metric {metric!r}")
    if direction not in ("forward", "inverse"):
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    total = None
    for step in steps:
        if direction == "forward":
            img, msk = step.warped_moving, step.warped_moving_mask
        else:
            img, msk = step.warped_fixed, step.warped_fixed_mask
        if img.shape != ref_image.shape:
            raise ShapeError(f"similarity: extent mismatch {img.shape} vs {ref_image.shape}")
        keep = ad.mul(ad.shift(ad.neg(ref_mask), 1.0), ad.shift(ad.neg(msk), 1.0))
        diff = ad.sub(ad.mul(ref_image, keep), ad.mul(img, keep))
        term = ad.tmean(ad.mul(diff, diff))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / len(steps))


def smoothness(fields, normalized: bool = True) -> Tensor:
    """Summed squared spatial gradients of the displacement components.

    `fields` is the list of per-step deformation fields. The voxel sum is
    averaged over steps; with `normalized` it is additionally divided by
    the voxel count, making the weight resolution-independent.
    """
    fields = list(fields)
    _check_steps(fields)
    total = None
    for phi in fields:
        disp = phi.disp if isinstance(phi, DeformationField) else phi
        g = ad.spatial_gradient(disp)
        term = ad.tsum(ad.mul(g, g))
        total = term if total is None else ad.add(total, term)
    scale = 1.0 / len(fields)
    if normalized:
        nvox = int(np.prod(fields[0].disp.shape[1:])) if isinstance(fields[0], DeformationField) \
            else int(np.prod(fields[0].shape[1:]))
        scale /= nvox
    return ad.scale(total, scale)


def _rigidity(field_list, mask_chain) -> Tensor:
    """Mean over steps of the mask-weighted mean of (det - 1)^2."""
    total = None
    n_used = 0
    for phi, mask in zip(field_list, mask_chain):
        weight_sum = float(mask.data.sum(dtype=np.float64))
        if weight_sum <= 0.0:
            continue
        det = jacobian_det(phi)
        dev = ad.shift(det, -1.0)
        dev2 = ad.mul(dev, dev)
        wsum = ad.tsum(ad.mul(dev2, mask))
        denom = ad.tsum(mask)
        # weighted mean: d(w/s)/dx handled by treating 1/s via the chain below
        term = _divide(wsum, denom)
        total = term if total is None else ad.add(total, term)
        n_used += 1
    if total is None:
        return ad.zeros(())
    return ad.scale(total, 1.0 / len(field_list))


def _divide(num: Tensor, den: Tensor) -> Tensor:
    """num / den for positive scalar `den`, differentiable in both."""
    inv = ad.reciprocal(den)
    return ad.mul(num, inv)


def tumor_preservation(steps, moving_mask: Tensor) -> Tensor:
    """Rigidity of each forward step's flow inside the moving tumor.

    Step t is weighted by the tumor mask as it stood *before* that step:
    the original moving mask for step 1, then the resampled (soft) masks.
    An empty tumor mask contributes zero; a tumor-free moving image is
    legal and yields exactly 0.
    """
    _check_steps(steps)
    masks = [moving_mask] + [s.warped_moving_mask for s in steps[:-1]]
    return _rigidity([s.phi_t for s in steps], masks)


def tumor_obliteration(steps, fixed_mask: Tensor) -> Tensor:
    """Rigidity of each inverse step's flow inside the fixed tumor."""
    _check_steps(steps)
    masks = [fixed_mask] + [s.warped_fixed_mask for s in steps[:-1]]
    return _rigidity([s.phi_hat_t for s in steps], masks)


def combine_terms(sim, sim_inv, smooth, smooth_inv, pre, ob, w: LossWeights):
    """Weighted total: sim + sim_inv + ls*(smooth + smooth_inv) + lp*pre + lo*ob.

    Accepts tensors (differentiable path) or plain floats (logging path).
    """
    if isinstance(sim, Tensor):
        smooth_part = ad.scale(ad.add(smooth, smooth_inv), w.lambda_smooth)
        total = ad.add(ad.add(sim, sim_inv), smooth_part)
        total = ad.add(total, ad.scale(pre, w.lambda_pre))
        total = ad.add(total, ad.scale(ob, w.lambda_ob))
        return total
    return (sim + sim_inv + w.lambda_smooth * (smooth + smooth_inv)
            + w.lambda_pre * pre + w.lambda_ob * ob)


def total_loss(pair, steps, w: LossWeights, smooth_normalized: bool = True,
               cond_forward: bool = True, cond_inverse: bool = True,
               sim_metric: str = "mse"):
    """Assemble the full bidirectional objective.

    `pair` provides original image/mask tensors as attributes I_m, y_m,
    I_f, y_f. Returns (total scalar, breakdown dict); the breakdown holds
    plain floats for logging plus flags for empty tumor masks.
    """
    _check_steps(steps)
    sim = masked_similarity(steps, pair.I_f, pair.y_f, "forward", sim_metric)
    sim_inv = masked_similarity(steps, pair.I_m, pair.y_m, "inverse", sim_metric)
    smooth = smoothness([s.phi_t for s in steps], smooth_normalized)
    smooth_inv = smoothness([s.phi_hat_t for s in steps], smooth_normalized)
    tumor_free_moving = float(pair.y_m.data.sum(dtype=np.float64)) <= 0.0
    tumor_free_fixed = float(pair.y_f.data.sum(dtype=np.float64)) <= 0.0
    if cond_forward and not tumor_free_moving:
        pre = tumor_preservation(steps, pair.y_m)
    else:
        pre = ad.zeros(())
    if cond_inverse and not tumor_free_fixed:
        ob = tumor_obliteration(steps, pair.y_f)
    else:
        ob = ad.zeros(())
    total = combine_terms(sim, sim_inv, smooth, smooth_inv, pre, ob, w)
    breakdown = {
        "sim": sim.item(),
        "sim_inv": sim_inv.item(),
        "smooth": smooth.item(),
        "smooth_inv": smooth_inv.item(),
        "pre": pre.item(),
        "ob": ob.item(),
        "total": total.item(),
        "tumor_free_moving": tumor_free_moving,
        "tumor_free_fixed": tumor_free_fixed,
    }
    return total, breakdown
