"""Deformation-field algebra on voxel-unit displacement fields.

Velocity fields are integrated to diffeomorphic displacement fields by
scaling and squaring; fields compose, invert (via the negated flow), and
expose Jacobian-determinant maps. All operations are differentiable and
pure, so they can be evaluated concurrently across registration pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


def _as_vector_tensor(x, name: str) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim != 4 or t.shape[0] != 3:
        raise ShapeError(f"{name}: expected [3,D,H,W], got {t.shape}")
    return t


@dataclass
class VelocityField:
    """Stationary velocity field, voxel units per unit flow time."""

    u: Tensor

    def __post_init__(self):
        self.u = _as_vector_tensor(self.u, "VelocityField")

    @property
    def extents(self):
        return self.u.shape[1:]


@dataclass
class DeformationField:
    """Dense displacement field; the mapped point is p + disp(p)."""

    disp: Tensor

    def __post_init__(self):
        self.disp = _as_vector_tensor(self.disp, "DeformationField")

    @property
    def extents(self):
        return self.disp.shape[1:]


def identity_field(extents) -> DeformationField:
    d, h, w = extents
    return DeformationField(ad.zeros((3, d, h, w)))


def exp_svf(v: VelocityField | Tensor, n_int: int = 7) -> DeformationField:
    """Integrate a stationary velocity field by scaling and squaring.

    The field is scaled down by 2**n_int and self-composed n_int times,
    which approximates the flow exponential while keeping every
    intermediate displacement small.
    """
    u = v.u if isinstance(v, VelocityField) else _as_vector_tensor(v, "exp_svf")
    if n_int < 1:
        raise ValueError(f"exp_svf: n_int must be >= 1, got {n_int}")
    disp = ad.scale(u, 1.0 / (2 ** n_int))
    for _ in range(n_int):
        disp = ad.add(disp, ad.grid_sample(disp, disp))
    return DeformationField(disp)


def invert_svf(v: VelocityField | Tensor, n_int: int = 7) -> DeformationField:
    """Integrate the negated flow, approximating the inverse deformation."""
    u = v.u if isinstance(v, VelocityField) else _as_vector_tensor(v, "invert_svf")
    return exp_svf(ad.neg(u), n_int=n_int)


def compose(outer: DeformationField, inner: DeformationField) -> DeformationField:
    """Chain two deformations: warping by the result equals warping by
    `outer` first, then by `inner`."""
    if outer.extents != inner.extents:
        raise ShapeError(f"compose: extent mismatch {outer.extents} vs {inner.extents}")
    return DeformationField(
        ad.add(inner.disp, ad.grid_sample(outer.disp, inner.disp)))


def compose_all(fields) -> DeformationField:
    """Left-fold composition of per-step fields, earliest step first."""
    fields = list(fields)
    if not fields:
        raise ValueError("compose_all: no fields given")
    acc = fields[0]
    for f in fields[1:]:
        acc = compose(acc, f)
    return acc


def jacobian_det(phi: DeformationField) -> Tensor:
    """Per-voxel determinant of the deformation's spatial Jacobian.

    The Jacobian of p + disp(p) is I + ddisp/dp, evaluated with central
    differences in the interior and one-sided stencils at the faces.
    Returns a [D,H,W] tensor; 1 everywhere means volume preservation.
    """
    d, h, w = phi.extents
    if min(d, h, w) < 3:
        raise ShapeError(f"jacobian_det: extents must be >= 3, got {(d, h, w)}")
    grads = ad.spatial_gradient(phi.disp)

    def entry(i, j):
        cell = ad.narrow(ad.narrow(grads, 0, i, 1), 1, j, 1).reshape((d, h, w))
        return ad.shift(cell, 1.0) if i == j else cell

    a = [[entry(i, j) for j in range(3)] for i in range(3)]
    det = ad.sub(
        ad.add(
            ad.mul(a[0][0], ad.sub(ad.mul(a[1][1], a[2][2]), ad.mul(a[1][2], a[2][1]))),
            ad.mul(a[0][2], ad.sub(ad.mul(a[1][0], a[2][1]), ad.mul(a[1][1], a[2][0])))),
        ad.mul(a[0][1], ad.sub(ad.mul(a[1][0], a[2][2]), ad.mul(a[1][2], a[2][0]))))
    return det


def _as_image_tensor(img, name: str):
    t = img if isinstance(img, Tensor) else Tensor(img)
    if t.ndim == 3:
        return t.reshape((1, *t.shape)), True
    if t.ndim == 4:
        return t, False
    raise ShapeError(f"{name}: expected [D,H,W] or [C,D,H,W], got {t.shape}")


def warp_image(img, phi: DeformationField) -> Tensor:
    """Trilinearly resample an image through a deformation field."""
    t, squeeze = _as_image_tensor(img, "warp_image")
    if t.shape[1:] != phi.extents:
        raise ShapeError(f"warp_image: extent mismatch {t.shape[1:]} vs {phi.extents}")
    out = ad.grid_sample(t, phi.disp)
    return out.reshape(phi.extents) if squeeze else out


def warp_mask(mask, phi: DeformationField, threshold: float = 0.5) -> Tensor:
    """Resample a binary mask and re-binarize at `threshold`.

    The thresholding is not differentiable; loss terms use the soft
    resampled values instead.
    """
    soft = warp_image(mask, phi)
    return Tensor((soft.data >= np.float32(threshold)).astype(np.float32))
