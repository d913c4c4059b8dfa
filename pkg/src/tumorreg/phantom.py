"""Synthetic thoracic phantoms with known ground truth.

A phantom is a set of analytic shapes (body and lung ellipsoids, a heart
ellipsoid, cord and great-vessel/airway tubes, spherical tumors) painted
with per-class intensities, smoothed for partial volume, and degraded
with Gaussian noise. Because every structure is analytic, a moving image
can be rasterized directly at deformed coordinates, giving pairs whose
true deformation is known exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from .autodiff import Tensor
from .deformation import exp_svf
from .volio import Volume


@dataclass
class Ellipsoid:
    center: tuple
    radii: tuple


@dataclass
class Tube:
    points: tuple        # control points, voxel coords, >= 2
    radius: float


@dataclass
class Tumor:
    center: tuple
    radius: float
    side: str = "left"


@dataclass
class PhantomSpec:
    extents: tuple = (32, 32, 24)
    spacing: tuple = (3.0, 3.0, 4.0)
    body: Ellipsoid | None = None
    lung_left: Ellipsoid | None = None
    lung_right: Ellipsoid | None = None
    heart: Ellipsoid | None = None
    cord: Tube | None = None
    tubes: dict = field(default_factory=dict)    # aorta/trachea/pa/ivc
    tumors: tuple = ()
    intensities: dict = field(default_factory=lambda: dict(_DEFAULT_INTENSITIES))
    noise_sigma: float = 0.01
    edge_sigma: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if len(self.tumors) > 2:
            raise ValueError("at most two tumors per image")


_DEFAULT_INTENSITIES = {
    "background": 0.02,
    "body": 0.45,
    "lung": 0.15,
    "heart": 0.62,
    "cord": 0.55,
    "vessel": 0.70,
    "airway": 0.05,
    "tumor": 0.85,
}


def default_spec(extents=(32, 32, 24), spacing=(3.0, 3.0, 4.0), seed: int = 0,
                 jitter: float = 0.0, tumors=()) -> PhantomSpec:
    """Nominal thorax geometry scaled to the extents, optionally jittered.

    `jitter` perturbs structure centers by up to that many voxels (scaled
    to each axis) and radii by half of it, using the spec seed.
    """
    d, h, w = extents
    rng = np.random.default_rng(seed)

    def jit(frac=1.0):
        return rng.uniform(-jitter * frac, jitter * frac, size=3) if jitter > 0 else np.zeros(3)

    def pt(fz, fy, fx, j=None):
        base = np.array([fz * (d - 1), fy * (h - 1), fx * (w - 1)])
        return tuple(base + (j if j is not None else 0.0))

    body = Ellipsoid(pt(0.5, 0.52, 0.5), (0.52 * d, 0.40 * h, 0.46 * w))
    lung_l = Ellipsoid(pt(0.5, 0.48, 0.29, jit()), (0.36 * d, 0.27 * h, 0.19 * w))
    lung_r = Ellipsoid(pt(0.5, 0.48, 0.71, jit()), (0.36 * d, 0.27 * h, 0.19 * w))
    heart = Ellipsoid(pt(0.40, 0.58, 0.55, jit()), (0.16 * d, 0.15 * h, 0.15 * w))
    cord = Tube((pt(0.06, 0.82, 0.5, jit(0.5)), pt(0.94, 0.82, 0.5, jit(0.5))),
                radius=0.035 * w + 0.8)
    tubes = {
        "trachea": Tube((pt(0.94, 0.42, 0.5), pt(0.60, 0.45, 0.5, jit(0.5))),
                        radius=0.03 * w + 0.7),
        "aorta": Tube((pt(0.92, 0.52, 0.44), pt(0.70, 0.40, 0.52, jit(0.5)),
                       pt(0.45, 0.52, 0.42), pt(0.10, 0.56, 0.44)),
                      radius=0.035 * w + 0.8),
        "pa": Tube((pt(0.52, 0.50, 0.40), pt(0.48, 0.44, 0.60, jit(0.5))),
                   radius=0.035 * w + 0.7),
        "ivc": Tube((pt(0.10, 0.62, 0.60), pt(0.50, 0.60, 0.62, jit(0.5))),
                    radius=0.03 * w + 0.6),
    }
    return PhantomSpec(extents=tuple(extents), spacing=tuple(spacing), body=body,
                       lung_left=lung_l, lung_right=lung_r, heart=heart, cord=cord,
                       tubes=tubes, tumors=tuple(tumors), seed=seed)


def place_tumor(spec: PhantomSpec, side: str, radius: float,
                offset=(0.0, 0.0, 0.0)) -> Tumor:
    """Tumor centered in the named lung, shifted by `offset` voxels."""
    lung = spec.lung_left if side == "left" else spec.lung_right
    center = tuple(np.asarray(lung.center) + np.asarray(offset, dtype=np.float64))
    return Tumor(center=center, radius=float(radius), side=side)


# ---------------------------------------------------------------------------
# analytic rasterization
# ---------------------------------------------------------------------------

def _grid_coords(extents):
    d, h, w = extents
    zz, yy, xx = np.meshgrid(np.arange(d, dtype=np.float64),
                             np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    return np.stack([zz.ravel(), yy.ravel(), xx.ravel()])


def _ellipsoid_mask(e: Ellipsoid, coords: np.ndarray) -> np.ndarray:
    c = np.asarray(e.center)[:, None]
    r = np.asarray(e.radii)[:, None]
    q = (coords - c) / r
    return (q * q).sum(axis=0) <= 1.0


def _tube_mask(t: Tube, coords: np.ndarray) -> np.ndarray:
    pts = np.asarray(t.points, dtype=np.float64)
    samples = [pts[0]]
    for a, b in zip(pts[:-1], pts[1:]):
        seg_len = np.linalg.norm(b - a)
        n = max(int(np.ceil(seg_len * 3)), 2)
        for s in np.linspace(0.0, 1.0, n)[1:]:
            samples.append(a + s * (b - a))
    tree = cKDTree(np.asarray(samples))
    dist, _ = tree.query(coords.T)
    return dist <= t.radius


def _sphere_mask(tm: Tumor, coords: np.ndarray) -> np.ndarray:
    c = np.asarray(tm.center)[:, None]
    q = coords - c
    return (q * q).sum(axis=0) <= tm.radius ** 2


def rasterize_structures(spec: PhantomSpec, coords: np.ndarray | None = None) -> dict:
    """Analytic indicator masks for every structure, evaluated at `coords`
    (defaults to the voxel grid). Tumors combine into a single mask."""
    if coords is None:
        coords = _grid_coords(spec.extents)
    masks = {"body": _ellipsoid_mask(spec.body, coords)}
    masks["lung_left"] = _ellipsoid_mask(spec.lung_left, coords) & masks["body"]
    masks["lung_right"] = _ellipsoid_mask(spec.lung_right, coords) & masks["body"]
    masks["heart"] = _ellipsoid_mask(spec.heart, coords) & masks["body"]
    masks["cord"] = _tube_mask(spec.cord, coords) & masks["body"]
    for name, tube in spec.tubes.items():
        masks[name] = _tube_mask(tube, coords) & masks["body"]
    tumor = np.zeros(coords.shape[1], dtype=bool)
    for tm in spec.tumors:
        tumor |= _sphere_mask(tm, coords)
    masks["tumor"] = tumor
    return masks


_PAINT_ORDER = (
    ("body", "body"), ("lung_left", "lung"), ("lung_right", "lung"),
    ("heart", "heart"), ("cord", "cord"), ("aorta", "vessel"), ("pa", "vessel"),
    ("ivc", "vessel"), ("trachea", "airway"), ("tumor", "tumor"),
)


def _paint(spec: PhantomSpec, masks: dict, extents) -> np.ndarray:
    img = np.full(int(np.prod(extents)), spec.intensities["background"], dtype=np.float64)
    for name, cls in _PAINT_ORDER:
        if name in masks:
            img[masks[name]] = spec.intensities[cls]
    return img.reshape(extents)


def generate_phantom(spec: PhantomSpec, coords: np.ndarray | None = None,
                     rng: np.random.Generator | None = None):
    """Rasterize one phantom: (image Volume, {structure: mask Volume}).

    Deterministic for a given spec and seed. Tumor centers must lie
    inside a lung. The image gets partial-volume smoothing and Gaussian
    noise; masks stay crisp binary indicators.
    """
    grid = _grid_coords(spec.extents) if coords is None else coords
    masks = rasterize_structures(spec, grid)
    for tm in spec.tumors:
        lung_key = "lung_left" if tm.side == "left" else "lung_right"
        probe = rasterize_structures(
            replace(spec, tumors=()), np.asarray(tm.center, dtype=np.float64)[:, None])
        if not probe[lung_key][0]:
            raise ValueError(f"tumor at {tm.center} lies outside the {tm.side} lung")
    img = _paint(spec, masks, spec.extents)
    if spec.edge_sigma > 0:
        img = gaussian_filter(img, spec.edge_sigma)
    if spec.noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(spec.seed)
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    mask_vols = {name: Volume(m.reshape(spec.extents).astype(np.float32),
                              spec.spacing, "mask")
                 for name, m in masks.items()}
    return Volume(img, spec.spacing, "image"), mask_vols


# ---------------------------------------------------------------------------
# ground-truth velocity fields and pair synthesis
# ---------------------------------------------------------------------------

def random_smooth_velocity(extents, rng: np.random.Generator, amplitude: float,
                           sigma: float = 3.0, taper: float = 3.0) -> np.ndarray:
    """Gaussian-smoothed random velocity scaled to a peak magnitude.

    White noise is zeroed in a `taper`-voxel border band *before*
    smoothing, so the field decays toward the faces with the same
    curvature scale as everywhere else and flows stay inside the box.
    """
    d, h, w = extents
    v = rng.normal(0.0, 1.0, size=(3, d, h, w))
    band = int(round(taper))
    if band > 0:
        inner = np.zeros((d, h, w))
        inner[band:d - band, band:h - band, band:w - band] = 1.0
        v *= inner
    for c in range(3):
        v[c] = gaussian_filter(v[c], sigma)
    mag = np.sqrt((v ** 2).sum(axis=0)).max()
    if mag > 0:
        v *= amplitude / mag
    return v.astype(np.float32)


@dataclass
class RegistrationPair:
    """Moving/fixed images with tumor masks and optional extras.

    `y_m`/`y_f` are the tumor masks; full per-structure masks ride along
    for evaluation. `gt_svf`, when present, is the velocity field whose
    exponential warps the moving image onto the fixed image.
    """

    I_m: Volume
    y_m: Volume
    I_f: Volume
    y_f: Volume
    spacing: tuple
    dose: Volume | None = None
    gt_svf: np.ndarray | None = None
    structures_m: dict = field(default_factory=dict)
    structures_f: dict = field(default_factory=dict)

    def __post_init__(self):
        extents = {v.extents for v in (self.I_m, self.y_m, self.I_f, self.y_f)}
        if len(extents) != 1:
            raise ValueError(f"pair volumes must share extents, got {sorted(extents)}")


def make_dose(extents, spacing, tumor: Tumor, prescription_gy: float = 60.0,
              fraction_gy: float = 2.0) -> Volume:
    """Synthetic planned dose: prescription inside the target, linear
    falloff to zero at 2.5 radii."""
    coords = _grid_coords(extents)
    dist = np.sqrt(((coords - np.asarray(tumor.center)[:, None]) ** 2).sum(axis=0))
    dose = prescription_gy * np.clip((2.5 * tumor.radius - dist) /
                                     (1.5 * tumor.radius), 0.0, 1.0)
    return Volume(dose.reshape(extents).astype(np.float32), spacing, "dose",
                  meta={"prescription_gy": prescription_gy, "fraction_gy": fraction_gy})


def synth_pair(base_spec: PhantomSpec, *, seed: int = 0, svf_amplitude: float = 0.0,
               svf_sigma: float = 3.0, anatomy_jitter: float = 0.0,
               moving_tumors=(), fixed_tumors=(), with_dose: bool = False,
               independent_noise: bool = False, n_int: int = 7) -> RegistrationPair:
    """Build one registration pair from a base phantom.

    The fixed image rasterizes the base anatomy plus `fixed_tumors`. The
    moving image either rasterizes the same anatomy at coordinates
    displaced by a known smooth velocity field (ground truth retained),
    or an independently jittered anatomy when `svf_amplitude` is 0.
    Tumors are placed independently per side, so moving-only, fixed-only,
    both-non-corresponding, and tumor-free scenarios are all available.
    """
    fixed_spec = replace(base_spec, tumors=tuple(fixed_tumors), seed=seed)
    fixed_img, fixed_masks = generate_phantom(fixed_spec)

    gt_svf = None
    if svf_amplitude > 0:
        rng = np.random.default_rng(seed)
        gt_svf = random_smooth_velocity(base_spec.extents, rng, svf_amplitude, svf_sigma)
        inv_disp = exp_svf(Tensor(-gt_svf), n_int=n_int).disp.data
        coords = _grid_coords(base_spec.extents) + inv_disp.reshape(3, -1)
        moving_spec = replace(base_spec, tumors=tuple(moving_tumors), seed=seed + 1)
        moving_img, moving_masks = generate_phantom(moving_spec, coords=coords)
    elif anatomy_jitter > 0:
        moving_spec = default_spec(base_spec.extents, base_spec.spacing,
                                   seed=seed + 1, jitter=anatomy_jitter,
                                   tumors=tuple(moving_tumors))
        moving_spec = replace(moving_spec, intensities=dict(base_spec.intensities),
                              noise_sigma=base_spec.noise_sigma,
                              edge_sigma=base_spec.edge_sigma)
        moving_img, moving_masks = generate_phantom(moving_spec)
    else:
        # unperturbed anatomy; shared noise realization makes a tumor-free
        # pair exactly self-registration, independent noise keeps the
        # anatomy identical but the scans distinct
        noise_seed = seed + 1 if independent_noise else seed
        moving_spec = replace(base_spec, tumors=tuple(moving_tumors), seed=noise_seed)
        moving_img, moving_masks = generate_phantom(moving_spec)

    dose = None
    if with_dose and moving_tumors:
        dose = make_dose(base_spec.extents, base_spec.spacing, moving_tumors[0])
    return RegistrationPair(
        I_m=moving_img, y_m=moving_masks["tumor"], I_f=fixed_img,
        y_f=fixed_masks["tumor"], spacing=tuple(base_spec.spacing), dose=dose,
        gt_svf=gt_svf, structures_m=moving_masks, structures_f=fixed_masks)
