"""Volume container, on-disk format, preprocessing, and config files.

Volumes are stored as a JSON sidecar plus a raw little-endian float32
payload, one pair of files per volume. The sidecar carries extents,
spacing, component count (1 for scalar fields, 3 for vector fields), an
optional kind tag, and free-form metadata. Round trips are bit-exact.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import _sample_volume

VOLUME_MAGIC = "RVOL"
VOLUME_VERSION = 1
CONFIG_SCHEMA_VERSION = 1


@dataclass
class Volume:
    """Dense scalar or vector field with voxel spacing in millimetres.

    Scalar data is [D,H,W]; vector data (velocity/displacement) is
    [C,D,H,W]. `meta` is round-tripped through the sidecar untouched.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    kind: str = "image"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim not in (3, 4):
            raise ValueError(f"volume data must be [D,H,W] or [C,D,H,W], got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def extents(self):
        return self.data.shape[-3:]

    @property
    def components(self) -> int:
        return 1 if self.data.ndim == 3 else self.data.shape[0]

    def __array__(self, dtype=None, copy=None):
        if dtype is not None:
            return self.data.astype(dtype)
        return self.data


def _paths(path):
    base = str(path)
    if base.endswith(".json"):
        base = base[:-5]
    return base + ".json", base + ".raw"


def write_volume(path, vol: Volume) -> None:
    json_path, raw_path = _paths(path)
    header = {
        "magic": VOLUME_MAGIC,
        "version": VOLUME_VERSION,
        "extents": list(vol.extents),
        "components": vol.components,
        "spacing": list(vol.spacing),
        "dtype": "<f4",
        "kind": vol.kind,
        "raw": os.path.basename(raw_path),
        "meta": vol.meta,
    }
    with open(json_path, "w") as f:
        json.dump(header, f, sort_keys=True, indent=1)
        f.write("\n")
    with open(raw_path, "wb") as f:
        f.write(np.ascontiguousarray(vol.data, dtype="<f4").tobytes())


def read_volume(path) -> Volume:
    json_path, _ = _paths(path)
    with open(json_path) as f:
        header = json.load(f)
    if header.get("magic") != VOLUME_MAGIC:
        raise ValueError(f"{json_path}: not a volume file (magic {header.get('magic')!r})")
    if header.get("version") != VOLUME_VERSION:
        raise ValueError(f"{json_path}: unsupported volume version {header.get('version')}")
    extents = tuple(header["extents"])
    components = int(header.get("components", 1))
    raw_path = os.path.join(os.path.dirname(json_path) or ".", header["raw"])
    count = components * int(np.prod(extents))
    with open(raw_path, "rb") as f:
        buf = f.read()
    if len(buf) != 4 * count:
        raise ValueError(f"{raw_path}: expected {4 * count} bytes, found {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4").copy()
    data = data.reshape(extents if components == 1 else (components, *extents))
    return Volume(data, tuple(header["spacing"]), header.get("kind", "image"),
                  header.get("meta", {}))


def hu_to_unit(data) -> np.ndarray:
    """Import helper: clip Hounsfield-style values to [-1000, 1000] and
    rescale linearly to [0, 1]."""
    arr = np.asarray(data, dtype=np.float32)
    return (np.clip(arr, -1000.0, 1000.0) + 1000.0) / 2000.0


# ---------------------------------------------------------------------------
# preprocessing: body crop + resample, with a recorded inverse
# ---------------------------------------------------------------------------

@dataclass
class CropResampleTransform:
    source_extents: tuple
    offset: tuple
    crop_extents: tuple
    target_extents: tuple


def _resample_to(data: np.ndarray, target_extents) -> np.ndarray:
    """Trilinear resample of [D,H,W] onto a new grid, aligning the first
    and last voxel centers of each axis."""
    src = np.asarray(data, dtype=np.float32)
    d, h, w = src.shape
    td, th, tw = target_extents
    if (d, h, w) == (td, th, tw):
        return src.copy()
    axes = []
    for n_src, n_tgt in ((d, td), (h, th), (w, tw)):
        if n_tgt == 1:
            axes.append(np.zeros(1, dtype=np.float32))
        else:
            axes.append(np.arange(n_tgt, dtype=np.float32) * ((n_src - 1) / (n_tgt - 1)))
    zz, yy, xx = np.meshgrid(*axes, indexing="ij")
    out = _sample_volume(src[None], zz.ravel(), yy.ravel(), xx.ravel())
    return out.reshape(td, th, tw).astype(np.float32)


def preprocess(volume: Volume, masks: dict, target_extents, margin_mm: float = 0.0,
               intensity_threshold: float = 0.1):
    """Crop to the body bounding box plus a physical margin, then resample.

    Images resample trilinearly; masks resample trilinearly and are
    re-binarized at 0.5. Returns (volume, masks, transform); feed the
    transform to `restore` to resample results back to the original grid.
    """
    data = volume.data
    body = data > intensity_threshold
    if not body.any():
        raise ValueError("preprocess: no body region above the intensity threshold")
    lo, hi = [], []
    for axis in range(3):
        proj = body.any(axis=tuple(a for a in range(3) if a != axis))
        idx = np.nonzero(proj)[0]
        margin_vox = int(np.ceil(margin_mm / volume.spacing[axis]))
        lo.append(max(int(idx[0]) - margin_vox, 0))
        hi.append(min(int(idx[-1]) + margin_vox + 1, data.shape[axis]))
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    cropped = data[sl]
    transform = CropResampleTransform(
        source_extents=data.shape, offset=tuple(lo),
        crop_extents=cropped.shape, target_extents=tuple(target_extents))
    out_vol = Volume(_resample_to(cropped, target_extents), volume.spacing,
                     volume.kind, dict(volume.meta))
    out_masks = {}
    for name, m in masks.items():
        md = np.asarray(m, dtype=np.float32)
        res = _resample_to(md[sl], target_extents)
        out_masks[name] = Volume((res >= 0.5).astype(np.float32), volume.spacing, "mask")
    return out_vol, out_masks, transform


def restore(data, transform: CropResampleTransform, binarize: bool = False) -> np.ndarray:
    """Inverse of `preprocess`: resample back and paste into the original grid."""
    arr = np.asarray(data, dtype=np.float32)
    back = _resample_to(arr, transform.crop_extents)
    if binarize:
        back = (back >= 0.5).astype(np.float32)
    out = np.zeros(transform.source_extents, dtype=np.float32)
    sl = tuple(slice(o, o + e) for o, e in zip(transform.offset, transform.crop_extents))
    out[sl] = back
    return out


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

def load_config(path) -> dict:
    """Versioned JSON config with optional `engine` and `phantom` sections."""
    with open(path) as f:
        cfg = json.load(f)
    version = cfg.get("schema_version")
    if version != CONFIG_SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported config schema_version {version!r}")
    return cfg


def save_config(path, cfg: dict) -> None:
    payload = dict(cfg)
    payload.setdefault("schema_version", CONFIG_SCHEMA_VERSION)
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=1)
        f.write("\n")
