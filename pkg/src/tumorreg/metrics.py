"""Evaluation metrics: overlap, surface distance, centerline distance,
tumor preservation, dose difference, and registration-quality filtering.

All distance metrics honor anisotropic voxel spacing and are computed in
float64. Masks are binarized at 0.5 before comparison, matching the
warping convention.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree


class MetricError(ValueError):
    """Raised when a metric is undefined for the given inputs."""


REPORT_VERSION = 1
REPORT_STRUCTURES = ("lung_left", "lung_right", "heart", "cord")
REPORT_TUBES = ("aorta", "trachea", "pa", "ivc")


def _as_mask(a) -> np.ndarray:
    arr = np.asarray(a)
    if arr.dtype != bool:
        arr = arr >= 0.5
    return arr


def _check_extents(a: np.ndarray, b: np.ndarray, op: str):
    if a.shape != b.shape:
        raise MetricError(f"{op}: extent mismatch {a.shape} vs {b.shape}")


def dsc(a, b) -> float:
    """Dice similarity coefficient 2|A&B| / (|A|+|B|)."""
    a, b = _as_mask(a), _as_mask(b)
    _check_extents(a, b, "dsc")
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        raise MetricError("dsc: both masks empty")
    return 2.0 * float(np.logical_and(a, b).sum()) / (na + nb)


def _surface(mask: np.ndarray) -> np.ndarray:
    """Boundary voxels via 6-connectivity erosion."""
    cross = ndimage.generate_binary_structure(3, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=cross, border_value=0)


def hd95(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    """95th percentile of the pooled symmetric surface distances."""
    a, b = _as_mask(a), _as_mask(b)
    _check_extents(a, b, "hd95")
    spacing = tuple(float(s) for s in spacing)
    if any(s <= 0 for s in spacing):
        raise MetricError(f"hd95: spacing must be positive, got {spacing}")
    if a.sum() == 0 or b.sum() == 0:
        raise MetricError("hd95: undefined for an empty mask")
    sa, sb = _surface(a), _surface(b)
    dist_to_b = ndimage.distance_transform_edt(~sb, sampling=spacing)
    dist_to_a = ndimage.distance_transform_edt(~sa, sampling=spacing)
    pooled = np.concatenate([dist_to_b[sa], dist_to_a[sb]])
    return float(np.percentile(pooled, 95))


# ---------------------------------------------------------------------------
# centerline distance for tubular structures
# ---------------------------------------------------------------------------

_NEIGHBOR_OFFSETS = np.array(
    [(dz, dy, dx) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
     if (dz, dy, dx) != (0, 0, 0)], dtype=np.int64)
_NEIGHBOR_STEP = np.linalg.norm(_NEIGHBOR_OFFSETS, axis=1)


def _dijkstra(coords: np.ndarray, index_of: np.ndarray, source: int,
              node_cost: np.ndarray | None = None):
    """Shortest paths over the 26-connected voxel graph of a mask.

    Edge weight is the Euclidean step length, optionally scaled by the
    target voxel's `node_cost` (used to pull paths onto the distance-
    transform ridge). Returns (distances, predecessors).
    """
    n = len(coords)
    dist = np.full(n, np.inf)
    pred = np.full(n, -1, dtype=np.int64)
    dist[source] = 0.0
    heap = [(0.0, source)]
    shape = index_of.shape
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        base = coords[u]
        for off, step in zip(_NEIGHBOR_OFFSETS, _NEIGHBOR_STEP):
            v = base + off
            if np.any(v < 0) or np.any(v >= shape):
                continue
            idx = index_of[v[0], v[1], v[2]]
            if idx < 0:
                continue
            w = step if node_cost is None else step * node_cost[idx]
            nd = d + w
            if nd < dist[idx]:
                dist[idx] = nd
                pred[idx] = u
                heapq.heappush(heap, (nd, idx))
    return dist, pred


def extract_centerline(mask, min_points: int = 3) -> np.ndarray:
    """Single centerline path through a tubular mask.

    The path connects the geodesically farthest voxel pair, following the
    ridge of the Euclidean distance transform (step costs are divided by
    the local interior depth). Works on the largest connected component.
    Returns [N,3] voxel coordinates ordered along the tube.
    """
    mask = _as_mask(mask)
    if mask.sum() == 0:
        raise MetricError("centerline: empty mask")
    labels, n_comp = ndimage.label(mask, structure=np.ones((3, 3, 3), bool))
    if n_comp > 1:
        counts = np.bincount(labels.ravel())[1:]
        mask = labels == (1 + int(np.argmax(counts)))
    coords = np.argwhere(mask)
    index_of = np.full(mask.shape, -1, dtype=np.int64)
    index_of[tuple(coords.T)] = np.arange(len(coords))
    edt = ndimage.distance_transform_edt(mask)
    node_cost = 1.0 / (edt[tuple(coords.T)] + 0.5)

    d0, _ = _dijkstra(coords, index_of, 0)
    p1 = int(np.argmax(np.where(np.isfinite(d0), d0, -1.0)))
    d1, _ = _dijkstra(coords, index_of, p1)
    p2 = int(np.argmax(np.where(np.isfinite(d1), d1, -1.0)))
    _, pred = _dijkstra(coords, index_of, p1, node_cost=node_cost)
    path = []
    node = p2
    while node != -1:
        path.append(coords[node])
        node = int(pred[node])
    path.reverse()
    if len(path) < min_points:
        raise MetricError(f"centerline: only {len(path)} points extracted")
    return np.asarray(path, dtype=np.float64)


def mcd(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    """Mean of the two directed medians of closest centerline distances.

    Centerlines are extracted from each tubular mask; distances are
    measured between the two point sets in physical units.
    """
    line_a = extract_centerline(a)
    line_b = extract_centerline(b)
    spacing = np.asarray(spacing, dtype=np.float64)
    pa = line_a * spacing
    pb = line_b * spacing
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return 0.5 * (float(np.median(d_ab)) + float(np.median(d_ba)))


# ---------------------------------------------------------------------------
# tumor preservation metrics
# ---------------------------------------------------------------------------

def delta_t(y_m, y_def) -> float:
    """Percent tumor volume change |V_def - V_m| / V_m * 100."""
    y_m, y_def = _as_mask(y_m), _as_mask(y_def)
    _check_extents(y_m, y_def, "delta_t")
    v_m = int(y_m.sum())
    if v_m == 0:
        raise MetricError("delta_t: original tumor mask is empty")
    v_def = int(y_def.sum())
    return abs(v_def - v_m) / v_m * 100.0


def m_lexs(jac, y_m) -> float:
    """Mean percent local expansion/shrinkage: mean |J - 1| over the tumor."""
    jac = np.asarray(jac, dtype=np.float64)
    y_m = _as_mask(y_m)
    _check_extents(jac, y_m, "m_lexs")
    n = int(y_m.sum())
    if n == 0:
        raise MetricError("m_lexs: empty tumor mask")
    return float(np.abs(jac[y_m] - 1.0).sum() / n * 100.0)


def tumor_mse(i_m, y_m, i_def, y_def) -> float:
    """MSE between masked tumor intensities, over the union support."""
    i_m = np.asarray(i_m, dtype=np.float64)
    i_def = np.asarray(i_def, dtype=np.float64)
    y_m, y_def = _as_mask(y_m), _as_mask(y_def)
    _check_extents(i_m, i_def, "tumor_mse")
    _check_extents(y_m, y_def, "tumor_mse")
    union = y_m | y_def
    n = int(union.sum())
    if n == 0:
        raise MetricError("tumor_mse: both tumor masks empty")
    diff = i_m * y_m - i_def * y_def
    return float(np.square(diff[union]).sum() / n)


def delta_ptd(dose, y_m, y_def) -> float:
    """Absolute difference of mean tumor dose before vs after deformation."""
    dose = np.asarray(dose, dtype=np.float64)
    y_m, y_def = _as_mask(y_m), _as_mask(y_def)
    _check_extents(dose, y_m, "delta_ptd")
    _check_extents(y_m, y_def, "delta_ptd")
    if y_m.sum() == 0 or y_def.sum() == 0:
        raise MetricError("delta_ptd: empty tumor mask")
    return abs(float(dose[y_m].mean()) - float(dose[y_def].mean()))


# ---------------------------------------------------------------------------
# report assembly
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    pair_id: str
    dsc: dict = field(default_factory=dict)
    hd95: dict = field(default_factory=dict)
    mcd: dict = field(default_factory=dict)
    delta_t_percent: float | None = None
    m_lexs_percent: float | None = None
    tumor_mse: float | None = None
    delta_ptd: float | None = None
    excluded: bool = False
    exclude_reason: str = ""


_LUNG_LABELS = {"lung_left": "left lung", "lung_right": "right lung"}


def vba_filter(report: MetricsReport, threshold: float = 0.8) -> bool:
    """Flag a report as excluded when any lung DSC falls below threshold.

    Strict inequality: a DSC exactly at the threshold stays included.
    Mutates and returns the report's excluded flag; the reason names the
    failing lung(s).
    """
    missing = [k for k in _LUNG_LABELS if k not in report.dsc]
    if missing:
        raise MetricError(f"vba_filter: missing lung DSC entries: {missing}")
    failing = [label for key, label in _LUNG_LABELS.items()
               if report.dsc[key] < threshold]
    report.excluded = bool(failing)
    report.exclude_reason = "; ".join(failing)  # comma-free: stays one CSV cell
    return report.excluded


def report_columns() -> list:
    cols = ["pair_id"]
    cols += [f"dsc_{s}" for s in REPORT_STRUCTURES]
    cols += [f"hd95_{s}" for s in REPORT_STRUCTURES]
    cols += [f"mcd_{s}" for s in REPORT_TUBES]
    cols += ["delta_t_percent", "m_lexs_percent", "tumor_mse", "delta_ptd",
             "excluded", "exclude_reason"]
    return cols


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    return repr(float(value))


def write_report_csv(path, reports) -> None:
    cols = report_columns()
    with open(path, "w") as f:
        f.write(f"# tumorreg-metrics v{REPORT_VERSION}\n")
        f.write(",".join(cols) + "\n")
        for r in reports:
            cells = [r.pair_id]
            cells += [_fmt(r.dsc.get(s)) for s in REPORT_STRUCTURES]
            cells += [_fmt(r.hd95.get(s)) for s in REPORT_STRUCTURES]
            cells += [_fmt(r.mcd.get(s)) for s in REPORT_TUBES]
            cells += [_fmt(r.delta_t_percent), _fmt(r.m_lexs_percent),
                      _fmt(r.tumor_mse), _fmt(r.delta_ptd),
                      _fmt(r.excluded), r.exclude_reason]
            f.write(",".join(cells) + "\n")


def read_report_csv(path) -> list:
    with open(path) as f:
        version_line = f.readline().strip()
        if not version_line.startswith("# tumorreg-metrics v"):
            raise ValueError(f"not a metrics report: {version_line!r}")
        header = f.readline().strip().split(",")
        if header != report_columns():
            raise ValueError("metrics report columns do not match this version")
        reports = []
        for line in f:
            cells = line.rstrip("\n").split(",")
            row = dict(zip(header, cells))
            rep = MetricsReport(pair_id=row["pair_id"])
            for s in REPORT_STRUCTURES:
                if row[f"dsc_{s}"]:
                    rep.dsc[s] = float(row[f"dsc_{s}"])
                if row[f"hd95_{s}"]:
                    rep.hd95[s] = float(row[f"hd95_{s}"])
            for s in REPORT_TUBES:
                if row[f"mcd_{s}"]:
                    rep.mcd[s] = float(row[f"mcd_{s}"])
            for name in ("delta_t_percent", "m_lexs_percent", "tumor_mse", "delta_ptd"):
                if row[name]:
                    setattr(rep, name, float(row[name]))
            rep.excluded = row["excluded"] == "1"
            rep.exclude_reason = row["exclude_reason"]
            reports.append(rep)
    return reports
