"""Point-based weak supervision: simulated annotations and the targets built from them.

Points are ``(x, y)`` pixel coordinates. Regions are boolean ``(H, W)`` arrays.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import binary_dilation, binary_erosion
from skimage.draw import line as draw_line

from .panoptic import STUFF, THING, PanopticSegmentation

log = logging.getLogger(__name__)

SECONDS_PER_POINT = 0.9
_SQUARE = np.ones((3, 3), dtype=bool)


@dataclass
class PointAnnotation:
    instance_id: int
    category: int
    kind: str
    points: np.ndarray  # (n, 2) int, columns x, y
    n: int = 0
    boundary_ratio: float = 0.0

    def to_json(self) -> dict:
        return {"instance_id": self.instance_id, "category": self.category, "kind": self.kind,
                "points": self.points.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "PointAnnotation":
        pts = np.asarray(d["points"], dtype=np.int64).reshape(-1, 2)
        return cls(int(d["instance_id"]), int(d["category"]), d["kind"], pts, len(pts))


# --------------------------------------------------------------------------- sampling


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one 8-neighbor outside the mask (image border counts as outside)."""
    mask = np.asarray(mask, bool)
    return mask & ~binary_erosion(mask, structure=_SQUARE, border_value=0)


def sample_points(mask: np.ndarray, n: int, boundary_ratio: float = 0.0,
                  seed: int | np.random.Generator | None = None) -> np.ndarray:
    """Draw ``min(n, area)`` distinct points from ``mask``.

    ``ceil(boundary_ratio * n)`` come from the boundary set and the rest from the
    interior; when one pool runs short the other makes up the difference.
    """
    if not 0.0 <= boundary_ratio <= 1.0:
        raise ValueError(f"boundary_ratio must be in [0, 1], got {boundary_ratio}")
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise ValueError("cannot sample points from an empty mask")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    area = int(mask.sum())
    if area < n:
        log.warning("mask has %d pixels, fewer than the %d requested points", area, n)
    total = min(n, area)
    edge = boundary_pixels(mask)
    b_ys, b_xs = np.nonzero(edge)
    i_ys, i_xs = np.nonzero(mask & ~edge)
    n_b = min(math.ceil(boundary_ratio * total - 1e-9), len(b_ys))
    n_i = min(total - n_b, len(i_ys))
    n_b = total - n_i
    bi = rng.choice(len(b_ys), size=n_b, replace=False) if n_b else np.zeros(0, int)
    ii = rng.choice(len(i_ys), size=n_i, replace=False) if n_i else np.zeros(0, int)
    xs = np.concatenate([b_xs[bi], i_xs[ii]])
    ys = np.concatenate([b_ys[bi], i_ys[ii]])
    return np.stack([xs, ys], axis=1).astype(np.int64)


def simulate_center(points: np.ndarray) -> tuple[float, float]:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("need at least one point")
    return float(pts[:, 0].mean()), float(pts[:, 1].mean())


def annotation_cost(n: int, seconds_per_point: float = SECONDS_PER_POINT) -> float:
    """Seconds per instance for an ``n``-point annotation."""
    return round(n * seconds_per_point, 9)


# --------------------------------------------------------------------------- geometry


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull, counter-clockwise, without collinear vertices."""
    pts = sorted({(int(x), int(y)) for x, y in np.asarray(points).reshape(-1, 2)})
    if len(pts) <= 2:
        return np.asarray(pts, dtype=np.int64).reshape(-1, 2)
    lower: list = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.asarray(lower[:-1] + upper[:-1], dtype=np.int64)


def _draw_edges(poly: np.ndarray, shape: tuple[int, int], closed: bool = True) -> np.ndarray:
    out = np.zeros(shape, bool)
    h, w = shape
    m = len(poly)
    for i in range(m if closed else m - 1):
        (x0, y0), (x1, y1) = poly[i], poly[(i + 1) % m]
        rr, cc = draw_line(int(round(y0)), int(round(x0)), int(round(y1)), int(round(x1)))
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        out[rr[ok], cc[ok]] = True
    return out


def _points_in_polygon(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd rule for pixel centers (boundary membership handled separately)."""
    inside = np.zeros(px.shape, bool)
    xs, ys = poly[:, 0].astype(np.float64), poly[:, 1].astype(np.float64)
    j = len(poly) - 1
    for i in range(len(poly)):
        xi, yi, xj, yj = xs[i], ys[i], xs[j], ys[j]
        crosses = (yi > py) != (yj > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = (xj - xi) * (py - yi) / (yj - yi) + xi
        inside ^= crosses & (px < xint)
        j = i
    return inside


def _on_segments(px, py, poly, tol=1e-9) -> np.ndarray:
    on = np.zeros(px.shape, bool)
    m = len(poly)
    for i in range(m):
        a, b = poly[i].astype(np.float64), poly[(i + 1) % m].astype(np.float64)
        cr = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])
        within = ((np.minimum(a[0], b[0]) - tol <= px) & (px <= np.maximum(a[0], b[0]) + tol)
                  & (np.minimum(a[1], b[1]) - tol <= py) & (py <= np.maximum(a[1], b[1]) + tol))
        on |= (np.abs(cr) <= tol) & within
    return on


def rasterize_polygon(poly: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Filled polygon: pixel centers inside or exactly on an edge, plus the drawn edge lines."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    px, py = xs.astype(np.float64), ys.astype(np.float64)
    poly = np.asarray(poly)
    filled = _points_in_polygon(px, py, poly) | _on_segments(px, py, poly)
    return filled | _draw_edges(poly, shape)


def _degenerate_region(points: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    pts = np.unique(np.asarray(points).reshape(-1, 2), axis=0)
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    seg = _draw_edges(pts[order], shape, closed=False) if len(pts) > 1 else np.zeros(shape, bool)
    for x, y in pts:
        if 0 <= y < shape[0] and 0 <= x < shape[1]:
            seg[y, x] = True
    return binary_dilation(seg, structure=_SQUARE)


def convex_target(points: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Filled convex hull of the points (a 1-pixel thickened segment when degenerate)."""
    hull = convex_hull(points)
    if len(hull) < 3:
        return _degenerate_region(points, shape)
    return rasterize_polygon(hull, shape)


def _segments_cross(p1, p2, q1, q2) -> bool:
    """Proper or touching intersection of two segments that share no endpoint."""
    d1, d2 = _cross(q1, q2, p1), _cross(q1, q2, p2)
    d3, d4 = _cross(p1, p2, q1), _cross(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and d1 != 0 and d2 != 0 and ((d3 > 0) != (d4 > 0)) and d3 != 0 and d4 != 0:
        return True

    def on(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    return ((d1 == 0 and on(q1, q2, p1)) or (d2 == 0 and on(q1, q2, p2))
            or (d3 == 0 and on(p1, p2, q1)) or (d4 == 0 and on(p1, p2, q2)))


def _knn_hull(pts: np.ndarray, k: int) -> np.ndarray | None:
    """One attempt of the k-nearest-neighbour concave hull; None when it gets stuck."""
    n = len(pts)
    first = int(np.lexsort((pts[:, 0], pts[:, 1]))[0])  # lowest y, then lowest x
    remaining = np.ones(n, bool)
    remaining[first] = False
    hull = [first]
    current = first
    direction = np.array([1.0, 0.0])
    step = 2
    while True:
        if step == 5:
            remaining[first] = True
        idx = np.flatnonzero(remaining)
        if len(idx) == 0:
            break
        d = np.hypot(*(pts[idx] - pts[current]).T)
        near = idx[np.argsort(d, kind="stable")[: min(k, len(idx))]]
        v = (pts[near] - pts[current]).astype(np.float64)
        turn = np.arctan2(direction[0] * v[:, 1] - direction[1] * v[:, 0], v @ direction)
        chosen = None
        for c in near[np.argsort(turn, kind="stable")]:
            closing = c == first
            ok = True
            a, b = pts[current], pts[c]
            # skip the edge just added (shares `current`) and, when closing, the first edge
            last = len(hull) - 1
            for e in range(last - 1):
                if closing and e == 0:
                    continue
                if _segments_cross(a, b, pts[hull[e]], pts[hull[e + 1]]):
                    ok = False
                    break
            if ok:
                chosen = int(c)
                break
        if chosen is None:
            return None
        if chosen == first:
            break
        hull.append(chosen)
        direction = (pts[chosen] - pts[current]).astype(np.float64)
        current = chosen
        remaining[chosen] = False
        step += 1
    if len(hull) < 3:
        return None
    return pts[hull]


def _encloses(poly: np.ndarray, pts: np.ndarray) -> bool:
    px, py = pts[:, 0].astype(np.float64), pts[:, 1].astype(np.float64)
    return bool((_points_in_polygon(px, py, poly) | _on_segments(px, py, poly)).all())


def concave_hull(points: np.ndarray, k_start: int = 3) -> np.ndarray:
    """k-nearest-neighbour concave hull with adaptive ``k``; falls back to the convex hull."""
    pts = np.unique(np.asarray(points, dtype=np.int64).reshape(-1, 2), axis=0)
    if len(pts) <= 3:
        return convex_hull(pts)
    for k in range(max(3, k_start), len(pts)):
        poly = _knn_hull(pts, k)
        if poly is not None and _encloses(poly, pts):
            return poly
    return convex_hull(pts)


def concave_target(points: np.ndarray, shape: tuple[int, int], k_start: int = 3) -> np.ndarray:
    """Filled concave hull, always a subset of :func:`convex_target`."""
    convex = convex_target(points, shape)
    if len(convex_hull(points)) < 3:
        return convex
    poly = concave_hull(points, k_start)
    return rasterize_polygon(poly, shape) & convex


def dilate_target(region: np.ndarray, iterations: int = 2) -> np.ndarray:
    region = np.asarray(region, bool)
    if iterations <= 0 or not region.any():
        return region.copy()
    return binary_dilation(region, structure=_SQUARE, iterations=iterations)


# --------------------------------------------------------------------------- targets


@dataclass
class PointTargets:
    """Per-pixel owner (instance index, or -1 for ignore) plus per-instance data."""

    owner: np.ndarray
    regions: list[np.ndarray]
    centers: list[tuple[float, float]]
    annotations: list[PointAnnotation] = field(default_factory=list)

    def positives(self, j: int) -> np.ndarray:
        return self.owner == j

    def negatives(self, j: int) -> np.ndarray:
        return (self.owner >= 0) & (self.owner != j)

    @property
    def ignore(self) -> np.ndarray:
        return self.owner < 0


@dataclass
class SegmentationTarget:
    target: np.ndarray
    ignore: np.ndarray
    kind: str
    category: int


def _nearest_owner(candidates: np.ndarray, centers: np.ndarray, shape) -> np.ndarray:
    """For each pixel pick among ``candidates[j]`` (bool stack) the instance with nearest center."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    best = np.full(shape, -1, dtype=np.int64)
    best_d = np.full(shape, np.inf)
    for j, cand in enumerate(candidates):
        d = (xs - centers[j, 0]) ** 2 + (ys - centers[j, 1]) ** 2
        take = cand & (d < best_d)
        best[take] = j
        best_d[take] = d[take]
    return best


def build_training_targets(
    annotations: Sequence[PointAnnotation],
    shape: tuple[int, int],
    shape_mode: str = "concave",
    augment: bool = False,
    *,
    dilate_iterations: int = 2,
    dilate_kinds: Iterable[str] = (STUFF,),
) -> tuple[PointTargets, list[SegmentationTarget]]:
    """Turn point annotations into per-instance positive / negative / ignore targets.

    Contested pixels go to the instance with the nearest simulated center; with
    ``augment`` the selected kinds are dilated into unclaimed pixels only.
    """
    if shape_mode not in ("convex", "concave"):
        raise ValueError(f"shape_mode must be 'convex' or 'concave', got {shape_mode!r}")
    make = convex_target if shape_mode == "convex" else concave_target
    anns = list(annotations)
    if not anns:
        return PointTargets(np.full(shape, -1, dtype=np.int64), [], [], []), []
    regions = np.stack([make(a.points, shape) for a in anns])
    centers = np.asarray([simulate_center(a.points) for a in anns])
    owner = _nearest_owner(regions, centers, shape)
    if augment:
        kinds = set(dilate_kinds)
        grown = np.zeros_like(regions)
        for j, a in enumerate(anns):
            if a.kind in kinds:
                grown[j] = dilate_target(owner == j, dilate_iterations) & (owner < 0)
        extra = _nearest_owner(grown, centers, shape)
        owner = np.where(owner < 0, extra, owner)
    for j, a in enumerate(anns):
        owner[a.points[:, 1], a.points[:, 0]] = j
    targets = PointTargets(owner, [owner == j for j in range(len(anns))],
                           [tuple(c) for c in centers], anns)
    segs = [SegmentationTarget(owner == j, owner < 0, a.kind, a.category) for j, a in enumerate(anns)]
    return targets, segs


# --------------------------------------------------------------------------- datasets


def simulate_annotations(panoptic: PanopticSegmentation, n: int, boundary_ratio: float = 0.0,
                         rng: np.random.Generator | None = None) -> list[PointAnnotation]:
    """``P_n`` annotation of every segment of one image."""
    rng = rng or np.random.default_rng(0)
    out = []
    for s in panoptic.segments:
        mask = panoptic.id_map == s.id
        if not mask.any():
            continue
        pts = sample_points(mask, n, boundary_ratio, rng)
        out.append(PointAnnotation(s.id, s.category, s.kind, pts, n, boundary_ratio))
    return out


def simulate_dataset(panoptics: Sequence[PanopticSegmentation], n: int, boundary_ratio: float = 0.0,
                     seed: int = 0) -> list[list[PointAnnotation]]:
    return [simulate_annotations(p, n, boundary_ratio, np.random.default_rng([seed, i]))
            for i, p in enumerate(panoptics)]


def write_point_annotations(per_image: Sequence[Sequence[PointAnnotation]], names: Sequence[str],
                            path: str | Path, **meta) -> None:
    doc = {"meta": meta, "images": [
        {"image": name, "annotations": [a.to_json() for a in anns]} for name, anns in zip(names, per_image)
    ]}
    Path(path).write_text(json.dumps(doc))


def read_point_annotations(path: str | Path) -> tuple[list[str], list[list[PointAnnotation]]]:
    doc = json.loads(Path(path).read_text())
    names = [rec["image"] for rec in doc["images"]]
    anns = [[PointAnnotation.from_json(a) for a in rec["annotations"]] for rec in doc["images"]]
    return names, anns


__all__ = [
    "PointAnnotation", "PointTargets", "SegmentationTarget", "THING", "STUFF",
    "annotation_cost", "boundary_pixels", "build_training_targets", "concave_hull", "concave_target",
    "convex_hull", "convex_target", "dilate_target", "rasterize_polygon", "read_point_annotations",
    "sample_points", "simulate_annotations", "simulate_center", "simulate_dataset", "write_point_annotations",
]
