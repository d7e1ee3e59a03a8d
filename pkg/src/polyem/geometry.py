"""Exact 2-D polygon and box primitives.

Coordinates are continuous scene units: x grows to the right, y grows
downward, and a grid cell ``(row, col)`` covers ``[col, col+1] x [row, row+1]``.
Polygons are stored with positive shoelace area on the raw ``(x, y)``
numbers; that is what "counter-clockwise" means throughout the package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import shapely
from shapely.geometry import LinearRing
from shapely.geometry import Polygon as _ShapelyPolygon


class GeometryError(ValueError):
    """Raised for degenerate or self-intersecting geometry."""


class Point(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise GeometryError(f"non-finite box {vals}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise GeometryError(f"inverted box {vals}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Point:
        return Point((self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2)

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    @property
    def is_degenerate(self) -> bool:
        return self.width <= 0 or self.height <= 0

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def contains_box(self, other: Box, tol: float = 0.0) -> bool:
        return (
            self.x_min <= other.x_min + tol
            and self.y_min <= other.y_min + tol
            and self.x_max >= other.x_max - tol
            and self.y_max >= other.y_max - tol
        )

    def clip_to(self, width: float, height: float) -> Box:
        return Box(
            min(max(self.x_min, 0.0), width),
            min(max(self.y_min, 0.0), height),
            min(max(self.x_max, 0.0), width),
            min(max(self.y_max, 0.0), height),
        )

    @classmethod
    def union(cls, boxes: Sequence[Box]) -> Box:
        if not boxes:
            raise GeometryError("union of no boxes")
        return cls(
            min(b.x_min for b in boxes),
            min(b.y_min for b in boxes),
            max(b.x_max for b in boxes),
            max(b.y_max for b in boxes),
        )


def signed_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _drop_repeats(pts: np.ndarray) -> np.ndarray:
    keep = np.any(pts != np.roll(pts, 1, axis=0), axis=1)
    if not keep.any():
        return pts[:1]
    return pts[keep]


class Polygon:
    """Closed simple polygon, canonicalised to counter-clockwise order.

    Consecutive duplicate vertices are dropped and clockwise input is
    reversed. Self-intersecting or zero-area input raises ``GeometryError``.
    """

    __slots__ = ("_v", "_shape")

    def __init__(self, vertices):
        pts = np.array(vertices, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(pts)):
            raise GeometryError("non-finite polygon vertex")
        pts = _drop_repeats(pts)
        if len(pts) < 3:
            raise GeometryError(f"polygon needs >= 3 distinct vertices, got {len(pts)}")
        area = signed_area(pts)
        if area == 0.0:
            raise GeometryError("zero-area polygon")
        if area < 0:
            pts = pts[::-1].copy()
        if not LinearRing(pts).is_simple:
            raise GeometryError("self-intersecting polygon")
        pts.setflags(write=False)
        self._v = pts
        self._shape = None

    @property
    def vertices(self) -> np.ndarray:
        return self._v

    def __len__(self) -> int:
        return len(self._v)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Polygon):
            return NotImplemented
        return self._v.shape == other._v.shape and bool(np.all(self._v == other._v))

    def __hash__(self):
        return hash(self._v.tobytes())

    def __repr__(self) -> str:
        return f"Polygon({self._v.tolist()!r})"

    @property
    def area(self) -> float:
        return signed_area(self._v)

    @property
    def perimeter(self) -> float:
        return float(np.linalg.norm(np.roll(self._v, -1, axis=0) - self._v, axis=1).sum())

    @property
    def shape(self) -> _ShapelyPolygon:
        if self._shape is None:
            self._shape = _ShapelyPolygon(self._v)
        return self._shape

    def transformed(self, scale: float = 1.0, offset=(0.0, 0.0)) -> Polygon:
        return Polygon(self._v * scale + np.asarray(offset, dtype=np.float64))

    def to_list(self) -> list[list[float]]:
        return self._v.tolist()


def as_polygon(obj) -> Polygon:
    return obj if isinstance(obj, Polygon) else Polygon(obj)


@dataclass(frozen=True)
class ExtremePoints:
    top: Point
    left: Point
    bottom: Point
    right: Point

    def as_array(self) -> np.ndarray:
        """Rows in top, right, bottom, left order (the contour walking order)."""
        return np.array([self.top, self.right, self.bottom, self.left], dtype=np.float64)


def bbox_of_polygon(poly: Polygon) -> Box:
    v = as_polygon(poly).vertices
    lo, hi = v.min(axis=0), v.max(axis=0)
    return Box(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


def extreme_points(poly: Polygon) -> ExtremePoints:
    # np.argmin/argmax return the first index on ties
    v = as_polygon(poly).vertices
    pick = lambda i: Point(float(v[i, 0]), float(v[i, 1]))  # noqa: E731
    return ExtremePoints(
        top=pick(int(np.argmin(v[:, 1]))),
        left=pick(int(np.argmin(v[:, 0]))),
        bottom=pick(int(np.argmax(v[:, 1]))),
        right=pick(int(np.argmax(v[:, 0]))),
    )


def diamond_from_box(b: Box) -> Polygon:
    if b.is_degenerate:
        raise GeometryError(f"degenerate box {b}")
    cx, cy = b.center
    return Polygon([(cx, b.y_min), (b.x_max, cy), (cx, b.y_max), (b.x_min, cy)])


def box_midpoints(b: Box) -> np.ndarray:
    """Edge midpoints in top, right, bottom, left order."""
    return diamond_from_box(b).vertices.copy()


def _octagon_vertices(ex: np.ndarray, b: Box) -> np.ndarray:
    hw, hh = b.width / 8.0, b.height / 8.0
    (tx, ty), (rx, ry), (bx, by), (lx, ly) = ex
    pts = np.array(
        [
            (tx - hw, ty), (tx + hw, ty),
            (rx, ry - hh), (rx, ry + hh),
            (bx + hw, by), (bx - hw, by),
            (lx, ly + hh), (lx, ly - hh),
        ]
    )
    pts[:, 0] = np.clip(pts[:, 0], b.x_min, b.x_max)
    pts[:, 1] = np.clip(pts[:, 1], b.y_min, b.y_max)
    return pts


def octagon_from_extremes(ex: ExtremePoints, b: Box) -> Polygon:
    """Octagon through quarter-edge segments centred on the extreme points.

    Each segment runs parallel to its box edge with total length one quarter
    of that edge, and its endpoints are clipped to the box. If interior
    extreme points make the octagon self-intersect, the extremes are
    projected onto their box edges, which always gives a convex result.
    """
    if b.is_degenerate:
        raise GeometryError(f"degenerate box {b}")
    arr = ex.as_array() if isinstance(ex, ExtremePoints) else np.asarray(ex, dtype=np.float64)
    arr = arr.copy()
    arr[:, 0] = np.clip(arr[:, 0], b.x_min, b.x_max)
    arr[:, 1] = np.clip(arr[:, 1], b.y_min, b.y_max)
    try:
        return Polygon(_octagon_vertices(arr, b))
    except GeometryError:
        arr[0, 1], arr[1, 0], arr[2, 1], arr[3, 0] = b.y_min, b.x_max, b.y_max, b.x_min
        return Polygon(_octagon_vertices(arr, b))


def _project_onto_boundary(v: np.ndarray, p: np.ndarray) -> tuple[int, float]:
    """Edge index and parameter of the boundary point closest to ``p``."""
    a = v
    d = np.roll(v, -1, axis=0) - v
    seg2 = np.einsum("ij,ij->i", d, d)
    t = np.clip(np.einsum("ij,ij->i", p - a, d) / seg2, 0.0, 1.0)
    dist = np.linalg.norm(a + t[:, None] * d - p, axis=1)
    i = int(np.argmin(dist))
    return i, float(t[i])


def resample_contour(poly, n: int = 128, start=None) -> np.ndarray:
    """Return ``n`` points spaced uniformly by arc length along the boundary.

    Sampling starts at the top extreme vertex, or at the boundary point
    nearest ``start`` when given, and follows the stored orientation.
    """
    if n < 3:
        raise GeometryError("need n >= 3")
    v = poly.vertices if isinstance(poly, Polygon) else np.asarray(poly, dtype=np.float64)
    if start is None:
        v = np.roll(v, -int(np.argmin(v[:, 1])), axis=0)
    else:
        i, t = _project_onto_boundary(v, np.asarray(start, dtype=np.float64))
        nxt = v[(i + 1) % len(v)]
        p0 = v[i] + t * (nxt - v[i])
        rest = np.roll(v, -(i + 1), axis=0)
        v = np.vstack([p0, rest]) if t < 1.0 else rest
    closed = np.vstack([v, v[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    s = np.arange(n) * (total / n)
    return np.column_stack(
        [np.interp(s, cum, closed[:, 0]), np.interp(s, cum, closed[:, 1])]
    )


def polyline_length(pts: np.ndarray) -> float:
    return float(np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1).sum())


def polygon_iou(a, b) -> float:
    pa, pb = as_polygon(a), as_polygon(b)
    ba, bb = bbox_of_polygon(pa), bbox_of_polygon(pb)
    if box_iou(ba, bb) == 0.0:
        return 0.0
    inter = shapely.intersection(pa.shape, pb.shape).area
    union = pa.area + pb.area - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def box_iou(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def expand_box(b: Box, fx: float, fy: float) -> Box:
    if fx < 0 or fy < 0:
        raise GeometryError("expansion factors must be non-negative")
    cx, cy = b.center
    hw, hh = b.width * (1 + fx) / 2, b.height * (1 + fy) / 2
    return Box(cx - hw, cy - hh, cx + hw, cy + hh)


def repair_contour(pts: np.ndarray) -> Polygon:
    """Best-effort simple polygon from a possibly self-intersecting contour.

    Keeps the largest piece of the GEOS repair; used on regressed contours,
    never on ground truth.
    """
    try:
        return Polygon(pts)
    except GeometryError:
        pass
    fixed = shapely.make_valid(_ShapelyPolygon(pts))
    parts = [g for g in getattr(fixed, "geoms", [fixed]) if g.geom_type == "Polygon" and g.area > 0]
    if not parts:
        hull = shapely.convex_hull(shapely.MultiPoint(pts))
        if hull.geom_type != "Polygon" or hull.area <= 0:
            raise GeometryError("cannot repair degenerate contour")
        parts = [hull]
    best = max(parts, key=lambda g: g.area)
    return Polygon(np.asarray(best.exterior.coords)[:-1])
