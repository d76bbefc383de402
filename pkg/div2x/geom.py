"""BEV / 3D geometry: rigid poses, convex clipping, mask rasterization,
rotated-box IoU and greedy NMS.

Grid convention used throughout the package: row index i runs along the
vehicle x axis, column index j along the y axis, and cell (i, j) has its
center at (x_min + (i + 0.5) * cell_x, y_min + (j + 0.5) * cell_y).
"""
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from typing_extensions import Self

EPS = 1e-9
DEGENERATE_EXTENT = 1e-6


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]"""
    wrapped = -((-float(yaw) + math.pi) % (2.0 * math.pi) - math.pi)
    return wrapped + 0.0


def yaw_rotation(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Rigid transform p -> R p + t"""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise ValueError("Pose contains non-finite values")
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) >= EPS:
            raise ValueError(f"Rotation is not orthonormal:\n{rotation}")
        if abs(np.linalg.det(rotation) - 1.0) > EPS:
            raise ValueError(f"Rotation determinant is not 1: {np.linalg.det(rotation)}")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> Self:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation: Sequence[float]) -> Self:
        return cls(yaw_rotation(yaw), np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_matrix(cls, matrix: Sequence[Sequence[float]]) -> Self:
        m = np.asarray(matrix, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """a ∘ b: apply b first, then a"""
    return PoseSE3(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(a: PoseSE3) -> PoseSE3:
    rt = a.rotation.T
    return PoseSE3(rt, -rt @ a.translation)


def transform_points(cloud: np.ndarray, pose: PoseSE3) -> np.ndarray:
    """Map the xyz columns of an N×4 cloud by R·p + t, keeping intensity"""
    cloud = np.asarray(cloud)
    if cloud.ndim != 2 or cloud.shape[1] != 4:
        raise ValueError(f"Expected an N×4 point cloud, got shape {cloud.shape}")
    if not np.all(np.isfinite(cloud)):
        bad = int(np.count_nonzero(~np.all(np.isfinite(cloud), axis=1)))
        raise ValueError(f"Point cloud has {bad} non-finite rows")
    out = cloud.astype(np.float64, copy=True)
    out[:, :3] = cloud[:, :3] @ pose.rotation.T + pose.translation
    return out.astype(cloud.dtype, copy=False)


def _cross(o: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return float((a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]))


def _dedupe(vertices: List[np.ndarray]) -> List[np.ndarray]:
    out: List[np.ndarray] = []
    for v in vertices:
        if not out or np.max(np.abs(v - out[-1])) > EPS:
            out.append(v)
    while len(out) > 1 and np.max(np.abs(out[0] - out[-1])) <= EPS:
        out.pop()
    return out


@dataclass(frozen=True, eq=False)
class ConvexPolygon2D:
    """Counter-clockwise convex polygon; fewer than three vertices means empty"""
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 2)
        n = len(verts)
        if n >= 3:
            for k in range(n):
                if _cross(verts[k], verts[(k + 1) % n], verts[(k + 2) % n]) < -EPS:
                    raise ValueError(f"Polygon is not convex counter-clockwise at vertex {k + 1}")
        object.__setattr__(self, "vertices", verts)

    @classmethod
    def from_points(cls, points: Sequence[Sequence[float]]) -> Self:
        """Build from vertices given in either winding order"""
        verts = _dedupe([np.asarray(p, dtype=np.float64) for p in points])
        if len(verts) < 3:
            return cls()
        arr = np.array(verts)
        if _signed_area(arr) < 0:
            arr = arr[::-1]
        return cls(arr)

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) < 3

    @property
    def area(self) -> float:
        if self.is_empty:
            return 0.0
        return abs(_signed_area(self.vertices))

    def contains(self, points: np.ndarray, tol: float = EPS) -> np.ndarray:
        """Vectorized membership test, boundary counted as inside within tol"""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if self.is_empty:
            return np.zeros(len(pts), dtype=bool)
        inside = np.ones(len(pts), dtype=bool)
        verts = self.vertices
        for a, b in zip(verts, np.roll(verts, -1, axis=0)):
            edge = b - a
            length = math.hypot(edge[0], edge[1])
            cross = edge[0] * (pts[:, 1] - a[1]) - edge[1] * (pts[:, 0] - a[0])
            inside &= cross >= -tol * length
        return inside


EMPTY_POLYGON = ConvexPolygon2D()


def _signed_area(verts: np.ndarray) -> float:
    x, y = verts[:, 0], verts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_intersection(a: ConvexPolygon2D, b: ConvexPolygon2D) -> ConvexPolygon2D:
    """Sutherland-Hodgman clip of a against every edge of b"""
    if a.is_empty or b.is_empty:
        return EMPTY_POLYGON
    output = [v for v in a.vertices]
    clip = b.vertices
    for k in range(len(clip)):
        if len(output) < 3:
            return EMPTY_POLYGON
        c0, c1 = clip[k], clip[(k + 1) % len(clip)]
        subject, output = output, []
        prev = subject[-1]
        prev_side = _cross(c0, c1, prev)
        for cur in subject:
            cur_side = _cross(c0, c1, cur)
            if cur_side >= -EPS:
                if prev_side < -EPS:
                    output.append(_segment_line_hit(prev, cur, prev_side, cur_side))
                output.append(cur)
            elif prev_side >= -EPS:
                output.append(_segment_line_hit(prev, cur, prev_side, cur_side))
            prev, prev_side = cur, cur_side
        output = _dedupe(output)
    if len(output) < 3:
        return EMPTY_POLYGON
    verts = np.array(output)
    if abs(_signed_area(verts)) <= EPS * EPS:
        return EMPTY_POLYGON
    return ConvexPolygon2D(verts)


def _segment_line_hit(p: np.ndarray, q: np.ndarray, side_p: float, side_q: float) -> np.ndarray:
    t = side_p / (side_p - side_q)
    return p + t * (q - p)


@dataclass(frozen=True)
class OrientedRect:
    center: Tuple[float, float]
    half_extents: Tuple[float, float]
    yaw: float = 0.0

    def __post_init__(self):
        if min(self.half_extents) <= 0:
            raise ValueError(f"Rect half extents must be positive, got {self.half_extents}")

    def polygon(self) -> ConvexPolygon2D:
        return ConvexPolygon2D(_rect_corners(self.center, self.half_extents, self.yaw))


def _rect_corners(center, half_extents, yaw: float) -> np.ndarray:
    hx, hy = half_extents
    local = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(center, dtype=np.float64)


@dataclass(frozen=True)
class GridSpec:
    x_range: Tuple[float, float]
    y_range: Tuple[float, float]
    cell_size: Tuple[float, float]

    def __post_init__(self):
        if self.x_range[1] <= self.x_range[0] or self.y_range[1] <= self.y_range[0]:
            raise ValueError(f"Empty grid range: x={self.x_range}, y={self.y_range}")
        if min(self.cell_size) <= 0:
            raise ValueError(f"Cell size must be positive, got {self.cell_size}")
        if self.height <= 0 or self.width <= 0:
            raise ValueError("Grid has no cells")

    @property
    def height(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.cell_size[0]))

    @property
    def width(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.cell_size[1]))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    def downsample(self, stride: int) -> "GridSpec":
        return GridSpec(self.x_range, self.y_range,
                        (self.cell_size[0] * stride, self.cell_size[1] * stride))

    def cell_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """Return (x, y) center coordinates, each of shape H×W"""
        xs = self.x_range[0] + (np.arange(self.height) + 0.5) * self.cell_size[0]
        ys = self.y_range[0] + (np.arange(self.width) + 0.5) * self.cell_size[1]
        return np.meshgrid(xs, ys, indexing="ij")

    def cell_of(self, x: float, y: float) -> Tuple[int, int]:
        return (int(math.floor((x - self.x_range[0]) / self.cell_size[0])),
                int(math.floor((y - self.y_range[0]) / self.cell_size[1])))

    def contains_cell(self, i: int, j: int) -> bool:
        return 0 <= i < self.height and 0 <= j < self.width

    def rect(self) -> OrientedRect:
        return OrientedRect(
            ((self.x_range[0] + self.x_range[1]) / 2, (self.y_range[0] + self.y_range[1]) / 2),
            ((self.x_range[1] - self.x_range[0]) / 2, (self.y_range[1] - self.y_range[0]) / 2),
        )


def rasterize_mask(poly: ConvexPolygon2D, grid: GridSpec) -> np.ndarray:
    """H×W 0/1 mask: a cell is set iff its center lies in poly"""
    if poly.is_empty:
        return np.zeros(grid.shape, dtype=np.uint8)
    xs, ys = grid.cell_centers()
    inside = poly.contains(np.stack([xs.ravel(), ys.ravel()], axis=1))
    return inside.reshape(grid.shape).astype(np.uint8)


@dataclass(frozen=True)
class Box3D:
    """Upright box: center (x, y, z), extents (h, w, l), heading yaw; l runs along the heading"""
    x: float
    y: float
    z: float
    h: float
    w: float
    l: float
    yaw: float = 0.0

    def __post_init__(self):
        values = (self.x, self.y, self.z, self.h, self.w, self.l, self.yaw)
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"Box has non-finite parameters: {values}")
        if min(self.h, self.w, self.l) <= 0:
            raise ValueError(f"Box extents must be positive, got h={self.h}, w={self.w}, l={self.l}")
        for name in ("x", "y", "z", "h", "w", "l"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @classmethod
    def from_array(cls, values: Sequence[float]) -> Self:
        return cls(*[float(v) for v in values])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.h, self.w, self.l, self.yaw])

    @property
    def is_degenerate(self) -> bool:
        return min(self.h, self.w, self.l) <= DEGENERATE_EXTENT

    @property
    def bev_area(self) -> float:
        return self.l * self.w

    @property
    def bev_radius(self) -> float:
        return 0.5 * math.hypot(self.l, self.w)

    def footprint(self) -> ConvexPolygon2D:
        return ConvexPolygon2D(_rect_corners((self.x, self.y), (self.l / 2, self.w / 2), self.yaw))

    def pose(self) -> PoseSE3:
        """Box frame -> parent frame"""
        return PoseSE3.from_yaw(self.yaw, (self.x, self.y, self.z))

    def transformed(self, pose: PoseSE3) -> "Box3D":
        """The same physical box expressed through a yaw-only rigid transform"""
        center = pose.rotation @ np.array([self.x, self.y, self.z]) + pose.translation
        return Box3D(center[0], center[1], center[2], self.h, self.w, self.l, self.yaw + pose.yaw)


def rotated_iou(a: Box3D, b: Box3D) -> float:
    """BEV footprint IoU; degenerate footprints score 0"""
    if a.is_degenerate or b.is_degenerate:
        return 0.0
    if math.hypot(a.x - b.x, a.y - b.y) >= a.bev_radius + b.bev_radius:
        return 0.0
    inter = polygon_intersection(a.footprint(), b.footprint()).area
    union = a.bev_area + b.bev_area - inter
    if union <= 0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def nms(boxes: Sequence[Box3D], scores: Sequence[float], iou_thr: float) -> List[int]:
    """Greedy rotated NMS; equal scores keep the lower index first"""
    if len(boxes) != len(scores):
        raise ValueError(f"boxes and scores differ in length: {len(boxes)} vs {len(scores)}")
    if len(boxes) == 0:
        return []
    scores_arr = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores_arr)):
        raise ValueError("NMS scores must be finite")
    order = np.argsort(-scores_arr, kind="stable")
    kept: List[int] = []
    for idx in order:
        if all(rotated_iou(boxes[idx], boxes[k]) < iou_thr for k in kept):
            kept.append(int(idx))
    return kept


def points_in_box(cloud: np.ndarray, box: Box3D) -> np.ndarray:
    """Indices of points inside the box (faces included)"""
    cloud = np.asarray(cloud)
    if len(cloud) == 0:
        return np.zeros(0, dtype=np.int64)
    local = (cloud[:, :3].astype(np.float64) - np.array([box.x, box.y, box.z])) @ yaw_rotation(box.yaw)
    inside = ((np.abs(local[:, 0]) <= box.l / 2)
              & (np.abs(local[:, 1]) <= box.w / 2)
              & (np.abs(local[:, 2]) <= box.h / 2))
    return np.flatnonzero(inside)
