"""Bounding boxes and sparse landmark shapes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates, x_min < x_max and y_min < y_max."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ContractViolation(
                f"degenerate box ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def area(self) -> float:
        return self.width * self.height

    def translated(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union overlap of two boxes; 0 when disjoint."""
    if not isinstance(a, BoundingBox) or not isinstance(b, BoundingBox):
        a = BoundingBox(*a) if not isinstance(a, BoundingBox) else a
        b = BoundingBox(*b) if not isinstance(b, BoundingBox) else b
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area() + b.area() - inter)


class SparseShape:
    """Ordered landmark points, stored as an (n, 2) array of (x, y) pairs."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
            raise ContractViolation(f"shape points must be (n, 2), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ContractViolation("shape points must all be finite")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other) -> bool:
        return isinstance(other, SparseShape) and np.array_equal(self.points, other.points)

    def bounding_box(self) -> BoundingBox:
        xs, ys = self.points[:, 0], self.points[:, 1]
        x_min, x_max = float(xs.min()), float(xs.max())
        y_min, y_max = float(ys.min()), float(ys.max())
        # expand degenerate extents so the box stays valid
        if x_min == x_max:
            x_max = x_min + 1e-6
        if y_min == y_max:
            y_max = y_min + 1e-6
        return BoundingBox(x_min, y_min, x_max, y_max)

    def face_size(self) -> float:
        box = self.bounding_box()
        return max(box.width, box.height)

    def translated(self, dx: float, dy: float) -> "SparseShape":
        return SparseShape(self.points + np.array([dx, dy]))
