"""Reference implementations of the pluggable mining components.

The frame-mining pipeline talks to four interfaces:

- detector:          detect(image) -> list of BoundingBox, best first
- tracker:           track(image, prev_box) -> BoundingBox
- landmark_localizer: localize(image, box) -> SparseShape
- optical_flow:      estimate(image_a, image_b) -> (h, w, 2) field of (dy, dx)

Production systems plug in real detectors/trackers; the classes below are
simple, deterministic stand-ins good enough for synthetic footage and tests:
a normalized-cross-correlation template scanner, an NCC tracker, a mean-shape
placer, and exhaustive block-matching flow.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation
from .geometry import BoundingBox, SparseShape, iou
from .metrics import to_luma


def _ncc_score_map(image: np.ndarray, template: np.ndarray) -> np.ndarray:
    """Zero-normalized cross-correlation of a template at every valid offset."""
    th, tw = template.shape
    windows = np.lib.stride_tricks.sliding_window_view(image, (th, tw))
    t = template - template.mean()
    t_norm = np.sqrt((t * t).sum())
    w_mean = windows.mean(axis=(2, 3), keepdims=True)
    w_centered = windows - w_mean
    w_norm = np.sqrt((w_centered * w_centered).sum(axis=(2, 3)))
    corr = np.einsum("yxij,ij->yx", w_centered, t)
    denom = w_norm * t_norm
    with np.errstate(invalid="ignore", divide="ignore"):
        scores = np.where(denom > 0, corr / denom, 0.0)
    return scores


class TemplateDetector:
    """Sliding-window detector that matches one average template by NCC."""

    def __init__(self, template: np.ndarray, threshold: float = 0.5,
                 max_detections: int = 5, nms_iou: float = 0.3):
        template = to_luma(np.asarray(template, dtype=np.float64))
        if template.ndim != 2 or min(template.shape) < 2:
            raise ContractViolation(f"template must be a 2-D patch, got {template.shape}")
        self.template = template
        self.threshold = threshold
        self.max_detections = max_detections
        self.nms_iou = nms_iou

    @classmethod
    def from_crops(cls, crops, **kwargs) -> "TemplateDetector":
        """Average equally sized face crops into the matching template."""
        stack = [to_luma(np.asarray(c, dtype=np.float64)) for c in crops]
        shapes = {s.shape for s in stack}
        if len(shapes) != 1:
            raise ContractViolation(f"crops must share one shape, got {sorted(shapes)}")
        return cls(np.mean(stack, axis=0), **kwargs)

    def detect(self, image: np.ndarray) -> list[BoundingBox]:
        gray = to_luma(np.asarray(image, dtype=np.float64))
        th, tw = self.template.shape
        if gray.shape[0] < th or gray.shape[1] < tw:
            return []
        scores = _ncc_score_map(gray, self.template)
        order = np.argsort(scores, axis=None)[::-1]
        picked: list[tuple[float, BoundingBox]] = []
        for flat in order:
            y, x = np.unravel_index(flat, scores.shape)
            score = float(scores[y, x])
            if score < self.threshold or len(picked) >= self.max_detections:
                break
            box = BoundingBox(float(x), float(y), float(x + tw), float(y + th))
            if all(iou(box, kept) <= self.nms_iou for _, kept in picked):
                picked.append((score, box))
        return [box for _, box in picked]


class NccTracker:
    """Model-free tracker: fixed template from the first call, NCC search
    over integer displacements within a radius."""

    def __init__(self, search_radius: int = 10):
        if search_radius < 1:
            raise ContractViolation(f"search_radius must be >= 1, got {search_radius}")
        self.search_radius = search_radius
        self.template: np.ndarray | None = None

    def track(self, image: np.ndarray, prev_box: BoundingBox) -> BoundingBox:
        gray = to_luma(np.asarray(image, dtype=np.float64))
        h, w = gray.shape
        x0 = int(round(prev_box.x_min))
        y0 = int(round(prev_box.y_min))
        bw = int(round(prev_box.width))
        bh = int(round(prev_box.height))
        x0 = min(max(x0, 0), max(w - bw, 0))
        y0 = min(max(y0, 0), max(h - bh, 0))
        if self.template is None:
            self.template = gray[y0 : y0 + bh, x0 : x0 + bw].copy()
            return prev_box
        t = self.template - self.template.mean()
        t_norm = np.sqrt((t * t).sum())
        best = (-np.inf, 0, 0)
        r = self.search_radius
        for dy in range(-r, r + 1):
            yy = y0 + dy
            if yy < 0 or yy + bh > h:
                continue
            for dx in range(-r, r + 1):
                xx = x0 + dx
                if xx < 0 or xx + bw > w:
                    continue
                window = gray[yy : yy + bh, xx : xx + bw]
                wc = window - window.mean()
                denom = np.sqrt((wc * wc).sum()) * t_norm
                score = float((wc * t).sum() / denom) if denom > 0 else 0.0
                # strict improvement keeps the smallest displacement on ties
                if score > best[0] + 1e-12:
                    best = (score, dy, dx)
                elif best[0] == -np.inf:
                    best = (score, dy, dx)
        _, dy, dx = best
        return prev_box.translated(dx, dy)


def canonical_mean_shape(landmark_count: int = 68) -> np.ndarray:
    """Face-like landmark layout normalized to the unit square.

    For 68 points: 17 jaw, 10 brow, 9 nose, 12 eye, and 20 mouth points,
    mirroring the usual dense face mark-up. Other counts fall back to an
    ellipse."""
    if landmark_count != 68:
        theta = np.linspace(0, 2 * np.pi, landmark_count, endpoint=False)
        return np.stack([0.5 + 0.4 * np.cos(theta), 0.5 + 0.4 * np.sin(theta)], axis=1)
    pts = []
    jaw_t = np.linspace(np.pi, 2 * np.pi, 17)  # chin arc, left to right
    pts += [(0.5 + 0.45 * np.cos(t), 0.45 - 0.5 * np.sin(t)) for t in jaw_t]
    for cx in (0.3, 0.7):  # brows
        xs = np.linspace(cx - 0.12, cx + 0.12, 5)
        pts += [(x, 0.28 - 0.04 * np.cos((x - cx) * 8)) for x in xs]
    pts += [(0.5, y) for y in np.linspace(0.35, 0.55, 4)]  # nose bridge
    pts += [(0.5 + dx, 0.6) for dx in (-0.08, -0.04, 0.0, 0.04, 0.08)]  # nostrils
    for cx in (0.32, 0.68):  # eyes
        ang = np.linspace(0, 2 * np.pi, 6, endpoint=False)
        pts += [(cx + 0.07 * np.cos(a), 0.4 + 0.035 * np.sin(a)) for a in ang]
    outer = np.linspace(0, 2 * np.pi, 12, endpoint=False)  # mouth rings
    pts += [(0.5 + 0.14 * np.cos(a), 0.75 + 0.06 * np.sin(a)) for a in outer]
    inner = np.linspace(0, 2 * np.pi, 8, endpoint=False)
    pts += [(0.5 + 0.08 * np.cos(a), 0.75 + 0.03 * np.sin(a)) for a in inner]
    return np.array(pts, dtype=np.float64)


class MeanShapeLocalizer:
    """Places a canonical mean shape into the tracker box."""

    def __init__(self, mean_shape: np.ndarray | None = None, landmark_count: int = 68):
        self.mean_shape = (
            np.asarray(mean_shape, dtype=np.float64)
            if mean_shape is not None
            else canonical_mean_shape(landmark_count)
        )

    def localize(self, image: np.ndarray, box: BoundingBox) -> SparseShape:
        scale = np.array([box.width, box.height])
        origin = np.array([box.x_min, box.y_min])
        return SparseShape(origin + self.mean_shape * scale)


class BlockMatchingFlow:
    """Exhaustive block-matching optical flow (SAD), dense per-pixel output."""

    def __init__(self, block_size: int = 8, search_radius: int = 7):
        if block_size < 1 or search_radius < 1:
            raise ContractViolation("block_size and search_radius must be positive")
        self.block_size = block_size
        self.search_radius = search_radius

    def estimate(self, image_a: np.ndarray, image_b: np.ndarray) -> np.ndarray:
        a = to_luma(np.asarray(image_a, dtype=np.float64))
        b = to_luma(np.asarray(image_b, dtype=np.float64))
        if a.shape != b.shape:
            raise ContractViolation(f"frame shapes differ: {a.shape} vs {b.shape}")
        h, w = a.shape
        bs, r = self.block_size, self.search_radius
        flow = np.zeros((h, w, 2))
        # candidate displacements ordered small-to-large so ties favour stillness
        candidates = sorted(
            ((dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)),
            key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]),
        )
        for by in range(0, h, bs):
            for bx in range(0, w, bs):
                y1, x1 = min(by + bs, h), min(bx + bs, w)
                block = a[by:y1, bx:x1]
                best = (np.inf, 0, 0)
                for dy, dx in candidates:
                    ty, tx = by + dy, bx + dx
                    if ty < 0 or tx < 0 or ty + (y1 - by) > h or tx + (x1 - bx) > w:
                        continue
                    sad = float(np.abs(b[ty : ty + y1 - by, tx : tx + x1 - bx] - block).sum())
                    if sad < best[0]:
                        best = (sad, dy, dx)
                flow[by:y1, bx:x1, 0] = best[1]
                flow[by:y1, bx:x1, 1] = best[2]
        return flow


def mean_flow_magnitude(flow: np.ndarray) -> float:
    """Mean per-pixel displacement magnitude of a (h, w, 2) flow field."""
    return float(np.sqrt(flow[..., 0] ** 2 + flow[..., 1] ** 2).mean())
