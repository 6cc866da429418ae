"""Video frame mining: detect, track, audit overlap, filter fits, gate motion.

One video is processed at a time. A detector seeds a model-free tracker from
the first frame; every frame is then tracked and landmark-localized, a
fitting classifier keeps or drops the frame, and two whole-video gates run
afterwards: the tracker box must overlap the detector box by more than the
overlap threshold in at least the configured fraction of frames, and the
accepted frames must show real motion. A per-frame decision ledger records
everything for offline audit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .components import mean_flow_magnitude
from .errors import ContractViolation
from .geometry import BoundingBox, SparseShape, iou
from .imaging import bilinear_resize, validate_image

REASON_NO_INITIAL_DETECTION = "no initial detection"
REASON_OVERLAP = "tracker/detector overlap below required fraction"
REASON_TOO_FEW_ACCEPTED = "fewer than two accepted frames, motion cannot be checked"
REASON_MOTION = "motion gate failed"


@dataclass(frozen=True)
class MiningConfig:
    overlap_threshold: float = 0.5
    min_frames_fraction: float = 0.5
    min_avg_motion: float = 1.0
    # literal reading of the motion rule: discard clips whose motion is ABOVE
    # the threshold instead of below it
    discard_moving: bool = False

    def __post_init__(self):
        if not 0.0 <= self.overlap_threshold <= 1.0:
            raise ContractViolation(f"overlap_threshold must be in [0,1], got {self.overlap_threshold}")
        if not 0.0 <= self.min_frames_fraction <= 1.0:
            raise ContractViolation(f"min_frames_fraction must be in [0,1], got {self.min_frames_fraction}")
        if self.min_avg_motion <= 0:
            raise ContractViolation(f"min_avg_motion must be > 0, got {self.min_avg_motion}")


@dataclass(frozen=True)
class ComponentSet:
    """The four pluggable pieces the pipeline drives."""

    detector: object
    tracker: object
    landmark_localizer: object
    optical_flow: object

    def __post_init__(self):
        missing = [
            name
            for name in ("detector", "tracker", "landmark_localizer", "optical_flow")
            if getattr(self, name) is None
        ]
        if missing:
            raise ContractViolation(f"component set incomplete, missing: {missing}")


@dataclass
class FrameRecord:
    frame_index: int
    detected: bool
    detector_box: BoundingBox | None
    tracker_box: BoundingBox
    overlap: float | None
    fitting_accepted: bool
    flow_magnitude: float | None = None

    def to_json(self) -> str:
        def box(b):
            return list(b.as_tuple()) if b is not None else None

        return json.dumps(
            {
                "frame_index": self.frame_index,
                "detected": self.detected,
                "detector_box": box(self.detector_box),
                "tracker_box": box(self.tracker_box),
                "overlap": self.overlap,
                "fitting_accepted": self.fitting_accepted,
                "flow_magnitude": self.flow_magnitude,
            }
        )


@dataclass
class MiningResult:
    accepted_frames: list[int] = field(default_factory=list)
    landmarks: list[SparseShape] = field(default_factory=list)
    records: list[FrameRecord] = field(default_factory=list)
    video_accepted: bool = False
    rejection_reason: str | None = None


def motion_gate(frames, flow, min_avg_motion: float, discard_moving: bool = False) -> bool:
    """Whether a clip shows enough frame-to-frame movement to keep.

    The score is the mean (over consecutive pairs) of the mean per-pixel
    displacement magnitude. With ``discard_moving`` the comparison flips:
    clips moving more than the threshold fail instead.
    """
    frames = list(frames)
    if len(frames) < 2:
        raise ContractViolation(f"motion gate needs >= 2 frames, got {len(frames)}")
    if min_avg_motion <= 0:
        raise ContractViolation(f"min_avg_motion must be > 0, got {min_avg_motion}")
    magnitudes = [
        mean_flow_magnitude(flow.estimate(a, b)) for a, b in zip(frames, frames[1:])
    ]
    score = float(np.mean(magnitudes))
    if discard_moving:
        return score <= min_avg_motion
    return score >= min_avg_motion


def run_pipeline(frames, components: ComponentSet, fitting_classifier,
                 cfg: MiningConfig = MiningConfig()) -> MiningResult:
    """Run the whole mining state machine over one video's frames.

    Faithful to the mining pseudocode: the tracker box is seeded from the
    best first-frame detection and never re-initialized; the overlap counter
    increments when a frame has a detection whose IoU with the tracker box
    exceeds the threshold; frames are kept iff the fitting classifier accepts
    the localized landmarks. The video is rejected outright when the first
    frame has no detection, when cnt_over < M * min_frames_fraction (strict),
    or when the accepted frames fail the motion gate. A rejected video yields
    empty frame/landmark lists but keeps the full per-frame ledger.
    """
    frames = list(frames)
    if not frames:
        raise ContractViolation("run_pipeline needs at least one frame")
    result = MiningResult()

    faces = components.detector.detect(frames[0])
    if len(faces) == 0:
        result.rejection_reason = REASON_NO_INITIAL_DETECTION
        return result

    bb = faces[0]
    cnt_over = 0
    accepted_frames: list[int] = []
    accepted_landmarks: list[SparseShape] = []
    for idx, frame in enumerate(frames):
        frame_faces = components.detector.detect(frame)
        bb = components.tracker.track(frame, bb)
        overlap = None
        if len(frame_faces) > 0:
            overlap = iou(frame_faces[0], bb)
            if overlap > cfg.overlap_threshold:
                cnt_over += 1
        shape = components.landmark_localizer.localize(frame, bb)
        accepted = bool(fitting_classifier.accepts(frame, shape))
        if accepted:
            accepted_frames.append(idx)
            accepted_landmarks.append(shape)
        result.records.append(
            FrameRecord(
                frame_index=idx,
                detected=len(frame_faces) > 0,
                detector_box=frame_faces[0] if frame_faces else None,
                tracker_box=bb,
                overlap=overlap,
                fitting_accepted=accepted,
            )
        )

    if cnt_over < len(frames) * cfg.min_frames_fraction:
        result.rejection_reason = REASON_OVERLAP
        return result

    if len(accepted_frames) < 2:
        result.rejection_reason = REASON_TOO_FEW_ACCEPTED
        return result
    kept_images = [frames[i] for i in accepted_frames]
    magnitudes = [
        mean_flow_magnitude(components.optical_flow.estimate(a, b))
        for a, b in zip(kept_images, kept_images[1:])
    ]
    by_index = {accepted_frames[k + 1]: magnitudes[k] for k in range(len(magnitudes))}
    for record in result.records:
        if record.frame_index in by_index:
            record.flow_magnitude = by_index[record.frame_index]
    score = float(np.mean(magnitudes))
    moving_enough = score <= cfg.min_avg_motion if cfg.discard_moving else score >= cfg.min_avg_motion
    if not moving_enough:
        result.rejection_reason = REASON_MOTION
        return result

    result.accepted_frames = accepted_frames
    result.landmarks = accepted_landmarks
    result.video_accepted = True
    return result


def preprocess_face(frame: np.ndarray, shape: SparseShape, target_size: int,
                    margin: float = 0.0) -> np.ndarray:
    """Crop the margin-expanded landmark box (clamped to the frame) and
    rescale it to target_size x target_size with bilinear interpolation.
    No warping or rotation is applied."""
    img = validate_image(frame)
    if target_size < 1:
        raise ContractViolation(f"target_size must be positive, got {target_size}")
    if margin < 0:
        raise ContractViolation(f"margin must be >= 0, got {margin}")
    h, w = img.shape[:2]
    box = shape.bounding_box()
    dx, dy = margin * box.width, margin * box.height
    x_lo, x_hi = box.x_min - dx, box.x_max + dx
    y_lo, y_hi = box.y_min - dy, box.y_max + dy
    x0 = max(int(np.floor(x_lo)), 0)
    y0 = max(int(np.floor(y_lo)), 0)
    x1 = min(int(np.floor(x_hi)) + 1, w)
    y1 = min(int(np.floor(y_hi)) + 1, h)
    if x1 <= x0 or y1 <= y0:
        raise ContractViolation(
            f"landmark box ({x_lo:.1f}, {y_lo:.1f}, {x_hi:.1f}, {y_hi:.1f}) "
            f"lies outside the {h}x{w} frame"
        )
    crop = img[y0:y1, x0:x1]
    return bilinear_resize(crop, target_size, target_size)


# ---------------------------------------------------------------------------
# Manifest / ledger files
# ---------------------------------------------------------------------------


def write_manifest(path: str | Path, result: MiningResult) -> None:
    """One text line per accepted frame: index then x y pairs in point order."""
    lines = []
    for idx, shape in zip(result.accepted_frames, result.landmarks):
        coords = " ".join("%.17g" % v for v in shape.points.reshape(-1))
        lines.append(f"{idx} {coords}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_manifest(path: str | Path) -> list[tuple[int, SparseShape]]:
    entries = []
    for raw in Path(path).read_text().splitlines():
        if not raw.strip():
            continue
        parts = raw.split()
        coords = np.array(parts[1:], dtype=np.float64)
        if coords.size % 2 != 0:
            raise ContractViolation(f"{path}: odd coordinate count on line {raw!r}")
        entries.append((int(parts[0]), SparseShape(coords.reshape(-1, 2))))
    return entries


def write_ledger(path: str | Path, result: MiningResult) -> None:
    """One JSON record per processed frame."""
    Path(path).write_text("".join(rec.to_json() + "\n" for rec in result.records))


def summary_text(result: MiningResult) -> str:
    lines = [
        f"video_accepted: {str(result.video_accepted).lower()}",
        f"frames_processed: {len(result.records)}",
        f"frames_accepted: {len(result.accepted_frames)}",
    ]
    if result.rejection_reason:
        lines.append(f"rejection_reason: {result.rejection_reason}")
    return "\n".join(lines) + "\n"
