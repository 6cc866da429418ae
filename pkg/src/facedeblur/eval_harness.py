"""Evaluation protocols: synthetic-blur self-evaluation, simulated motion
blur from high-frame-rate clips, and scoring of external method outputs.

Self-evaluation blurs each sharp image with a per-image random Gaussian
kernel (plus optional additive noise, clipped into [0, 1]), runs the network
in EVAL mode, and reports PSNR/SSIM of both the blurred and the deblurred
image against the sharp original. Motion blur is simulated by averaging an
odd number of consecutive frames and treating the middle frame as ground
truth, keeping only windows with enough motion and a quality floor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolation
from .components import mean_flow_magnitude
from .imaging import (
    BlurConfig,
    ConvMode,
    Psi,
    blur,
    make_gaussian_kernel,
    read_image,
    validate_image,
)
from .metrics import MetricsReport, compare, psnr
from .network import Mode, NetArchitecture, ParamStore, forward, images_to_tensor, tensor_to_images
from .seeding import make_rng

_EVAL_TAG = 21

IMAGE_SUFFIXES = (".pgm", ".ppm", ".pnm", ".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass(frozen=True)
class SelfEvalConfig:
    """Blur model used by the self-evaluation protocol."""

    sigma_range: tuple[float, float] = (1.0, 2.0)
    kernel_size: int | None = None  # None: derived from sigma
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.sigma_range[0] <= 0 or self.sigma_range[0] > self.sigma_range[1]:
            raise ContractViolation(f"bad sigma_range {self.sigma_range}")


@dataclass(frozen=True)
class EvalRecord:
    """Per-item metrics; both reports score against the same ground truth."""

    item_id: str
    blurred: MetricsReport
    deblurred: MetricsReport


@dataclass(frozen=True)
class EvalFailure:
    item_id: str
    error: str


@dataclass(frozen=True)
class EvalSummary:
    records: tuple[EvalRecord, ...]
    failures: tuple[EvalFailure, ...]
    mean_psnr_blurred: float
    mean_ssim_blurred: float
    mean_psnr_deblurred: float
    mean_ssim_deblurred: float

    def to_text(self) -> str:
        rows = [
            ("Blurred", self.mean_psnr_blurred, self.mean_ssim_blurred),
            ("Deblurred", self.mean_psnr_deblurred, self.mean_ssim_deblurred),
        ]
        table = format_metric_table(rows, first_column="Image type")
        if self.failures:
            table += f"(excluded {len(self.failures)} failed item(s))\n"
        return table


def _summarize(records: list[EvalRecord], failures: list[EvalFailure]) -> EvalSummary:
    def mean(values):
        return float(np.mean(values)) if values else math.nan

    return EvalSummary(
        records=tuple(records),
        failures=tuple(failures),
        mean_psnr_blurred=mean([r.blurred.psnr for r in records]),
        mean_ssim_blurred=mean([r.blurred.ssim for r in records]),
        mean_psnr_deblurred=mean([r.deblurred.psnr for r in records]),
        mean_ssim_deblurred=mean([r.deblurred.ssim for r in records]),
    )


def deblur_image(image: np.ndarray, store: ParamStore, arch: NetArchitecture) -> np.ndarray:
    """Run one image through the network in EVAL mode, clamped to [0, 1]."""
    batch = images_to_tensor([image])
    out = forward(store, arch, batch, Mode.EVAL)
    return np.clip(tensor_to_images(out)[0], 0.0, 1.0)


def synthetic_blur(sharp: np.ndarray, cfg: SelfEvalConfig, seed: int, index: int) -> np.ndarray:
    """The per-item blur the self-evaluation applies: a seeded random-sigma
    Gaussian kernel, optional noise, clipped into [0, 1]."""
    rng = make_rng(seed, _EVAL_TAG, index)
    sigma = rng.uniform(*cfg.sigma_range)
    size = cfg.kernel_size or 2 * math.ceil(3.0 * sigma) + 1
    max_side = min(sharp.shape[0], sharp.shape[1])
    size = min(size, max_side if max_side % 2 == 1 else max_side - 1)
    kernel = make_gaussian_kernel(sigma, size)
    blur_cfg = BlurConfig(
        noise_sigma=cfg.noise_sigma, psi=Psi.CLIP,
        conv_mode=ConvMode.SAME, rng_seed=int(rng.integers(0, 2**63)),
    )
    return blur(sharp, kernel, blur_cfg)


def self_evaluation(sharp_set, store: ParamStore, arch: NetArchitecture,
                    cfg: SelfEvalConfig = SelfEvalConfig(), seed: int = 0,
                    preprocess=None, item_ids=None) -> EvalSummary:
    """Blur, deblur, and score every sharp image; aggregate arithmetic means.

    A failed item is recorded with its error and excluded from the means.
    ``preprocess`` (image -> image), when given, is applied to the blurred
    image before deblurring and to the sharp image before scoring, so both
    reports stay aligned to the same ground truth.
    """
    records: list[EvalRecord] = []
    failures: list[EvalFailure] = []
    for idx, sharp in enumerate(sharp_set):
        item_id = str(item_ids[idx]) if item_ids is not None else f"item{idx:04d}"
        try:
            sharp = validate_image(sharp)
            blurred = synthetic_blur(sharp, cfg, seed, idx)
            if preprocess is not None:
                sharp = preprocess(sharp)
                blurred = preprocess(blurred)
            deblurred = deblur_image(blurred, store, arch)
            records.append(
                EvalRecord(item_id, compare(sharp, blurred), compare(sharp, deblurred))
            )
        except Exception as exc:  # noqa: BLE001 - per-item isolation is the contract
            failures.append(EvalFailure(item_id, f"{type(exc).__name__}: {exc}"))
    return _summarize(records, failures)


def write_eval_csv(path: str | Path, summary: EvalSummary) -> None:
    """`id,psnr_blurred,ssim_blurred,psnr_deblurred,ssim_deblurred` records."""
    lines = ["id,psnr_blurred,ssim_blurred,psnr_deblurred,ssim_deblurred"]
    for r in summary.records:
        lines.append(
            f"{r.item_id},{r.blurred.psnr},{r.blurred.ssim},{r.deblurred.psnr},{r.deblurred.ssim}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Simulated motion blur
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimBlurConfig:
    """Window size must be odd so a unique middle (ground-truth) frame exists.

    ``min_pair_motion`` and ``min_psnr_keep`` may be None to disable the
    corresponding retention gate."""

    frames_to_average: int = 7
    min_pair_motion: float | None = 1.0
    min_psnr_keep: float | None = 15.0

    def __post_init__(self):
        if self.frames_to_average % 2 == 0 or not 7 <= self.frames_to_average <= 11:
            raise ContractViolation(
                f"frames_to_average must be odd and in [7, 11], got {self.frames_to_average}"
            )
        if self.min_pair_motion is not None and self.min_pair_motion <= 0:
            raise ContractViolation(f"min_pair_motion must be > 0, got {self.min_pair_motion}")


@dataclass(frozen=True)
class SimulatedPair:
    blurred: np.ndarray
    ground_truth: np.ndarray
    start_index: int
    pair_motions: tuple[float, ...]
    psnr_gt_vs_blurred: float


def simulate_motion_blur(frames, cfg: SimBlurConfig, flow) -> list[SimulatedPair]:
    """Average non-overlapping windows of consecutive frames into blurred
    test images, with the window's middle frame as ground truth.

    A window is dropped when any consecutive pair moves less than
    ``min_pair_motion`` (mean per-pixel flow magnitude) or when the PSNR of
    the blurred image against the ground truth falls below ``min_psnr_keep``.
    """
    frames = [validate_image(f) for f in frames]
    w = cfg.frames_to_average
    if len(frames) < w:
        raise ContractViolation(f"need at least {w} frames, got {len(frames)}")
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ContractViolation(f"frame dimensions must be uniform, got {sorted(shapes)}")
    pairs: list[SimulatedPair] = []
    for start in range(0, len(frames) - w + 1, w):
        window = frames[start : start + w]
        motions = tuple(
            mean_flow_magnitude(flow.estimate(a, b)) for a, b in zip(window, window[1:])
        )
        if cfg.min_pair_motion is not None and any(m < cfg.min_pair_motion for m in motions):
            continue
        blurred = np.mean(window, axis=0)
        ground_truth = window[w // 2].copy()
        quality = psnr(ground_truth, blurred)
        if cfg.min_psnr_keep is not None and quality < cfg.min_psnr_keep:
            continue
        pairs.append(SimulatedPair(blurred, ground_truth, start, motions, quality))
    return pairs


# ---------------------------------------------------------------------------
# Scoring external method outputs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MethodScore:
    method: str
    mean_psnr: float
    mean_ssim: float
    matched: int
    unmatched: tuple[str, ...]


def list_image_files(directory: str | Path) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise ContractViolation(f"{directory} is not a directory")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def score_external(outputs_dir: str | Path, ground_truth_dir: str | Path) -> list[MethodScore]:
    """Mean PSNR/SSIM per method directory against filename-matched truth.

    ``outputs_dir`` either contains one subdirectory per method or is itself
    a single method's directory. Files pair up by stem; unmatched outputs are
    listed and excluded.
    """
    outputs_dir = Path(outputs_dir)
    truth = {p.stem: p for p in list_image_files(ground_truth_dir)}
    method_dirs = sorted(d for d in outputs_dir.iterdir() if d.is_dir())
    if not method_dirs:
        method_dirs = [outputs_dir]
    scores = []
    for mdir in method_dirs:
        psnrs, ssims, unmatched = [], [], []
        for out_path in list_image_files(mdir):
            gt_path = truth.get(out_path.stem)
            if gt_path is None:
                unmatched.append(out_path.name)
                continue
            report = compare(read_image(gt_path), read_image(out_path))
            psnrs.append(report.psnr)
            ssims.append(report.ssim)
        scores.append(
            MethodScore(
                method=mdir.name,
                mean_psnr=float(np.mean(psnrs)) if psnrs else math.nan,
                mean_ssim=float(np.mean(ssims)) if ssims else math.nan,
                matched=len(psnrs),
                unmatched=tuple(unmatched),
            )
        )
    return scores


def format_metric_table(rows, first_column: str = "Method") -> str:
    """Aligned text table of (name, psnr, ssim) rows."""
    header = (first_column, "PSNR", "SSIM")
    body = [(name, f"{p:.3f}", f"{s:.3f}") for name, p, s in rows]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(3)]
    lines = []
    for row in [header] + body:
        lines.append("  ".join(val.ljust(widths[i]) for i, val in enumerate(row)).rstrip())
    return "\n".join(lines) + "\n"


def format_score_table(scores: list[MethodScore]) -> str:
    return format_metric_table([(s.method, s.mean_psnr, s.mean_ssim) for s in scores])


def comparison_grid(ground_truth: np.ndarray, blurred: np.ndarray,
                    deblurred: np.ndarray, gap: int = 2) -> np.ndarray:
    """Side-by-side GT | blurred | deblurred composite with white separators."""
    panels = [validate_image(p) for p in (ground_truth, blurred, deblurred)]
    shapes = {p.shape for p in panels}
    if len(shapes) != 1:
        raise ContractViolation(f"panels must share a shape, got {sorted(shapes)}")
    if panels[0].ndim == 3:
        sep = np.ones((panels[0].shape[0], gap, 3))
    else:
        sep = np.ones((panels[0].shape[0], gap))
    parts = [panels[0], sep, panels[1], sep, panels[2]]
    return np.concatenate(parts, axis=1)
