"""Training-pair synthesis and the SGD training loop.

Each consumed sharp image gets its own randomly drawn blur kernel — a fair
coin picks Gaussian or straight-line motion, with the kernel parameters drawn
uniformly from configured intervals — and the blurry input is the SAME-mode
convolution of the sharp image with that kernel. Optimization is plain SGD
with a stepwise-halving learning-rate schedule. Everything is deterministic
given the config seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ContractViolation
from .imaging import BlurConfig, ConvMode, Psi, blur, make_gaussian_kernel, make_motion_kernel
from .network import (
    NetArchitecture,
    ParamStore,
    backward,
    images_to_tensor,
    init_params,
    save_checkpoint,
)
from .seeding import make_rng

_PAIR_TAG = 1
_SHUFFLE_TAG = 2
_PATTERN_TAG = 3


@dataclass(frozen=True)
class TrainingPair:
    blurry: np.ndarray
    sharp: np.ndarray
    kernel: np.ndarray  # retained for diagnostics


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for pair synthesis and the SGD schedule.

    learning_rate(step) = lr_initial * lr_decay_factor ** (step // lr_decay_every).
    ``gaussian_size`` of None derives the kernel side from sigma (about three
    standard deviations each way). With ``single_pass`` every sharp image is
    consumed at most once, mirroring one-epoch training.
    """

    batch_size: int = 16
    lr_initial: float = 0.0003
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 15000
    max_steps: int = 1000
    single_pass: bool = True
    seed: int = 0
    sigma_range: tuple[float, float] = (0.5, 3.0)
    motion_length_range: tuple[int, int] = (3, 11)
    gaussian_size: int | None = None
    noise_sigma: float = 0.0
    kernel_family: str = "both"  # "both" (fair coin), "gaussian", or "motion"
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractViolation(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_initial <= 0:
            raise ContractViolation(f"lr_initial must be > 0, got {self.lr_initial}")
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise ContractViolation(
                f"lr_decay_factor must lie in (0, 1), got {self.lr_decay_factor}"
            )
        if self.lr_decay_every < 1:
            raise ContractViolation("lr_decay_every must be a positive step count")
        if self.max_steps < 0:
            raise ContractViolation("max_steps must be >= 0")
        if self.sigma_range[0] <= 0 or self.sigma_range[0] > self.sigma_range[1]:
            raise ContractViolation(f"bad sigma_range {self.sigma_range}")
        if self.motion_length_range[0] < 1 or self.motion_length_range[0] > self.motion_length_range[1]:
            raise ContractViolation(f"bad motion_length_range {self.motion_length_range}")
        if self.kernel_family not in ("both", "gaussian", "motion"):
            raise ContractViolation(f"unknown kernel_family {self.kernel_family!r}")


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Stepwise exponential decay; exact closed form for any step."""
    if step < 0:
        raise ContractViolation(f"step must be >= 0, got {step}")
    return cfg.lr_initial * cfg.lr_decay_factor ** (step // cfg.lr_decay_every)


def _odd_capped(size: int, limit: int) -> int:
    size = min(size, limit)
    return size if size % 2 == 1 else size - 1


def make_pair(sharp: np.ndarray, cfg: TrainConfig, draw_index: int) -> TrainingPair:
    """Blur one sharp image with a freshly drawn kernel.

    The kernel family is a fair coin flip; Gaussian sigma and motion length
    come from the configured intervals. Deterministic per (cfg.seed,
    draw_index). Kernel sides are capped to fit the image.
    """
    sharp = np.asarray(sharp, dtype=np.float64)
    rng = make_rng(cfg.seed, _PAIR_TAG, draw_index)
    min_side = min(sharp.shape[0], sharp.shape[1])
    if cfg.kernel_family == "both":
        gaussian = rng.random() < 0.5
    else:
        gaussian = cfg.kernel_family == "gaussian"
    if gaussian:
        sigma = rng.uniform(*cfg.sigma_range)
        size = cfg.gaussian_size or 2 * math.ceil(3.0 * sigma) + 1
        kernel = make_gaussian_kernel(sigma, _odd_capped(size, min_side))
    else:
        length = int(rng.integers(cfg.motion_length_range[0], cfg.motion_length_range[1] + 1))
        angle = rng.uniform(0.0, math.pi)
        if length % 2 == 0 and length + 1 > min_side:
            length -= 1  # keep the derived odd side within the image
        kernel = make_motion_kernel(min(length, min_side), angle)
    noise_seed = int(rng.integers(0, 2**63))
    blur_cfg = BlurConfig(
        noise_sigma=cfg.noise_sigma, psi=Psi.IDENTITY,
        conv_mode=ConvMode.SAME, rng_seed=noise_seed,
    )
    return TrainingPair(blurry=blur(sharp, kernel, blur_cfg), sharp=sharp, kernel=kernel)


def plan_batches(cfg: TrainConfig, dataset_size: int) -> list[list[int]]:
    """Image indices consumed by each step, after the seeded shuffle.

    Single-pass mode never repeats an index; otherwise fresh shuffles are
    appended (dropping ragged epoch tails) until max_steps batches exist.
    """
    if dataset_size < cfg.batch_size:
        raise ContractViolation(
            f"dataset of {dataset_size} images is smaller than one batch of {cfg.batch_size}"
        )
    rng = make_rng(cfg.seed, _SHUFFLE_TAG)
    batches: list[list[int]] = []
    per_epoch = dataset_size // cfg.batch_size
    while len(batches) < cfg.max_steps:
        order = rng.permutation(dataset_size)
        for b in range(per_epoch):
            if len(batches) == cfg.max_steps:
                break
            batches.append(order[b * cfg.batch_size : (b + 1) * cfg.batch_size].tolist())
        if cfg.single_pass:
            break
    return batches


def train(dataset, arch: NetArchitecture, cfg: TrainConfig, initial_store: ParamStore | None = None):
    """SGD over synthesized pairs: theta <- theta - lr(step) * grad.

    Returns (ParamStore, history) where history holds (step, loss, lr)
    tuples. Deterministic end to end for a fixed (dataset, arch, cfg).
    ``initial_store`` resumes or warm-starts training; the default is a fresh
    seeded initialization.
    """
    if len(dataset) < cfg.batch_size:
        raise ContractViolation(
            f"dataset of {len(dataset)} images is smaller than one batch of {cfg.batch_size}"
        )
    store = initial_store if initial_store is not None else init_params(arch, cfg.seed)
    batches = plan_batches(cfg, len(dataset))
    history: list[tuple[int, float, float]] = []
    log_fh = open(cfg.log_path, "a") if cfg.log_path else None
    try:
        draw_counter = 0
        for step, indices in enumerate(batches):
            pairs = []
            for i in indices:
                pairs.append(make_pair(dataset[i], cfg, draw_index=draw_counter))
                draw_counter += 1
            x = images_to_tensor([p.blurry for p in pairs])
            target = images_to_tensor([p.sharp for p in pairs])
            loss = backward(store, arch, x, target)
            lr = learning_rate(cfg, step)
            for name, value in store.params.items():
                value -= lr * store.grads[name]
            history.append((step, loss, lr))
            if log_fh:
                log_fh.write(f"{step} {loss:.10g} {lr:.10g}\n")
            if cfg.checkpoint_every and cfg.checkpoint_path and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(cfg.checkpoint_path, store, arch, seed=cfg.seed)
    finally:
        if log_fh:
            log_fh.close()
    return store, history


def identity_start_params(arch: NetArchitecture, seed: int) -> ParamStore:
    """Seeded initialization with the head convolution zeroed.

    For an architecture with ``input_skip`` the network then starts out as
    the identity function, so SGD begins from "output equals the blurry
    input" rather than from random outputs."""
    store = init_params(arch, seed)
    store.params["head.w"][...] = 0.0
    store.params["head.b"][...] = 0.0
    return store


# ---------------------------------------------------------------------------
# Synthetic sharp patterns for desk-scale runs (edges matter for deblurring)
# ---------------------------------------------------------------------------


def generate_patterns(count: int, size: int = 32, seed: int = 0) -> list[np.ndarray]:
    """Grayscale test patterns with crisp structure: rectangles, disks,
    checkerboards, stripes, and blob scenes, cycled per index."""
    patterns = []
    for idx in range(count):
        rng = make_rng(seed, _PATTERN_TAG, idx)
        kind = idx % 5
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        img = np.full((size, size), rng.uniform(0.1, 0.4))
        if kind == 0:
            for _ in range(rng.integers(3, 7)):
                y0, x0 = rng.integers(0, size - 4, size=2)
                hgt, wdt = rng.integers(3, size // 2, size=2)
                img[y0 : y0 + hgt, x0 : x0 + wdt] = rng.uniform(0.0, 1.0)
        elif kind == 1:
            for _ in range(rng.integers(2, 5)):
                cy, cx = rng.uniform(4, size - 4, size=2)
                r = rng.uniform(2, size / 4)
                img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = rng.uniform(0.0, 1.0)
        elif kind == 2:
            cell = int(rng.integers(2, 6))
            phase = rng.integers(0, cell, size=2)
            board = (((yy + phase[0]) // cell + (xx + phase[1]) // cell) % 2).astype(bool)
            lo, hi = sorted(rng.uniform(0.0, 1.0, size=2))
            img = np.where(board, hi, lo)
        elif kind == 3:
            angle = rng.uniform(0, math.pi)
            freq = rng.uniform(0.3, 1.2)
            coord = xx * math.cos(angle) + yy * math.sin(angle)
            lo, hi = sorted(rng.uniform(0.0, 1.0, size=2))
            img = np.where((coord * freq) % 2 < 1, hi, lo)
        else:
            img = rng.uniform(0.2, 0.8) + 0.3 * np.sin(xx / rng.uniform(2, 6))
            for _ in range(3):
                cy, cx = rng.uniform(2, size - 2, size=2)
                r = rng.uniform(1.5, 4)
                img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = rng.uniform(0.0, 1.0)
        patterns.append(np.clip(img, 0.0, 1.0))
    return patterns


# ---------------------------------------------------------------------------
# Plain-text configuration files: `key = value` lines mirroring TrainConfig
# ---------------------------------------------------------------------------

_RANGE_KEYS = {"sigma_range", "motion_length_range"}
_INT_KEYS = {"batch_size", "lr_decay_every", "max_steps", "seed", "gaussian_size", "checkpoint_every"}
_FLOAT_KEYS = {"lr_initial", "lr_decay_factor", "noise_sigma"}
_BOOL_KEYS = {"single_pass"}
_STR_KEYS = {"checkpoint_path", "log_path", "kernel_family"}


def parse_train_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    """Build a TrainConfig from `key = value` lines ('#' starts a comment)."""
    cfg = base or TrainConfig()
    overrides: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractViolation(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in _RANGE_KEYS:
            lo, hi = (v.strip() for v in value.split(","))
            if key == "motion_length_range":
                overrides[key] = (int(lo), int(hi))
            else:
                overrides[key] = (float(lo), float(hi))
        elif key in _INT_KEYS:
            overrides[key] = None if value.lower() == "none" else int(value)
        elif key in _FLOAT_KEYS:
            overrides[key] = float(value)
        elif key in _BOOL_KEYS:
            overrides[key] = value.lower() in ("1", "true", "yes", "on")
        elif key in _STR_KEYS:
            overrides[key] = None if value.lower() == "none" else value
        else:
            raise ContractViolation(f"{path}:{lineno}: unknown config key {key!r}")
    return replace(cfg, **overrides)
