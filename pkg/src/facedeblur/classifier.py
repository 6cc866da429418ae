"""Fitting classifier: accepts or rejects a landmark fit on a frame.

A fit is described by gradient-orientation histograms of fixed-size patches
around every landmark (so the decision is invariant to constant intensity
offsets), and scored by a linear SVM trained with hinge-loss subgradient
descent. Negatives are synthesized from the positives by Gaussian landmark
perturbation plus random shapes placed over unrelated background textures.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .components import canonical_mean_shape
from .errors import ContractViolation
from .geometry import SparseShape
from .metrics import to_luma
from .seeding import make_rng

_NEG_PERTURB_TAG = 11
_NEG_BACKGROUND_TAG = 12
_CV_TAG = 13


@dataclass(frozen=True)
class DescriptorParams:
    """Patch geometry of the per-landmark descriptor."""

    patch_side: int = 16
    cell_grid: int = 4
    orientation_bins: int = 8

    def __post_init__(self):
        if self.patch_side % self.cell_grid != 0:
            raise ContractViolation(
                f"patch_side {self.patch_side} must be divisible by cell_grid {self.cell_grid}"
            )

    @property
    def length_per_landmark(self) -> int:
        return self.cell_grid * self.cell_grid * self.orientation_bins


def shape_descriptor(image: np.ndarray, shape: SparseShape,
                     params: DescriptorParams = DescriptorParams()) -> np.ndarray:
    """Concatenated per-landmark orientation histograms (L2-normalized per patch)."""
    gray = to_luma(np.asarray(image, dtype=np.float64))
    h, w = gray.shape
    side = params.patch_side
    if h < side or w < side:
        raise ContractViolation(f"image {h}x{w} smaller than descriptor patch {side}x{side}")
    gy, gx = np.gradient(gray)
    mag = np.hypot(gy, gx)
    bins = params.orientation_bins
    ori = np.arctan2(gy, gx)  # [-pi, pi]
    bin_idx = np.minimum((ori + np.pi) / (2 * np.pi) * bins, bins - 1).astype(np.int64)

    cell = side // params.cell_grid
    pix_cell = np.arange(side) // cell
    cell_of_pixel = pix_cell[:, None] * params.cell_grid + pix_cell[None, :]
    descriptor = []
    for x, y in shape.points:
        x0 = min(max(int(round(x)) - side // 2, 0), w - side)
        y0 = min(max(int(round(y)) - side // 2, 0), h - side)
        m = mag[y0 : y0 + side, x0 : x0 + side]
        b = bin_idx[y0 : y0 + side, x0 : x0 + side]
        keys = cell_of_pixel * bins + b
        hist = np.bincount(keys.ravel(), weights=m.ravel(),
                           minlength=params.length_per_landmark)
        descriptor.append(hist / (np.linalg.norm(hist) + 1e-9))
    return np.concatenate(descriptor)


@dataclass
class FittingClassifier:
    """Linear decision over shape descriptors; accept iff score >= threshold."""

    params: DescriptorParams
    landmark_count: int
    weights: np.ndarray
    bias: float
    threshold: float = 0.0

    def __post_init__(self):
        expected = self.landmark_count * self.params.length_per_landmark
        if self.weights.shape != (expected,):
            raise ContractViolation(
                f"weight vector has {self.weights.shape[0]} entries, expected {expected}"
            )

    def decision_value(self, image: np.ndarray, shape: SparseShape) -> float:
        if len(shape) != self.landmark_count:
            raise ContractViolation(
                f"shape has {len(shape)} landmarks, classifier expects {self.landmark_count}"
            )
        features = shape_descriptor(image, shape, self.params)
        return float(features @ self.weights + self.bias)

    def accepts(self, image: np.ndarray, shape: SparseShape) -> bool:
        return self.decision_value(image, shape) >= self.threshold

    def save(self, path: str | Path) -> None:
        lines = [
            "facedeblur-classifier 1",
            f"patch_side {self.params.patch_side}",
            f"cell_grid {self.params.cell_grid}",
            f"orientation_bins {self.params.orientation_bins}",
            f"landmark_count {self.landmark_count}",
            f"bias {self.bias!r}",
            f"threshold {self.threshold!r}",
            "weights " + " ".join("%.17g" % v for v in self.weights),
        ]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "FittingClassifier":
        fields = {}
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            key, value = line.split(" ", 1)
            fields[key] = value
        if fields.get("facedeblur-classifier") != "1":
            raise ContractViolation(f"{path}: not a classifier file")
        params = DescriptorParams(
            patch_side=int(fields["patch_side"]),
            cell_grid=int(fields["cell_grid"]),
            orientation_bins=int(fields["orientation_bins"]),
        )
        return cls(
            params=params,
            landmark_count=int(fields["landmark_count"]),
            weights=np.array(fields["weights"].split(), dtype=np.float64),
            bias=float(fields["bias"]),
            threshold=float(fields["threshold"]),
        )


class AcceptAllClassifier:
    """Permissive stand-in implementing the classifier interface."""

    def accepts(self, image, shape) -> bool:
        return True


def _pegasos(features: np.ndarray, labels: np.ndarray, lam: float,
             iterations: int = 500) -> np.ndarray:
    """Full-batch hinge-loss subgradient descent with the usual 1/(lam*t)
    step size and norm projection. Deterministic."""
    m, d = features.shape
    w = np.zeros(d)
    radius = 1.0 / np.sqrt(lam)
    for t in range(1, iterations + 1):
        eta = 1.0 / (lam * t)
        margins = labels * (features @ w)
        violators = margins < 1.0
        grad = lam * w - (labels[violators, None] * features[violators]).sum(axis=0) / m
        w = w - eta * grad
        norm = np.linalg.norm(w)
        if norm > radius:
            w *= radius / norm
    return w


def _make_background_negatives(positives, count, params, rng):
    """Random shapes dropped over unrelated noise textures."""
    samples = []
    mean_shape = canonical_mean_shape(len(positives[0][1]))
    for k in range(count):
        ref_img, _ = positives[k % len(positives)]
        gray = to_luma(np.asarray(ref_img, dtype=np.float64))
        h, w = gray.shape
        background = rng.uniform(0.0, 1.0, size=(h, w))
        side = rng.uniform(0.3, 0.8) * min(h, w)
        ox = rng.uniform(0, max(w - side, 1))
        oy = rng.uniform(0, max(h - side, 1))
        shape = SparseShape(np.array([ox, oy]) + mean_shape * side)
        samples.append((background, shape))
    return samples


def train_fitting_classifier(
    positives,
    perturbation_sigma: float = 0.15,
    negatives_seed: int = 0,
    params: DescriptorParams = DescriptorParams(),
    lambda_grid: tuple[float, ...] = (1e-4, 1e-3, 1e-2, 1e-1),
    cv_folds: int = 5,
    iterations: int = 500,
) -> FittingClassifier:
    """Train the accept/reject SVM from positive (image, shape) samples.

    Negatives: one Gaussian-perturbed copy of every positive shape (std =
    perturbation_sigma * face size) plus half as many random shapes over
    noise backgrounds. The regularization constant is picked by k-fold
    cross-validation over ``lambda_grid``; the final model is refit on all
    samples and thresholded at decision value 0.
    """
    positives = list(positives)
    if len(positives) < 50:
        raise ContractViolation(f"need >= 50 positive samples, got {len(positives)}")
    if perturbation_sigma <= 0:
        raise ContractViolation("perturbation_sigma must be > 0")
    n_landmarks = len(positives[0][1])
    for _, shape in positives:
        if len(shape) != n_landmarks:
            raise ContractViolation("all positive shapes must have the same landmark count")

    rng_perturb = make_rng(negatives_seed, _NEG_PERTURB_TAG)
    negatives = []
    for image, shape in positives:
        std = perturbation_sigma * shape.face_size()
        jitter = rng_perturb.normal(0.0, std, size=shape.points.shape)
        negatives.append((image, SparseShape(shape.points + jitter)))
    rng_bg = make_rng(negatives_seed, _NEG_BACKGROUND_TAG)
    negatives += _make_background_negatives(positives, len(positives) // 2, params, rng_bg)

    samples = positives + negatives
    labels = np.array([1.0] * len(positives) + [-1.0] * len(negatives))
    features = np.stack([shape_descriptor(img, shp, params) for img, shp in samples])

    mean = features.mean(axis=0)
    scale = features.std(axis=0) + 1e-9
    standardized = (features - mean) / scale
    augmented = np.hstack([standardized, np.ones((standardized.shape[0], 1))])

    order = make_rng(negatives_seed, _CV_TAG).permutation(len(samples))
    fold_of = np.empty(len(samples), dtype=int)
    fold_of[order] = np.arange(len(samples)) % cv_folds
    best_lam, best_acc = lambda_grid[0], -1.0
    for lam in lambda_grid:
        accs = []
        for fold in range(cv_folds):
            train_mask = fold_of != fold
            w = _pegasos(augmented[train_mask], labels[train_mask], lam, iterations)
            pred = np.sign(augmented[~train_mask] @ w)
            accs.append(float((pred == labels[~train_mask]).mean()))
        acc = float(np.mean(accs))
        if acc > best_acc:
            best_lam, best_acc = lam, acc

    w = _pegasos(augmented, labels, best_lam, iterations)
    # fold the standardization back into raw-feature space
    w_feat = w[:-1] / scale
    bias = float(w[-1] - (w[:-1] * mean / scale).sum())
    return FittingClassifier(
        params=params,
        landmark_count=n_landmarks,
        weights=w_feat,
        bias=bias,
        threshold=0.0,
    )
