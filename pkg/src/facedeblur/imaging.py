"""Images, blur kernels, and the blur formation model.

Images are numpy float64 arrays of shape (h, w) for grayscale or (h, w, 3)
for colour, with intensities nominally in [0, 1]. Blur kernels are small 2-D
float64 arrays with odd sides and non-negative weights. A blurred observation
is produced by convolving a sharp image with a kernel, adding optional i.i.d.
Gaussian noise, and passing the result through a configurable artifact
function (identity, clipping, or clip-and-quantize).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .errors import ContractViolation


class ConvMode(enum.Enum):
    """Output geometry of a convolution: VALID shrinks, SAME zero-pads."""

    VALID = "valid"
    SAME = "same"


class Psi(enum.Enum):
    """Artifact function applied after convolution and noise."""

    IDENTITY = "identity"
    CLIP = "clip"
    CLIP_QUANTIZE = "clip_quantize"


@dataclass(frozen=True)
class BlurConfig:
    """Parameters of the full blur model (noise, artifacts, geometry, seed)."""

    noise_sigma: float = 0.0
    psi: Psi = Psi.IDENTITY
    psi_levels: int | None = None
    conv_mode: ConvMode = ConvMode.SAME
    rng_seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ContractViolation(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.psi is Psi.CLIP_QUANTIZE:
            if self.psi_levels is None or self.psi_levels < 2:
                raise ContractViolation(
                    f"CLIP_QUANTIZE needs psi_levels >= 2, got {self.psi_levels}"
                )


def validate_image(image: np.ndarray, name: str = "image") -> np.ndarray:
    """Check that ``image`` is a (h, w) or (h, w, 3) real array; return float64 view."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] == 3:
        return arr
    raise ContractViolation(
        f"{name} must have shape (h, w) or (h, w, 3), got {arr.shape}"
    )


def validate_kernel(kernel: np.ndarray, name: str = "kernel") -> np.ndarray:
    """Check odd sides and non-negative weights; return float64 view."""
    arr = np.asarray(kernel, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractViolation(f"{name} must be 2-D, got shape {arr.shape}")
    kh, kw = arr.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractViolation(f"{name} sides must be odd, got {kh}x{kw}")
    if np.any(arr < 0):
        raise ContractViolation(f"{name} must have non-negative weights")
    return arr


def image_channels(image: np.ndarray) -> int:
    return 1 if image.ndim == 2 else image.shape[2]


def convolve(image: np.ndarray, kernel: np.ndarray, mode: ConvMode = ConvMode.SAME) -> np.ndarray:
    """Convolve an image with a kernel (true convolution, i.e. kernel flipped).

    Channels are processed independently. VALID mode yields
    (h1-h2+1, w1-w2+1); SAME mode zero-pads so the output matches the input
    size. The kernel must be odd-sided and no larger than the image.
    """
    img = validate_image(image)
    ker = validate_kernel(kernel)
    kh, kw = ker.shape
    h, w = img.shape[:2]
    if kh > h or kw > w:
        raise ContractViolation(
            f"kernel {kh}x{kw} larger than image {h}x{w}"
        )
    if img.ndim == 2:
        return convolve2d(img, ker, mode=mode.value, boundary="fill", fillvalue=0.0)
    planes = [
        convolve2d(img[:, :, c], ker, mode=mode.value, boundary="fill", fillvalue=0.0)
        for c in range(img.shape[2])
    ]
    return np.stack(planes, axis=2)


def make_gaussian_kernel(sigma: float, size: int) -> np.ndarray:
    """Isotropic Gaussian kernel sampled at integer offsets, normalized to sum 1."""
    if size < 1 or size % 2 == 0:
        raise ContractViolation(f"kernel size must be odd and positive, got {size}")
    if sigma <= 0:
        raise ContractViolation(f"sigma must be > 0, got {sigma}")
    half = size // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    xx, yy = np.meshgrid(coords, coords)
    weights = np.exp(-(xx**2 + yy**2) / (2.0 * sigma**2))
    return weights / weights.sum()


def make_motion_kernel(length: int, angle: float) -> np.ndarray:
    """Straight-line motion kernel of ``length`` unit-spaced samples at ``angle``.

    The segment passes through the kernel center; each sample carries equal
    mass and is splatted onto the four surrounding grid cells by bilinear
    interpolation. The kernel side is the smallest odd integer >= length and
    the weights sum to 1.
    """
    if length < 1:
        raise ContractViolation(f"motion length must be >= 1, got {length}")
    length = int(length)
    side = length if length % 2 == 1 else length + 1
    half = side // 2
    weights = np.zeros((side, side), dtype=np.float64)
    direction = np.array([np.sin(angle), np.cos(angle)])  # (dy, dx)
    offsets = np.arange(length, dtype=np.float64) - (length - 1) / 2.0
    for t in offsets:
        y, x = t * direction
        y0, x0 = int(np.floor(y)), int(np.floor(x))
        fy, fx = y - y0, x - x0
        for dy, wy in ((0, 1.0 - fy), (1, fy)):
            for dx, wx in ((0, 1.0 - fx), (1, fx)):
                wgt = wy * wx
                if wgt > 0.0:
                    weights[half + y0 + dy, half + x0 + dx] += wgt
    return weights / weights.sum()


def apply_psi(values: np.ndarray, psi: Psi, levels: int | None = None) -> np.ndarray:
    """Apply the artifact function to an array of intensities."""
    if psi is Psi.IDENTITY:
        return values
    clipped = np.clip(values, 0.0, 1.0)
    if psi is Psi.CLIP:
        return clipped
    # CLIP_QUANTIZE: snap to `levels` evenly spaced values, rounding half-up
    steps = levels - 1
    return np.floor(clipped * steps + 0.5) / steps


def blur(image: np.ndarray, kernel: np.ndarray, cfg: BlurConfig) -> np.ndarray:
    """Full blur model: psi(convolve(image, kernel) + noise).

    Noise is i.i.d. Gaussian with std ``cfg.noise_sigma``, drawn from a
    generator seeded with ``cfg.rng_seed``, so the result is deterministic
    for a fixed config. Batch callers that want parallel/serial agreement
    should derive one seed per image.
    """
    out = convolve(image, kernel, cfg.conv_mode)
    if cfg.noise_sigma > 0:
        rng = np.random.default_rng(cfg.rng_seed)
        out = out + rng.normal(0.0, cfg.noise_sigma, size=out.shape)
    return apply_psi(out, cfg.psi, cfg.psi_levels)


def bilinear_resize(image: np.ndarray, out_height: int, out_width: int) -> np.ndarray:
    """Resample an image to (out_height, out_width) by bilinear interpolation.

    Pixel-center convention: destination pixel d maps to source coordinate
    (d + 0.5) * (src / dst) - 0.5, clamped to the source extent.
    """
    img = validate_image(image)
    if out_height < 1 or out_width < 1:
        raise ContractViolation(f"output size must be positive, got {out_height}x{out_width}")
    h, w = img.shape[:2]

    def axis_coords(out_n: int, src_n: int):
        src = (np.arange(out_n, dtype=np.float64) + 0.5) * (src_n / out_n) - 0.5
        src = np.clip(src, 0.0, src_n - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, src_n - 1)
        frac = src - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(out_height, h)
    x0, x1, fx = axis_coords(out_width, w)
    fy = fy[:, None] if img.ndim == 2 else fy[:, None, None]
    fx = fx[None, :] if img.ndim == 2 else fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


# ---------------------------------------------------------------------------
# Image file I/O (portable anymap family natively, PNG and friends via Pillow)
# ---------------------------------------------------------------------------

_PNM_SUFFIXES = {".pgm", ".ppm", ".pnm"}


def read_image(path: str | Path) -> np.ndarray:
    """Load an image file as float64 intensities in [0, 1].

    PGM/PPM (binary or ASCII, 8- or 16-bit) are parsed natively; other
    formats go through Pillow. Grayscale files yield (h, w), colour (h, w, 3).
    """
    path = Path(path)
    if path.suffix.lower() in _PNM_SUFFIXES:
        return _read_pnm(path)
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        if im.mode in ("I;16", "I"):
            arr = np.asarray(im, dtype=np.float64)
            return arr / 65535.0
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if ("A" in im.mode or len(im.mode) > 2) else "L")
        arr = np.asarray(im, dtype=np.float64)
    return arr / 255.0


def write_image(path: str | Path, image: np.ndarray, bit_depth: int = 8) -> None:
    """Save intensities in [0, 1] to an image file, rounding half-up.

    Values are clipped to [0, 1] first. PNM files support 8- and 16-bit;
    the Pillow path (e.g. PNG) supports 8-bit L/RGB.
    """
    img = validate_image(image)
    if bit_depth not in (8, 16):
        raise ContractViolation(f"bit_depth must be 8 or 16, got {bit_depth}")
    maxval = (1 << bit_depth) - 1
    quantized = np.floor(np.clip(img, 0.0, 1.0) * maxval + 0.5).astype(np.uint32)
    path = Path(path)
    if path.suffix.lower() in _PNM_SUFFIXES:
        _write_pnm(path, quantized, maxval)
        return
    if bit_depth != 8:
        raise ContractViolation(f"{path.suffix} output supports only 8-bit here; use .pgm/.ppm for 16-bit")
    from PIL import Image as PILImage

    data = quantized.astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    PILImage.fromarray(data, mode=mode).save(path)


def _read_pnm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    magic, fields, offset = _parse_pnm_header(raw, path)
    if magic in (b"P2", b"P3"):
        tokens = raw[offset:].split()
        data = np.array(tokens, dtype=np.float64)
    else:
        width, height, maxval = fields
        count = width * height * (3 if magic == b"P6" else 1)
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).astype(np.float64)
    width, height, maxval = fields
    channels = 3 if magic in (b"P3", b"P6") else 1
    if data.size != width * height * channels:
        raise ContractViolation(f"{path}: truncated pixel data")
    data = data / float(maxval)
    if channels == 1:
        return data.reshape(height, width)
    return data.reshape(height, width, 3)


def _parse_pnm_header(raw: bytes, path: Path):
    magic = raw[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise ContractViolation(f"{path}: unsupported PNM magic {magic!r}")
    fields = []
    pos = 2
    while len(fields) < 3:
        if pos >= len(raw):
            raise ContractViolation(f"{path}: truncated PNM header")
        ch = raw[pos : pos + 1]
        if ch == b"#":
            pos = raw.index(b"\n", pos) + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(raw) and not raw[end : end + 1].isspace():
                end += 1
            fields.append(int(raw[pos:end]))
            pos = end
    pos += 1  # single whitespace byte after maxval
    return magic, tuple(fields), pos


def _write_pnm(path: Path, quantized: np.ndarray, maxval: int) -> None:
    channels = 1 if quantized.ndim == 2 else 3
    suffix = path.suffix.lower()
    if suffix == ".pgm" and channels != 1:
        raise ContractViolation(".pgm holds grayscale; use .ppm for colour")
    if suffix == ".ppm" and channels != 3:
        raise ContractViolation(".ppm holds colour; use .pgm for grayscale")
    magic = b"P5" if channels == 1 else b"P6"
    height, width = quantized.shape[:2]
    header = b"%s\n%d %d\n%d\n" % (magic, width, height, maxval)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    path.write_bytes(header + quantized.astype(dtype).tobytes())


# ---------------------------------------------------------------------------
# Kernel text serialization: first line "h w", then h rows of w weights
# ---------------------------------------------------------------------------


def save_kernel(path: str | Path, kernel: np.ndarray) -> None:
    ker = validate_kernel(kernel)
    lines = ["%d %d" % ker.shape]
    for row in ker:
        lines.append(" ".join("%.17g" % v for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_kernel(path: str | Path) -> np.ndarray:
    text = Path(path).read_text().split()
    if len(text) < 2:
        raise ContractViolation(f"{path}: missing kernel header")
    h, w = int(text[0]), int(text[1])
    values = np.array(text[2:], dtype=np.float64)
    if values.size != h * w:
        raise ContractViolation(
            f"{path}: expected {h * w} weights for {h}x{w} kernel, found {values.size}"
        )
    return validate_kernel(values.reshape(h, w), name=str(path))
