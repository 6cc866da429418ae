"""Residual convolutional deblurring network with hand-rolled backprop.

The trunk is a stem convolution followed by residual blocks (two 3x3 SAME
convolutions with ReLUs and an identity shortcut). Nothing strides or pools,
so spatial dimensions are preserved end to end. Selected block outputs feed
skip connections (batch normalization, then a learned 1x1 convolution) that
are summed into the trunk before the head convolution. All math is float64
numpy; forward and backward passes are implemented here directly so that
gradients can be verified against finite differences.

Tensors are numpy arrays in (batch, channels, height, width) layout.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import ContractViolation
from .metrics import huber_grad, huber_loss
from .seeding import make_rng

CHECKPOINT_MAGIC = b"FDBLURCK"
CHECKPOINT_VERSION = 1


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class NetArchitecture:
    """Static shape description of the network.

    ``skip_sources`` lists the 1-based indices of blocks whose outputs feed
    skip connections. ``input_skip`` additionally adds the network input to
    the head output (useful when the network should learn a sharpening
    correction on top of the blurry input); it requires matching input and
    output channel counts.
    """

    input_channels: int = 3
    block_count: int = 3
    channels_per_block: int = 16
    skip_sources: tuple[int, ...] = (2, 3)
    output_channels: int = 3
    input_skip: bool = False
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.block_count < 1:
            raise ContractViolation(f"block_count must be >= 1, got {self.block_count}")
        if self.channels_per_block < 1 or self.input_channels < 1 or self.output_channels < 1:
            raise ContractViolation("channel counts must be positive")
        bad = [s for s in self.skip_sources if not 1 <= s <= self.block_count]
        if bad:
            raise ContractViolation(
                f"skip_sources {bad} outside 1..{self.block_count}"
            )
        if len(set(self.skip_sources)) != len(self.skip_sources):
            raise ContractViolation("skip_sources must be unique")
        if self.input_skip and self.input_channels != self.output_channels:
            raise ContractViolation(
                "input_skip requires input_channels == output_channels, got "
                f"{self.input_channels} vs {self.output_channels}"
            )


ARCH_PRESETS = {
    # 2-block, 4-channel net: small enough for exhaustive finite-difference checks
    "small": NetArchitecture(
        input_channels=3, block_count=2, channels_per_block=4,
        skip_sources=(1, 2), output_channels=3,
    ),
    # grayscale trainer-friendly net that predicts a residual correction
    "desk": NetArchitecture(
        input_channels=1, block_count=2, channels_per_block=8,
        skip_sources=(1, 2), output_channels=1, input_skip=True,
    ),
    "default": NetArchitecture(),
}


def expected_param_shapes(arch: NetArchitecture) -> dict[str, tuple[int, ...]]:
    """Ordered layer-name -> shape map for all learnable parameters."""
    c = arch.channels_per_block
    shapes: dict[str, tuple[int, ...]] = {}
    shapes["stem.w"] = (c, arch.input_channels, 3, 3)
    shapes["stem.b"] = (c,)
    for i in range(1, arch.block_count + 1):
        shapes[f"block{i}.conv1.w"] = (c, c, 3, 3)
        shapes[f"block{i}.conv1.b"] = (c,)
        shapes[f"block{i}.conv2.w"] = (c, c, 3, 3)
        shapes[f"block{i}.conv2.b"] = (c,)
    for s in sorted(arch.skip_sources):
        shapes[f"skip{s}.bn.gamma"] = (c,)
        shapes[f"skip{s}.bn.beta"] = (c,)
        shapes[f"skip{s}.conv.w"] = (c, c, 1, 1)
        shapes[f"skip{s}.conv.b"] = (c,)
    shapes["head.w"] = (arch.output_channels, c, 3, 3)
    shapes["head.b"] = (arch.output_channels,)
    return shapes


def expected_buffer_shapes(arch: NetArchitecture) -> dict[str, tuple[int, ...]]:
    """Running batch-norm statistics kept alongside the parameters."""
    c = arch.channels_per_block
    shapes: dict[str, tuple[int, ...]] = {}
    for s in sorted(arch.skip_sources):
        shapes[f"skip{s}.bn.running_mean"] = (c,)
        shapes[f"skip{s}.bn.running_var"] = (c,)
    return shapes


class ParamStore:
    """Named parameter tensors with matching gradient buffers.

    ``params`` and ``grads`` share names and shapes; ``buffers`` holds
    batch-norm running statistics, which are state but not trained.
    """

    def __init__(self, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray]):
        self.params = params
        self.grads = {name: np.zeros_like(value) for name, value in params.items()}
        self.buffers = buffers

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def copy(self) -> "ParamStore":
        dup = ParamStore(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )
        for k, g in self.grads.items():
            dup.grads[k] = g.copy()
        return dup

    def validate(self, arch: NetArchitecture) -> None:
        want = expected_param_shapes(arch)
        for name, shape in want.items():
            if name not in self.params:
                raise ContractViolation(f"missing parameter tensor '{name}'")
            if self.params[name].shape != shape:
                raise ContractViolation(
                    f"parameter '{name}' has shape {self.params[name].shape}, expected {shape}"
                )
            if self.grads[name].shape != shape:
                raise ContractViolation(f"gradient buffer for '{name}' has wrong shape")
        extra = set(self.params) - set(want)
        if extra:
            raise ContractViolation(f"unexpected parameter tensors: {sorted(extra)}")
        want_buf = expected_buffer_shapes(arch)
        for name, shape in want_buf.items():
            if name not in self.buffers or self.buffers[name].shape != shape:
                raise ContractViolation(f"missing or misshaped buffer '{name}'")


def init_params(arch: NetArchitecture, seed: int) -> ParamStore:
    """He-initialized parameters: conv weights ~ N(0, 2/fan_in), biases zero,
    normalization scale 1 / shift 0. Deterministic per seed."""
    rng = make_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in expected_param_shapes(arch).items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape)
        else:  # biases and BN shifts
            params[name] = np.zeros(shape)
    buffers = {}
    for name, shape in expected_buffer_shapes(arch).items():
        buffers[name] = np.ones(shape) if name.endswith("running_var") else np.zeros(shape)
    return ParamStore(params, buffers)


# ---------------------------------------------------------------------------
# Layer primitives (forward + backward)
# ---------------------------------------------------------------------------


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """SAME, stride-1 convolution of (n,c,h,w) with filters (f,c,kh,kw)."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # (n, c, h, wd, kh, kw) -> (n, c*kh*kw, h*wd)
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, h * wd)
    wmat = w.reshape(f, c * kh * kw)
    y = np.matmul(wmat, cols).reshape(n, f, h, wd) + b[None, :, None, None]
    cache = (x.shape, cols, w)
    return y, cache


def _conv_backward(dy: np.ndarray, cache):
    x_shape, cols, w = cache
    n, c, h, wd = x_shape
    f, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    dy_mat = dy.reshape(n, f, h * wd)
    db = dy.sum(axis=(0, 2, 3))
    dw = np.matmul(dy_mat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    wmat = w.reshape(f, c * kh * kw)
    dcols = np.matmul(wmat.T, dy_mat).reshape(n, c, kh, kw, h, wd)
    dxp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + h, j : j + wd] += dcols[:, :, i, j]
    dx = dxp[:, :, ph : ph + h, pw : pw + wd]
    return dx, dw, db


def _bn_forward(x, gamma, beta, running_mean, running_var, mode, momentum, eps):
    if mode is Mode.TRAIN:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    new_running = None
    if mode is Mode.TRAIN:
        new_running = (
            momentum * running_mean + (1.0 - momentum) * mean,
            momentum * running_var + (1.0 - momentum) * var,
        )
    cache = (xhat, gamma, inv_std)
    return y, cache, new_running


def _bn_backward(dy, cache):
    xhat, gamma, inv_std = cache
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    sum_dxhat = dxhat.sum(axis=(0, 2, 3))
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))
    dx = (inv_std[None, :, None, None] / m) * (
        m * dxhat
        - sum_dxhat[None, :, None, None]
        - xhat * sum_dxhat_xhat[None, :, None, None]
    )
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# Whole-network forward/backward
# ---------------------------------------------------------------------------


def _check_input(arch: NetArchitecture, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ContractViolation(f"input must be (n, c, h, w), got shape {x.shape}")
    if x.shape[1] != arch.input_channels:
        raise ContractViolation(
            f"input has {x.shape[1]} channels, architecture expects {arch.input_channels}"
        )
    return x


def _forward_full(store: ParamStore, arch: NetArchitecture, x: np.ndarray, mode: Mode,
                  update_stats: bool):
    """Run the network, returning the output plus every cache backward needs."""
    p = store.params
    caches: dict = {"x": x}

    stem_pre, caches["stem.conv"] = _conv_forward(x, p["stem.w"], p["stem.b"])
    act = np.maximum(stem_pre, 0.0)
    caches["stem.mask"] = stem_pre > 0.0

    block_outs = [act]  # index 0 = stem output, index i = block i output
    for i in range(1, arch.block_count + 1):
        a_in = block_outs[-1]
        h_pre, c1 = _conv_forward(a_in, p[f"block{i}.conv1.w"], p[f"block{i}.conv1.b"])
        h = np.maximum(h_pre, 0.0)
        z, c2 = _conv_forward(h, p[f"block{i}.conv2.w"], p[f"block{i}.conv2.b"])
        pre = z + a_in
        out = np.maximum(pre, 0.0)
        caches[f"block{i}"] = (c1, h_pre > 0.0, c2, pre > 0.0)
        block_outs.append(out)

    merged = block_outs[arch.block_count]
    skip_caches = {}
    for s in sorted(arch.skip_sources):
        bn_y, bn_cache, new_running = _bn_forward(
            block_outs[s],
            p[f"skip{s}.bn.gamma"], p[f"skip{s}.bn.beta"],
            store.buffers[f"skip{s}.bn.running_mean"],
            store.buffers[f"skip{s}.bn.running_var"],
            mode, arch.bn_momentum, arch.bn_eps,
        )
        if update_stats and new_running is not None:
            store.buffers[f"skip{s}.bn.running_mean"] = new_running[0]
            store.buffers[f"skip{s}.bn.running_var"] = new_running[1]
        skip_out, conv_cache = _conv_forward(bn_y, p[f"skip{s}.conv.w"], p[f"skip{s}.conv.b"])
        merged = merged + skip_out
        skip_caches[s] = (bn_cache, conv_cache)
    caches["skips"] = skip_caches
    caches["block_outs"] = block_outs

    y, caches["head.conv"] = _conv_forward(merged, p["head.w"], p["head.b"])
    if arch.input_skip:
        y = y + x
    return y, caches


def forward(store: ParamStore, arch: NetArchitecture, x: np.ndarray,
            mode: Mode = Mode.EVAL) -> np.ndarray:
    """Network output for a batch; spatial dimensions are preserved.

    TRAIN mode normalizes skip connections with batch statistics and updates
    the running statistics in ``store.buffers``; EVAL mode reads the running
    statistics and leaves the store untouched.
    """
    x = _check_input(arch, x)
    store.validate(arch)
    y, _ = _forward_full(store, arch, x, mode, update_stats=(mode is Mode.TRAIN))
    return y


def backward(store: ParamStore, arch: NetArchitecture, x: np.ndarray,
             target: np.ndarray) -> float:
    """One training-mode forward/backward pass.

    Returns the Huber loss of (output - target) and fills ``store.grads``
    with d(loss)/d(parameter) for every parameter. Running batch-norm
    statistics are updated as in a TRAIN-mode forward.
    """
    x = _check_input(arch, x)
    store.validate(arch)
    target = np.asarray(target, dtype=np.float64)
    y, caches = _forward_full(store, arch, x, Mode.TRAIN, update_stats=True)
    if target.shape != y.shape:
        raise ContractViolation(
            f"target shape {target.shape} does not match output shape {y.shape}"
        )
    residual = y - target
    loss = huber_loss(residual)
    dy = huber_grad(residual) / residual.size

    store.zero_grads()
    g = store.grads
    dmerged, g["head.w"][...], g["head.b"][...] = _conv_backward(dy, caches["head.conv"])

    d_block = [np.zeros_like(b) for b in caches["block_outs"]]
    d_block[arch.block_count] += dmerged
    for s, (bn_cache, conv_cache) in caches["skips"].items():
        d_bn_y, g[f"skip{s}.conv.w"][...], g[f"skip{s}.conv.b"][...] = _conv_backward(
            dmerged, conv_cache
        )
        d_src, g[f"skip{s}.bn.gamma"][...], g[f"skip{s}.bn.beta"][...] = _bn_backward(
            d_bn_y, bn_cache
        )
        d_block[s] += d_src

    for i in range(arch.block_count, 0, -1):
        c1, mask1, c2, mask_out = caches[f"block{i}"]
        dpre = d_block[i] * mask_out
        dz = dpre
        dh, g[f"block{i}.conv2.w"][...], g[f"block{i}.conv2.b"][...] = _conv_backward(dz, c2)
        dh_pre = dh * mask1
        da, g[f"block{i}.conv1.w"][...], g[f"block{i}.conv1.b"][...] = _conv_backward(dh_pre, c1)
        d_block[i - 1] += dpre + da  # shortcut plus conv path

    d_stem_pre = d_block[0] * caches["stem.mask"]
    _, g["stem.w"][...], g["stem.b"][...] = _conv_backward(d_stem_pre, caches["stem.conv"])
    return loss


def gradient_check(arch: NetArchitecture, seed: int, batch: int = 2, height: int = 8,
                   width: int = 8, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-finite-difference
    gradients over every parameter element. Running statistics do not affect
    TRAIN-mode loss, so the perturbed evaluations are comparable."""
    rng = make_rng(seed, 0xFD)
    x = rng.uniform(0.0, 1.0, size=(batch, arch.input_channels, height, width))
    target = rng.uniform(0.0, 1.0, size=(batch, arch.output_channels, height, width))
    store = init_params(arch, seed)
    backward(store, arch, x, target)
    analytic = {k: v.copy() for k, v in store.grads.items()}

    def loss_at() -> float:
        y, _ = _forward_full(store, arch, x, Mode.TRAIN, update_stats=False)
        return huber_loss(y - target)

    worst = 0.0
    for name, param in store.params.items():
        flat = param.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            hi = loss_at()
            flat[idx] = orig - step
            lo = loss_at()
            flat[idx] = orig
            fd = (hi - lo) / (2.0 * step)
            an = analytic[name].reshape(-1)[idx]
            denom = max(abs(fd), abs(an), 1e-6)
            worst = max(worst, abs(fd - an) / denom)
    return worst


# ---------------------------------------------------------------------------
# Image <-> tensor layout helpers
# ---------------------------------------------------------------------------


def images_to_tensor(images) -> np.ndarray:
    """Stack (h, w) or (h, w, 3) images into an (n, c, h, w) batch."""
    planes = []
    for img in images:
        arr = np.asarray(img, dtype=np.float64)
        if arr.ndim == 2:
            planes.append(arr[None, :, :])
        elif arr.ndim == 3 and arr.shape[2] == 3:
            planes.append(arr.transpose(2, 0, 1))
        else:
            raise ContractViolation(f"image shape {arr.shape} not supported")
    return np.stack(planes, axis=0)


def tensor_to_images(batch: np.ndarray) -> list[np.ndarray]:
    """Inverse of images_to_tensor."""
    out = []
    for item in batch:
        if item.shape[0] == 1:
            out.append(item[0])
        else:
            out.append(item.transpose(1, 2, 0))
    return out


# ---------------------------------------------------------------------------
# Checkpoints: self-describing binary container of named float64 tensors
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, store: ParamStore, arch: NetArchitecture,
                    seed: int = 0) -> None:
    """Write header (format version, seed, architecture) plus named tensors."""
    tensors = list(store.params.items()) + list(store.buffers.items())
    header = {
        "format_version": CHECKPOINT_VERSION,
        "seed": seed,
        "arch": _arch_to_dict(arch),
        "tensors": [
            {"name": name, "shape": list(value.shape),
             "kind": "buffer" if name in store.buffers else "param"}
            for name, value in tensors
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, value in tensors:
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ParamStore, NetArchitecture, int]:
    """Read a checkpoint, validating every tensor shape against the header's
    architecture."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ContractViolation(f"{path}: not a checkpoint file")
        (length,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(length).decode("utf-8"))
        if header["format_version"] != CHECKPOINT_VERSION:
            raise ContractViolation(
                f"{path}: unsupported checkpoint version {header['format_version']}"
            )
        arch = _arch_from_dict(header["arch"])
        want_params = expected_param_shapes(arch)
        want_buffers = expected_buffer_shapes(arch)
        params: dict[str, np.ndarray] = {}
        buffers: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            name, shape = entry["name"], tuple(entry["shape"])
            expected = want_buffers.get(name) if entry["kind"] == "buffer" else want_params.get(name)
            if expected is None or expected != shape:
                raise ContractViolation(
                    f"{path}: tensor '{name}' shape {shape} does not match architecture"
                )
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape).copy()
            if entry["kind"] == "buffer":
                buffers[name] = data
            else:
                params[name] = data
    store = ParamStore(params, buffers)
    store.validate(arch)
    return store, arch, int(header["seed"])


def _arch_to_dict(arch: NetArchitecture) -> dict:
    d = asdict(arch)
    d["skip_sources"] = list(arch.skip_sources)
    return d


def _arch_from_dict(d: dict) -> NetArchitecture:
    d = dict(d)
    d["skip_sources"] = tuple(d["skip_sources"])
    return NetArchitecture(**d)
