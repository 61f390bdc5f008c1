"""3D U-Net: construction, forward pass, parameter counts, weight files.

Tensors are plain numpy float32 arrays shaped (C, X, Y, Z). The encoder
has ``num_stages`` stages of conv blocks (conv -> instance norm -> ReLU)
with 2x2x2 max pooling in between, doubling the channel width each stage.
The decoder mirrors it: a 1x1x1 conv block halves the channels, nearest
2x interpolation doubles the spatial size, the matching encoder stage
output is concatenated, and the stage's conv blocks follow. A final 1x1x1
conv plus channel softmax produces the class probabilities. Stage kernel
sizes come from ``kernel_plan``; with the default plan (3,3,3,3,1,1) the
1x1x1 kernels in stages 5-6 cut the parameter count from about 86M to
about 14M.
"""

import zlib
from dataclasses import dataclass, field
from struct import Struct

import numpy as np

from ._kernels import conv3d_core

Tensor4D = np.ndarray  # (C, X, Y, Z) float32

KINDS = ("conv", "instance_norm", "relu", "max_pool", "upsample", "softmax")
_KIND_TAG = {k: i + 1 for i, k in enumerate(KINDS)}
_TAG_KIND = {v: k for k, v in _KIND_TAG.items()}

INSTANCE_NORM_EPS = 1e-5


class WeightFormatError(ValueError):
    """Weight file does not parse or does not match the network config."""


@dataclass
class NetworkConfig:
    in_channels: int = 1
    num_classes: int = 3
    base_width: int = 32
    num_stages: int = 6
    kernel_plan: tuple[int, ...] = (3, 3, 3, 3, 1, 1)
    convs_per_stage: int = 2

    def __post_init__(self):
        self.kernel_plan = tuple(int(k) for k in self.kernel_plan)
        if self.in_channels < 1 or self.num_classes < 2 or self.base_width < 1:
            raise ValueError("in_channels, num_classes and base_width must be positive")
        if self.num_stages < 2:
            raise ValueError("need at least 2 stages")
        if len(self.kernel_plan) != self.num_stages:
            raise ValueError(
                f"kernel_plan has {len(self.kernel_plan)} entries for {self.num_stages} stages"
            )
        if any(k not in (1, 3) for k in self.kernel_plan):
            raise ValueError("kernel sizes must be 1 or 3")
        if self.convs_per_stage < 1:
            raise ValueError("convs_per_stage must be >= 1")

    def stage_width(self, stage: int) -> int:
        """Channel width at 1-indexed stage ``stage``."""
        return self.base_width * 2 ** (stage - 1)


@dataclass
class Layer:
    kind: str
    kernel: tuple[int, int, int] = (0, 0, 0)
    cin: int = 0
    cout: int = 0
    weights: np.ndarray | None = None  # conv: (cout, cin, kx, ky, kz); norm: gamma (c,)
    bias: np.ndarray | None = None     # conv: (cout,); norm: beta (c,)

    def param_count(self) -> int:
        n = 0
        if self.weights is not None:
            n += self.weights.size
        if self.bias is not None:
            n += self.bias.size
        return n


@dataclass
class Model:
    config: NetworkConfig
    layers: list[Layer] = field(default_factory=list)
    skip_plan: dict[int, int] = field(default_factory=dict)  # decoder stage -> encoder stage


def _layer_specs(config: NetworkConfig):
    """Yield (kind, kernel, cin, cout) in execution order."""

    def block(k, cin, cout):
        yield ("conv", (k, k, k), cin, cout)
        yield ("instance_norm", (0, 0, 0), cout, cout)
        yield ("relu", (0, 0, 0), cout, cout)

    # encoder
    for s in range(1, config.num_stages + 1):
        k = config.kernel_plan[s - 1]
        w = config.stage_width(s)
        cin = config.in_channels if s == 1 else config.stage_width(s - 1)
        for b in range(config.convs_per_stage):
            yield from block(k, cin if b == 0 else w, w)
        if s < config.num_stages:
            yield ("max_pool", (2, 2, 2), w, w)
    # decoder
    for s in range(config.num_stages - 1, 0, -1):
        w = config.stage_width(s)
        yield from block(1, 2 * w, w)       # channel-halving conv block
        yield ("upsample", (2, 2, 2), w, w)  # nearest 2x; skip concat follows
        for b in range(config.convs_per_stage):
            yield from block(config.kernel_plan[s - 1], 2 * w if b == 0 else w, w)
    yield ("conv", (1, 1, 1), config.base_width, config.num_classes)
    yield ("softmax", (0, 0, 0), config.num_classes, config.num_classes)


def build_unet(config: NetworkConfig, init_seed: int = 0) -> Model:
    """Construct the network with He-uniform weights from ``init_seed``."""
    rng = np.random.default_rng(init_seed)
    layers = []
    for kind, kernel, cin, cout in _layer_specs(config):
        lay = Layer(kind, kernel, cin, cout)
        if kind == "conv":
            fan_in = kernel[0] * kernel[1] * kernel[2] * cin
            bound = np.float32(np.sqrt(6.0 / fan_in))
            w = rng.random(size=(cout, cin, *kernel), dtype=np.float32)
            w *= 2 * bound
            w -= bound  # uniform in [-bound, bound)
            lay.weights = w
            lay.bias = np.zeros(cout, dtype=np.float32)
        elif kind == "instance_norm":
            lay.weights = np.ones(cout, dtype=np.float32)
            lay.bias = np.zeros(cout, dtype=np.float32)
        layers.append(lay)
    skip_plan = {s: s for s in range(1, config.num_stages)}
    return Model(config, layers, skip_plan)


def count_parameters(model: Model) -> int:
    return sum(lay.param_count() for lay in model.layers)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def conv3d(x: Tensor4D, weights: np.ndarray, bias: np.ndarray, kernel=None) -> Tensor4D:
    """Zero-padded cross-correlation preserving spatial dims."""
    cout, cin, kx, ky, kz = weights.shape
    if kernel is not None and tuple(kernel) != (kx, ky, kz):
        raise ValueError(f"kernel {tuple(kernel)} does not match weight shape {(kx, ky, kz)}")
    if any(k % 2 == 0 for k in (kx, ky, kz)):
        raise ValueError("kernel edges must be odd")
    if x.shape[0] != cin:
        raise ValueError(f"input has {x.shape[0]} channels, weights expect {cin}")
    if bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} does not match {cout} output channels")
    px, py, pz = kx // 2, ky // 2, kz // 2
    padded = np.pad(x.astype(np.float32, copy=False), ((0, 0), (px, px), (py, py), (pz, pz)))
    out = conv3d_core(padded, weights.astype(np.float32, copy=False))
    out += bias[:, None, None, None]
    return out


def instance_norm(x: Tensor4D, gamma: np.ndarray, beta: np.ndarray,
                  eps: float = INSTANCE_NORM_EPS) -> Tensor4D:
    """Per-channel standardization over this instance's voxels, with affine."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    mean = x.mean(axis=(1, 2, 3), dtype=np.float64)
    var = x.var(axis=(1, 2, 3), dtype=np.float64)
    inv = gamma / np.sqrt(var + eps)
    scale = inv.astype(np.float32)
    shift = (beta - mean * inv).astype(np.float32)
    return x * scale[:, None, None, None] + shift[:, None, None, None]


def relu(x: Tensor4D) -> Tensor4D:
    return np.maximum(x, np.float32(0.0))


def max_pool_2x(x: Tensor4D) -> Tensor4D:
    c, xs, ys, zs = x.shape
    if xs % 2 or ys % 2 or zs % 2:
        raise ValueError(f"spatial dims {(xs, ys, zs)} must be even for 2x pooling")
    return x.reshape(c, xs // 2, 2, ys // 2, 2, zs // 2, 2).max(axis=(2, 4, 6))


def nearest_upsample_2x(x: Tensor4D) -> Tensor4D:
    return np.repeat(np.repeat(np.repeat(x, 2, axis=1), 2, axis=2), 2, axis=3)


def softmax_channels(x: Tensor4D) -> Tensor4D:
    shifted = x - x.max(axis=0, keepdims=True)
    e = np.exp(shifted, dtype=np.float32)
    return e / e.sum(axis=0, keepdims=True)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def forward(model: Model, x: Tensor4D) -> Tensor4D:
    """Run the network; returns (num_classes, X, Y, Z) channel probabilities.

    In each decoder stage the upsampled features are concatenated first,
    followed by the matching encoder stage output.
    """
    cfg = model.config
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 4 or x.shape[0] != cfg.in_channels:
        raise ValueError(f"input must be ({cfg.in_channels}, X, Y, Z), got {x.shape}")
    divisor = 2 ** (cfg.num_stages - 1)
    if any(d % divisor for d in x.shape[1:]):
        raise ValueError(f"spatial dims {x.shape[1:]} must be divisible by {divisor}")

    layers = model.layers
    pos = 0

    def run_block(t):
        nonlocal pos
        conv_l, norm_l = layers[pos], layers[pos + 1]
        pos += 3  # conv, instance_norm, relu
        t = conv3d(t, conv_l.weights, conv_l.bias)
        t = instance_norm(t, norm_l.weights, norm_l.bias)
        return relu(t)

    skips = {}
    for s in range(1, cfg.num_stages + 1):
        for _ in range(cfg.convs_per_stage):
            x = run_block(x)
        if s < cfg.num_stages:
            skips[s] = x
            x = max_pool_2x(x)
            pos += 1
    for s in range(cfg.num_stages - 1, 0, -1):
        x = run_block(x)
        x = nearest_upsample_2x(x)
        pos += 1
        x = np.concatenate([x, skips[model.skip_plan[s]]], axis=0)
        for _ in range(cfg.convs_per_stage):
            x = run_block(x)
    final = layers[pos]
    x = conv3d(x, final.weights, final.bias)
    pos += 2  # final conv, softmax
    assert pos == len(layers), "layer walk out of sync with layer list"
    return softmax_channels(x)


# ---------------------------------------------------------------------------
# weight files: magic "VSKW1", then one little-endian record per layer
# (kind u8, kernel 3x u32, cin u32, cout u32, payload bytes u64, float32
# payload), then a u32 CRC32 over all payload bytes.
# ---------------------------------------------------------------------------

_MAGIC = b"VSKW1"
_REC = Struct("<B3IIIQ")  # kind, kernel x3, cin, cout, payload bytes


def _payload(lay: Layer) -> bytes:
    parts = []
    if lay.weights is not None:
        parts.append(lay.weights.astype("<f4").tobytes())
    if lay.bias is not None:
        parts.append(lay.bias.astype("<f4").tobytes())
    return b"".join(parts)


def save_weights(model: Model, path) -> None:
    crc = 0
    with open(path, "wb") as f:
        f.write(_MAGIC)
        for lay in model.layers:
            payload = _payload(lay)
            f.write(_REC.pack(_KIND_TAG[lay.kind], *lay.kernel, lay.cin, lay.cout, len(payload)))
            f.write(payload)
            crc = zlib.crc32(payload, crc)
        f.write(crc.to_bytes(4, "little"))


def load_weights(path, config: NetworkConfig) -> Model:
    """Load a weight file, validating every record against ``config``."""
    model = build_unet(config, init_seed=0)  # skeleton; weights replaced below
    crc = 0
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise WeightFormatError(f"{path}: missing {_MAGIC!r} magic")
        for i, lay in enumerate(model.layers):
            header = f.read(_REC.size)
            if len(header) < _REC.size:
                raise WeightFormatError(f"{path}: layer {i} truncated (record header)")
            tag, kx, ky, kz, cin, cout, nbytes = _REC.unpack(header)
            kind = _TAG_KIND.get(tag)
            expected = (lay.kind, lay.kernel, lay.cin, lay.cout, len(_payload(lay)))
            if (kind, (kx, ky, kz), cin, cout, nbytes) != expected:
                raise WeightFormatError(
                    f"{path}: layer {i} mismatch: file has kind={kind} kernel={(kx, ky, kz)} "
                    f"cin={cin} cout={cout} bytes={nbytes}, config expects kind={expected[0]} "
                    f"kernel={expected[1]} cin={expected[2]} cout={expected[3]} bytes={expected[4]}"
                )
            payload = f.read(nbytes)
            if len(payload) < nbytes:
                raise WeightFormatError(f"{path}: layer {i} truncated (payload)")
            crc = zlib.crc32(payload, crc)
            values = np.frombuffer(payload, dtype="<f4")
            if lay.weights is not None:
                n = lay.weights.size
                lay.weights = values[:n].reshape(lay.weights.shape).astype(np.float32)
                if lay.bias is not None:
                    lay.bias = values[n:].astype(np.float32)
            elif lay.bias is not None:
                lay.bias = values.astype(np.float32)
        stored = f.read(4)
        if len(stored) < 4:
            raise WeightFormatError(f"{path}: missing CRC32 trailer")
        if int.from_bytes(stored, "little") != crc:
            raise WeightFormatError(f"{path}: CRC32 mismatch, file is corrupt")
    return model
