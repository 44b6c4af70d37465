"""Four-level 3D U-Net: encoder, 5x5x5 bottleneck, decoder with skip concatenation.

Topology for ``base`` channels and input ``[1, D, H, W]``::

    enc0  (D)    two 3^3 convs -> base      -- pool --
    enc1  (D/2)  two 3^3 convs -> 2 base    -- pool --
    enc2  (D/4)  two 3^3 convs -> 4 base    -- pool --
    enc3  (D/8)  two 3^3 convs -> 8 base
    bottleneck (D/8) two 5^3 convs -> 16 base
    dec2  up to D/4 (-> 4 base), concat enc2, two 3^3 convs -> 4 base
    dec1  up to D/2 (-> 2 base), concat enc1, two 3^3 convs -> 2 base
    dec0  up to D   (-> base),   concat enc0, two 3^3 convs -> base
    head  1^3 conv -> num_classes, softmax over channels

Every conv is followed by ReLU except the head.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

LEVELS = 4
LEVEL_KERNEL = 3
BOTTLENECK_KERNEL = 5

MAGIC = b"PETUNET\x00"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}


class WeightFileError(ValueError):
    """Base class for problems reading a weight file."""


class BadMagicError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass


class ConfigMismatchError(WeightFileError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    num_classes: int = 31
    base_channels: int = 64
    levels: int = LEVELS
    bottleneck_kernel: int = BOTTLENECK_KERNEL
    level_kernel: int = LEVEL_KERNEL

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("in_channels and base_channels must be >= 1")
        if (self.levels, self.bottleneck_kernel, self.level_kernel) != (
            LEVELS,
            BOTTLENECK_KERNEL,
            LEVEL_KERNEL,
        ):
            raise ValueError("levels, bottleneck_kernel and level_kernel are fixed at 4, 5, 3")

    @property
    def encoder_channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2**i for i in range(self.levels))

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 16


def layer_shapes(config: UNetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Names and shapes of every parameter tensor, in build order."""
    shapes: list[tuple[str, tuple[int, ...]]] = []
    k, kb = config.level_kernel, config.bottleneck_kernel
    enc = config.encoder_channels

    def conv(name, cout, cin, ks):
        shapes.append((f"{name}.weight", (cout, cin, ks, ks, ks)))
        shapes.append((f"{name}.bias", (cout,)))

    cin = config.in_channels
    for i, c in enumerate(enc):
        conv(f"enc{i}.conv1", c, cin, k)
        conv(f"enc{i}.conv2", c, c, k)
        cin = c
    cb = config.bottleneck_channels
    conv("bottleneck.conv1", cb, cin, kb)
    conv("bottleneck.conv2", cb, cb, kb)
    cin = cb
    for i in reversed(range(config.levels - 1)):
        c = enc[i]
        shapes.append((f"dec{i}.up.weight", (cin, c, 2, 2, 2)))
        shapes.append((f"dec{i}.up.bias", (c,)))
        conv(f"dec{i}.conv1", c, 2 * c, k)
        conv(f"dec{i}.conv2", c, c, k)
        cin = c
    conv("head", config.num_classes, cin, 1)
    return shapes


def parameter_count(config: UNetConfig) -> int:
    return sum(int(np.prod(s)) for _, s in layer_shapes(config))


class UNetModel:
    """Parameter tensors plus the config that fixes their topology."""

    def __init__(self, config: UNetConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "UNetModel":
        return UNetModel(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()},
        )

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __call__(self, volume: Tensor) -> Tensor:
        return forward(self, volume)


def build(config: UNetConfig, seed: int = 0, dtype=np.float32) -> UNetModel:
    """He-normal conv weights (std = sqrt(2 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in layer_shapes(config):
        if name.endswith(".bias"):
            arr = np.zeros(shape, dtype=dtype)
        else:
            # transposed conv: each output voxel sees one tap from each input channel
            fan_in = shape[0] if ".up." in name else int(np.prod(shape[1:]))
            arr = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        params[name] = Tensor(arr, requires_grad=True)
    return UNetModel(config, params)


def _double_conv(model: UNetModel, x: Tensor, prefix: str) -> Tensor:
    p = model.params
    x = T.relu(T.conv3d(x, p[f"{prefix}.conv1.weight"], p[f"{prefix}.conv1.bias"]))
    return T.relu(T.conv3d(x, p[f"{prefix}.conv2.weight"], p[f"{prefix}.conv2.bias"]))


def check_extents(shape: tuple[int, ...]) -> None:
    multiple = 2 ** (LEVELS - 1)
    if any(s % multiple for s in shape):
        raise ValueError(f"spatial extents {tuple(shape)} must each be a multiple of {multiple}")


def logits(model: UNetModel, volume: Tensor) -> Tensor:
    """Raw class scores before the softmax."""
    cfg = model.config
    if volume.data.ndim != 4 or volume.shape[0] != cfg.in_channels:
        raise ValueError(f"expected input [{cfg.in_channels}, D, H, W], got {volume.shape}")
    check_extents(volume.shape[1:])
    p = model.params

    skips = []
    x = volume
    for i in range(cfg.levels):
        x = _double_conv(model, x, f"enc{i}")
        if i < cfg.levels - 1:
            skips.append(x)
            x, _ = T.maxpool3d(x)
    x = _double_conv(model, x, "bottleneck")
    for i in reversed(range(cfg.levels - 1)):
        x = T.conv3d_transposed(x, p[f"dec{i}.up.weight"], p[f"dec{i}.up.bias"])
        x = T.concat_channels(x, skips[i])
        x = _double_conv(model, x, f"dec{i}")
    return T.conv3d(x, p["head.weight"], p["head.bias"])


def forward(model: UNetModel, volume: Tensor) -> Tensor:
    """Per-voxel class probabilities ``[num_classes, D, H, W]``."""
    return T.softmax_channels(logits(model, volume))


# ---------------------------------------------------------------- weight file
#
# little-endian:
#   magic[8] | u32 version | u32 dtype code | 6 x u32 config fields | u32 n
#   n x ( u32 ndim | ndim x u32 extent | raw data )


def save_weights(model: UNetModel, path: str | Path) -> None:
    cfg = model.config
    tensors = model.parameters()
    dt = np.dtype(tensors[0].dtype).newbyteorder("<")
    parts = [
        MAGIC,
        struct.pack("<II", FORMAT_VERSION, _DTYPE_CODES[dt]),
        struct.pack("<6I", *asdict(cfg).values()),
        struct.pack("<I", len(tensors)),
    ]
    for t in tensors:
        parts.append(struct.pack(f"<I{t.data.ndim}I", t.data.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype=dt).tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(
                f"{self.path}: truncated weight file (need {self.pos + n} bytes, have {len(self.buf)})"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def load_weights(path: str | Path, config: UNetConfig | None = None) -> UNetModel:
    """Read a weight file; when ``config`` is given it must match the file header."""
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    if buf[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: not a U-Net weight file (bad magic {buf[:8]!r})")
    r.take(len(MAGIC))
    version, code = r.u32(2)
    if version != FORMAT_VERSION:
        raise WeightFileError(f"{path}: unsupported format version {version}")
    dtypes = {v: k for k, v in _DTYPE_CODES.items()}
    if code not in dtypes:
        raise WeightFileError(f"{path}: unknown dtype code {code}")
    dt = dtypes[code]
    try:
        stored = UNetConfig(*r.u32(6))
    except ValueError as exc:
        raise WeightFileError(f"{path}: invalid config in header: {exc}") from None
    if config is not None and config != stored:
        raise ConfigMismatchError(f"{path}: file holds {stored}, expected {config}")
    expected = layer_shapes(stored)
    n = r.u32()
    if n != len(expected):
        raise WeightFileError(f"{path}: {n} tensors in file, config implies {len(expected)}")
    params: dict[str, Tensor] = {}
    for name, shape in expected:
        ndim = r.u32()
        dims = r.u32(ndim)
        dims = (dims,) if ndim == 1 else tuple(dims)
        if dims != shape:
            raise WeightFileError(f"{path}: tensor {name} has shape {dims}, expected {shape}")
        raw = r.take(int(np.prod(shape)) * dt.itemsize)
        arr = np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        params[name] = Tensor(arr, requires_grad=True)
    if r.pos != len(buf):
        raise WeightFileError(f"{path}: {len(buf) - r.pos} trailing bytes after last tensor")
    return UNetModel(stored, params)
