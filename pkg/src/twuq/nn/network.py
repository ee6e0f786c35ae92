"""Encoder-decoder regressor mapping 4-channel stacks to one height map.

The architecture is the usual bottleneck shape: per level two same-size
convolutions + ReLU, 2x max pooling down, transposed-convolution up, and a
skip concatenation at matching resolution, finished by a 1x1 projection.
Dropout after each encoder level is active in training mode only.

Inputs and outputs are meters. Internally the data is divided by a fixed
``unit_scale`` before the first layer and multiplied back after the last,
keeping hidden activations near unit magnitude for metre-scale fields so
that optimizer epsilon terms stay negligible. The scale is part of the
architecture fingerprint.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .layers import (
    Conv2d,
    ConvTranspose2d,
    Dropout,
    MaxPool2d,
    Parameter,
    ReLU,
    concat_channels,
    split_channels,
)

__all__ = [
    "UNetConfig",
    "NetworkWeights",
    "UNet",
    "CheckpointError",
    "CheckpointHeaderError",
    "CheckpointVersionError",
    "CheckpointPayloadError",
    "CheckpointCompatibilityError",
    "save_weights",
    "load_weights",
]

TWNN_MAGIC = b"TWNN"
TWNN_VERSION = 1


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 4
    out_channels: int = 1
    levels: int = 2
    base_width: int = 16
    dropout_rate: float = 0.1
    unit_scale: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"need at least one level, got {self.levels}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.dropout_rate}")
        if self.unit_scale <= 0.0:
            raise ValueError("unit scale must be positive")

    def fingerprint(self) -> str:
        """Architecture identity; member seeds do not enter."""
        text = (
            f"unet:in={self.in_channels}:out={self.out_channels}"
            f":levels={self.levels}:base={self.base_width}"
            f":dropout={self.dropout_rate!r}:scale={self.unit_scale!r}"
        )
        return hashlib.sha256(text.encode()).hexdigest()


@dataclass(frozen=True)
class NetworkWeights:
    """Named parameter snapshot plus the architecture it belongs to."""

    tensors: dict[str, np.ndarray]
    fingerprint: str


class UNet:
    """One network instance; owns parameters and per-layer caches."""

    def __init__(self, config: UNetConfig, init_seed: int | None = None, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        seed = config.seed if init_seed is None else init_seed
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1417]))
        c = config.base_width
        self.enc = []
        in_ch = config.in_channels
        for lvl in range(config.levels):
            width = c * 2**lvl
            self.enc.append(
                {
                    "conv1": Conv2d(in_ch, width, 3, f"enc{lvl}/conv1", rng, dtype),
                    "relu1": ReLU(),
                    "conv2": Conv2d(width, width, 3, f"enc{lvl}/conv2", rng, dtype),
                    "relu2": ReLU(),
                    "pool": MaxPool2d(),
                    "drop": Dropout(config.dropout_rate),
                }
            )
            in_ch = width
        deep = c * 2**config.levels
        self.mid = {
            "conv1": Conv2d(in_ch, deep, 3, "mid/conv1", rng, dtype),
            "relu1": ReLU(),
            "conv2": Conv2d(deep, deep, 3, "mid/conv2", rng, dtype),
            "relu2": ReLU(),
        }
        self.dec = []
        for lvl in reversed(range(config.levels)):
            width = c * 2**lvl
            self.dec.append(
                {
                    "up": ConvTranspose2d(width * 2, width, f"dec{lvl}/up", rng, dtype),
                    "conv1": Conv2d(width * 2, width, 3, f"dec{lvl}/conv1", rng, dtype),
                    "relu1": ReLU(),
                    "conv2": Conv2d(width, width, 3, f"dec{lvl}/conv2", rng, dtype),
                    "relu2": ReLU(),
                }
            )
        self.head = Conv2d(c, config.out_channels, 1, "head", rng, dtype)
        self._skip_widths = [c * 2**lvl for lvl in range(config.levels)]

    def parameters(self) -> list[Parameter]:
        out = []
        for block in self.enc:
            out += block["conv1"].params() + block["conv2"].params()
        out += self.mid["conv1"].params() + self.mid["conv2"].params()
        for block in self.dec:
            out += block["up"].params() + block["conv1"].params() + block["conv2"].params()
        out += self.head.params()
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(
        self, x: np.ndarray, train: bool = False, rng: np.random.Generator | None = None
    ) -> np.ndarray:
        """Map ``(N, C, D, D)`` meters to ``(N, D, D)`` meters.

        Deterministic when ``train`` is false; training mode requires the
        caller's generator for the dropout masks.
        """
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected (N, {self.config.in_channels}, D, D), got {x.shape}")
        d = x.shape[2]
        if x.shape[3] != d or d % 2**self.config.levels != 0:
            raise ValueError(
                f"spatial size {x.shape[2]}x{x.shape[3]} must be square and "
                f"divisible by {2 ** self.config.levels}"
            )
        if train and self.config.dropout_rate > 0.0 and rng is None:
            raise ValueError("training mode needs a random generator for dropout")
        scale = self.dtype(self.config.unit_scale)
        t = np.ascontiguousarray(
            (x / scale).astype(self.dtype, copy=False).transpose(1, 0, 2, 3)
        )
        skips = []
        for block in self.enc:
            t = block["relu1"].forward(block["conv1"].forward(t))
            t = block["relu2"].forward(block["conv2"].forward(t))
            skips.append(t)
            t = block["pool"].forward(t)
            t = block["drop"].forward(t, rng if train else None)
        t = self.mid["relu1"].forward(self.mid["conv1"].forward(t))
        t = self.mid["relu2"].forward(self.mid["conv2"].forward(t))
        for block, skip in zip(self.dec, reversed(skips)):
            t = block["up"].forward(t)
            t = concat_channels(t, skip)
            t = block["relu1"].forward(block["conv1"].forward(t))
            t = block["relu2"].forward(block["conv2"].forward(t))
        t = self.head.forward(t)
        return t[0] * scale

    def backward(self, grad_pred: np.ndarray) -> None:
        """Accumulate parameter gradients for a ``(N, D, D)`` output grad."""
        scale = self.dtype(self.config.unit_scale)
        g = (grad_pred * scale).astype(self.dtype, copy=False)[np.newaxis]
        g = self.head.backward(g)
        for block, width in zip(reversed(self.dec), self._skip_widths):
            g = block["conv2"].backward(block["relu2"].backward(g))
            g = block["conv1"].backward(block["relu1"].backward(g))
            g, g_skip = split_channels(g, g.shape[0] - width)
            g = block["up"].backward(g)
            block["_g_skip"] = g_skip
        g = self.mid["conv2"].backward(self.mid["relu2"].backward(g))
        g = self.mid["conv1"].backward(self.mid["relu1"].backward(g))
        for block, dec_block in zip(reversed(self.enc), self.dec):
            g = block["pool"].backward(block["drop"].backward(g))
            g = g + dec_block.pop("_g_skip")
            g = block["conv2"].backward(block["relu2"].backward(g))
            g = block["conv1"].backward(block["relu1"].backward(g))

    def weights(self) -> NetworkWeights:
        return NetworkWeights(
            tensors={p.name: p.data.copy() for p in self.parameters()},
            fingerprint=self.config.fingerprint(),
        )

    def set_weights(self, weights: NetworkWeights) -> None:
        if weights.fingerprint != self.config.fingerprint():
            raise CheckpointCompatibilityError(
                "weights belong to a different architecture"
            )
        for p in self.parameters():
            p.data[...] = weights.tensors[p.name]


class CheckpointError(Exception):
    """Base class for checkpoint file errors."""


class CheckpointHeaderError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointPayloadError(CheckpointError):
    pass


class CheckpointCompatibilityError(CheckpointError):
    """Stored fingerprint disagrees with the requesting architecture."""


_CKPT_HEADER = struct.Struct("<4sI64s64sI")
_DTYPE_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def save_weights(weights: NetworkWeights, path: str | Path, config_hash: str = "") -> None:
    """Versioned binary checkpoint; bitwise round trip."""
    with open(path, "wb") as f:
        f.write(
            _CKPT_HEADER.pack(
                TWNN_MAGIC,
                TWNN_VERSION,
                weights.fingerprint.encode("ascii")[:64],
                config_hash.encode("ascii")[:64],
                len(weights.tensors),
            )
        )
        for name, tensor in weights.tensors.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<BB", tensor.dtype.itemsize, tensor.ndim))
            f.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            code = tensor.dtype.itemsize
            f.write(np.ascontiguousarray(tensor, dtype=_DTYPE_CODES[code]).tobytes())


def _read_exact(f: BinaryIO, size: int, what: str) -> bytes:
    buf = f.read(size)
    if len(buf) != size:
        raise CheckpointPayloadError(f"truncated checkpoint while reading {what}")
    return buf


def load_weights(path: str | Path, config: UNetConfig | None = None) -> NetworkWeights:
    """Read a TWNN checkpoint, verifying the fingerprint when asked."""
    with open(path, "rb") as f:
        head = f.read(_CKPT_HEADER.size)
        if len(head) < _CKPT_HEADER.size:
            raise CheckpointHeaderError(f"file too short for a TWNN header: {path}")
        magic, version, fp_raw, _cfg_hash, n_params = _CKPT_HEADER.unpack(head)
        if magic != TWNN_MAGIC:
            raise CheckpointHeaderError(f"bad magic bytes {magic!r} in {path}")
        if version != TWNN_VERSION:
            raise CheckpointVersionError(
                f"unsupported checkpoint version {version} (expected {TWNN_VERSION})"
            )
        fingerprint = fp_raw.rstrip(b"\x00").decode("ascii")
        if config is not None and fingerprint != config.fingerprint():
            raise CheckpointCompatibilityError(
                f"checkpoint fingerprint {fingerprint[:12]}... does not match "
                f"the requested architecture"
            )
        tensors: dict[str, np.ndarray] = {}
        for i in range(n_params):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, f"param {i} name length"))
            name = _read_exact(f, name_len, f"param {i} name").decode("utf-8")
            code, ndim = struct.unpack("<BB", _read_exact(f, 2, f"param {i} layout"))
            if code not in _DTYPE_CODES:
                raise CheckpointPayloadError(f"unknown dtype code {code} for {name}")
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, f"param {i} shape"))
            nbytes = int(np.prod(shape, dtype=np.int64)) * code
            tensors[name] = np.frombuffer(
                _read_exact(f, nbytes, f"param {i} payload"), dtype=_DTYPE_CODES[code]
            ).reshape(shape)
        if f.read(1):
            raise CheckpointPayloadError(f"trailing bytes after {n_params} tensors in {path}")
    return NetworkWeights(tensors=tensors, fingerprint=fingerprint)


def checkpoint_config_hash(path: str | Path) -> str:
    """Experiment-config hash recorded at save time (may be empty)."""
    with open(path, "rb") as f:
        head = f.read(_CKPT_HEADER.size)
    if len(head) < _CKPT_HEADER.size:
        raise CheckpointHeaderError(f"file too short for a TWNN header: {path}")
    _, _, _, cfg_raw, _ = _CKPT_HEADER.unpack(head)
    return cfg_raw.rstrip(b"\x00").decode("ascii")
