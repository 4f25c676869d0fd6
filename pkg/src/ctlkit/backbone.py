"""Trainable feedforward encoder with exact manual backpropagation.

A small multilayer map from descriptor space to embedding space: linear
layers with rectifier activations on hidden layers and an identity output.
All math runs in float64 so gradients can be checked against central finite
differences at tight tolerance. The first layer can be frozen, in which case
it receives zero gradients and is never touched by SGD.

Checkpoint format (binary, little-endian):
    magic ``CTLE`` | u32 version=1 | u32 n_dims | u32 flags | u32 epochs_trained
    | n_dims * u32 layer dims | per layer: weights (out*in float64) then bias
    (out float64)

flags bit 0 is ``frozen_first_layer``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"CTLE"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIII")


@dataclass
class Encoder:
    """Feedforward encoder; ``weights[l]`` has shape (out_dim, in_dim)."""

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    frozen_first_layer: bool = False

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError(f"invalid layer dims {dims}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ValueError("parameter count does not match layer dims")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[l + 1], dims[l]) or b.shape != (dims[l + 1],):
                raise ValueError(f"layer {l} parameter shapes inconsistent with dims")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {l} has non-finite parameters")
        self.layer_dims = dims

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "Encoder":
        return Encoder(
            layer_dims=self.layer_dims,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            frozen_first_layer=self.frozen_first_layer,
        )


@dataclass(frozen=True)
class ParamGrads:
    """Per-layer gradients matching an encoder's parameter shapes."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass(frozen=True)
class LrSchedule:
    """Piecewise-constant learning-rate schedule, e.g. 40 epochs at 1e-3
    then 30 at 1e-4 then 30 at 1e-5."""

    segments: tuple[tuple[int, float], ...]

    def __post_init__(self):
        segs = tuple((int(n), float(lr)) for n, lr in self.segments)
        if not segs or any(n < 1 for n, _ in segs):
            raise ValueError("schedule needs at least one segment of >= 1 epoch")
        if any(not np.isfinite(lr) or lr <= 0 for _, lr in segs):
            raise ValueError("learning rates must be finite and positive")
        object.__setattr__(self, "segments", segs)

    @property
    def total_epochs(self) -> int:
        return sum(n for n, _ in self.segments)

    @classmethod
    def parse(cls, text: str) -> "LrSchedule":
        """Parse ``"40:1e-3,30:1e-4,30:1e-5"``."""
        segs = []
        for part in text.split(","):
            n, lr = part.split(":")
            segs.append((int(n), float(lr)))
        return cls(tuple(segs))


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """Learning rate in effect at a 0-based epoch index."""
    if epoch < 0 or epoch >= schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside schedule of {schedule.total_epochs}")
    upto = 0
    for n, lr in schedule.segments:
        upto += n
        if epoch < upto:
            return lr
    raise AssertionError("unreachable")


def init_encoder(
    layer_dims: list[int] | tuple[int, ...],
    seed: int,
    frozen_first_layer: bool = False,
) -> Encoder:
    """Deterministic init: weights uniform in +-1/sqrt(fan_in), biases zero."""
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2:
        raise ValueError("need at least input and output dims")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for l in range(len(dims) - 1):
        fan_in = dims[l]
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(dims[l + 1], dims[l])))
        biases.append(np.zeros(dims[l + 1]))
    return Encoder(dims, weights, biases, frozen_first_layer)


def identity_encoder(dim: int) -> Encoder:
    """Single linear layer with identity weights; embeds descriptors unchanged."""
    return Encoder((dim, dim), [np.eye(dim)], [np.zeros(dim)])


def _forward(encoder: Encoder, x: np.ndarray) -> list[np.ndarray]:
    """All layer activations, input first, output last."""
    acts = [x]
    h = x
    for l in range(encoder.n_layers):
        z = h @ encoder.weights[l].T + encoder.biases[l]
        if l < encoder.n_layers - 1:
            z = np.maximum(z, 0.0)  # rectifier, subgradient 0 at 0
        acts.append(z)
        h = z
    return acts


def encode(encoder: Encoder, batch: np.ndarray) -> np.ndarray:
    """Map descriptor rows (count x D_in) to embedding rows (count x D_out)."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != encoder.input_dim:
        raise ValueError(
            f"batch shape {x.shape} incompatible with input dim {encoder.input_dim}"
        )
    return _forward(encoder, x)[-1]


def encoder_backward(
    encoder: Encoder, batch: np.ndarray, grad_output: np.ndarray
) -> ParamGrads:
    """Gradient of sum(grad_output * encode(batch)) w.r.t. all parameters.

    The frozen first layer, if any, gets explicit zero gradients.
    """
    x = np.asarray(batch, dtype=np.float64)
    g = np.asarray(grad_output, dtype=np.float64)
    acts = _forward(encoder, x)
    if g.shape != acts[-1].shape:
        raise ValueError(f"grad_output shape {g.shape} != output shape {acts[-1].shape}")

    grads_w = [None] * encoder.n_layers
    grads_b = [None] * encoder.n_layers
    delta = g
    for l in range(encoder.n_layers - 1, -1, -1):
        if l < encoder.n_layers - 1:
            delta = delta * (acts[l + 1] > 0)  # rectifier mask at this layer's output
        grads_w[l] = delta.T @ acts[l]
        grads_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = delta @ encoder.weights[l]
    if encoder.frozen_first_layer:
        grads_w[0] = np.zeros_like(grads_w[0])
        grads_b[0] = np.zeros_like(grads_b[0])
    return ParamGrads(weights=grads_w, biases=grads_b)


def sgd_step(encoder: Encoder, grads: ParamGrads, lr: float) -> None:
    """In-place plain SGD: p -= lr * g; the frozen first layer never moves."""
    if lr < 0 or not np.isfinite(lr):
        raise ValueError(f"invalid learning rate {lr}")
    for l in range(encoder.n_layers):
        gw, gb = grads.weights[l], grads.biases[l]
        if gw.shape != encoder.weights[l].shape or gb.shape != encoder.biases[l].shape:
            raise ValueError(f"layer {l} gradient shape mismatch")
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise ValueError(f"layer {l} gradient is non-finite")
        if l == 0 and encoder.frozen_first_layer:
            continue
        encoder.weights[l] -= lr * gw
        encoder.biases[l] -= lr * gb


def save_checkpoint(encoder: Encoder, path: str | Path, epochs_trained: int = 0) -> None:
    flags = 1 if encoder.frozen_first_layer else 0
    parts = [
        _CKPT_HEADER.pack(
            CHECKPOINT_MAGIC,
            CHECKPOINT_VERSION,
            len(encoder.layer_dims),
            flags,
            int(epochs_trained),
        ),
        struct.pack(f"<{len(encoder.layer_dims)}I", *encoder.layer_dims),
    ]
    for w, b in zip(encoder.weights, encoder.biases):
        parts.append(w.astype("<f8", copy=False).tobytes(order="C"))
        parts.append(b.astype("<f8", copy=False).tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> tuple[Encoder, int]:
    """Returns (encoder, epochs_trained)."""
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise ValueError(f"{path}: file shorter than checkpoint header")
    magic, version, n_dims, flags, epochs = _CKPT_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = _CKPT_HEADER.size
    dims = struct.unpack_from(f"<{n_dims}I", raw, off)
    off += 4 * n_dims
    weights, biases = [], []
    for l in range(n_dims - 1):
        w_n = dims[l + 1] * dims[l]
        w = np.frombuffer(raw, dtype="<f8", count=w_n, offset=off).reshape(
            dims[l + 1], dims[l]
        )
        off += 8 * w_n
        b = np.frombuffer(raw, dtype="<f8", count=dims[l + 1], offset=off)
        off += 8 * dims[l + 1]
        weights.append(w.copy())
        biases.append(b.copy())
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after parameters")
    enc = Encoder(dims, weights, biases, frozen_first_layer=bool(flags & 1))
    return enc, int(epochs)
