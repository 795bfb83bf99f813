"""Dense networks over a flat float64 parameter vector, plus optimizer,
learning-rate schedule and binary checkpoint serialization.

Parameters live in named segments; the flat layout (ordered (name, shape)
pairs) is the single source of truth for optimizer state, gradients, file
serialization and cosine-similarity comparisons across models.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericError, TruncatedError, VersionError

ACTIVATIONS = ("relu", "tanh", "identity", "softmax")

CHECKPOINT_MAGIC = b"XTRA"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ParamLayout:
    """Ordered (name, shape) segments of a flat parameter vector."""

    segments: tuple[tuple[str, tuple[int, ...]], ...]

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.segments)

    def slices(self) -> list[tuple[str, slice, tuple[int, ...]]]:
        out = []
        lo = 0
        for name, shape in self.segments:
            n = int(np.prod(shape))
            out.append((name, slice(lo, lo + n), shape))
            lo += n
        return out

    def segment_slice(self, name: str) -> tuple[slice, tuple[int, ...]]:
        for n, sl, shape in self.slices():
            if n == name:
                return sl, shape
        raise KeyError(name)


def flatten(items: list[tuple[str, np.ndarray]]) -> tuple[ParamLayout, np.ndarray]:
    layout = ParamLayout(tuple((n, tuple(a.shape)) for n, a in items))
    if items:
        vec = np.concatenate([a.ravel() for _, a in items]).astype(np.float64)
    else:
        vec = np.zeros(0, dtype=np.float64)
    return layout, vec


def unflatten(layout: ParamLayout, vec: np.ndarray) -> dict[str, np.ndarray]:
    if vec.shape != (layout.size,):
        raise ConfigError(
            f"vector length {vec.shape} does not match layout size {layout.size}"
        )
    return {
        name: vec[sl].reshape(shape).copy() for name, sl, shape in layout.slices()
    }


def check_finite(layout: ParamLayout, vec: np.ndarray, what: str = "gradient") -> None:
    if np.isfinite(vec).all():
        return
    for name, sl, _ in layout.slices():
        if not np.isfinite(vec[sl]).all():
            raise NumericError(f"non-finite {what} in segment {name}")
    raise NumericError(f"non-finite {what}")


class DenseNet:
    """A stack of affine layers with per-layer activation tags.

    sizes = [d_in, d_h1, ..., d_out]; activations has one tag per layer.
    Parameter names are "{name}/w{i}" and "{name}/b{i}" in layer order.
    """

    def __init__(
        self,
        name: str,
        sizes: list[int],
        activations: list[str],
        rng: np.random.Generator,
        final_scale: float = 1.0,
    ):
        if len(activations) != len(sizes) - 1:
            raise ConfigError(
                f"{name}: {len(sizes) - 1} layers need {len(sizes) - 1} activation "
                f"tags, got {len(activations)}"
            )
        for act in activations:
            if act not in ACTIVATIONS:
                raise ConfigError(f"{name}: unknown activation tag {act!r}")
        self.name = name
        self.sizes = list(sizes)
        self.activations = list(activations)
        self.params: dict[str, np.ndarray] = {}
        last = len(sizes) - 2
        for i in range(len(sizes) - 1):
            fan_in = sizes[i]
            scale = (1.0 / np.sqrt(fan_in)) * (final_scale if i == last else 1.0)
            self.params[f"{name}/w{i}"] = rng.standard_normal(
                (sizes[i], sizes[i + 1])
            ) * scale
            self.params[f"{name}/b{i}"] = np.zeros(sizes[i + 1], dtype=np.float64)

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        return list(self.params.items())

    def _apply(self, x: np.ndarray, act: str) -> np.ndarray:
        if act == "relu":
            return np.maximum(x, 0.0)
        if act == "tanh":
            return np.tanh(x)
        if act == "softmax":
            e = np.exp(x - x.max(axis=-1, keepdims=True))
            return e / e.sum(axis=-1, keepdims=True)
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Inference path without gradient tracking; accepts [B, d_in] or [d_in]."""
        h = np.asarray(x, dtype=np.float64)
        for i, act in enumerate(self.activations):
            h = h @ self.params[f"{self.name}/w{i}"] + self.params[f"{self.name}/b{i}"]
            h = self._apply(h, act)
        return h

    def forward_t(self, x: ad.Tensor, leaves: dict[str, ad.Tensor]) -> ad.Tensor:
        """Differentiable path; `leaves` maps parameter names to leaf Tensors."""
        h = x
        for i, act in enumerate(self.activations):
            h = ad.matmul(h, leaves[f"{self.name}/w{i}"])
            h = ad.add(h, leaves[f"{self.name}/b{i}"])
            if act == "relu":
                h = ad.relu(h)
            elif act == "tanh":
                h = ad.tanh(h)
            elif act == "softmax":
                h = ad.softmax(h)
        return h

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        for name in self.params:
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != self.params[name].shape:
                raise ConfigError(
                    f"shape mismatch for {name}: {arr.shape} vs {self.params[name].shape}"
                )
            self.params[name] = arr.copy()


def sgd_step(
    params: np.ndarray,
    grad: np.ndarray,
    velocity: np.ndarray,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
) -> tuple[np.ndarray, np.ndarray]:
    """One SGD-with-momentum update on flat vectors.

    v' = momentum * v + grad + weight_decay * params
    p' = params - lr * v'

    Weight decay enters here (decoupled from the loss), so loss gradients used
    for task-similarity never include it.
    """
    if params.shape != grad.shape or params.shape != velocity.shape:
        raise ConfigError(
            f"mismatched shapes: params {params.shape}, grad {grad.shape}, "
            f"velocity {velocity.shape}"
        )
    v = momentum * velocity + grad + weight_decay * params
    return params - lr * v, v


def lr_schedule(
    step: int,
    total_steps: int,
    lr_start: float,
    lr_end: float,
    mode: str = "linear",
) -> float:
    """Learning rate at `step` of `total_steps`; exact at both endpoints."""
    if step < 0 or (total_steps > 0 and step > total_steps):
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if total_steps <= 0 or step == 0:
        return lr_start
    if step == total_steps:
        if mode not in ("linear", "step"):
            raise ConfigError(f"unknown lr schedule mode {mode!r}")
        return lr_end
    frac = step / total_steps
    if mode == "step":
        # ten equal plateaus; the final boundary still lands exactly on lr_end
        frac = np.floor(frac * 10.0) / 10.0 if step < total_steps else 1.0
    elif mode != "linear":
        raise ConfigError(f"unknown lr schedule mode {mode!r}")
    return lr_start + (lr_end - lr_start) * frac


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    """Global-norm clipping; returns grad scaled so its L2 norm is <= max_norm."""
    if max_norm <= 0:
        return grad
    norm = float(np.linalg.norm(grad))
    if norm <= max_norm or norm == 0.0:
        return grad
    return grad * (max_norm / norm)


def save_checkpoint(path, layout: ParamLayout, values: np.ndarray) -> None:
    """Binary format: magic, version, segment table, little-endian f64 payload."""
    if values.shape != (layout.size,):
        raise ConfigError(
            f"vector length {values.shape} does not match layout size {layout.size}"
        )
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    parts.append(struct.pack("<I", len(layout.segments)))
    for name, shape in layout.segments:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", len(shape)))
        for d in shape:
            parts.append(struct.pack("<I", d))
    parts.append(np.ascontiguousarray(values, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(
                f"{self.path}: needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> tuple[ParamLayout, np.ndarray]:
    with open(path, "rb") as f:
        reader = _Reader(f.read(), path)
    magic = reader.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise VersionError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise VersionError(
            f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )
    n_segments = reader.u32()
    segments = []
    for _ in range(n_segments):
        name = reader.take(reader.u32()).decode("utf-8")
        ndim = reader.u32()
        shape = tuple(reader.u32() for _ in range(ndim))
        segments.append((name, shape))
    layout = ParamLayout(tuple(segments))
    payload = reader.take(8 * layout.size)
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return layout, values
