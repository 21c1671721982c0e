"""Small classifiers expressed over a flat parameter vector.

A model is fully described by a :class:`ModelSpec`; its parameters live in a
single 1-D float64 array (the "param vector") so that lookahead steps are
plain vector arithmetic. :func:`forward` is a pure function of
``(spec, theta, x)``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "ModelSpec",
    "ParamLayout",
    "Classifier",
    "param_layout",
    "init_params",
    "forward",
    "param_leaves",
    "save_checkpoint",
    "load_checkpoint",
]

KINDS = ("mlp", "small_cnn")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    For ``mlp`` the ``hidden`` entries are layer widths (empty for a linear
    model); for ``small_cnn`` they are the channel counts of the two conv
    layers (stride 1, same padding), followed by a dense read-out.
    """

    kind: str
    input_shape: tuple[int, ...]
    num_classes: int
    hidden: tuple[int, ...] = (32,)
    kernel_size: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.kind == "small_cnn" and len(self.hidden) != 2:
            raise ValueError("small_cnn takes exactly two conv channel counts")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")
        if self.kind == "mlp" and len(self.input_shape) != 1:
            raise ValueError(f"mlp expects a flat input shape, got {self.input_shape}")
        if self.kind == "small_cnn":
            if len(self.input_shape) != 3:
                raise ValueError(f"small_cnn expects (H, W, C) input, got {self.input_shape}")
            if self.kernel_size < 1 or self.kernel_size % 2 == 0:
                raise ValueError("kernel_size must be a positive odd integer")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        return cls(
            kind=d["kind"],
            input_shape=tuple(d["input_shape"]),
            num_classes=int(d["num_classes"]),
            hidden=tuple(d.get("hidden", (32,))),
            kernel_size=int(d.get("kernel_size", 3)),
            seed=int(d.get("seed", 0)),
        )


@dataclass(frozen=True)
class ParamLayout:
    names: tuple[str, ...]
    shapes: tuple[tuple[int, ...], ...]
    offsets: tuple[int, ...] = field(init=False)
    size: int = field(init=False)

    def __post_init__(self):
        offsets, total = [], 0
        for s in self.shapes:
            offsets.append(total)
            total += int(np.prod(s))
        object.__setattr__(self, "offsets", tuple(offsets))
        object.__setattr__(self, "size", total)

    def unflatten(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.size,):
            raise ValueError(f"param vector has shape {theta.shape}, expected ({self.size},)")
        return {
            name: theta[off:off + int(np.prod(shape))].reshape(shape)
            for name, shape, off in zip(self.names, self.shapes, self.offsets)
        }

    def flatten(self, parts) -> np.ndarray:
        if isinstance(parts, dict):
            parts = [parts[n] for n in self.names]
        parts = list(parts)
        if len(parts) != len(self.names):
            raise ValueError(f"expected {len(self.names)} parameter arrays, got {len(parts)}")
        for name, shape, p in zip(self.names, self.shapes, parts):
            if np.shape(p) != shape:
                raise ValueError(f"parameter {name} has shape {np.shape(p)}, expected {shape}")
        return np.concatenate([np.asarray(p, dtype=np.float64).reshape(-1) for p in parts])


def param_layout(spec: ModelSpec) -> ParamLayout:
    names: list[str] = []
    shapes: list[tuple[int, ...]] = []
    if spec.kind == "mlp":
        widths = (spec.input_shape[0], *spec.hidden, spec.num_classes)
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            names += [f"W{i}", f"b{i}"]
            shapes += [(a, b), (b,)]
    else:
        h, w, c = spec.input_shape
        k = spec.kernel_size
        c1, c2 = spec.hidden
        names = ["conv0", "cb0", "conv1", "cb1", "W_out", "b_out"]
        shapes = [(k, k, c, c1), (c1,), (k, k, c1, c2), (c2,), (h * w * c2, spec.num_classes), (spec.num_classes,)]
    return ParamLayout(tuple(names), tuple(shapes))


def init_params(spec: ModelSpec) -> np.ndarray:
    """He-normal weights for hidden layers, 1/fan_in variance for the read-out, zero biases."""
    layout = param_layout(spec)
    rng = np.random.default_rng(spec.seed)
    parts = []
    weight_names = [n for n in layout.names if not n.startswith(("b", "cb"))]
    last_weight = weight_names[-1]
    for name, shape in zip(layout.names, layout.shapes):
        if name.startswith(("b", "cb")):
            parts.append(np.zeros(shape))
            continue
        fan_in = int(np.prod(shape[:-1]))
        gain = 1.0 if name == last_weight else 2.0
        parts.append(rng.normal(0.0, np.sqrt(gain / fan_in), size=shape))
    return layout.flatten(parts)


def param_leaves(spec: ModelSpec, theta: np.ndarray, requires_grad: bool = True) -> list[Tensor]:
    layout = param_layout(spec)
    arrays = layout.unflatten(theta)
    return [T.tensor(arrays[n], requires_grad=requires_grad) for n in layout.names]


def _check_batch(spec: ModelSpec, x: np.ndarray) -> None:
    if x.ndim != len(spec.input_shape) + 1 or tuple(x.shape[1:]) != spec.input_shape:
        raise T.ShapeError(f"forward: batch shape {x.shape} does not match input shape {spec.input_shape}")


def _forward_leaves(spec: ModelSpec, leaves: list[Tensor], x: np.ndarray) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    _check_batch(spec, x)
    h = T.constant(x)
    if spec.kind == "mlp":
        n_layers = len(leaves) // 2
        for i in range(n_layers):
            h = T.matmul(h, leaves[2 * i]) + leaves[2 * i + 1]
            if i < n_layers - 1:
                h = T.relu(h)
        return h
    pad = spec.kernel_size // 2
    conv0, cb0, conv1, cb1, w_out, b_out = leaves
    h = T.relu(T.conv2d(h, conv0, padding=pad) + cb0)
    h = T.relu(T.conv2d(h, conv1, padding=pad) + cb1)
    h = T.reshape(h, (x.shape[0], -1))
    return T.matmul(h, w_out) + b_out


def forward(spec: ModelSpec, theta: np.ndarray, x: np.ndarray, track: bool = True) -> tuple[Tensor, list[Tensor]]:
    """Logits ``(n, K)`` for batch ``x`` at parameters ``theta``.

    Returns the logits together with the parameter leaves so callers can take
    gradients with :func:`ltreweight.tensor.grad`.
    """
    leaves = param_leaves(spec, theta, requires_grad=track)
    return _forward_leaves(spec, leaves, x), leaves


class Classifier:
    """Stateful convenience wrapper holding a spec and its current parameters."""

    def __init__(self, spec: ModelSpec, theta: np.ndarray | None = None):
        self.spec = spec
        self.layout = param_layout(spec)
        self._theta = init_params(spec) if theta is None else self._validated(theta)

    def _validated(self, theta) -> np.ndarray:
        theta = np.array(theta, dtype=np.float64)
        if theta.shape != (self.layout.size,):
            raise ValueError(f"param vector has length {theta.size}, expected {self.layout.size}")
        return theta

    @property
    def num_params(self) -> int:
        return self.layout.size

    def get_params(self) -> np.ndarray:
        return self._theta.copy()

    def set_params(self, theta) -> None:
        self._theta = self._validated(theta)

    def logits(self, x: np.ndarray) -> np.ndarray:
        out, _ = forward(self.spec, self._theta, x, track=False)
        return out.data

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x)


_MAGIC = b"LTRWCKPT"


def save_checkpoint(path, spec: ModelSpec, theta: np.ndarray, extra: dict | None = None) -> None:
    """Write ``magic | u64 header length | JSON header | raw little-endian float64 params``."""
    theta = np.asarray(theta, dtype="<f8")
    header = {"spec": spec.to_dict(), "num_params": int(theta.size)}
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        f.write(theta.tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[ModelSpec, np.ndarray, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic at byte 0)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    body = raw[16 + hlen:]
    n = header["num_params"]
    if len(body) != 8 * n:
        raise ValueError(f"{path}: expected {8 * n} parameter bytes at offset {16 + hlen}, found {len(body)}")
    theta = np.frombuffer(body, dtype="<f8").astype(np.float64)
    spec = ModelSpec.from_dict(header["spec"])
    if theta.size != param_layout(spec).size:
        raise ValueError(f"{path}: parameter count {theta.size} does not match spec")
    return spec, theta, header.get("extra", {})
