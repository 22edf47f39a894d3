"""Classifier architectures and their parameter file format."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

ARCHITECTURES = ("lenet5", "mlp", "cnn3", "linear")

MAGIC = b"PCRNET\x00\x01"
FORMAT_VERSION = 1


class ParamFileError(ValueError):
    """A parameter file is malformed, truncated, or incompatible."""


# ---------------------------------------------------------------------------
# layers


class Layer:
    def params(self) -> list[Tensor]:
        return []

    def __call__(self, x: Tensor) -> Tensor:
        raise NotImplementedError


class Linear(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (n_in, n_out)).astype(dtype), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, n_out).astype(dtype), requires_grad=True)

    def params(self):
        return [self.weight, self.bias]

    def __call__(self, x):
        return nx.add_bias(nx.matmul(x, self.weight), self.bias)


class Conv2d(Layer):
    def __init__(self, c_in, c_out, k, rng, padding=0, dtype=np.float64):
        fan_in = c_in * k * k
        bound = 1.0 / np.sqrt(fan_in)
        self.padding = padding
        self.weight = Tensor(rng.uniform(-bound, bound, (c_out, c_in, k, k)).astype(dtype), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, c_out).astype(dtype), requires_grad=True)

    def params(self):
        return [self.weight, self.bias]

    def __call__(self, x):
        return nx.add_bias(nx.conv2d(x, self.weight, padding=self.padding), self.bias)


class ReLU(Layer):
    def __call__(self, x):
        return nx.relu(x)


class MaxPool(Layer):
    def __init__(self, size=2):
        self.size = size

    def __call__(self, x):
        return nx.max_pool2d(x, self.size)


class Flatten(Layer):
    def __call__(self, x):
        return nx.flatten(x)


# ---------------------------------------------------------------------------
# networks


@dataclass
class ArchitectureSpec:
    name: str
    input_shape: tuple[int, int, int] = (1, 28, 28)
    num_classes: int = 10
    hidden: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.name not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.name!r}; expected one of {ARCHITECTURES}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.hidden = tuple(int(h) for h in self.hidden)
        if len(self.input_shape) != 3:
            raise ShapeError(f"input_shape must be (C, H, W), got {self.input_shape}")


class Network:
    """Ordered layer stack mapping (N, C, H, W) images to (N, K) logits."""

    def __init__(self, spec: ArchitectureSpec, layers: list[Layer]):
        self.spec = spec
        self.layers = layers
        self.grad_calls = 0
        self.forward_calls = 0

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.spec.input_shape

    @property
    def dtype(self):
        return self.params()[0].dtype

    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]

    def num_params(self) -> int:
        return int(sum(p.data.size for p in self.params()))

    def _check_input(self, x: Tensor):
        if x.data.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"network expects (N, {', '.join(map(str, self.input_shape))}), got {x.shape}")

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        self._check_input(x)
        self.forward_calls += x.shape[0]
        out = x
        for layer in self.layers:
            out = layer(out)
        return out

    __call__ = forward

    def logits(self, x: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        """Untracked forward pass in chunks."""
        x = np.asarray(x, dtype=self.dtype)
        chunks = [self.forward(Tensor(x[i : i + batch_size])).data for i in range(0, len(x), batch_size)]
        if not chunks:
            return np.zeros((0, self.num_classes), dtype=self.dtype)
        return np.concatenate(chunks)

    def astype(self, dtype) -> "Network":
        for p in self.params():
            p.data = p.data.astype(dtype)
        return self

    def get_state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params()]

    def set_state(self, arrays: list[np.ndarray]) -> None:
        params = self.params()
        if len(arrays) != len(params):
            raise ShapeError(f"expected {len(params)} tensors, got {len(arrays)}")
        for p, a in zip(params, arrays):
            if a.shape != p.shape:
                raise ShapeError(f"parameter shape {a.shape} does not match {p.shape}")
            p.data = np.array(a, dtype=p.dtype, copy=True)

    def copy(self) -> "Network":
        twin = build(self.spec, seed=0, dtype=self.dtype)
        twin.set_state(self.get_state())
        return twin


def _conv_out(size, k, pad=0):
    return size + 2 * pad - k + 1


def build(spec: ArchitectureSpec, seed: int = 0, dtype=np.float64) -> Network:
    """Construct a freshly initialized network (uniform fan-in init)."""
    rng = np.random.default_rng(seed)
    c, h, w = spec.input_shape
    k = spec.num_classes
    kw = dict(rng=rng, dtype=dtype)
    layers: list[Layer]
    if spec.name == "lenet5":
        if _conv_out(h, 5) // 2 < 5 or _conv_out(w, 5) // 2 < 5:
            raise ShapeError(f"lenet5 needs inputs of at least 14x14, got {h}x{w}")
        h2, w2 = _conv_out(_conv_out(h, 5) // 2, 5) // 2, _conv_out(_conv_out(w, 5) // 2, 5) // 2
        if h2 < 1 or w2 < 1:
            raise ShapeError(f"lenet5 cannot handle input {h}x{w}")
        layers = [
            Conv2d(c, 6, 5, **kw), ReLU(), MaxPool(2),
            Conv2d(6, 16, 5, **kw), ReLU(), MaxPool(2),
            Flatten(),
            Linear(16 * h2 * w2, 120, **kw), ReLU(),
            Linear(120, 84, **kw), ReLU(),
            Linear(84, k, **kw),
        ]
    elif spec.name == "cnn3":
        # conv-conv-dense substitute; 3x3 same-padding convolutions
        if h < 4 or w < 4:
            raise ShapeError(f"cnn3 needs inputs of at least 4x4, got {h}x{w}")
        layers = [
            Conv2d(c, 16, 3, padding=1, **kw), ReLU(), MaxPool(2),
            Conv2d(16, 32, 3, padding=1, **kw), ReLU(), MaxPool(2),
            Flatten(),
            Linear(32 * (h // 2 // 2) * (w // 2 // 2), k, **kw),
        ]
    elif spec.name == "mlp":
        sizes = [c * h * w, *(spec.hidden or (128, 64))]
        layers = [Flatten()]
        for a, b in zip(sizes[:-1], sizes[1:]):
            layers += [Linear(a, b, **kw), ReLU()]
        layers.append(Linear(sizes[-1], k, **kw))
    else:  # linear
        layers = [Flatten(), Linear(c * h * w, k, **kw)]
    return Network(spec, layers)


def predict(net: Network, x) -> np.ndarray:
    """Arg-max class per sample (first index on ties)."""
    if isinstance(x, Tensor):
        x = x.data
    return net.logits(x).argmax(axis=1)


def accuracy(net: Network, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict(net, x) == np.asarray(y)))


# ---------------------------------------------------------------------------
# parameter files
#
# layout (little-endian):
#   magic[8] | u32 version | u32 header_len | header (utf-8 JSON of the
#   ArchitectureSpec) | u32 tensor_count | per tensor: u32 ndim, u32 dims...,
#   float64 values


def _header(spec: ArchitectureSpec) -> bytes:
    d = asdict(spec)
    d["input_shape"] = list(spec.input_shape)
    d["hidden"] = list(spec.hidden)
    return json.dumps(d, sort_keys=True).encode("utf-8")


def dump_params(net: Network) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    header = _header(net.spec)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(header)))
    buf.write(header)
    params = net.params()
    buf.write(struct.pack("<I", len(params)))
    for p in params:
        buf.write(struct.pack("<I", p.data.ndim))
        buf.write(struct.pack(f"<{p.data.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return buf.getvalue()


def save_params(net: Network, path) -> None:
    Path(path).write_bytes(dump_params(net))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise ParamFileError(f"truncated parameter file: need {n} bytes at offset {self.pos}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count=1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def parse_params(raw: bytes, num_classes: int | None = None, dtype=np.float64) -> Network:
    r = _Reader(raw)
    if r.take(len(MAGIC)) != MAGIC:
        raise ParamFileError("not a parameter file (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise ParamFileError(f"unsupported format version {version}")
    try:
        d = json.loads(r.take(r.u32()).decode("utf-8"))
        spec = ArchitectureSpec(d["name"], tuple(d["input_shape"]), int(d["num_classes"]), tuple(d["hidden"]))
    except (KeyError, ValueError, TypeError) as exc:
        raise ParamFileError(f"bad architecture header: {exc}") from exc
    if num_classes is not None and spec.num_classes != num_classes:
        raise ParamFileError(f"file holds a {spec.num_classes}-class network, expected {num_classes}")
    arrays = []
    for _ in range(r.u32()):
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        size = int(np.prod(shape))
        arrays.append(np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape))
    if r.pos != len(raw):
        raise ParamFileError(f"{len(raw) - r.pos} trailing bytes after last tensor")
    net = build(spec, seed=0, dtype=dtype)
    try:
        net.set_state(arrays)
    except ShapeError as exc:
        raise ParamFileError(str(exc)) from exc
    return net


def load_params(path, num_classes: int | None = None, dtype=np.float64) -> Network:
    """Read a network written by :func:`save_params`.

    Raises ``ParamFileError`` on bad magic, version, truncation, or when
    ``num_classes`` is given and disagrees with the stored K.
    """
    return parse_params(Path(path).read_bytes(), num_classes=num_classes, dtype=dtype)
