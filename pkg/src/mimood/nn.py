"""Classifier, loss terms and SGD-with-momentum.

An architecture descriptor is a plain JSON-able dict::

    {
        "input_shape": [1, 1, 2],
        "num_classes": 4,
        "layers": [
            {"type": "flatten"},
            {"type": "linear", "out_features": 64},
            {"type": "relu"},
            {"type": "linear", "out_features": 4},
        ],
    }

Supported layer types are ``conv`` (``out_channels``, ``kernel``, optional
``stride``/``padding``), ``linear`` (``out_features``, optional
``in_features`` which is then checked), ``relu``, ``meanpool`` (``size``)
and ``flatten``.  The last layer must be ``linear`` with ``num_classes``
outputs; its input is what :func:`forward` returns as the features.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .errors import ArchitectureError, ContractError, DimensionError, FormatError, TruncationError
from .tensor import Tensor

MODEL_MAGIC = b"MIM1"

_LAYER_KEYS = {
    "conv": {"type", "out_channels", "kernel", "stride", "padding", "in_channels"},
    "linear": {"type", "out_features", "in_features"},
    "relu": {"type"},
    "meanpool": {"type", "size"},
    "flatten": {"type"},
}


def mlp_arch(input_shape: Sequence[int], num_classes: int, hidden: Sequence[int] = (64, 64)) -> dict:
    """Default MLP: flatten, then ``linear -> relu`` per hidden width, then the classifier."""
    layers: list[dict] = [{"type": "flatten"}]
    for width in hidden:
        layers += [{"type": "linear", "out_features": int(width)}, {"type": "relu"}]
    layers.append({"type": "linear", "out_features": int(num_classes)})
    return {"input_shape": [int(s) for s in input_shape], "num_classes": int(num_classes), "layers": layers}


def cnn_arch(input_shape: Sequence[int] = (3, 32, 32), num_classes: int = 10) -> dict:
    """Default small CNN: two conv/relu/meanpool stages and a linear head."""
    layers = [
        {"type": "conv", "out_channels": 16, "kernel": 3, "stride": 1, "padding": 1},
        {"type": "relu"},
        {"type": "meanpool", "size": 2},
        {"type": "conv", "out_channels": 32, "kernel": 3, "stride": 1, "padding": 1},
        {"type": "relu"},
        {"type": "meanpool", "size": 2},
        {"type": "flatten"},
        {"type": "linear", "out_features": int(num_classes)},
    ]
    return {"input_shape": [int(s) for s in input_shape], "num_classes": int(num_classes), "layers": layers}


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    fan_in: int
    is_bias: bool


def param_specs(arch: dict) -> list[ParamSpec]:
    """Walk the layer chain, check that shapes compose and list the parameters in order."""
    try:
        shape = tuple(int(s) for s in arch["input_shape"])
        num_classes = int(arch["num_classes"])
        layers = list(arch["layers"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ArchitectureError(f"malformed architecture descriptor: {exc}") from exc
    if not shape or any(s < 1 for s in shape):
        raise ArchitectureError(f"input_shape must be positive extents, got {list(shape)}")
    if num_classes < 2:
        raise ArchitectureError(f"num_classes must be >= 2, got {num_classes}")
    if not layers or layers[-1].get("type") != "linear":
        raise ArchitectureError("the final layer must be linear")

    specs: list[ParamSpec] = []
    for i, layer in enumerate(layers):
        kind = layer.get("type")
        if kind not in _LAYER_KEYS:
            raise ArchitectureError(f"layer {i}: unknown type {kind!r}")
        extra = set(layer) - _LAYER_KEYS[kind]
        if extra:
            raise ArchitectureError(f"layer {i} ({kind}): unknown keys {sorted(extra)}")
        if kind == "conv":
            if len(shape) != 3:
                raise ArchitectureError(f"layer {i}: conv needs a C x H x W input, got {list(shape)}")
            c, h, w = shape
            if "in_channels" in layer and int(layer["in_channels"]) != c:
                raise ArchitectureError(f"layer {i}: conv expects {layer['in_channels']} channels, gets {c}")
            f, k = int(layer["out_channels"]), int(layer["kernel"])
            s, p = int(layer.get("stride", 1)), int(layer.get("padding", 0))
            if f < 1 or k < 1 or s < 1 or p < 0:
                raise ArchitectureError(f"layer {i}: invalid conv hyper-parameters {layer}")
            if k > h + 2 * p or k > w + 2 * p:
                raise ArchitectureError(f"layer {i}: kernel {k} larger than padded input {h}x{w} (pad {p})")
            specs.append(ParamSpec(f"layer{i}.weight", (f, c, k, k), c * k * k, False))
            specs.append(ParamSpec(f"layer{i}.bias", (f,), c * k * k, True))
            shape = (f, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
        elif kind == "linear":
            if len(shape) != 1:
                raise ArchitectureError(f"layer {i}: linear needs a flat input, got {list(shape)}; add flatten")
            (d,) = shape
            if "in_features" in layer and int(layer["in_features"]) != d:
                raise ArchitectureError(f"layer {i}: linear expects {layer['in_features']} inputs, gets {d}")
            out = int(layer["out_features"])
            if out < 1:
                raise ArchitectureError(f"layer {i}: out_features must be positive")
            specs.append(ParamSpec(f"layer{i}.weight", (d, out), d, False))
            specs.append(ParamSpec(f"layer{i}.bias", (out,), d, True))
            shape = (out,)
        elif kind == "meanpool":
            size = int(layer["size"])
            if len(shape) != 3 or size < 1 or shape[1] < size or shape[2] < size:
                raise ArchitectureError(f"layer {i}: cannot pool {list(shape)} with window {size}")
            shape = (shape[0], shape[1] // size, shape[2] // size)
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
    if shape != (num_classes,):
        raise ArchitectureError(f"final layer outputs {shape[0]} values but num_classes is {num_classes}")
    return specs


@dataclass
class Classifier:
    arch: dict
    params: dict[str, Tensor]

    @property
    def num_classes(self) -> int:
        return int(self.arch["num_classes"])

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(int(s) for s in self.arch["input_shape"])

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "Classifier":
        return Classifier(
            copy.deepcopy(self.arch),
            {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()},
        )


def init_classifier(arch: dict, seed: int) -> Classifier:
    """Weights ~ U(-sqrt(1/fan_in), +sqrt(1/fan_in)), biases zero, drawn in parameter order."""
    specs = param_specs(arch)
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for spec in specs:
        if spec.is_bias:
            data = np.zeros(spec.shape)
        else:
            bound = math.sqrt(1.0 / spec.fan_in)
            data = rng.uniform(-bound, bound, size=spec.shape)
        params[spec.name] = Tensor(data, requires_grad=True)
    return Classifier(copy.deepcopy(arch), params)


def forward(m: Classifier, x: Union[Tensor, np.ndarray], record: bool = True) -> tuple[Tensor, Tensor]:
    """Run the classifier on a batch, returning ``(logits [N x C], features [N x D])``.

    With ``record=False`` the parameters are wrapped as constants so no graph
    is kept (evaluation mode).
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    expected = m.input_shape
    if x.ndim < 1 or tuple(x.shape[1:]) != expected:
        raise DimensionError(f"classifier expects input [N x {' x '.join(map(str, expected))}], got {x.shape}")
    params = m.params if record else {k: Tensor(v.data) for k, v in m.params.items()}
    h = x
    features = x
    n = x.shape[0]
    last = len(m.arch["layers"]) - 1
    for i, layer in enumerate(m.arch["layers"]):
        kind = layer["type"]
        if kind == "conv":
            h = T.conv2d(h, params[f"layer{i}.weight"], int(layer.get("stride", 1)), int(layer.get("padding", 0)))
            h = T.bias_add(h, params[f"layer{i}.bias"])
        elif kind == "linear":
            if i == last:
                features = h
            h = T.bias_add(T.matmul(h, params[f"layer{i}.weight"]), params[f"layer{i}.bias"])
        elif kind == "relu":
            h = T.relu(h)
        elif kind == "meanpool":
            h = T.mean_pool2d(h, int(layer["size"]))
        elif kind == "flatten":
            h = T.reshape(h, (n, int(np.prod(h.shape[1:]))))
    return h, features


def predict_logits(m: Classifier, x: np.ndarray, batch_size: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Graph-free forward pass in chunks; returns numpy logits and features."""
    logits, feats = [], []
    for start in range(0, len(x), batch_size):
        lo, fe = forward(m, x[start : start + batch_size], record=False)
        logits.append(lo.data)
        feats.append(fe.data)
    if not logits:
        d = param_specs(m.arch)[-2].shape[0]
        return np.zeros((0, m.num_classes)), np.zeros((0, d))
    return np.concatenate(logits), np.concatenate(feats)


# ---------------------------------------------------------------------------
# losses


def softmax(logits: Tensor) -> Tensor:
    return T.exp(T.log_softmax(logits))


def _check_labels(labels, n: int, c: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ContractError("labels must be integers")
        y = y.astype(np.int64)
    if n and (y.min() < 0 or y.max() >= c):
        bad = int(y[(y < 0) | (y >= c)][0])
        raise ContractError(f"label {bad} outside [0, {c})")
    return y


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row-wise softmax, in log space."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [N x C] logits, got {logits.shape}")
    n, c = logits.shape
    y = _check_labels(labels, n, c)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0
    picked = T.sum(T.mul(T.log_softmax(logits), Tensor(onehot)))
    return T.scale(picked, -1.0 / n)


def uniform_target_loss(logits: Tensor) -> Tensor:
    """Cross-entropy against the uniform distribution: mean_i of -(1/C) sum_c log p_ic."""
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise DimensionError(f"uniform_target_loss expects [N x C] logits with N >= 1, got {logits.shape}")
    n, c = logits.shape
    return T.scale(T.sum(T.log_softmax(logits)), -1.0 / (n * c))


@dataclass(frozen=True)
class LossBreakdown:
    l_id: float
    l_ood: float
    total: float


def mim_loss(m: Classifier, x_id, y_id, x_ood) -> tuple[Tensor, LossBreakdown]:
    """ID cross-entropy plus uniform-target cross-entropy on the synthetic OOD batch."""
    logits_id, _ = forward(m, x_id)
    logits_ood, _ = forward(m, x_ood)
    l_id = cross_entropy(logits_id, y_id)
    l_ood = uniform_target_loss(logits_ood)
    total = T.add(l_id, l_ood)
    return total, LossBreakdown(l_id.item(), l_ood.item(), total.item())


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ContractError(f"learning rate must be non-negative, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ContractError(f"momentum must lie in [0, 1), got {self.momentum}")

    @classmethod
    def for_model(cls, m: Classifier, learning_rate: float, momentum: float) -> "OptimizerState":
        return cls(learning_rate, momentum, {k: np.zeros(p.shape) for k, p in m.params.items()})


def sgd_step(m: Classifier, state: OptimizerState) -> None:
    """v <- mu * v + g; theta <- theta - lr * v; then clear the gradients."""
    missing = [k for k, p in m.params.items() if p.grad is None]
    if missing:
        raise ContractError(f"no gradient for parameter(s) {missing}")
    for name, p in m.params.items():
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros(p.shape)
        elif v.shape != p.shape:
            raise ContractError(f"velocity for {name} has shape {v.shape}, parameter {p.shape}")
        v = state.momentum * v + p.grad
        state.velocity[name] = v
        p.data = p.data - state.learning_rate * v
        p.grad = None


# ---------------------------------------------------------------------------
# model files


def _arch_json(arch: dict) -> bytes:
    return json.dumps(arch, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dump_model(m: Classifier) -> bytes:
    specs = param_specs(m.arch)
    parts = [MODEL_MAGIC]
    blob = _arch_json(m.arch)
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    for spec in specs:
        p = m.params[spec.name]
        if p.shape != spec.shape:
            raise DimensionError(f"parameter {spec.name} has shape {p.shape}, descriptor says {spec.shape}")
        name = spec.name.encode("utf-8")
        parts.append(struct.pack("<I", len(name)))
        parts.append(name)
        parts.append(struct.pack("<I", p.ndim))
        parts.append(struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(parts)


def save_model(m: Classifier, path: Union[str, Path]) -> None:
    Path(path).write_bytes(dump_model(m))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncationError(f"file truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def parse_model(buf: bytes, num_classes: Optional[int] = None) -> Classifier:
    r = _Reader(buf)
    if r.take(4, "magic") != MODEL_MAGIC:
        raise FormatError("not a model file (bad magic)")
    blob = r.take(r.u32("descriptor length"), "descriptor")
    try:
        arch = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt architecture descriptor: {exc}") from exc
    if num_classes is not None and int(arch.get("num_classes", -1)) != num_classes:
        raise FormatError(f"model file has num_classes {arch.get('num_classes')}, expected {num_classes}")
    try:
        specs = param_specs(arch)
    except ArchitectureError as exc:
        raise FormatError(f"corrupt architecture descriptor: {exc}") from exc
    params: dict[str, Tensor] = {}
    for i, spec in enumerate(specs):
        name = r.take(r.u32("name length"), "parameter name").decode("utf-8", errors="replace")
        if name != spec.name:
            raise FormatError(f"parameter {i} is named {name!r}, descriptor expects {spec.name!r}")
        rank = r.u32("rank")
        shape = tuple(struct.unpack(f"<{rank}I", r.take(4 * rank, "extents")))
        if shape != spec.shape:
            if i == len(specs) - 2 and shape[:-1] == spec.shape[:-1]:
                raise FormatError(
                    f"descriptor says num_classes {arch['num_classes']} but stored classifier has {shape[-1]} outputs"
                )
            raise FormatError(f"parameter {name} stored with shape {shape}, descriptor expects {spec.shape}")
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(8 * count, f"data of {name}"), dtype="<f8").astype(np.float64)
        params[name] = Tensor(data.reshape(shape), requires_grad=True)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} unexpected trailing bytes")
    return Classifier(arch, params)


def load_model(path: Union[str, Path], num_classes: Optional[int] = None) -> Classifier:
    return parse_model(Path(path).read_bytes(), num_classes)
