"""Desk-scale model zoo: MLP and small CNN.

Covers parameter initialization, the forward pass to raw logits, analytic
per-sample FLOPs counting, and bit-exact checkpoint serialization.

FLOPs convention: one multiply-accumulate counts as 2 FLOPs; bias adds,
ReLU and pooling count 1 FLOP per output element. The convention is recorded
in run reports so cost comparisons stay internally consistent.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .errors import (
    CheckpointFormatError,
    ContractViolation,
    FileIntegrityError,
    ShapeMismatch,
    UnsupportedVersionError,
)

CHECKPOINT_MAGIC = b"SRDL"
CHECKPOINT_VERSION = 1

# conv blocks use 3x3 kernels, pad 1; first block keeps resolution, the rest halve it
_CONV_KERNEL = 3
_CONV_PAD = 1


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description: kind, layer sizing, input shape, class count."""

    kind: str  # "mlp" | "smallcnn"
    input_shape: tuple[int, ...]
    hidden: tuple[int, ...]  # layer widths (mlp) or channel counts (smallcnn)
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        if self.kind not in ("mlp", "smallcnn"):
            raise ContractViolation(f"unknown model kind {self.kind!r}")
        if self.num_classes < 2:
            raise ContractViolation(f"need at least 2 classes, got {self.num_classes}")
        if any(w < 1 for w in self.hidden):
            raise ContractViolation(f"layer widths must be >= 1, got {self.hidden}")
        if any(d < 1 for d in self.input_shape):
            raise ContractViolation(f"input extents must be >= 1, got {self.input_shape}")
        if self.kind == "smallcnn" and len(self.input_shape) != 3:
            raise ContractViolation(
                f"smallcnn expects a (channels, h, w) input shape, got {self.input_shape}"
            )

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_shape": list(self.input_shape),
            "hidden": list(self.hidden),
            "num_classes": self.num_classes,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        return ModelSpec(
            kind=d["kind"],
            input_shape=tuple(d["input_shape"]),
            hidden=tuple(d["hidden"]),
            num_classes=int(d["num_classes"]),
        )


def _conv_strides(n_blocks: int) -> list[int]:
    return [1] + [2] * (n_blocks - 1)


def _layer_plan(spec: ModelSpec) -> list[tuple]:
    """Shapes of all parameters, in forward order.

    Entries are ("dense", name, in, out) or ("conv", name, cin, cout, stride).
    """
    plan = []
    if spec.kind == "mlp":
        widths = [spec.input_size, *spec.hidden, spec.num_classes]
        for i in range(len(widths) - 1):
            name = f"fc{i + 1}" if i < len(widths) - 2 else "head"
            plan.append(("dense", name, widths[i], widths[i + 1]))
    else:
        cin = spec.input_shape[0]
        for i, (cout, stride) in enumerate(zip(spec.hidden, _conv_strides(len(spec.hidden)))):
            plan.append(("conv", f"conv{i + 1}", cin, cout, stride))
            cin = cout
        plan.append(("dense", "head", cin, spec.num_classes))
    return plan


class ParameterSet:
    """Ordered named parameter tensors of one model instance.

    Insertion order is the forward-pass order and also the flattening order
    used by checkpoints and landscape probes.
    """

    def __init__(self, spec: ModelSpec, init_scheme: str, init_seed: int):
        self.spec = spec
        self.init_scheme = init_scheme
        self.init_seed = init_seed
        self.tensors: dict[str, tz.Tensor] = {}

    def __iter__(self):
        return iter(self.tensors.items())

    def __getitem__(self, name: str) -> tz.Tensor:
        return self.tensors[name]

    def add(self, name: str, array: np.ndarray):
        if name in self.tensors:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        self.tensors[name] = tz.Tensor(array)

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def size(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def to_vector(self) -> np.ndarray:
        """Flatten all parameters into one vector (insertion order)."""
        return np.concatenate([t.data.reshape(-1) for t in self.tensors.values()])

    def from_vector(self, vec: np.ndarray) -> "ParameterSet":
        """New ParameterSet with the same layout, values taken from ``vec``."""
        if vec.size != self.size():
            raise ShapeMismatch(f"vector length {vec.size} != parameter count {self.size()}")
        out = ParameterSet(self.spec, self.init_scheme, self.init_seed)
        offset = 0
        for name, t in self.tensors.items():
            n = t.data.size
            out.add(name, vec[offset : offset + n].reshape(t.data.shape).astype(t.dtype, copy=True))
            offset += n
        return out

    def copy(self) -> "ParameterSet":
        out = ParameterSet(self.spec, self.init_scheme, self.init_seed)
        for name, t in self.tensors.items():
            out.add(name, t.data.copy())
        return out

    def astype(self, dtype) -> "ParameterSet":
        out = ParameterSet(self.spec, self.init_scheme, self.init_seed)
        for name, t in self.tensors.items():
            out.add(name, t.data.astype(dtype))
        return out

    def allfinite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.tensors.values())


def init_params(spec: ModelSpec, seed: int, dtype=np.float32) -> ParameterSet:
    """Fan-in-scaled Gaussian weights (std = sqrt(2/fan_in)), zero biases.

    Deterministic for a given (spec, seed, dtype).
    """
    rng = np.random.default_rng(seed)
    params = ParameterSet(spec, init_scheme="he-normal", init_seed=seed)
    for entry in _layer_plan(spec):
        if entry[0] == "dense":
            _, name, fan_in, fan_out = entry
            std = math.sqrt(2.0 / fan_in)
            w = rng.normal(0.0, std, size=(fan_in, fan_out))
            params.add(f"{name}.weight", w.astype(dtype))
            params.add(f"{name}.bias", np.zeros(fan_out, dtype=dtype))
        else:
            _, name, cin, cout, _stride = entry
            fan_in = cin * _CONV_KERNEL * _CONV_KERNEL
            std = math.sqrt(2.0 / fan_in)
            k = rng.normal(0.0, std, size=(cout, cin, _CONV_KERNEL, _CONV_KERNEL))
            params.add(f"{name}.kernels", k.astype(dtype))
            params.add(f"{name}.bias", np.zeros(cout, dtype=dtype))
    return params


def forward_logits(params: ParameterSet, batch: tz.Tensor) -> tz.Tensor:
    """Forward pass to raw class scores; no softmax is ever applied here.

    The returned tensor keeps its graph, so a backward pass from any loss
    built on it reaches every parameter.
    """
    spec = params.spec
    x = batch
    if spec.kind == "mlp":
        x = tz.flatten_rows(x)
        if x.shape[1] != spec.input_size:
            raise ShapeMismatch(
                f"batch features of size {x.shape[1]} do not match input size {spec.input_size}"
            )
        n_hidden = len(spec.hidden)
        for i in range(n_hidden):
            name = f"fc{i + 1}"
            x = tz.relu(tz.add_bias(tz.matmul(x, params[f"{name}.weight"]), params[f"{name}.bias"]))
        return tz.add_bias(tz.matmul(x, params["head.weight"]), params["head.bias"])

    if x.data.ndim != 4 or x.shape[1:] != spec.input_shape:
        raise ShapeMismatch(
            f"batch shape {x.shape} does not match input shape (n, {spec.input_shape})"
        )
    for i, stride in enumerate(_conv_strides(len(spec.hidden))):
        name = f"conv{i + 1}"
        x = tz.conv2d(x, params[f"{name}.kernels"], stride=stride, pad=_CONV_PAD)
        x = tz.add_channel_bias(x, params[f"{name}.bias"])
        x = tz.relu(x)
    x = tz.global_avg_pool(x)
    return tz.add_bias(tz.matmul(x, params["head.weight"]), params["head.bias"])


def forward_flops(spec: ModelSpec) -> int:
    """Analytic per-sample forward FLOPs; depends only on the spec.

    Dense in->out with bias: 2*in*out + out. Conv: 2*cin*kh*kw per output
    element plus 1 for the bias. ReLU and pooling: 1 per element.
    """
    total = 0
    if spec.kind == "mlp":
        widths = [spec.input_size, *spec.hidden, spec.num_classes]
        for i in range(len(widths) - 1):
            total += 2 * widths[i] * widths[i + 1] + widths[i + 1]
            if i < len(widths) - 2:
                total += widths[i + 1]  # relu
        return total

    cin, h, w = spec.input_shape
    for cout, stride in zip(spec.hidden, _conv_strides(len(spec.hidden))):
        oh = (h + 2 * _CONV_PAD - _CONV_KERNEL) // stride + 1
        ow = (w + 2 * _CONV_PAD - _CONV_KERNEL) // stride + 1
        out_elems = cout * oh * ow
        total += out_elems * 2 * cin * _CONV_KERNEL * _CONV_KERNEL  # MACs
        total += out_elems  # bias
        total += out_elems  # relu
        cin, h, w = cout, oh, ow
    total += cin * h * w  # global average pool
    total += 2 * cin * spec.num_classes + spec.num_classes
    return total


@dataclass
class Checkpoint:
    """A serializable snapshot of one model's parameters and training stage."""

    spec: ModelSpec
    params: ParameterSet
    stage: str  # "stage1-final" | "stage2-final" | "vanilla-final" | "teacher" | ...
    epoch: int
    rng_state: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FileIntegrityError(f"truncated checkpoint: expected {n} bytes for {what}")
    return buf


def save_checkpoint(ckpt: Checkpoint, path):
    """Write a checkpoint; tensors are stored as little-endian float32."""
    header = {
        "spec": ckpt.spec.to_dict(),
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "init_scheme": ckpt.params.init_scheme,
        "init_seed": ckpt.params.init_seed,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", ckpt.version))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(ckpt.params.tensors)))
        for name, t in ckpt.params:
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", t.data.ndim))
            for d in t.data.shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"bad magic {magic!r}, not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version > CHECKPOINT_VERSION:
            raise UnsupportedVersionError(
                f"checkpoint version {version} is newer than supported {CHECKPOINT_VERSION}"
            )
        (hlen,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
        try:
            header = json.loads(_read_exact(f, hlen, "header").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointFormatError(f"garbled checkpoint header: {e}") from e
        spec = ModelSpec.from_dict(header["spec"])
        params = ParameterSet(spec, header["init_scheme"], header["init_seed"])
        (n_tensors,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, "rank"))
            shape = tuple(
                struct.unpack("<I", _read_exact(f, 4, "extent"))[0] for _ in range(ndim)
            )
            count = int(np.prod(shape)) if shape else 1
            raw = _read_exact(f, 4 * count, f"tensor {name}")
            params.add(name, np.frombuffer(raw, dtype="<f4").reshape(shape).copy())
        return Checkpoint(
            spec=spec,
            params=params,
            stage=header["stage"],
            epoch=int(header["epoch"]),
            rng_state=header["rng_state"],
            version=version,
        )
