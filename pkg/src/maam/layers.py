"""Stateful layers built on the tensor ops, plus the binary weight format."""

from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ShapeError
from .tensor import DTYPE, Rng, Tensor

WEIGHTS_MAGIC = b"MAAMWTS1"


class Module:
    """Container of named parameters, buffers and child modules.

    Parameters are trainable tensors; buffers are non-trainable arrays such as
    batch-norm running statistics. Names are dotted paths through children.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        raise NotImplementedError

    def __call__(self, x, train: bool = False):
        return self.forward(x, train)

    def init_params(self, rng: Rng) -> None:
        for child in self.children.values():
            child.init_params(rng)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self.params.items():
            yield prefix + name, p
        for cname, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self.buffers.items():
            yield prefix + name, b
        for cname, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        """Number of trainable scalars (running statistics excluded)."""
        return int(np.sum([p.size for p in self.parameters()], dtype=np.int64))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        """Every parameter and buffer array, keyed by dotted name."""
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(self.named_buffers())
        return out


def param_count(module: Module) -> int:
    return module.param_count()


def kaiming_uniform(shape: Sequence[int], fan_in: int, rng: Rng) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(DTYPE)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1, padding: int = 0):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        k = kernel_size
        self.params["weight"] = T.parameter(np.zeros((out_channels, in_channels, k, k), DTYPE))
        self.params["bias"] = T.parameter(np.zeros(out_channels, DTYPE))

    def init_params(self, rng: Rng) -> None:
        w = self.params["weight"]
        w.data = kaiming_uniform(w.shape, self.in_channels * self.kernel_size**2, rng)
        self.params["bias"].data = np.zeros(self.out_channels, DTYPE)

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        return T.conv2d(x, self.params["weight"], self.params["bias"], self.stride, self.padding)

    def __repr__(self) -> str:
        k = self.kernel_size
        return f"Conv2d({self.in_channels}->{self.out_channels}, {k}x{k}, stride={self.stride}, padding={self.padding})"


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = T.BN_EPS, momentum: float = T.BN_MOMENTUM):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.params["gamma"] = T.parameter(np.ones(channels, DTYPE))
        self.params["beta"] = T.parameter(np.zeros(channels, DTYPE))
        self.buffers["running_mean"] = np.zeros(channels, DTYPE)
        self.buffers["running_var"] = np.ones(channels, DTYPE)

    def init_params(self, rng: Rng) -> None:
        self.params["gamma"].data = np.ones(self.channels, DTYPE)
        self.params["beta"].data = np.zeros(self.channels, DTYPE)
        self.buffers["running_mean"][:] = 0.0
        self.buffers["running_var"][:] = 1.0

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        return T.batchnorm2d(
            x,
            self.params["gamma"],
            self.params["beta"],
            self.buffers["running_mean"],
            self.buffers["running_var"],
            train,
            self.eps,
            self.momentum,
        )

    def __repr__(self) -> str:
        return f"BatchNorm2d({self.channels})"


class ReLU(Module):
    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        return T.relu(x)

    def __repr__(self) -> str:
        return "ReLU()"


class Tanh(Module):
    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        return T.tanh(x)


class MaxPool2d(Module):
    def __init__(self, kernel_size: int = 2, stride: Optional[int] = None):
        super().__init__()
        self.kernel_size = kernel_size
        self.stride = kernel_size if stride is None else stride

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        return T.maxpool2d(x, self.kernel_size, self.stride)

    def __repr__(self) -> str:
        return f"MaxPool2d({self.kernel_size})"


class Linear(Module):
    """Fully connected layer.

    ``zero_init`` starts the weights at zero; used for classifier output layers
    so that an untrained model predicts the uniform distribution.
    """

    def __init__(self, in_features: int, out_features: int, bias: bool = True, zero_init: bool = False):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.zero_init = zero_init
        self.params["weight"] = T.parameter(np.zeros((out_features, in_features), DTYPE))
        if bias:
            self.params["bias"] = T.parameter(np.zeros(out_features, DTYPE))

    def init_params(self, rng: Rng) -> None:
        shape = (self.out_features, self.in_features)
        # draw even when zeroing so later layers see the same rng stream
        w = kaiming_uniform(shape, self.in_features, rng)
        self.params["weight"].data = np.zeros(shape, DTYPE) if self.zero_init else w
        if "bias" in self.params:
            self.params["bias"].data = np.zeros(self.out_features, DTYPE)

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        return T.linear(x, self.params["weight"], self.params.get("bias"))

    def __repr__(self) -> str:
        return f"Linear({self.in_features}->{self.out_features})"


class Flatten(Module):
    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        return T.flatten(x)

    def __repr__(self) -> str:
        return "Flatten()"


class Sequential(Module):
    """Layers applied in order.

    ``input_shape`` optionally declares the per-sample input shape (batch axis
    excluded) and is checked on every forward call.
    """

    def __init__(self, *layers: Module, input_shape: Optional[Sequence[int]] = None):
        super().__init__()
        self.layers = list(layers)
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        for i, layer in enumerate(self.layers):
            self.children[str(i)] = layer

    def forward(self, x: Tensor, train: bool = False, tape: Optional[T.Tape] = None) -> Tensor:
        if tape is not None and train:
            with tape:
                return self._run(x, train)
        return self._run(x, train)

    def _run(self, x: Tensor, train: bool) -> Tensor:
        if self.input_shape is not None and tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"Sequential: expected per-sample input {self.input_shape}, got {tuple(x.shape[1:])}")
        for i, layer in enumerate(self.layers):
            try:
                x = layer(x, train)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer!r}): {exc}") from exc
        return x

    def __len__(self) -> int:
        return len(self.layers)

    def __repr__(self) -> str:
        inner = ", ".join(repr(layer) for layer in self.layers)
        return f"{type(self).__name__}({inner})"


# ---------------------------------------------------------------------------
# weight checkpoints
# ---------------------------------------------------------------------------


def save_weights(module: Module, path) -> None:
    """Write every parameter and buffer in the little-endian MAAMWTS1 format.

    Layout: the 8-byte magic, then for each array ``u32 name length``,
    UTF-8 name, ``u32 rank``, ``u32`` dims, float32 data.
    """
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        for name, arr in module.state().items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_weights(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:8] != WEIGHTS_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:8]!r}, expected {WEIGHTS_MAGIC!r}")
    out: dict[str, np.ndarray] = {}
    pos = 8
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(blob):
                raise CheckpointError(f"{path}: record {name!r} is truncated")
            out[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims).astype(DTYPE)
            pos += 4 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed record ({exc})") from exc
    return out


def load_weights(module: Module, path) -> None:
    """Load a MAAMWTS1 file into ``module``; names and shapes must match exactly."""
    records = read_weights(path)
    state = module.state()
    missing = sorted(set(state) - set(records))
    extra = sorted(set(records) - set(state))
    if missing or extra:
        raise CheckpointError(f"{path}: weights do not match model (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, arr in state.items():
        if records[name].shape != arr.shape:
            raise CheckpointError(f"{path}: {name} has shape {records[name].shape}, model expects {arr.shape}")
    params = dict(module.named_parameters())
    for name in state:
        if name in params:
            params[name].data = records[name].copy()
        else:
            state[name][...] = records[name]
