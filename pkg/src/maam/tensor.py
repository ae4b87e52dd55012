"""Dense float32 tensors with tape-based reverse-mode differentiation.

Operations are plain functions. When a :class:`Tape` is active (``with tape:``)
and any operand requires a gradient, the operation appends a :class:`Node`
naming its backward rule; :meth:`Tape.backward` then replays the nodes in
reverse and accumulates gradients into leaf tensors.

Backward rules live in :data:`BACKWARD_RULES`, keyed by rule name, so tests
can swap a single rule out for fault injection.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .errors import (
    ConfigurationError,
    DegenerateBatchError,
    GradientError,
    LabelError,
    ShapeError,
)

DTYPE = np.float32

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

Rng = np.random.Generator


def make_rng(seed: int, *stream: int) -> Rng:
    """Return a PCG64 generator keyed by ``seed`` and an optional stream path.

    PCG64 and ``SeedSequence`` are specified bit-for-bit by numpy, so a given
    ``(seed, *stream)`` key yields the same sequence on every platform.
    Distinct stream paths give statistically independent generators, which is
    how model initialisation and data shuffling are kept apart.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


class Tensor:
    """An n-dimensional float32 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "retain_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        # intermediate tensors only keep their gradient when asked to
        self.retain_grad = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


@dataclass(eq=False)
class Node:
    """One recorded operation: operands, output, and what backward needs."""

    rule: str
    inputs: tuple
    output: Tensor
    saved: dict = field(default_factory=dict)


_ACTIVE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("active_tape", default=None)

# when set, relu and maxpool2d append their branch choices (sign masks and
# argmax indices) so callers can tell whether two evaluations took the same
# piece of a piecewise-linear function
_PATTERNS: contextvars.ContextVar[Optional[list]] = contextvars.ContextVar("activation_patterns", default=None)


class record_patterns:
    """Context manager collecting relu/max-pool branch choices into a list."""

    def __enter__(self) -> list:
        self.patterns: list = []
        self._token = _PATTERNS.set(self.patterns)
        return self.patterns

    def __exit__(self, *exc) -> None:
        _PATTERNS.reset(self._token)


def _note_pattern(values: np.ndarray) -> None:
    patterns = _PATTERNS.get()
    if patterns is not None:
        patterns.append(values)


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so operands always precede the
    nodes that consume them.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: set[int] = set()
        self._tokens: list = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, rule: str, inputs: Sequence, output: Tensor, **saved) -> None:
        output.requires_grad = True
        self.nodes.append(Node(rule, tuple(inputs), output, saved))
        self._produced.add(id(output))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable leaf ``t``."""
        if loss.size != 1:
            raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise GradientError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            if node.output.retain_grad:
                _accumulate_leaf(node.output, g)
            input_grads = BACKWARD_RULES[node.rule](g, node)
            for inp, gi in zip(node.inputs, input_grads):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=DTYPE).reshape(inp.shape)
                if id(inp) in self._produced:
                    key = id(inp)
                    grads[key] = gi if key not in grads else grads[key] + gi
                else:
                    _accumulate_leaf(inp, gi)


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    t.grad = g.copy() if t.grad is None else t.grad + g


def active_tape() -> Optional[Tape]:
    return _ACTIVE.get()


def _record(rule: str, inputs: Sequence, output: Tensor, **saved) -> Tensor:
    tape = _ACTIVE.get()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        tape.record(rule, inputs, output, **saved)
    return output


def _wants_grad(*tensors) -> bool:
    return _ACTIVE.get() is not None and any(t is not None and t.requires_grad for t in tensors)


BackwardRule = Callable[[np.ndarray, Node], tuple]
BACKWARD_RULES: dict[str, BackwardRule] = {}


def backward_rule(name: str) -> Callable[[BackwardRule], BackwardRule]:
    def register(fn: BackwardRule) -> BackwardRule:
        BACKWARD_RULES[name] = fn
        return fn

    return register


def _need(node: Node, i: int) -> bool:
    t = node.inputs[i]
    return isinstance(t, Tensor) and t.requires_grad


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW batch with zero padding (im2col + GEMM)."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D (N,C,H,W), got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D (Cout,Cin,kH,kW), got shape {weight.shape}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if c != cin:
        raise ShapeError(f"conv2d: input axis 1 (channels) is {c} but weight expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias axis 0 is {bias.shape} but weight has {cout} output channels")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"conv2d: stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if h + 2 * padding - kh < 0 or w + 2 * padding - kw < 0 or ho < 1 or wo < 1:
        raise ConfigurationError(
            f"conv2d: kernel {kh}x{kw} with padding {padding} does not fit input {h}x{w}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = Tensor(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    if not _wants_grad(x, weight, bias):
        return out
    return _record(
        "conv2d",
        (x, weight, bias),
        out,
        cols=cols if weight.requires_grad else None,
        stride=stride,
        padding=padding,
    )


@backward_rule("conv2d")
def _conv2d_backward(g: np.ndarray, node: Node) -> tuple:
    x, weight, bias = node.inputs
    n, c, h, w = x.shape
    cout, _, kh, kw = weight.shape
    _, _, ho, wo = g.shape
    s, p = node.saved["stride"], node.saved["padding"]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
    gw = (g2.T @ node.saved["cols"]).reshape(weight.shape) if _need(node, 1) else None
    gb = g2.sum(axis=0) if bias is not None and _need(node, 2) else None
    gx = None
    if _need(node, 0):
        dcols = (g2 @ weight.data.reshape(cout, -1)).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += dcols[..., i, j].transpose(0, 3, 1, 2)
        gx = dxp[:, :, p : p + h, p : p + w]
    return gx, gw, gb


def maxpool2d(x: Tensor, k: int = 2, stride: Optional[int] = None) -> Tensor:
    """Non-overlapping k x k max pooling.

    Ties route the gradient to the first maximum in row-major window order.
    """
    stride = k if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: input must be 4-D (N,C,H,W), got shape {x.shape}")
    if k != stride:
        raise ConfigurationError(f"maxpool2d: only k == stride is supported (got k={k}, stride={stride})")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ConfigurationError(f"maxpool2d: spatial size {h}x{w} is not divisible by {k}")
    out, idx = _kernels.maxpool_forward(x.data, k)
    _note_pattern(idx)
    return _record("maxpool2d", (x,), Tensor(out), idx=idx, k=k)


@backward_rule("maxpool2d")
def _maxpool2d_backward(g: np.ndarray, node: Node) -> tuple:
    (x,) = node.inputs
    _, _, h, w = x.shape
    return (_kernels.maxpool_backward(np.ascontiguousarray(g), node.saved["idx"], node.saved["k"], h, w),)


# ---------------------------------------------------------------------------
# normalisation and activations
# ---------------------------------------------------------------------------


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel batch normalisation over (N, H, W).

    In train mode the running statistics are updated in place as
    ``running = (1 - momentum) * running + momentum * batch`` using the biased
    batch variance (the same variance used for normalisation).
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d: input must be 4-D (N,C,H,W), got shape {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: input axis 1 (channels) is {c} but gamma/beta have {gamma.shape}/{beta.shape}")
    if train:
        if n * h * w < 2:
            raise DegenerateBatchError(f"batchnorm2d: need N*H*W >= 2 in train mode, got {n * h * w}")
        mean64, var64 = _kernels.channel_mean_var(x.data)
        mean, var = mean64.astype(DTYPE), var64.astype(DTYPE)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean, var = running_mean.astype(DTYPE), running_var.astype(DTYPE)
    invstd = (1.0 / np.sqrt(var + DTYPE(eps))).astype(DTYPE)
    xhat, out = _kernels.bn_normalize(x.data, mean, invstd, gamma.data, beta.data)
    out = Tensor(out)
    if not _wants_grad(x, gamma, beta):
        return out
    return _record("batchnorm2d", (x, gamma, beta), out, xhat=xhat, invstd=invstd, train=train)


@backward_rule("batchnorm2d")
def _batchnorm2d_backward(g: np.ndarray, node: Node) -> tuple:
    x, gamma, _ = node.inputs
    xhat, invstd = node.saved["xhat"], node.saved["invstd"]
    g = np.ascontiguousarray(g, dtype=DTYPE)
    sg, sgx = _kernels.bn_grad_sums(g, xhat)
    gx = None
    if _need(node, 0):
        scale = (gamma.data * invstd).astype(DTYPE)
        if node.saved["train"]:
            m = x.size // x.shape[1]
            mean_g, mean_gx = (sg / m).astype(DTYPE), (sgx / m).astype(DTYPE)
        else:
            mean_g = mean_gx = np.zeros_like(scale)
        gx = _kernels.bn_input_grad(g, xhat, scale, mean_g, mean_gx)
    return gx, sgx.astype(DTYPE), sg.astype(DTYPE)


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    out = Tensor(np.maximum(x.data, DTYPE(0)))
    _note_pattern(x.data > 0)
    return _record("relu", (x,), out)


@backward_rule("relu")
def _relu_backward(g: np.ndarray, node: Node) -> tuple:
    # output > 0 exactly where input > 0
    return (_kernels.relu_backward(np.ascontiguousarray(g, dtype=DTYPE), node.output.data),)


def tanh(x: Tensor) -> Tensor:
    out = Tensor(np.tanh(x.data))
    return _record("tanh", (x,), out)


@backward_rule("tanh")
def _tanh_backward(g: np.ndarray, node: Node) -> tuple:
    y = node.output.data
    return (g * (1.0 - y * y),)


# ---------------------------------------------------------------------------
# dense layers, reductions, losses
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (N, D) and weight (K, D)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear: expected 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input axis 1 is {x.shape[1]} but weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    out = x.data @ weight.data.T
    if bias is not None:
        out += bias.data
    return _record("linear", (x, weight, bias), Tensor(out))


@backward_rule("linear")
def _linear_backward(g: np.ndarray, node: Node) -> tuple:
    x, weight, bias = node.inputs
    gx = g @ weight.data if _need(node, 0) else None
    gw = g.T @ x.data if _need(node, 1) else None
    gb = g.sum(axis=0) if bias is not None and _need(node, 2) else None
    return gx, gw, gb


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _record("reshape", (x,), out)


@backward_rule("reshape")
def _reshape_backward(g: np.ndarray, node: Node) -> tuple:
    return (g.reshape(node.inputs[0].shape),)


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return reshape(x, (x.shape[0], -1))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _record("add", (a, b), Tensor(a.data + b.data))


@backward_rule("add")
def _add_backward(g: np.ndarray, node: Node) -> tuple:
    return g, g


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _record("mul", (a, b), Tensor(a.data * b.data))


@backward_rule("mul")
def _mul_backward(g: np.ndarray, node: Node) -> tuple:
    a, b = node.inputs
    return g * b.data, g * a.data


def select(x: Tensor, i: int) -> Tensor:
    """Scalar element ``i`` of a 1-D tensor."""
    if x.ndim != 1:
        raise ShapeError(f"select: expected a 1-D tensor, got shape {x.shape}")
    return _record("select", (x,), Tensor(x.data[i]), index=i)


@backward_rule("select")
def _select_backward(g: np.ndarray, node: Node) -> tuple:
    gx = np.zeros(node.inputs[0].shape, dtype=DTYPE)
    gx[node.saved["index"]] = g.reshape(-1)[0]
    return (gx,)


def scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of ``x`` by the scalar tensor ``s``."""
    if s.size != 1:
        raise ShapeError(f"scale: factor must be a scalar tensor, got shape {s.shape}")
    return _record("scale", (x, s), Tensor(x.data * s.data.reshape(())))


@backward_rule("scale")
def _scale_backward(g: np.ndarray, node: Node) -> tuple:
    x, s = node.inputs
    gx = g * s.data.reshape(()) if _need(node, 0) else None
    # float32 products are exact in float64, so the reduction order barely matters
    gs = np.dot(g.reshape(-1).astype(np.float64), x.data.reshape(-1).astype(np.float64)) if _need(node, 1) else None
    return gx, gs


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _record("sum", (x,), Tensor(np.sum(x.data, dtype=np.float64)))


@backward_rule("sum")
def _sum_backward(g: np.ndarray, node: Node) -> tuple:
    return (np.broadcast_to(g.reshape(()), node.inputs[0].shape),)


def average(tensors: Sequence[Tensor]) -> Tensor:
    """Unweighted elementwise mean of equally-shaped tensors."""
    first = tensors[0]
    for t in tensors[1:]:
        if t.shape != first.shape:
            raise ShapeError(f"average: shapes {first.shape} and {t.shape} differ")
    acc = first.data.copy()
    for t in tensors[1:]:
        acc += t.data
    acc *= DTYPE(1.0 / len(tensors))
    return _record("average", tuple(tensors), Tensor(acc))


@backward_rule("average")
def _average_backward(g: np.ndarray, node: Node) -> tuple:
    gi = g * DTYPE(1.0 / len(node.inputs))
    return tuple(gi for _ in node.inputs)


def softmax_array(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return (e / e.sum()).astype(DTYPE)


def softmax_backward_array(g: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (y * (g - np.dot(g, y))).astype(DTYPE)


def softmax(x: Tensor) -> Tensor:
    """Max-subtracted softmax of a 1-D tensor."""
    if x.ndim != 1 or x.size < 1:
        raise ShapeError(f"softmax: expected a non-empty 1-D tensor, got shape {x.shape}")
    return _record("softmax", (x,), Tensor(softmax_array(x.data)))


@backward_rule("softmax")
def _softmax_backward(g: np.ndarray, node: Node) -> tuple:
    return (softmax_backward_array(g, node.output.data),)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean negative log-likelihood via log-sum-exp."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D (N,K), got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"cross_entropy: labels must lie in [0, {k})")
    z = logits.data.astype(np.float64)
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s))[:, 0]
    loss = np.mean(lse - z[np.arange(n), labels])
    probs = e / s
    return _record("cross_entropy", (logits,), Tensor(loss), probs=probs, labels=labels)


@backward_rule("cross_entropy")
def _cross_entropy_backward(g: np.ndarray, node: Node) -> tuple:
    probs, labels = node.saved["probs"], node.saved["labels"]
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    return (d * (float(np.reshape(g, -1)[0]) / n),)
