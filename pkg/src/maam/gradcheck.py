"""Central finite-difference checks for every differentiable op.

Each check builds random inputs for a seed, computes analytic gradients on a
tape, and compares them with ``(f(x + eps) - f(x - eps)) / 2eps`` element by
element. The reported error for an op is the worst
``|analytic - numeric| / max(1, |analytic|)`` over all checked elements and
seeds.

Relu and max-pool are piecewise linear. When a perturbation of ``eps`` moves
a pre-activation across zero or changes a pooling argmax, the central
difference straddles a kink and measures neither side's derivative. Such
entries are detected by comparing the recorded branch choices at
``x - eps``, ``x`` and ``x + eps``; they are skipped and counted separately.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .fused import fused_weighted_sum, naive_weighted_sum
from .model import ModelSpec, build_model
from .tensor import DTYPE, Rng, Tensor

EPS = 1e-3
TOLERANCE = 1e-2

# (tensors to check, closure returning a scalar loss); the closure must only
# read the tensors' current data so perturbations take effect
Problem = tuple[list[Tensor], Callable[[], Tensor]]


@dataclass
class OpCheck:
    name: str
    worst: float
    seeds: int
    entries: int
    tolerance: float = TOLERANCE
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst)) and self.worst <= self.tolerance


def _projected(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(out * weights)`` so every output element matters."""
    return T.sum(T.mul(out, Tensor(weights)))


def _evaluate(fn: Callable[[], Tensor]) -> tuple[float, list]:
    with T.record_patterns() as patterns:
        value = fn().item()
    return value, patterns


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_problem(problem: Problem, eps: float = EPS, max_entries: Optional[int] = None, rng: Optional[Rng] = None) -> tuple[float, int, int]:
    """Worst relative error, entries checked and kink entries skipped."""
    tensors, fn = problem
    for t in tensors:
        t.grad = None
    with T.Tape() as tape, T.record_patterns() as base:
        loss = fn()
    tape.backward(loss)
    worst, count, skipped = 0.0, 0, 0
    for t in tensors:
        analytic = np.zeros(t.shape, dtype=np.float64) if t.grad is None else t.grad.astype(np.float64)
        flat = t.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
        for i in indices:
            orig = flat[i]
            hi, lo = DTYPE(orig + eps), DTYPE(orig - eps)
            flat[i] = hi
            f_hi, p_hi = _evaluate(fn)
            flat[i] = lo
            f_lo, p_lo = _evaluate(fn)
            flat[i] = orig
            if not (_same_branches(base, p_hi) and _same_branches(base, p_lo)):
                skipped += 1
                continue
            # divide by the perturbation actually representable in float32
            numeric = (f_hi - f_lo) / (float(hi) - float(lo))
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
            count += 1
    return worst, count, skipped


# ---------------------------------------------------------------------------
# problems, one builder per op
# ---------------------------------------------------------------------------


def _normal(rng: Rng, *shape) -> Tensor:
    return T.parameter(rng.standard_normal(shape))


def _conv2d(rng: Rng) -> list[Problem]:
    problems = []
    for stride, padding, size in ((1, 1, 5), (2, 0, 7)):
        x, w, b = _normal(rng, 1, 2, size, size), _normal(rng, 3, 2, 3, 3), _normal(rng, 3)
        out_shape = T.conv2d(x, w, b, stride, padding).shape
        r = rng.standard_normal(out_shape)
        problems.append(([x, w, b], lambda x=x, w=w, b=b, s=stride, p=padding, r=r: _projected(T.conv2d(x, w, b, s, p), r)))
    return problems


def _maxpool2d(rng: Rng) -> list[Problem]:
    # distinct values spaced well beyond 2*eps keep every window's argmax stable
    x = T.parameter((rng.permutation(2 * 2 * 6 * 6) * 0.01 - 0.7).reshape(2, 2, 6, 6))
    r = rng.standard_normal((2, 2, 3, 3))
    return [([x], lambda: _projected(T.maxpool2d(x, 2), r))]


def _batchnorm2d(rng: Rng) -> list[Problem]:
    problems = []
    for train in (True, False):
        x, gamma, beta = _normal(rng, 3, 2, 3, 3), _normal(rng, 2), _normal(rng, 2)
        rm = rng.standard_normal(2).astype(DTYPE)
        rv = rng.uniform(0.5, 2.0, 2).astype(DTYPE)
        r = rng.standard_normal(x.shape)

        def fn(x=x, gamma=gamma, beta=beta, rm=rm, rv=rv, r=r, train=train):
            # running stats are copied so repeated evaluation is side-effect free
            return _projected(T.batchnorm2d(x, gamma, beta, rm.copy(), rv.copy(), train), r)

        problems.append(([x, gamma, beta], fn))
    return problems


def _relu(rng: Rng) -> list[Problem]:
    v = rng.uniform(0.05, 2.0, 24) * rng.choice([-1.0, 1.0], 24)
    x = T.parameter(v.reshape(4, 6))
    r = rng.standard_normal(x.shape)
    return [([x], lambda: _projected(T.relu(x), r))]


def _tanh(rng: Rng) -> list[Problem]:
    x = _normal(rng, 4, 5)
    r = rng.standard_normal(x.shape)
    return [([x], lambda: _projected(T.tanh(x), r))]


def _linear(rng: Rng) -> list[Problem]:
    x, w, b = _normal(rng, 3, 5), _normal(rng, 4, 5), _normal(rng, 4)
    r = rng.standard_normal((3, 4))
    return [([x, w, b], lambda: _projected(T.linear(x, w, b), r))]


def _softmax(rng: Rng) -> list[Problem]:
    x = _normal(rng, 6)
    r = rng.standard_normal(6)
    return [([x], lambda: _projected(T.softmax(x), r))]


def _cross_entropy(rng: Rng) -> list[Problem]:
    logits = _normal(rng, 5, 10)
    labels = rng.integers(0, 10, 5)
    return [([logits], lambda: T.cross_entropy(logits, labels))]


def _elementwise(rng: Rng) -> list[Problem]:
    a, b = _normal(rng, 3, 4), _normal(rng, 3, 4)
    r = rng.standard_normal((3, 4))
    return [
        ([a, b], lambda: _projected(T.add(a, b), r)),
        ([a, b], lambda: _projected(T.mul(a, b), r)),
    ]


def _scale_select(rng: Rng) -> list[Problem]:
    x, v = _normal(rng, 2, 3, 2), _normal(rng, 3)
    r = rng.standard_normal(x.shape)
    return [([x, v], lambda: _projected(T.scale(x, T.select(v, 1)), r))]


def _reshape(rng: Rng) -> list[Problem]:
    x = _normal(rng, 2, 3, 2, 2)
    r = rng.standard_normal((2, 12))
    return [([x], lambda: _projected(T.flatten(x), r))]


def _average(rng: Rng) -> list[Problem]:
    parts = [_normal(rng, 2, 3, 2, 2) for _ in range(3)]
    r = rng.standard_normal(parts[0].shape)
    return [(parts, lambda: _projected(T.average(parts), r))]


def _weighted_sum(fn) -> Callable[[Rng], list[Problem]]:
    def build(rng: Rng) -> list[Problem]:
        parts = [_normal(rng, 2, 3, 2, 2) for _ in range(3)]
        alphas = _normal(rng, 3)
        r = rng.standard_normal(parts[0].shape)
        return [([*parts, alphas], lambda: _projected(fn(*parts, alphas), r))]

    return build


TINY_SPEC = dict(cb=8, cr=4, hidden=16, image_size=8)


def _graph(variant: str) -> Callable[[Rng], list[Problem]]:
    def build(rng: Rng) -> list[Problem]:
        model = build_model(ModelSpec(variant=variant, **TINY_SPEC), rng)
        # zero-initialised output weights would hide every upstream gradient,
        # and equal fusion logits would hide their asymmetry
        for name, p in model.named_parameters():
            if name.endswith("alphas") or (name.endswith("weight") and not p.data.any()):
                p.data = (0.5 * rng.standard_normal(p.shape)).astype(DTYPE)
        x = Tensor(rng.uniform(0, 1, (2, 3, 8, 8)))
        labels = rng.integers(0, 10, 2)
        return [(model.parameters(), lambda: T.cross_entropy(model.forward(x, train=True), labels))]

    return build


OPS: dict[str, tuple[Callable[[Rng], list[Problem]], Optional[int]]] = {
    "conv2d": (_conv2d, None),
    "maxpool2d": (_maxpool2d, None),
    "batchnorm2d": (_batchnorm2d, None),
    "relu": (_relu, None),
    "tanh": (_tanh, None),
    "linear": (_linear, None),
    "softmax": (_softmax, None),
    "cross_entropy": (_cross_entropy, None),
    "add/mul": (_elementwise, None),
    "scale/select": (_scale_select, None),
    "reshape": (_reshape, None),
    "average": (_average, None),
    "naive_weighted_sum": (_weighted_sum(naive_weighted_sum), None),
    "fused_weighted_sum": (_weighted_sum(fused_weighted_sum), None),
    "maam_graph": (_graph("maam"), 24),
    "rnn_graph": (_graph("rnn"), 24),
}


def run_gradcheck(
    seeds: int = 5,
    eps: float = EPS,
    tolerance: float = TOLERANCE,
    ops: Optional[Sequence[str]] = None,
) -> list[OpCheck]:
    results = []
    for name in ops or OPS:
        build, max_entries = OPS[name]
        worst, count, skipped = 0.0, 0, 0
        for seed in range(seeds):
            rng = T.make_rng(seed, 0x6C)
            for problem in build(rng):
                w, c, k = check_problem(problem, eps, max_entries, rng)
                worst, count, skipped = max(worst, w), count + c, skipped + k
        results.append(OpCheck(name, worst, seeds, count, tolerance, skipped))
    return results


def format_report(results: Sequence[OpCheck]) -> str:
    lines = [f"{'op':<20} {'worst rel err':>14} {'entries':>8} {'kinks':>6}  status"]
    for r in results:
        lines.append(f"{r.name:<20} {r.worst:>14.3e} {r.entries:>8} {r.skipped:>6}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
