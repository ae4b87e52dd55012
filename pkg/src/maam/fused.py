"""Single-pass softmax-weighted sum of three branch tensors.

``fused_weighted_sum`` normalises the three mixing logits once and then makes
one pass over memory writing ``w1*a1 + w2*a2 + w3*a3`` straight into the output
buffer. Its backward is also one pass: it writes the three branch gradients
and accumulates the three dot products needed for the logit gradient.

``naive_weighted_sum`` builds the same value from generic tape ops
(softmax, select, scale, add) and serves as the reference path for
equivalence checks and benchmarks.
"""

from __future__ import annotations

import csv
import io
import time
import tracemalloc
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numba
import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import DTYPE, Node, Tensor

PRODUCTION_SHAPE = (64, 256, 16, 16)

# incremented once per logit normalisation; tests use it to check the
# softmax is not recomputed per element
normalize_calls = 0


@numba.njit(cache=True, fastmath=False)
def _forward_kernel(a1, a2, a3, w0, w1, w2, out):
    for i in range(out.size):
        out[i] = w0 * a1[i] + w1 * a2[i] + w2 * a3[i]


@numba.njit(cache=True, fastmath=False)
def _backward_kernel(g, a1, a2, a3, w0, w1, w2, g1, g2, g3):
    d0 = 0.0
    d1 = 0.0
    d2 = 0.0
    for i in range(g.size):
        gi = g[i]
        g1[i] = w0 * gi
        g2[i] = w1 * gi
        g3[i] = w2 * gi
        gd = np.float64(gi)
        d0 += gd * np.float64(a1[i])
        d1 += gd * np.float64(a2[i])
        d2 += gd * np.float64(a3[i])
    return d0, d1, d2


def _normalize(alphas: np.ndarray) -> np.ndarray:
    global normalize_calls
    normalize_calls += 1
    return T.softmax_array(alphas)


def _check(a1: Tensor, a2: Tensor, a3: Tensor, alphas: Tensor) -> None:
    if not (a1.shape == a2.shape == a3.shape):
        raise ShapeError(f"fused_weighted_sum: branch shapes differ: {a1.shape}, {a2.shape}, {a3.shape}")
    if alphas.shape != (3,):
        raise ShapeError(f"fused_weighted_sum: expected 3 mixing logits, got shape {alphas.shape}")


def fused_weighted_sum(a1: Tensor, a2: Tensor, a3: Tensor, alphas: Tensor) -> Tensor:
    """``sum_i softmax(alphas)_i * a_i`` in a single pass with one output buffer."""
    _check(a1, a2, a3, alphas)
    w = _normalize(alphas.data)
    out = np.empty_like(a1.data)
    _forward_kernel(a1.data.reshape(-1), a2.data.reshape(-1), a3.data.reshape(-1), w[0], w[1], w[2], out.reshape(-1))
    return T._record("fused_weighted_sum", (a1, a2, a3, alphas), Tensor(out), weights=w)


@T.backward_rule("fused_weighted_sum")
def _fused_weighted_sum_backward(g: np.ndarray, node: Node) -> tuple:
    a1, a2, a3, alphas = node.inputs
    w = node.saved["weights"]
    g = np.ascontiguousarray(g, dtype=DTYPE)
    g1, g2, g3 = (np.empty_like(g) for _ in range(3))
    d = _backward_kernel(
        g.reshape(-1), a1.data.reshape(-1), a2.data.reshape(-1), a3.data.reshape(-1),
        w[0], w[1], w[2], g1.reshape(-1), g2.reshape(-1), g3.reshape(-1),
    )
    galpha = T.softmax_backward_array(np.array(d).astype(DTYPE), w) if alphas.requires_grad else None
    return g1, g2, g3, galpha


def naive_weighted_sum(a1: Tensor, a2: Tensor, a3: Tensor, alphas: Tensor) -> Tensor:
    """Reference composition: softmax, three scalings, two additions."""
    _check(a1, a2, a3, alphas)
    w = T.softmax(alphas)
    scaled = [T.scale(a, T.select(w, i)) for i, a in enumerate((a1, a2, a3))]
    return T.add(T.add(scaled[0], scaled[1]), scaled[2])


# ---------------------------------------------------------------------------
# instrumentation and benchmark
# ---------------------------------------------------------------------------


def count_graph_ops(fn, shape: Sequence[int] = (2, 4, 4, 4), seed: int = 0) -> int:
    """Number of tensor-producing ops ``fn`` records on a tape.

    Scalar ``select`` nodes are indexing views and are not counted, so the
    naive path reports softmax + 3 scales + 2 adds = 6.
    """
    rng = T.make_rng(seed)
    branches = [T.parameter(rng.standard_normal(shape)) for _ in range(3)]
    alphas = T.parameter(rng.standard_normal(3))
    with T.Tape() as tape:
        fn(*branches, alphas)
    return sum(1 for node in tape.nodes if node.rule != "select")


def intermediate_buffers(fn, branches: Sequence[Tensor], alphas: Tensor) -> int:
    """Branch-sized buffers allocated by ``fn`` beyond its output.

    Measured with ``tracemalloc``, which sees numpy's data allocations: the
    peak traced size during one forward call, in units of one branch buffer,
    minus the output buffer itself.
    """
    fn(*branches, alphas)  # warm-up so JIT compilation is not traced
    branch_bytes = branches[0].data.nbytes
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        out = fn(*branches, alphas)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    del out
    return max(0, int(peak // branch_bytes) - 1)


@dataclass
class BenchRow:
    shape: tuple
    naive_ns: float
    fused_ns: float
    speedup: float
    naive_fwd_bwd_ns: float
    fused_fwd_bwd_ns: float
    max_deviation: float
    max_grad_deviation: float
    max_abs_output: float
    naive_buffers: int
    fused_buffers: int
    naive_ops: int
    fused_ops: int


@dataclass
class FusionBenchReport:
    repetitions: int
    rows: list[BenchRow] = field(default_factory=list)

    COLUMNS = (
        "shape", "naive_ns", "fused_ns", "speedup", "naive_fwd_bwd_ns", "fused_fwd_bwd_ns",
        "max_deviation", "max_grad_deviation", "naive_buffers", "fused_buffers", "naive_ops", "fused_ops",
    )

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.COLUMNS)
        for row in self.rows:
            d = asdict(row)
            d["shape"] = "x".join(map(str, row.shape))
            writer.writerow([_fmt(d[c]) for c in self.COLUMNS])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def table(self) -> str:
        head = f"{'shape':>18} {'naive ms':>10} {'fused ms':>10} {'speedup':>8} {'max dev':>10} {'buffers':>8} {'ops':>6}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(
                f"{'x'.join(map(str, r.shape)):>18} {r.naive_ns / 1e6:10.3f} {r.fused_ns / 1e6:10.3f} "
                f"{r.speedup:8.2f} {r.max_deviation:10.2e} {r.naive_buffers:>3}/{r.fused_buffers:<4} "
                f"{r.naive_ops:>2}/{r.fused_ops:<3}"
            )
        return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _median_ns(fn, repetitions: int) -> float:
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return float(np.median(times))


def _forward_backward(fn, branches, alphas, upstream):
    for t in (*branches, alphas):
        t.grad = None
    with T.Tape() as tape:
        out = fn(*branches, alphas)
        loss = T.sum(T.mul(out, upstream))
    tape.backward(loss)
    return out.data, [t.grad for t in (*branches, alphas)]


def bench_fusion(
    shapes: Optional[Iterable[Sequence[int]]] = None,
    repetitions: int = 7,
    seed: int = 0,
) -> FusionBenchReport:
    """Time naive vs fused paths on identical inputs, one row per shape."""
    if repetitions < 5:
        raise ValueError("bench_fusion needs at least 5 repetitions")
    shapes = [tuple(s) for s in (shapes or [(8, 64, 16, 16), PRODUCTION_SHAPE])]
    report = FusionBenchReport(repetitions)
    naive_ops = count_graph_ops(naive_weighted_sum)
    fused_ops = count_graph_ops(fused_weighted_sum)
    for k, shape in enumerate(shapes):
        rng = T.make_rng(seed, k)
        branches = [T.parameter(rng.standard_normal(shape)) for _ in range(3)]
        alphas = T.parameter(rng.standard_normal(3))
        upstream = Tensor(rng.standard_normal(shape))

        naive_out = naive_weighted_sum(*branches, alphas).data
        fused_out = fused_weighted_sum(*branches, alphas).data
        deviation = float(np.max(np.abs(naive_out - fused_out)))
        _, ng = _forward_backward(naive_weighted_sum, branches, alphas, upstream)
        _, fg = _forward_backward(fused_weighted_sum, branches, alphas, upstream)
        grad_dev = max(float(np.max(np.abs(a - b))) for a, b in zip(ng, fg))

        naive_ns = _median_ns(lambda: naive_weighted_sum(*branches, alphas), repetitions)
        fused_ns = _median_ns(lambda: fused_weighted_sum(*branches, alphas), repetitions)
        naive_bwd = _median_ns(lambda: _forward_backward(naive_weighted_sum, branches, alphas, upstream), repetitions)
        fused_bwd = _median_ns(lambda: _forward_backward(fused_weighted_sum, branches, alphas, upstream), repetitions)
        report.rows.append(
            BenchRow(
                shape=shape,
                naive_ns=naive_ns,
                fused_ns=fused_ns,
                speedup=naive_ns / fused_ns,
                naive_fwd_bwd_ns=naive_bwd,
                fused_fwd_bwd_ns=fused_bwd,
                max_deviation=deviation,
                max_grad_deviation=grad_dev,
                max_abs_output=float(np.max(np.abs(naive_out))),
                naive_buffers=intermediate_buffers(naive_weighted_sum, branches, alphas),
                fused_buffers=intermediate_buffers(fused_weighted_sum, branches, alphas),
                naive_ops=naive_ops,
                fused_ops=fused_ops,
            )
        )
    return report
