"""Dense float64 tensor kernel with hand-written backward passes.

Every numeric operation the model needs lives here: matrix multiply,
elementwise arithmetic, masked softmax, layer normalization, GELU, the
transformer FFN, a grouped (block-diagonal) attention kernel, and the
structural ops (concat, slice, gather, reshape). Each op records a
backward closure on its output tensor; ``Tensor.backward()`` replays the
recorded sequence in reverse. This is deliberately not a general autodiff
engine: the op set is small, fixed, and auditable, and every backward is
validated against central finite differences in the test suite.

Instrumentation: matmul-family ops add ``m*p*n`` scalar multiply-accumulate
operations (MACs) to the module-level ``counter``. One MAC equals two FLOPs
under the usual convention, so the analysis module's per-layer FLOPs
formulas are exactly twice the counts recorded here. Elementwise ops,
normalizations, and softmax are not counted, matching the convention of the
analytic cost formulas.

All arithmetic is 64-bit. Tensors are immutable after construction except
for gradient accumulation owned by a single training step; read-only
sharing across threads is safe. A single forward/backward is single-threaded
by contract, so the counter needs no locking.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import DimensionError

NEG_INF = -1e9  # additive-mask sentinel standing in for minus infinity

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715
_PROB_EPS = 1e-12
_LN_EPS = 1e-12


class OpCounter:
    """Counts scalar multiply-accumulate operations across forward passes.

    Monotonically non-decreasing between resets; one matmul of shapes
    (m, p) x (p, n) contributes m*p*n.
    """

    __slots__ = ("mul_adds",)

    def __init__(self) -> None:
        self.mul_adds = 0

    def add(self, n: int) -> None:
        self.mul_adds += int(n)

    def reset(self) -> None:
        self.mul_adds = 0


counter = OpCounter()


class _CountWindow:
    def __init__(self, start: int) -> None:
        self._start = start
        self._frozen = None

    @property
    def mul_adds(self) -> int:
        if self._frozen is not None:
            return self._frozen
        return counter.mul_adds - self._start

    def _freeze(self) -> None:
        self._frozen = counter.mul_adds - self._start


@contextmanager
def count_muladds():
    """Counts MACs accrued inside the block; the value freezes on exit."""
    window = _CountWindow(counter.mul_adds)
    try:
        yield window
    finally:
        window._freeze()


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array with an optional gradient buffer.

    ``data`` is row-major (C order). ``grad`` is lazily allocated with the
    same shape on first accumulation. Non-leaf tensors carry the recorded
    backward closure of the op that produced them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bw = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{req})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed=None) -> None:
        """Reverse-accumulate gradients through the recorded op sequence."""
        if seed is None:
            if self.data.size != 1:
                raise DimensionError("backward() without seed needs a scalar output")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)

        # Iterative three-state postorder: a node is appended only after every
        # parent reachable from it is finished, which makes reversed(topo) a
        # valid topological order even for diamond-shaped graphs (a tensor
        # consumed by several downstream ops).
        topo = []
        state = {}           # id -> 1 while expanding, 2 when finished
        stack = [self]
        while stack:
            node = stack[-1]
            st = state.get(id(node), 0)
            if st == 0:
                state[id(node)] = 1
                for p in node._parents:
                    if state.get(id(p), 0) == 0:
                        stack.append(p)
            elif st == 1:
                state[id(node)] = 2
                topo.append(node)
                stack.pop()
            else:
                stack.pop()

        self._accumulate(seed)
        for node in reversed(topo):
            if node._bw is not None and node.grad is not None:
                node._bw(node.grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def _track(*tensors) -> bool:
    return _grad_enabled and any(t.requires_grad for t in tensors)


def _attach(out: Tensor, parents, bw) -> None:
    out.requires_grad = True
    out._parents = tuple(parents)
    out._bw = bw


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, ts) in enumerate(zip(g.shape, shape)):
        if ts == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------- arithmetic -----------------------------


def matmul(a, b) -> Tensor:
    """Matrix product of two 2-D tensors. Adds m*p*n MACs to the counter."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    m, p = a.shape
    n = b.shape[1]
    counter.add(m * p * n)
    out = Tensor(a.data @ b.data)
    if _track(a, b):
        def bw(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)
        _attach(out, (a, b), bw)
    return out


def matmul_t(a, b) -> Tensor:
    """a @ b.T for 2-D tensors (attention scores). Counts m*p*n MACs."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"matmul_t shape mismatch: {a.shape} x {b.shape}^T")
    m, p = a.shape
    n = b.shape[0]
    counter.add(m * p * n)
    out = Tensor(a.data @ b.data.T)
    if _track(a, b):
        def bw(g):
            if a.requires_grad:
                a._accumulate(g @ b.data)
            if b.requires_grad:
                b._accumulate(g.T @ a.data)
        _attach(out, (a, b), bw)
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    if _track(a, b):
        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))
        _attach(out, (a, b), bw)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    if _track(a, b):
        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.shape))
        _attach(out, (a, b), bw)
    return out


def mul(a, b) -> Tensor:
    """Elementwise (broadcasting) product; either side may be a constant."""
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    if _track(a, b):
        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))
        _attach(out, (a, b), bw)
    return out


# ----------------------------- nonlinearities -----------------------------


def gelu(x) -> Tensor:
    """GELU via the tanh approximation (documented, derivative exact for it)."""
    x = as_tensor(x)
    u = _GELU_C * (x.data + _GELU_A * x.data ** 3)
    t = np.tanh(u)
    out = Tensor(0.5 * x.data * (1.0 + t))
    if _track(x):
        def bw(g):
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data ** 2)
            dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t ** 2) * du
            x._accumulate(g * dx)
        _attach(out, (x,), bw)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor(s)
    if _track(x):
        def bw(g):
            x._accumulate(g * s * (1.0 - s))
        _attach(out, (x,), bw)
    return out


# ----------------------------- normalization / softmax -----------------------------


def masked_softmax(logits, mask) -> Tensor:
    """Row-wise softmax over positions whose additive mask entry is 0.

    ``mask`` entries must be 0 (visible) or the NEG_INF sentinel (hidden);
    it is interpreted, never added, so masked logits cannot perturb visible
    probabilities even at the last bit. Masked positions are exactly 0 in
    the output. Fully-masked rows return all zeros rather than NaN so padded
    rows stay inert in downstream sums.
    """
    x = as_tensor(logits)
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if m.shape != x.shape:
        raise DimensionError(f"mask shape {m.shape} != logits shape {x.shape}")
    if not np.all((m == 0.0) | (m <= NEG_INF / 2)):
        raise DimensionError("mask entries must be 0 or the NEG_INF sentinel")
    vis = m == 0.0
    z = np.where(vis, x.data, -np.inf)
    rowmax = np.max(z, axis=-1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)  # fully-masked guard
    e = np.exp(np.where(vis, x.data - rowmax, 0.0)) * vis
    s = e.sum(axis=-1, keepdims=True)
    p = np.divide(e, s, out=np.zeros_like(e), where=s > 0)
    out = Tensor(p)
    if _track(x):
        def bw(g):
            dot = (g * p).sum(axis=-1, keepdims=True)
            x._accumulate(p * (g - dot))
        _attach(out, (x,), bw)
    return out


def layer_norm(x, gain, bias, eps: float = _LN_EPS) -> Tensor:
    """Per-row zero-mean/unit-variance normalization followed by affine.

    Zero-variance rows normalize to zeros (then take the bias), so constant
    or padded rows cannot produce NaN.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.data.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise DimensionError(
            f"layer_norm shapes: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=1, keepdims=True)
    inv_sigma = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_sigma
    out = Tensor(xhat * gain.data + bias.data)
    if _track(x, gain, bias):
        def bw(g):
            if x.requires_grad:
                ghat = g * gain.data
                m1 = ghat.mean(axis=1, keepdims=True)
                m2 = (ghat * xhat).mean(axis=1, keepdims=True)
                x._accumulate((ghat - m1 - xhat * m2) * inv_sigma)
            if gain.requires_grad:
                gain._accumulate((g * xhat).sum(axis=0))
            if bias.requires_grad:
                bias._accumulate(g.sum(axis=0))
        _attach(out, (x, gain, bias), bw)
    return out


# ----------------------------- composite layers -----------------------------


def linear(x, w, b) -> Tensor:
    return add(matmul(x, w), b)


def ffn(x, w1, b1, w2, b2) -> Tensor:
    """Transformer feed-forward: GELU MLP with hidden width 4x the model width.

    Two matmuls contribute 8*n*D^2 MACs (16*n*D^2 FLOPs) for input (n, D).
    """
    x = as_tensor(x)
    width = x.shape[1]
    w1t, w2t = as_tensor(w1), as_tensor(w2)
    if w1t.shape != (width, 4 * width) or w2t.shape != (4 * width, width):
        raise DimensionError(
            f"ffn expects ({width},{4*width}) and ({4*width},{width}) weights, "
            f"got {w1t.shape} and {w2t.shape}")
    return linear(gelu(linear(x, w1t, b1)), w2t, b2)


def grouped_attention(q, k, v, group_size: int) -> Tensor:
    """Full (unmasked) attention restricted to consecutive groups of rows.

    Inputs are (L, w) with L divisible by group_size; attention is computed
    independently inside each group of ``group_size`` rows with 1/sqrt(w)
    scaling, single head. Counts 2*L*group_size*w MACs (the score and the
    value products), i.e. per group 2*g^2*w, never the cross-group products
    a dense L x L attention would spend.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    L, w = q.shape
    if k.shape != (L, w) or v.shape != (L, w):
        raise DimensionError("grouped_attention operands must share one shape")
    if group_size < 1 or L % group_size:
        raise DimensionError(f"rows {L} not divisible by group size {group_size}")
    G = L // group_size
    scale = 1.0 / math.sqrt(w)
    q3 = q.data.reshape(G, group_size, w)
    k3 = k.data.reshape(G, group_size, w)
    v3 = v.data.reshape(G, group_size, w)
    counter.add(2 * L * group_size * w)
    s = np.einsum("gqd,gkd->gqk", q3, k3) * scale
    s -= s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(np.einsum("gqk,gkd->gqd", p, v3).reshape(L, w))
    if _track(q, k, v):
        def bw(g):
            g3 = g.reshape(G, group_size, w)
            if v.requires_grad:
                v._accumulate(np.einsum("gqk,gqd->gkd", p, g3).reshape(L, w))
            dp = np.einsum("gqd,gkd->gqk", g3, v3)
            ds = (dp - (dp * p).sum(axis=-1, keepdims=True)) * p * scale
            if q.requires_grad:
                q._accumulate(np.einsum("gqk,gkd->gqd", ds, k3).reshape(L, w))
            if k.requires_grad:
                k._accumulate(np.einsum("gqk,gqd->gkd", ds, q3).reshape(L, w))
        _attach(out, (q, k, v), bw)
    return out


# ----------------------------- structural ops -----------------------------


def concat_rows(parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    if _track(*parts):
        sizes = [p.shape[0] for p in parts]
        def bw(g):
            off = 0
            for p, n in zip(parts, sizes):
                if p.requires_grad:
                    p._accumulate(g[off:off + n])
                off += n
        _attach(out, parts, bw)
    return out


def concat_cols(parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    if _track(*parts):
        widths = [p.shape[1] for p in parts]
        def bw(g):
            off = 0
            for p, w in zip(parts, widths):
                if p.requires_grad:
                    p._accumulate(g[:, off:off + w])
                off += w
        _attach(out, parts, bw)
    return out


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data[:, start:stop].copy())
    if _track(x):
        def bw(g):
            full = np.zeros_like(x.data)
            full[:, start:stop] = g
            x._accumulate(full)
        _attach(out, (x,), bw)
    return out


def gather_rows(x, idx) -> Tensor:
    """Select rows by integer index (embedding lookup / query selection).

    Duplicate indices accumulate gradient additively. Out-of-range indices
    raise; negative indices are rejected rather than wrapped.
    """
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("gather_rows takes a 1-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"row index out of range for table with {x.shape[0]} rows")
    out = Tensor(x.data[idx])
    if _track(x):
        def bw(g):
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, idx, g)
        _attach(out, (x,), bw)
    return out


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))
    if _track(x):
        def bw(g):
            x._accumulate(g.reshape(x.shape))
        _attach(out, (x,), bw)
    return out


def mean_rows(x) -> Tensor:
    """Column means as a (1, d) tensor; zero rows in -> zeros out."""
    x = as_tensor(x)
    n = x.shape[0]
    out = Tensor(x.data.mean(axis=0, keepdims=True) if n else np.zeros((1, x.shape[1])))
    if n and _track(x):
        def bw(g):
            x._accumulate(np.broadcast_to(g / n, x.shape).copy())
        _attach(out, (x,), bw)
    return out


def mean_scalars(parts) -> Tensor:
    """Mean of scalar tensors (batch loss reduction)."""
    parts = [as_tensor(p) for p in parts]
    n = len(parts)
    out = Tensor(np.asarray(sum(float(p.data.reshape(-1)[0]) for p in parts) / n))
    if _track(*parts):
        def bw(g):
            share = float(g) / n
            for p in parts:
                if p.requires_grad:
                    p._accumulate(np.full(p.shape, share))
        _attach(out, parts, bw)
    return out


def bce(p, y: float) -> Tensor:
    """Binary cross-entropy of one probability against a 0/1 label.

    The probability is clamped to [1e-12, 1 - 1e-12] before the logs; the
    clamp's gradient is zero outside the open interval.
    """
    p = as_tensor(p)
    if p.data.size != 1:
        raise DimensionError("bce expects a single probability")
    y = float(y)
    pc = float(np.clip(p.data.reshape(-1)[0], _PROB_EPS, 1.0 - _PROB_EPS))
    out = Tensor(np.asarray(-(y * math.log(pc) + (1.0 - y) * math.log(1.0 - pc))))
    if _track(p):
        raw = float(p.data.reshape(-1)[0])
        in_range = _PROB_EPS < raw < 1.0 - _PROB_EPS
        def bw(g):
            if in_range:
                d = (pc - y) / (pc * (1.0 - pc))
                p._accumulate(np.full(p.shape, float(g) * d))
        _attach(out, (p,), bw)
    return out
