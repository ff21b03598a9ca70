"""Dense float tensors with a minimal reverse-mode differentiation tape.

Values live in plain numpy arrays. Every op computes its forward result
eagerly and, when any input is registered on a Tape, records a backward
closure so one reverse sweep yields gradients for all tracked leaves.
float32 is the working precision; the gradient-check harness promotes
everything to float64.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an op contract."""


class GraphError(RuntimeError):
    """Tape misuse: mixed tapes, non-scalar loss, or missing nodes."""


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor holds non-finite values")
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tracked = "" if self.tape is None else f" node={self.node}"
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tracked})"


class _Node:
    __slots__ = ("op", "inputs", "bwd")

    def __init__(self, op: str, inputs: tuple[int | None, ...], bwd):
        self.op = op
        self.inputs = inputs
        self.bwd = bwd


class Tape:
    """Ordered op record; node order is topological by construction."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, data) -> Tensor:
        """Register an array as a tracked leaf and return its tensor view."""
        t = Tensor(data) if not isinstance(data, Tensor) else Tensor(data.data)
        t.tape = self
        t.node = self._add("leaf", (), None)
        return t

    def _add(self, op: str, inputs: tuple[int | None, ...], bwd) -> int:
        self._nodes.append(_Node(op, inputs, bwd))
        return len(self._nodes) - 1


class Gradients:
    """Per-node gradient buffers produced by one backward sweep."""

    def __init__(self, buffers: list[np.ndarray | None]):
        self._buffers = buffers

    def get(self, t: Tensor) -> np.ndarray | None:
        if t.node is None:
            return None
        return self._buffers[t.node]

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self.get(t)
        if g is None:
            raise GraphError("no gradient reached this tensor")
        return g


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse sweep from a scalar loss; visits each node exactly once."""
    if loss.tape is not tape or loss.node is None:
        raise GraphError("loss is not recorded on this tape")
    if loss.data.shape != ():
        raise GraphError(f"loss must be scalar, got shape {loss.data.shape}")
    buffers: list[np.ndarray | None] = [None] * len(tape._nodes)
    buffers[loss.node] = np.ones((), dtype=loss.data.dtype)
    for nid in range(len(tape._nodes) - 1, -1, -1):
        node = tape._nodes[nid]
        g = buffers[nid]
        if g is None or node.bwd is None:
            continue
        for iid, gi in zip(node.inputs, node.bwd(g)):
            if iid is None or gi is None:
                continue
            if buffers[iid] is None:
                buffers[iid] = gi
            else:
                buffers[iid] = buffers[iid] + gi
    return Gradients(buffers)


def _unify_tape(inputs: Sequence[Tensor]) -> "Tape | None":
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise GraphError("operands live on different tapes")
    return tape


def _emit(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
          bwd: Callable) -> Tensor:
    tape = _unify_tape(inputs)
    if tape is None:
        return Tensor(out_data)
    ids = tuple(t.node if t.tape is tape else None for t in inputs)
    return Tensor(out_data, tape, tape._add(op, ids, bwd))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    ash, bsh = a.shape, b.shape
    return _emit("add", (a, b), out,
                 lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    ash, bsh = a.shape, b.shape
    return _emit("sub", (a, b), out,
                 lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), out,
                 lambda g: (_unbroadcast(g * bd, ad.shape),
                            _unbroadcast(g * ad, bd.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    ad, bd = a.data, b.data
    return _emit("div", (a, b), out,
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * ad / (bd * bd), bd.shape)))


def add_const(a: Tensor, c: float) -> Tensor:
    return _emit("add_const", (a,), a.data + c, lambda g: (g,))


def mul_const(a: Tensor, c: float) -> Tensor:
    return _emit("mul_const", (a,), a.data * c, lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return mul_const(a, -1.0)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _emit("log", (a,), np.log(ad), lambda g: (g / ad,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    passed = (ad >= lo) & (ad <= hi)
    return _emit("clamp", (a,), np.clip(ad, lo, hi),
                 lambda g: (g * passed,))


def power_const(a: Tensor, p: float) -> Tensor:
    ad = a.data
    out = ad ** p
    return _emit("power_const", (a,), out,
                 lambda g: (g * p * ad ** (p - 1.0),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _emit("relu", (a,), np.where(pos, a.data, 0.0), lambda g: (g * pos,))


def elu_plus_one(a: Tensor) -> Tensor:
    """elu(x) + 1: the strictly positive feature map used by linear attention."""
    pos = a.data > 0
    out = np.where(pos, a.data + 1.0, np.exp(a.data))
    return _emit("elu_plus_one", (a,), out,
                 lambda g: (g * np.where(pos, 1.0, out),))


# ---------------------------------------------------------------------------
# shape / structure


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    ash = a.shape
    return _emit("reshape", (a,), a.data.reshape(shape),
                 lambda g: (g.reshape(ash),))


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose2d expects a matrix, got {a.shape}")
    return _emit("transpose2d", (a,), a.data.T.copy(), lambda g: (g.T,))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel (last) axis; gradient splits back."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("concat_channels expects N x C operands")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"leading dims differ: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _emit("concat_channels", (a, b), out,
                 lambda g: (g[:, :ca], g[:, ca:]))


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows by index; backward scatter-adds into the source."""
    idx = np.asarray(idx, dtype=np.int64)
    ash = a.shape

    def bwd(g):
        ga = np.zeros(ash, dtype=g.dtype)
        np.add.at(ga, idx, g)
        return (ga,)

    return _emit("take_rows", (a,), a.data[idx], bwd)


def take_flat(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather scalar entries from the flattened tensor."""
    idx = np.asarray(idx, dtype=np.int64)
    ash = a.shape

    def bwd(g):
        ga = np.zeros(int(np.prod(ash)), dtype=g.dtype)
        np.add.at(ga, idx, g)
        return (ga.reshape(ash),)

    return _emit("take_flat", (a,), a.data.reshape(-1)[idx], bwd)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    ash = a.shape
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)
    return _emit("sum_all", (a,), out,
                 lambda g: (np.broadcast_to(g, ash).astype(g.dtype, copy=True),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    ash = a.shape
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)
    return _emit("mean_all", (a,), out,
                 lambda g: (np.broadcast_to(g / n, ash).astype(g.dtype, copy=True),))


def sum_axis(a: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    ash = a.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, ash).astype(g.dtype, copy=True),)

    return _emit("sum_axis", (a,), a.data.sum(axis=axis, keepdims=keepdims), bwd)


# ---------------------------------------------------------------------------
# linear algebra / network building blocks


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", (a, b), ad @ bd,
                 lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map x @ W + b over row vectors."""
    out = matmul(x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"bias shape {bias.shape} vs Cout {weight.shape[1]}")
        out = add(out, bias)
    return out


def softmax(x: Tensor, axis: int, mask: np.ndarray | None = None) -> Tensor:
    """Max-stabilized softmax along one axis.

    `mask` marks valid entries; masked entries get probability 0 and an
    all-masked slice comes back as zeros rather than NaN.
    """
    xd = x.data
    if not -xd.ndim <= axis < xd.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {xd.shape}")
    if mask is None:
        m = xd.max(axis=axis, keepdims=True)
        e = np.exp(xd - m)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != xd.shape:
            raise ShapeError("mask shape must match input")
        neg = np.where(mask, xd, -np.inf)
        m = neg.max(axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(mask, np.exp(np.where(mask, xd, m) - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    out = e / np.where(s == 0.0, 1.0, s)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _emit("softmax", (x,), out, bwd)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(C)) v over row-token matrices."""
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("attention expects N x C operands")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"q/k channels differ: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"k/v rows differ: {k.shape} vs {v.shape}")
    scores = mul_const(matmul(q, transpose2d(k)), 1.0 / np.sqrt(q.shape[1]))
    return matmul(softmax(scores, axis=1), v)


def l2_normalize_rows(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Scale each row to unit length; rows below eps norm divide by eps."""
    xd = x.data
    if xd.ndim != 2:
        raise ShapeError("l2_normalize_rows expects N x C")
    n = np.sqrt((xd * xd).sum(axis=1, keepdims=True))
    nc = np.maximum(n, eps)
    out = xd / nc

    def bwd(g):
        free = n > eps  # (N,1); clamped rows are a plain 1/eps scaling
        dot = (g * xd).sum(axis=1, keepdims=True)
        gx_free = g / nc - xd * dot / (nc * nc * nc)
        return (np.where(free, gx_free, g / eps),)

    return _emit("l2_normalize_rows", (x,), out, bwd)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2D convolution on an H x W x Cin map with a k x k x Cin x Cout kernel."""
    xd, wd = x.data, weight.data
    if xd.ndim != 3 or wd.ndim != 4:
        raise ShapeError(f"conv2d expects HxWxC input and kxkxCixCo kernel, "
                         f"got {xd.shape} and {wd.shape}")
    k = wd.shape[0]
    if wd.shape[1] != k or wd.shape[2] != xd.shape[2]:
        raise ShapeError(f"kernel {wd.shape} does not fit input {xd.shape}")
    h, w, cin = xd.shape
    cout = wd.shape[3]
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(xd, ((pad, pad), (pad, pad), (0, 0)))

    cols = np.empty((ho, wo, k, k, cin), dtype=xd.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, :, dy, dx, :] = xp[dy:dy + stride * ho:stride,
                                       dx:dx + stride * wo:stride, :]
    cols2 = cols.reshape(ho * wo, k * k * cin)
    out = (cols2 @ wd.reshape(k * k * cin, cout)).reshape(ho, wo, cout)
    bd = None
    if bias is not None:
        bd = bias.data
        if bd.shape != (cout,):
            raise ShapeError(f"bias shape {bd.shape} vs Cout {cout}")
        out = out + bd

    def bwd(g):
        gf = g.reshape(ho * wo, cout)
        gw = (cols2.T @ gf).reshape(wd.shape)
        gcols = (gf @ wd.reshape(k * k * cin, cout).T).reshape(ho, wo, k, k, cin)
        gxp = np.zeros_like(xp)
        for dy in range(k):
            for dx in range(k):
                gxp[dy:dy + stride * ho:stride,
                    dx:dx + stride * wo:stride, :] += gcols[:, :, dy, dx, :]
        gx = gxp[pad:pad + h, pad:pad + w, :] if pad else gxp
        gb = g.sum(axis=(0, 1)) if bd is not None else None
        return (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    if bias is None:
        return _emit("conv2d", inputs, out, lambda g: bwd(g)[:2])
    return _emit("conv2d", inputs, out, bwd)


def fan_in_uniform(rng: np.random.Generator, fan_in: int,
                   shape: tuple[int, ...]) -> np.ndarray:
    """Seeded uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)], float32."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)
