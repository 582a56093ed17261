"""Reverse-mode automatic differentiation over dense numpy tensors.

The engine is a define-by-run tape: each operation appends a node to a
Graph, and ``Graph.backward`` walks the tape in reverse creation order,
which is a reverse topological order by construction. Every op accepts a
single example at its documented rank (e.g. an image ``[C, H, W]``) or the
same shape with a leading batch axis; losses over a batch are means, so
the batched and single-example contracts agree at batch size one.

Convolution uses the cross-correlation convention (no kernel flip).
Dropout is inverted: survivors are scaled by ``1 / (1 - rate)`` at train
time, so eval mode is a bit-exact identity.
"""

from __future__ import annotations

import weakref
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Graph",
    "Node",
    "conv2d",
    "maxpool",
    "lrn",
    "fully_connected",
    "relu",
    "dropout",
    "softmax_cross_entropy",
    "l2_tie_loss",
    "flatten",
    "slice_last",
    "concat_last",
    "add",
    "scale",
    "sum_all",
]

_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# A backward rule maps the node's output gradient to one gradient (or None)
# per parent, in parent order.
BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    """One tape entry: an op, its parents, and its forward value."""

    # The node->graph edge is weak so dropping a Graph frees its node values
    # immediately instead of waiting for cycle collection (graphs hold every
    # activation of a forward pass, so prompt release matters).
    __slots__ = ("_graph_ref", "id", "op", "parents", "value", "_backward", "_grad")

    def __init__(self, graph, node_id, op, parents, value, backward):
        self._graph_ref = weakref.ref(graph)
        self.id = node_id
        self.op = op
        self.parents = parents
        self.value = value
        self._backward = backward
        self._grad = None

    @property
    def graph(self) -> "Graph":
        graph = self._graph_ref()
        if graph is None:
            raise RuntimeError("this node's graph has been released")
        return graph

    @property
    def grad(self) -> np.ndarray:
        """Accumulated gradient; zero for nodes no backward pass reached."""
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        self._grad += g

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"


class Graph:
    """Tape of operations for one forward pass, plus its trainable parameters."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        if self.dtype not in _ALLOWED_DTYPES:
            raise ValueError(f"graph dtype must be float32 or float64, got {self.dtype}")
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def _append(self, op, parents, value, backward=None) -> Node:
        node = Node(self, len(self.nodes), op, tuple(parents), value, backward)
        self.nodes.append(node)
        return node

    def constant(self, values) -> Node:
        """Leaf holding fixed data (inputs, labels); still receives gradients."""
        return self._append("constant", (), np.asarray(values, dtype=self.dtype))

    def parameter(self, name: str, values) -> Node:
        """Leaf flagged trainable; its gradient is reported by name."""
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        node = self._append("parameter", (), np.asarray(values, dtype=self.dtype))
        self.params[name] = node
        return node

    def backward(self, loss: Node) -> None:
        """Accumulate d(loss)/d(node) into every node reachable from ``loss``.

        Repeated calls accumulate additively (gradients are never zeroed
        implicitly). Parameters on no path to the loss keep zero gradient.
        """
        if loss.graph is not self:
            raise ValueError("loss node belongs to a different graph")
        if loss.value.ndim != 0:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.value.shape}")
        pending: dict[int, np.ndarray] = {loss.id: np.ones((), dtype=loss.value.dtype)}
        for node in reversed(self.nodes[: loss.id + 1]):
            g = pending.pop(node.id, None)
            if g is None:
                continue
            node._accumulate(g)
            if node._backward is None:
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None:
                    continue
                if parent.id in pending:
                    pending[parent.id] = pending[parent.id] + pg
                else:
                    pending[parent.id] = pg

    def parameter_gradients(self) -> dict[str, np.ndarray]:
        return {name: node.grad for name, node in self.params.items()}


def _graph_of(*nodes: Node) -> Graph:
    g = nodes[0].graph
    for n in nodes[1:]:
        if n.graph is not g:
            raise ValueError("operation inputs belong to different graphs")
    return g


def _as_batch(value: np.ndarray, rank: int, what: str) -> tuple[np.ndarray, bool]:
    """Return (batched view, was_unbatched) for an input of base rank ``rank``."""
    if value.ndim == rank:
        return value[None], True
    if value.ndim == rank + 1:
        return value, False
    raise ValueError(f"{what}: expected rank {rank} or {rank + 1}, got shape {value.shape}")


def conv2d(x: Node, kernels: Node, bias: Node, stride: int = 1, pad: int = 0) -> Node:
    """2-D cross-correlation. x: [C,H,W], kernels: [C_out,C_in,kH,kW], bias: [C_out].

    Output height is floor((H + 2*pad - kH)/stride) + 1, likewise width.
    """
    g = _graph_of(x, kernels, bias)
    if stride <= 0:
        raise ValueError(f"conv2d: stride must be positive, got {stride}")
    if pad < 0:
        raise ValueError(f"conv2d: pad must be non-negative, got {pad}")
    k = kernels.value
    b = bias.value
    if k.ndim != 4:
        raise ValueError(f"conv2d: kernels must be rank 4, got shape {k.shape}")
    c_out, c_in, kh, kw = k.shape
    if b.shape != (c_out,):
        raise ValueError(f"conv2d: bias shape {b.shape} does not match {c_out} output channels")
    xb, squeeze = _as_batch(x.value, 3, "conv2d input")
    n, c, h, w = xb.shape
    if c != c_in:
        raise ValueError(f"conv2d: input has {c} channels but kernels expect {c_in}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ValueError(
            f"conv2d: padded input {h + 2 * pad}x{w + 2 * pad} smaller than kernel {kh}x{kw}"
        )
    xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xb
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (w + 2 * pad - kw) // stride + 1
    # im2col in [N, (C,kh,kw), H'*W'] layout: filling per kernel offset keeps
    # every copy run-contiguous, and the GEMM views below are all free reshapes.
    cols = np.empty((n, c_in, kh, kw, h_out, w_out), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride]
    cols = cols.reshape(n, c_in * kh * kw, h_out * w_out)
    wmat = k.reshape(c_out, -1)
    out = (wmat @ cols).reshape(n, c_out, h_out, w_out) + b[:, None, None]
    if squeeze:
        out = out[0]

    def backward(gy):
        gb = gy[None] if squeeze else gy
        gmat = gb.reshape(n, c_out, h_out * w_out)
        db = gb.sum(axis=(0, 2, 3))
        dk = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(k.shape)
        dcols = np.matmul(wmat.T, gmat).reshape(n, c_in, kh, kw, h_out, w_out)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += (
                    dcols[:, :, i, j]
                )
        dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
        if squeeze:
            dx = dx[0]
        return dx, dk, db

    return g._append("conv2d", (x, kernels, bias), out, backward)


def maxpool(x: Node, window: int, stride: int) -> Node:
    """Per-window maximum; gradient routes to the first argmax in scan order."""
    g = _graph_of(x)
    if window <= 0 or stride <= 0:
        raise ValueError(f"maxpool: window and stride must be positive, got {window}, {stride}")
    xb, squeeze = _as_batch(x.value, 3, "maxpool input")
    n, c, h, w = xb.shape
    if window > h or window > w:
        raise ValueError(f"maxpool: window {window} exceeds input {h}x{w}")
    h_out = (h - window) // stride + 1
    w_out = (w - window) // stride + 1
    disjoint = stride >= window
    if disjoint and h_out * stride <= h and w_out * stride <= w:
        # Tiling case: reshape instead of striding. The tie rule (first index
        # in scan order) is argmax's either way.
        v = xb[:, :, : h_out * stride, : w_out * stride]
        v = v.reshape(n, c, h_out, stride, w_out, stride)[:, :, :, :window, :, :window]
        flat = np.ascontiguousarray(v.transpose(0, 1, 2, 4, 3, 5)).reshape(
            n, c, h_out, w_out, window * window
        )
    else:
        win = sliding_window_view(xb, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
        flat = win.reshape(n, c, h_out, w_out, window * window)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if squeeze:
        out = out[0]

    def backward(gy):
        gb = gy[None] if squeeze else gy
        dx = np.zeros_like(xb)
        ni, ci, pi, qi = np.indices((n, c, h_out, w_out), sparse=True)
        rows = pi * stride + idx // window
        cols = qi * stride + idx % window
        if disjoint:
            dx[ni, ci, rows, cols] = gb
        else:
            np.add.at(dx, (ni, ci, rows, cols), gb)
        return (dx[0] if squeeze else dx,)

    return g._append("maxpool", (x,), out, backward)


def _channel_window_sum(t: np.ndarray, below: int, above: int) -> np.ndarray:
    """Sum t[:, c-below : c+above+1] over channels, clipped at the edges."""
    c = t.shape[1]
    cs = np.concatenate([np.zeros_like(t[:, :1]), np.cumsum(t, axis=1)], axis=1)
    hi = np.minimum(np.arange(c) + above + 1, c)
    lo = np.maximum(np.arange(c) - below, 0)
    return cs[:, hi] - cs[:, lo]


def lrn(x: Node, depth: int, k: float, alpha: float, beta: float) -> Node:
    """Across-channel response normalization with an edge-clipped window.

    out[c] = in[c] / (k + alpha * sum_{|c'-c| within window} in[c']^2)^beta,
    with the size-``depth`` window spanning (depth-1)//2 channels below and
    depth//2 above.
    """
    g = _graph_of(x)
    if depth < 1:
        raise ValueError(f"lrn: depth must be >= 1, got {depth}")
    if k <= 0:
        raise ValueError(f"lrn: k must be positive to keep the denominator positive, got {k}")
    xb, squeeze = _as_batch(x.value, 3, "lrn input")
    below, above = (depth - 1) // 2, depth // 2
    denom = k + alpha * _channel_window_sum(xb * xb, below, above)
    dpow = denom ** (-beta)
    out = xb * dpow
    if squeeze:
        out = out[0]

    def backward(gy):
        gb = gy[None] if squeeze else gy
        inner = _channel_window_sum(gb * xb * denom ** (-beta - 1.0), above, below)
        dx = gb * dpow - (2.0 * alpha * beta) * xb * inner
        return (dx[0] if squeeze else dx,)

    return g._append("lrn", (x,), out, backward)


def fully_connected(x: Node, weights: Node, bias: Node) -> Node:
    """Affine layer: out = W @ x + b. x: [n], weights: [m,n], bias: [m]."""
    g = _graph_of(x, weights, bias)
    wv, bv = weights.value, bias.value
    if wv.ndim != 2:
        raise ValueError(f"fully_connected: weights must be rank 2, got shape {wv.shape}")
    m, n_in = wv.shape
    if bv.shape != (m,):
        raise ValueError(f"fully_connected: bias shape {bv.shape} does not match {m} outputs")
    xb, squeeze = _as_batch(x.value, 1, "fully_connected input")
    if xb.shape[1] != n_in:
        raise ValueError(
            f"fully_connected: input length {xb.shape[1]} does not match weight columns {n_in}"
        )
    out = xb @ wv.T + bv
    if squeeze:
        out = out[0]

    def backward(gy):
        gb = gy[None] if squeeze else gy
        dx = gb @ wv
        dw = gb.T @ xb
        db = gb.sum(axis=0)
        return (dx[0] if squeeze else dx), dw, db

    return g._append("fully_connected", (x, weights, bias), out, backward)


def relu(x: Node) -> Node:
    g = _graph_of(x)
    out = np.maximum(x.value, 0)

    def backward(gy):
        return (gy * (x.value > 0),)

    return g._append("relu", (x,), out, backward)


def dropout(x: Node, rate: float, mode: str, rng: Optional[np.random.Generator] = None) -> Node:
    """Inverted dropout: train mode zeroes with probability ``rate`` and
    rescales survivors by 1/(1-rate); eval mode is a bit-exact identity."""
    g = _graph_of(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"dropout: mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return g._append("dropout", (x,), x.value, lambda gy: (gy,))
    if rng is None:
        raise ValueError("dropout: train mode with rate > 0 requires an rng")
    mask = (rng.random(x.value.shape) >= rate).astype(x.value.dtype)
    mask /= np.asarray(1.0 - rate, dtype=x.value.dtype)
    out = x.value * mask

    def backward(gy):
        return (gy * mask,)

    return g._append("dropout", (x,), out, backward)


def softmax_cross_entropy(logits: Node, label) -> Node:
    """-log softmax(logits)[label], max-subtracted for stability.

    Accepts [K] logits with an integer label, or [N,K] logits with [N]
    labels (the loss is then the batch mean). Gradient is softmax - onehot
    (divided by N in the batched form).
    """
    g = _graph_of(logits)
    v = logits.value
    if v.ndim == 1:
        vb, squeeze = v[None], True
        labels = np.asarray([label])
    elif v.ndim == 2:
        vb, squeeze = v, False
        labels = np.asarray(label)
        if labels.shape != (v.shape[0],):
            raise ValueError(
                f"softmax_cross_entropy: need {v.shape[0]} labels, got shape {labels.shape}"
            )
    else:
        raise ValueError(f"softmax_cross_entropy: logits must be rank 1 or 2, got {v.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("softmax_cross_entropy: labels must be integers")
    n, k = vb.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {k})")
    z = vb - vb.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    probs = ez / sez
    per_row = np.log(sez[:, 0]) - z[np.arange(n), labels]
    out = np.asarray(per_row.mean(), dtype=v.dtype)

    def backward(gy):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        d *= gy / n
        return (d[0] if squeeze else d,)

    return g._append("softmax_cross_entropy", (logits,), out, backward)


def l2_tie_loss(a: Node, b: Node, squared: bool = False, eps: float = 1e-12) -> Node:
    """Euclidean norm of (a - b), or its square with ``squared=True``.

    Accepts [d] vectors or [N,d] batches (batch mean). The norm's gradient
    is (a-b)/max(norm, eps), covering the non-differentiable zero point.
    """
    g = _graph_of(a, b)
    if a.value.shape != b.value.shape:
        raise ValueError(f"l2_tie_loss: shapes {a.value.shape} and {b.value.shape} differ")
    av, squeeze = _as_batch(a.value, 1, "l2_tie_loss input")
    bv = b.value[None] if squeeze else b.value
    diff = av - bv
    sq = (diff * diff).sum(axis=1)
    n = av.shape[0]
    if squared:
        out = np.asarray(sq.mean(), dtype=av.dtype)

        def backward(gy):
            da = (gy * 2.0 / n) * diff
            return (da[0], -da[0]) if squeeze else (da, -da)

    else:
        norms = np.sqrt(sq)
        out = np.asarray(norms.mean(), dtype=av.dtype)

        def backward(gy):
            da = (gy / n) * diff / np.maximum(norms, eps)[:, None]
            return (da[0], -da[0]) if squeeze else (da, -da)

    return g._append("l2_tie_loss", (a, b), out, backward)


def flatten(x: Node) -> Node:
    """[C,H,W] -> [C*H*W] (row-major), batched likewise."""
    g = _graph_of(x)
    xb, squeeze = _as_batch(x.value, 3, "flatten input")
    out = xb.reshape(xb.shape[0], -1)
    if squeeze:
        out = out[0]

    def backward(gy):
        return (gy.reshape(x.value.shape),)

    return g._append("flatten", (x,), out, backward)


def slice_last(x: Node, start: int, stop: int) -> Node:
    """Contiguous slice [start, stop) of the last axis."""
    g = _graph_of(x)
    size = x.value.shape[-1]
    if not 0 <= start < stop <= size:
        raise ValueError(f"slice_last: bad range [{start}, {stop}) for axis of size {size}")
    out = x.value[..., start:stop].copy()

    def backward(gy):
        dx = np.zeros_like(x.value)
        dx[..., start:stop] = gy
        return (dx,)

    return g._append("slice_last", (x,), out, backward)


def concat_last(a: Node, b: Node) -> Node:
    """Concatenate along the last axis; leading axes must agree."""
    g = _graph_of(a, b)
    if a.value.shape[:-1] != b.value.shape[:-1]:
        raise ValueError(
            f"concat_last: leading shapes {a.value.shape[:-1]} and {b.value.shape[:-1]} differ"
        )
    na = a.value.shape[-1]
    out = np.concatenate([a.value, b.value], axis=-1)

    def backward(gy):
        return gy[..., :na].copy(), gy[..., na:].copy()

    return g._append("concat_last", (a, b), out, backward)


def add(a: Node, b: Node) -> Node:
    g = _graph_of(a, b)
    if a.value.shape != b.value.shape:
        raise ValueError(f"add: shapes {a.value.shape} and {b.value.shape} differ")
    return g._append("add", (a, b), a.value + b.value, lambda gy: (gy, gy))


def scale(x: Node, c: float) -> Node:
    g = _graph_of(x)
    cv = np.asarray(c, dtype=x.value.dtype)
    return g._append("scale", (x,), x.value * cv, lambda gy: (gy * cv,))


def sum_all(x: Node) -> Node:
    """Sum of all elements, as a scalar node."""
    g = _graph_of(x)
    out = np.asarray(x.value.sum(), dtype=x.value.dtype)

    def backward(gy):
        return (np.full_like(x.value, gy),)

    return g._append("sum", (x,), out, backward)
