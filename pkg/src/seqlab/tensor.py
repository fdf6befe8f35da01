"""Minimal reverse-mode autodiff over dense float64 arrays.

Tensors wrap numpy buffers. Every differentiable op links its output to its
inputs with a backward closure; ``Tensor.backward`` materializes the implicit
graph into a :class:`ComputationTape` (forward-topological order) and replays
adjoints in reverse. All tensor values are 64-bit so finite-difference
gradient checks have headroom.

Construction and backward are single-threaded per graph. Grad mode is
thread-local, so independent replicas on separate threads do not share state.
"""

from __future__ import annotations

import threading
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager: ops inside record nothing on the graph."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Dense array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"
        self._backward_done = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate grads of every reachable tensor with requires_grad.

        Only defined for scalar outputs. A second call on the same tensor
        without rebuilding the graph is an error.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
        if self._backward_done:
            raise RuntimeError("backward() already called on this tensor; rebuild the graph first")
        self._backward_done = True
        tape = ComputationTape.trace(self)
        tape.run_adjoints(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and ndarrays are promoted to constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), _const(-1.0)))

    def __neg__(self):
        return mul(self, _const(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _const(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Wrap an op result, linking it into the graph when grad mode allows."""
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


class ComputationTape:
    """Materialized execution order of a graph rooted at one output.

    ``nodes`` lists every grad-tracked tensor reachable from the root, in an
    order where parents precede children; replaying adjoints over
    ``reversed(nodes)`` therefore visits each node exactly once.
    """

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "ComputationTape":
        nodes: list[Tensor] = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        return cls(nodes)

    def run_adjoints(self, root: Tensor) -> None:
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node._backward is None:
                continue
            node._backward(node.grad)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # backward never mutates gradient arrays in place, so aliasing is safe
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = np.maximum(x.data, 0.0)

    def backward(g):
        _accumulate(x, g * (x.data > 0.0))

    return _make(out_data, (x,), backward, "relu")


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    old_shape = x.data.shape
    out_data = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(old_shape))

    return _make(out_data, (x,), backward, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = np.transpose(x.data, axes)

    def backward(g):
        _accumulate(x, np.transpose(g, inv))

    return _make(out_data, (x,), backward, "transpose")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.data.shape))

    return _make(out_data, (x,), backward, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    count = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), _const(1.0 / count))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with broadcastable batch dims; both operands >= 2-D."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                # x @ W with batched x: one flat GEMM instead of a batched
                # GEMM followed by a reduction over leading axes
                k = a.data.shape[-1]
                m = g.shape[-1]
                gb = np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, m))
                _accumulate(b, gb)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# neural-net ops


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``; rows sum to 1."""
    x = _as_tensor(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(x, out_data * (g - dot))

    return _make(out_data, (x,), backward, "softmax")


def log_softmax_data(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain-array stable log-softmax, for decoding and oracle-free scoring."""
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply the elementwise affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        gxhat = g * gain.data
        dx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        _accumulate(x, dx)
        reduce_axes = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * xhat).sum(axis=reduce_axes))
        _accumulate(bias, g.sum(axis=reduce_axes))

    return _make(out_data, (x, gain, bias), backward, "layer_norm")


def embedding_lookup(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer index array."""
    table = _as_tensor(table)
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError(
            f"token index out of range [0, {table.data.shape[0]}): "
            f"min={idx.min()}, max={idx.max()}"
        )
    out_data = table.data[idx]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        _accumulate(table, gt)

    return _make(out_data, (table,), backward, "embedding_lookup")


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], train: bool = True) -> Tensor:
    """Zero each element independently with probability ``rate``.

    Survivors are scaled by 1/(1-rate) so the expectation is preserved.
    Rate 0 (or eval mode) is the identity and consumes no randomness.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    x = _as_tensor(x)
    if rate == 0.0 or not train:
        return x
    if rng is None:
        raise ConfigError("dropout in train mode requires an rng stream")
    # float32 uniforms: cheaper to draw, identical keep/drop semantics
    keep = (rng.random(x.data.shape, dtype=np.float32) >= rate) / (1.0 - rate)
    out_data = x.data * keep

    def backward(g):
        _accumulate(x, g * keep)

    return _make(out_data, (x,), backward, "dropout")


def cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    mask: Optional[np.ndarray] = None,
    label_smoothing: float = 0.0,
) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over unmasked positions.

    With smoothing s, the per-position target distribution becomes
    (1-s) * one_hot + s / vocab.
    """
    logits = _as_tensor(logits)
    vocab = logits.data.shape[-1]
    targets = np.asarray(targets)
    if targets.shape != logits.data.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.data.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(
            f"target index out of vocabulary [0, {vocab}): min={targets.min()}, max={targets.max()}"
        )
    if not 0.0 <= label_smoothing < 1.0:
        raise ConfigError(f"label_smoothing must lie in [0, 1), got {label_smoothing}")
    if mask is None:
        mask = np.ones(targets.shape, dtype=np.float64)
    else:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != targets.shape:
            raise ShapeError(f"mask {mask.shape} does not match targets {targets.shape}")
    total = mask.sum()
    if total <= 0:
        raise ShapeError("cross_entropy needs at least one unmasked position")

    logp = log_softmax_data(logits.data, axis=-1)
    gold_logp = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    s = label_smoothing
    per_pos = -(1.0 - s) * gold_logp - s * logp.mean(axis=-1)
    out_data = np.asarray((per_pos * mask).sum() / total)

    def backward(g):
        p = np.exp(logp)
        q = np.full_like(p, s / vocab)
        np.put_along_axis(
            q, targets[..., None], np.take_along_axis(q, targets[..., None], axis=-1) + (1.0 - s), axis=-1
        )
        dlogits = (p - q) * mask[..., None] * (float(g) / total)
        _accumulate(logits, dlogits)

    return _make(out_data, (logits,), backward, "cross_entropy")


def multi_head_attention(x_q: Tensor, x_kv: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                         wo: Tensor, n_heads: int, mask: Optional[np.ndarray]) -> Tensor:
    """Full scaled-dot-product attention block as one graph node.

    Equivalent to composing the primitive ops (projections, head reshape,
    softmax(qk^T/sqrt(dh) + mask), context, output projection); fused so a
    training step stays a few hundred numpy calls instead of thousands.
    ``mask`` is additive, broadcast over [batch, heads, q_len, k_len].
    """
    B, Tq, D = x_q.data.shape
    Tk = x_kv.data.shape[1]
    H = n_heads
    dh = D // H
    scale = dh ** -0.5

    def to_heads(flat: np.ndarray, T: int) -> np.ndarray:
        return flat.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

    q = to_heads(np.matmul(x_q.data, wq.data), Tq)
    k = to_heads(np.matmul(x_kv.data, wk.data), Tk)
    v = to_heads(np.matmul(x_kv.data, wv.data), Tk)
    s = np.matmul(q, k.transpose(0, 1, 3, 2))
    s *= scale
    if mask is not None:
        s += mask
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    attn = s
    ctx = np.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, Tq, D)
    out_data = np.matmul(ctx, wo.data)

    def backward(g):
        g2 = g.reshape(-1, D)
        if wo.requires_grad:
            _accumulate(wo, np.matmul(ctx.reshape(-1, D).T, g2))
        d_ctx = to_heads(np.matmul(g, wo.data.T), Tq)
        d_attn = np.matmul(d_ctx, v.transpose(0, 1, 3, 2))
        d_v = np.matmul(attn.transpose(0, 1, 3, 2), d_ctx)
        d_s = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True))
        d_s *= scale
        d_q = np.matmul(d_s, k).transpose(0, 2, 1, 3).reshape(-1, D)
        d_k = np.matmul(d_s.transpose(0, 1, 3, 2), q).transpose(0, 2, 1, 3).reshape(-1, D)
        d_vm = d_v.transpose(0, 2, 1, 3).reshape(-1, D)
        xq_flat = x_q.data.reshape(-1, D)
        xkv_flat = x_kv.data.reshape(-1, D)
        if wq.requires_grad:
            _accumulate(wq, np.matmul(xq_flat.T, d_q))
        if wk.requires_grad:
            _accumulate(wk, np.matmul(xkv_flat.T, d_k))
        if wv.requires_grad:
            _accumulate(wv, np.matmul(xkv_flat.T, d_vm))
        if x_q.requires_grad:
            _accumulate(x_q, np.matmul(d_q, wq.data.T).reshape(B, Tq, D))
        if x_kv.requires_grad:
            d_xkv = np.matmul(d_k, wk.data.T)
            d_xkv += np.matmul(d_vm, wv.data.T)
            _accumulate(x_kv, d_xkv.reshape(B, Tk, D))

    return _make(out_data, (x_q, x_kv, wq, wk, wv, wo), backward, "attention")


def feed_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """relu(x @ w1 + b1) @ w2 + b2 as one graph node."""
    B, T, D = x.data.shape
    F = w1.data.shape[1]
    pre = np.matmul(x.data, w1.data)
    pre += b1.data
    hidden = np.maximum(pre, 0.0)
    out_data = np.matmul(hidden, w2.data)
    out_data += b2.data

    def backward(g):
        g2 = g.reshape(-1, D)
        h2 = hidden.reshape(-1, F)
        if w2.requires_grad:
            _accumulate(w2, np.matmul(h2.T, g2))
        if b2.requires_grad:
            _accumulate(b2, g2.sum(axis=0))
        d_h = np.matmul(g2, w2.data.T)
        d_h *= (h2 > 0.0)
        if w1.requires_grad:
            _accumulate(w1, np.matmul(x.data.reshape(-1, D).T, d_h))
        if b1.requires_grad:
            _accumulate(b1, d_h.sum(axis=0))
        if x.requires_grad:
            _accumulate(x, np.matmul(d_h, w1.data.T).reshape(B, T, D))

    return _make(out_data, (x, w1, b1, w2, b2), backward, "feed_forward")


def shift_right(x: Tensor, axis: int = 1) -> Tensor:
    """Shift one step along ``axis``, zero-filling the first slot."""
    x = _as_tensor(x)
    out_data = np.zeros_like(x.data)
    src = [slice(None)] * x.data.ndim
    dst = [slice(None)] * x.data.ndim
    src[axis] = slice(None, -1)
    dst[axis] = slice(1, None)
    out_data[tuple(dst)] = x.data[tuple(src)]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[tuple(src)] = g[tuple(dst)]
        _accumulate(x, gx)

    return _make(out_data, (x,), backward, "shift_right")


