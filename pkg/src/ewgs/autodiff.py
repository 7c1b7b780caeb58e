"""Minimal dense tensor type with a reverse-mode tape.

Every differentiable operation records a :class:`TapeNode` holding its inputs,
the values it needs for the backward pass and a backward rule with the
signature ``rule(grad_out, saved) -> tuple of input gradients``.  Built-in
operations and user-supplied rules (see :func:`custom_unary`) share this
signature, so a non-differentiable forward such as ``round`` can be paired
with any surrogate gradient.

Arrays keep the dtype they were created with (``float32`` unless asked
otherwise).  Reductions, matmul and convolution accumulate in ``float64`` and
round back to the operand dtype.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


BackwardRule = Callable[[np.ndarray, tuple], Sequence[Optional[np.ndarray]]]


@dataclass(eq=False)
class TapeNode:
    op: str
    inputs: tuple
    saved: tuple
    rule: BackwardRule
    consumed: bool = False


class Tensor:
    """Dense n-d array with an optional gradient slot."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = DEFAULT_DTYPE
        self.data = np.array(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[TapeNode] = None
        self._retain = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of this intermediate tensor after backward."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = x.dtype if isinstance(x, np.ndarray) and x.dtype.kind == "f" else DEFAULT_DTYPE
    return Tensor(x, dtype=dtype)


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(t.data), dtype=t.dtype)


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data), dtype=t.dtype)


def record(op: str, inputs: Sequence[Tensor], out: np.ndarray, rule: BackwardRule, saved: tuple = ()) -> Tensor:
    """Wrap ``out`` in a Tensor and put a node on the tape if any input needs gradients."""
    result = Tensor(out, dtype=out.dtype)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.node = TapeNode(op, tuple(inputs), tuple(saved), rule)
    return result


def check_finite(t: Tensor | np.ndarray, name: str = "tensor") -> None:
    """Raise FloatingPointError if any element is NaN or infinite."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise FloatingPointError(f"{name}: {bad} non-finite element(s)")


# ---------------------------------------------------------------------------
# broadcasting (leading singleton dimensions only)


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    small, big = (a, b) if len(a) < len(b) or (len(a) == len(b) and int(np.prod(a)) <= int(np.prod(b))) else (b, a)
    padded = (1,) * (len(big) - len(small)) + tuple(small)
    # the broadcast operand must be 1s followed by the other's trailing dims
    k = 0
    while k < len(padded) and padded[k] == 1 and big[k] != 1:
        k += 1
    if padded[k:] != big[k:]:
        raise ShapeError(f"shapes {a} and {b} are not broadcast-compatible (only leading singleton dimensions broadcast)")
    return big


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(lead + i for i, s in enumerate(shape) if s == 1 and grad.shape[lead + i] != 1)
    out = grad.sum(axis=axes, dtype=np.float64) if axes else grad
    return out.reshape(shape).astype(grad.dtype, copy=False)


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    return a, b


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def rule(g, saved):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return record("add", (a, b), a.data + b.data, rule)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def rule(g, saved):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return record("sub", (a, b), a.data - b.data, rule)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a.shape, b.shape)

    def rule(g, saved):
        x, y = saved
        return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)

    return record("mul", (a, b), a.data * b.data, rule, saved=(a.data, b.data))


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a.shape, b.shape)

    def rule(g, saved):
        x, y = saved
        return _unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)

    return record("div", (a, b), a.data / b.data, rule, saved=(a.data, b.data))


def neg(a: Tensor) -> Tensor:
    return record("neg", (a,), -a.data, lambda g, saved: (-g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def rule(g, saved):
        (m,) = saved
        return (g * m,)

    return record("relu", (x,), x.data * mask, rule, saved=(mask,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return record("reshape", (x,), x.data.reshape(tuple(shape)), lambda g, saved: (g.reshape(src),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    axes = _norm_axis(axis, x.ndim)
    out = np.sum(x.data, axis=axes, dtype=np.float64).astype(x.dtype)
    src = x.shape

    def rule(g, saved):
        keep = tuple(1 if i in axes else s for i, s in enumerate(src))
        return (np.broadcast_to(g.reshape(keep), src).astype(g.dtype),)

    return record("sum", (x,), np.asarray(out), rule)


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ShapeError(f"mean over empty axes of shape {x.shape}")
    out = (np.sum(x.data, axis=axes, dtype=np.float64) / count).astype(x.dtype)
    src = x.shape

    def rule(g, saved):
        keep = tuple(1 if i in axes else s for i, s in enumerate(src))
        return (np.broadcast_to(g.reshape(keep) / g.dtype.type(count), src).astype(g.dtype),)

    return record("mean", (x,), np.asarray(out), rule)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [batch, classes], got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(logsumexp - z[rows, labels])
    probs = np.exp(z - logsumexp[:, None])

    def rule(g, saved):
        p, lab = saved
        d = p.copy()
        d[np.arange(d.shape[0]), lab] -= 1.0
        return ((d * (float(g) / d.shape[0])).astype(logits.dtype),)

    return record("softmax_cross_entropy", (logits,), np.asarray(loss, dtype=logits.dtype), rule, saved=(probs, labels))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} and {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype)
    a64, b64 = a.data.astype(np.float64), b.data.astype(np.float64)

    def rule(g, saved):
        x, y = saved
        g64 = g.astype(np.float64)
        return (g64 @ y.T).astype(dtype), (x.T @ g64).astype(dtype)

    return record("matmul", (a, b), (a64 @ b64).astype(dtype), rule, saved=(a64, b64))


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """[N,C,H,W] -> [N*H'*W', kh*kw*C] with channels innermost."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=x.dtype)
    xp[:, padding : padding + h, padding : padding + w, :] = x.transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def _col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = x_shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    cols = cols.reshape(n, ho, wo, kh, kw, c)
    out = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += cols[:, :, :, i, j, :]
    return np.ascontiguousarray(out[:, padding : padding + h, padding : padding + w, :].transpose(0, 3, 1, 2))


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding (no bias)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects x [N,C,H,W] and w [F,C,kh,kw], got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    if stride < 1 or padding < 0 or kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeError(f"invalid conv geometry: input {x.shape}, kernel {w.shape}, stride={stride}, padding={padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    dtype = np.result_type(x.dtype, w.dtype)
    # patches are stored in the operand dtype; products accumulate in float64
    cols = _im2col(x.data.astype(dtype, copy=False), kh, kw, stride, padding)
    wmat = w.data.astype(np.float64).transpose(0, 2, 3, 1).reshape(f, -1)
    out = (cols.astype(np.float64) @ wmat.T).astype(dtype).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    x_shape = x.shape

    def rule(g, saved):
        cols_, wmat_ = saved
        gmat = g.astype(np.float64).transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (gmat.T @ cols_.astype(np.float64)).astype(dtype).reshape(f, kh, kw, cw).transpose(0, 3, 1, 2)
        gx = _col2im((gmat @ wmat_).astype(dtype), x_shape, kh, kw, stride, padding)
        return gx, gw

    return record("conv2d", (x, w), np.ascontiguousarray(out), rule, saved=(cols, wmat))


# ---------------------------------------------------------------------------
# batch normalization


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    """Batch norm over [N,C] or [N,C,H,W]; running stats are updated in place when training."""
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm expects [N,C] or [N,C,H,W], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm parameters {gamma.shape}/{beta.shape} do not match channels of {x.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    xd = x.data
    count = x.size // c
    if training:
        if count <= 1:
            raise ValueError(f"batch_norm needs more than one value per channel in training mode, got {x.shape}")
        # statistics accumulate in float64; elementwise work stays in x's dtype
        mu = xd.mean(axis=axes, dtype=np.float64)
        var = xd.var(axis=axes, dtype=np.float64)
        if update_stats:
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * var * count / (count - 1)
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    dt = x.dtype
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.astype(dt).reshape(bshape)) * inv_std.astype(dt).reshape(bshape)
    out = xhat * gamma.data.astype(dt).reshape(bshape) + beta.data.astype(dt).reshape(bshape)

    def rule(g, saved):
        xh, istd, gm = saved
        g = g.astype(dt, copy=False)
        dbeta = g.sum(axis=axes, dtype=np.float64)
        dgamma = (g * xh).sum(axis=axes, dtype=np.float64)
        gx = g * gm.astype(dt).reshape(bshape)
        if training:
            s1 = gx.sum(axis=axes, dtype=np.float64).astype(dt).reshape(bshape)
            s2 = (gx * xh).sum(axis=axes, dtype=np.float64).astype(dt).reshape(bshape)
            gx = (istd.astype(dt).reshape(bshape) / dt.type(count)) * (dt.type(count) * gx - s1 - xh * s2)
        else:
            gx = gx * istd.astype(dt).reshape(bshape)
        return gx.astype(dt, copy=False), dgamma.astype(gamma.dtype), dbeta.astype(beta.dtype)

    return record("batch_norm", (x, gamma, beta), out, rule, saved=(xhat, inv_std, gamma.data.copy()))


# ---------------------------------------------------------------------------
# custom rules


def custom_unary(
    x: Tensor,
    forward: Callable[[np.ndarray], np.ndarray],
    backward: Callable[[np.ndarray, tuple], np.ndarray],
    saved: Sequence = (),
    op: str = "custom_unary",
) -> Tensor:
    """Apply an elementwise ``forward`` whose gradient is given by ``backward``.

    ``backward(grad_out, saved)`` is called verbatim during the backward pass
    and must return a gradient of ``x``'s shape; ``forward`` is never
    differentiated.  ``saved`` may contain callables, which are evaluated on
    the forward output so the rule can see it (e.g. ``lambda out: out``).
    """
    out = np.asarray(forward(x.data))
    if out.shape != x.shape:
        raise ShapeError(f"custom forward must be elementwise: input {x.shape}, output {out.shape}")
    stash = tuple(s(out) if callable(s) else s for s in saved)
    shape = x.shape

    def rule(g, saved_):
        gx = np.asarray(backward(g, saved_))
        if gx.shape != shape:
            raise ShapeError(f"custom backward returned shape {gx.shape}, expected {shape}")
        return (gx,)

    return record(op, (x,), out.astype(x.dtype, copy=False), rule, saved=stash)


# ---------------------------------------------------------------------------
# backward pass


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    Gradients add into existing leaf ``.grad`` arrays.  A graph can be
    traversed only once; a second call raises :class:`TapeError`.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor that requires grad")
    order = _topological_order(loss)
    nodes = [t.node for t in order if t.node is not None]
    if any(n.consumed for n in nodes):
        raise TapeError("backward was already called on this graph; re-run the forward pass")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None or t._retain:
            t.grad = g.copy() if t.grad is None else t.grad + g
        if t.node is None:
            continue
        node = t.node
        in_grads = node.rule(g, node.saved)
        if len(in_grads) != len(node.inputs):
            raise TapeError(f"{node.op}: backward rule returned {len(in_grads)} gradients for {len(node.inputs)} inputs")
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=inp.dtype)
            if gi.shape != inp.shape:
                raise ShapeError(f"{node.op}: gradient shape {gi.shape} does not match input {inp.shape}")
            key = id(inp)
            grads[key] = gi if key not in grads else grads[key] + gi
        node.consumed = True
        node.saved = ()
