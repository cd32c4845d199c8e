"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float32 for training, float64 for gradient
checks).  Every differentiable operation appends a node to a thread-local
tape in execution order, so insertion order is already a topological order
and the backward pass is a single reverse sweep.  The tape is consumed by
``backward`` and a fresh one starts on the next recorded op.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

ALLOWED_DTYPES = (np.float32, np.float64)


class GraphError(RuntimeError):
    """Backward called on a detached or already-consumed graph."""


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class Tape:
    """Append-only record of executed ops for one forward pass."""

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False


class Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: "Tensor", inputs: Sequence["Tensor"], backward_fn: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


_state = threading.local()


def _tls():
    if not hasattr(_state, "tape"):
        _state.tape = None
        _state.recording = True
    return _state


def _current_tape() -> Tape:
    tls = _tls()
    if tls.tape is None or tls.tape.consumed:
        tls.tape = Tape()
    return tls.tape


class no_grad:
    """Context manager: run ops without recording them on the tape."""

    def __enter__(self):
        tls = _tls()
        self._prev = tls.recording
        tls.recording = False
        return self

    def __exit__(self, *exc):
        _tls().recording = self._prev
        return False


def is_recording() -> bool:
    return _tls().recording


class Tensor:
    """N-d array plus autodiff bookkeeping.

    Activations are always 4-d (N, C, H, W); parameters may be any rank.
    ``grad`` stays None unless requires_grad is set (no gradient buffer is
    ever attached to a non-differentiable tensor).
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_is_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        if self.requires_grad:
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            else:
                self.grad.fill(0.0)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Named trainable leaf; its gradient buffer always exists."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)


def check_same_dtype(*tensors: Tensor):
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"mixed dtypes in one op: {sorted(d.name for d in dtypes)}")


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap op output; append a tape node when gradients are being tracked."""
    tls = _tls()
    needs_grad = tls.recording and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad)
    if needs_grad:
        tape = _current_tape()
        out._tape = tape
        out._is_leaf = False
        tape.nodes.append(Node(out, inputs, backward_fn))
    return out


def backward(loss: Tensor):
    """Reverse sweep from a scalar loss; fills .grad on reachable leaves.

    The tape is consumed: a second backward over the same graph raises.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        raise GraphError("loss is detached from any recorded graph")
    if tape.consumed:
        raise GraphError("graph already consumed by a previous backward")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        gout = grads.pop(id(node.out), None)
        if gout is None:
            continue
        gins = node.backward_fn(gout)
        for inp, gin in zip(node.inputs, gins):
            if gin is None or not inp.requires_grad:
                continue
            if inp._is_leaf:
                # leaves own their buffer; graph-internal grads are
                # accumulated out-of-place because backward functions may
                # return views or shared arrays
                if inp.grad is None:
                    inp.grad = gin.copy()
                else:
                    inp.grad += gin
            else:
                acc = grads.get(id(inp))
                grads[id(inp)] = gin if acc is None else acc + gin

    tape.consumed = True
    tape.nodes.clear()
    tls = _tls()
    if tls.tape is tape:
        tls.tape = None


# ---------------------------------------------------------------------------
# element-wise / shape primitives
# ---------------------------------------------------------------------------


def _broadcast_ok(a_shape, b_shape) -> bool:
    # b may broadcast over a along N/H/W; channel counts must match exactly.
    if len(a_shape) != 4 or len(b_shape) != 4:
        return a_shape == b_shape
    if a_shape[1] != b_shape[1]:
        return False
    return all(bs == as_ or bs == 1 for as_, bs in ((a_shape[0], b_shape[0]),
                                                    (a_shape[2], b_shape[2]),
                                                    (a_shape[3], b_shape[3])))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise sum; b may broadcast over batch/spatial axes of a."""
    check_same_dtype(a, b)
    if a.shape != b.shape and not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"add: cannot broadcast {b.shape} over {a.shape}")
    out = a.data + b.data

    def bwd(gout):
        ga = gout
        if b.shape == a.shape:
            gb = gout
        else:
            axes = tuple(i for i in range(4) if b.shape[i] == 1 and a.shape[i] != 1)
            gb = gout.sum(axis=axes, keepdims=True)
        return ga, gb

    return record(out, (a, b), bwd)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis, in list order."""
    if len(parts) == 0:
        raise ShapeError("concat_channels: empty part list")
    check_same_dtype(*parts)
    first = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (first[0], first[2], first[3]):
            raise ShapeError(f"concat_channels: N/H/W mismatch {p.shape} vs {first}")
    out = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(gout):
        return tuple(gout[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return record(out, parts, bwd)


def take_channels(x: Tensor, index) -> Tensor:
    """Select channels by slice or index array; backward scatters back."""
    idx = index if isinstance(index, slice) else np.asarray(index)
    out = x.data[:, idx]

    def bwd(gout):
        gx = np.zeros_like(x.data)
        gx[:, idx] = gout
        return (gx,)

    return record(np.ascontiguousarray(out), (x,), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map on (N, C, 1, 1) tensors: y = W x + b."""
    check_same_dtype(x, weight, bias)
    n, c, h, w = x.shape
    if (h, w) != (1, 1):
        raise ShapeError(f"linear expects 1x1 spatial dims, got {x.shape}")
    c_out, c_in = weight.shape
    if c_in != c:
        raise ShapeError(f"linear: weight inner dim {c_in} != input channels {c}")
    x2 = x.data.reshape(n, c)
    y = x2 @ weight.data.T + bias.data

    def bwd(gout):
        g2 = gout.reshape(n, c_out)
        gx = (g2 @ weight.data).reshape(n, c, 1, 1)
        gw = g2.T @ x2
        gb = g2.sum(axis=0)
        return gx, gw, gb

    return record(y.reshape(n, c_out, 1, 1), (x, weight, bias), bwd)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements as a (1,1,1,1) scalar tensor."""
    out = np.array(x.data.sum(), dtype=x.dtype).reshape(1, 1, 1, 1)

    def bwd(gout):
        return (np.full_like(x.data, gout.reshape(())),)

    return record(out, (x,), bwd)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar."""
    out = x.data * x.dtype.type(factor)

    def bwd(gout):
        return (gout * x.dtype.type(factor),)

    return record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# numerical gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    ``f`` must be scalar-valued and ``x`` float64.  Error per element is
    |analytic - numeric| / max(1, |numeric|).
    """
    if x.dtype != np.float64:
        raise ShapeError("grad_check requires float64 input")
    x.requires_grad = True
    x.grad = None
    out = f(x)
    backward(out)
    analytic = x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * eps)

    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(rel.max())
