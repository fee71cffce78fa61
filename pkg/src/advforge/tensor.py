"""Dense tensors with tape-based reverse-mode differentiation.

Buffers are 32-bit floats by default; a float64 "shadow" mode (pass float64
arrays in) is supported so gradient oracles can run free of single-precision
noise. Reductions accumulate in 64 bits regardless of the buffer dtype.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible or construction is malformed."""


class GradientError(RuntimeError):
    """Backward pass cannot proceed (non-scalar loss, detached tape, ...)."""


class Tensor:
    """N-d float array with optional gradient and tape linkage.

    Data is stored C-contiguous (row-major). Tensors are treated as
    immutable once they have entered a forward computation; parameter
    updates mutate ``data`` in place only between tapes.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "tape", "is_leaf")

    def __init__(self, data, shape=None, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        arr = np.ascontiguousarray(data, dtype=dtype)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if any(s < 1 for s in shape):
                raise ShapeError(f"extents must be >= 1, got {shape}")
            if arr.size != int(np.prod(shape)):
                raise ShapeError(
                    f"shape {shape} needs {int(np.prod(shape))} values, got {arr.size}"
                )
            arr = arr.reshape(shape)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: "Node | None" = None
        self.tape: "Tape | None" = None
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Node:
    """One recorded operation: inputs, output and its local rules."""

    __slots__ = ("op", "inputs", "output", "backward_fn", "forward_fn")

    def __init__(self, op, inputs, output, backward_fn, forward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.forward_fn = forward_fn


class _TapeStack(threading.local):
    def __init__(self):
        self.stack: list["Tape"] = []


_TAPES = _TapeStack()
_BACKWARD_CALLS = 0


def active_tape() -> "Tape | None":
    stack = _TAPES.stack
    return stack[-1] if stack else None


class suspend_tape:
    """Context that hides any active tape, making forwards inference-only."""

    def __enter__(self):
        _TAPES.stack.append(None)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _TAPES.stack.pop()
        return False


def grads_live(*tensors: "Tensor") -> bool:
    """True when a tape is active and any argument participates in gradients."""
    return active_tape() is not None and any(t.requires_grad for t in tensors)


class Tape:
    """Ordered record of one forward pass; single-threaded, discarded after backward."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._watched: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _TAPES.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _TAPES.stack.pop()
        return False

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
               backward_fn: Callable, forward_fn: Callable) -> None:
        node = Node(op, inputs, output, backward_fn, forward_fn)
        self.nodes.append(node)
        output.node = node
        output.tape = self
        output.is_leaf = False
        for t in inputs:
            if t.is_leaf and t.requires_grad:
                self._watched[id(t)] = t

    def replay(self) -> list[np.ndarray]:
        """Re-execute every node's forward rule in recorded order.

        Returns the recomputed output arrays, one per node. With identical
        inputs this reproduces the original outputs bit-for-bit.
        """
        env: dict[int, np.ndarray] = {}
        outputs: list[np.ndarray] = []
        for node in self.nodes:
            args = [env.get(id(t), t.data) for t in node.inputs]
            out = node.forward_fn(*args)
            env[id(node.output)] = out
            outputs.append(out)
        return outputs


def _wrap(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
          backward_fn: Callable, forward_fn: Callable) -> Tensor:
    """Wrap a forward result, recording a tape node when gradients are live."""
    tape = active_tape()
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data)
    if tape is not None and needs:
        out.requires_grad = True
        tape.record(op, inputs, out, backward_fn, forward_fn)
    return out


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Populates ``grad`` on every watched leaf (zeros when unreachable) and
    returns the full ``id(tensor) -> gradient buffer`` map.
    """
    global _BACKWARD_CALLS
    if loss.size != 1:
        raise GradientError(f"loss must be scalar, got shape {loss.shape}")
    if loss.node is None or loss.tape is None:
        raise GradientError("loss is detached from any tape")
    _BACKWARD_CALLS += 1
    tape = loss.tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        out_grad = grads.get(id(node.output))
        if out_grad is None:
            continue
        needs = tuple(t.requires_grad for t in node.inputs)
        input_grads = node.backward_fn(out_grad, needs)
        for t, g in zip(node.inputs, input_grads):
            if g is None:
                continue
            tid = id(t)
            if tid in grads:
                grads[tid] = grads[tid] + g
            else:
                grads[tid] = g
    for tid, leaf in tape._watched.items():
        g = grads.get(tid)
        if g is None:
            g = np.zeros_like(leaf.data)
            grads[tid] = g
        leaf.grad = g
    return grads


def backward_call_count() -> int:
    return _BACKWARD_CALLS


def reset_backward_call_count() -> None:
    global _BACKWARD_CALLS
    _BACKWARD_CALLS = 0


def _as_operands(a: Tensor, b) -> tuple[Tensor, float | None]:
    """Classify the second operand: same-shape tensor or plain scalar."""
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
        return b, None
    return None, float(b)


def add(a: Tensor, b) -> Tensor:
    bt, s = _as_operands(a, b)
    if bt is not None:
        out = a.data + bt.data

        def bwd(g, needs):
            return (g if needs[0] else None, g if needs[1] else None)

        return _wrap("add", (a, bt), out, bwd, lambda x, y: x + y)
    out = a.data + np.asarray(s, dtype=a.dtype)

    def bwd(g, needs):
        return (g,)

    return _wrap("add_scalar", (a,), out, bwd,
                 lambda x, s=s: x + np.asarray(s, dtype=x.dtype))


def sub(a: Tensor, b) -> Tensor:
    bt, s = _as_operands(a, b)
    if bt is not None:
        out = a.data - bt.data

        def bwd(g, needs):
            return (g if needs[0] else None, -g if needs[1] else None)

        return _wrap("sub", (a, bt), out, bwd, lambda x, y: x - y)
    out = a.data - np.asarray(s, dtype=a.dtype)

    def bwd(g, needs):
        return (g,)

    return _wrap("sub_scalar", (a,), out, bwd,
                 lambda x, s=s: x - np.asarray(s, dtype=x.dtype))


def mul(a: Tensor, b) -> Tensor:
    bt, s = _as_operands(a, b)
    if bt is not None:
        out = a.data * bt.data
        xa, xb = a.data, bt.data

        def bwd(g, needs):
            return (g * xb if needs[0] else None, g * xa if needs[1] else None)

        return _wrap("mul", (a, bt), out, bwd, lambda x, y: x * y)
    return scale(a, s)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    c = np.asarray(s, dtype=a.dtype)
    out = a.data * c

    def bwd(g, needs):
        return (g * c,)

    return _wrap("scale", (a,), out, bwd, lambda x, c=c: x * c)


def sum_all(a: Tensor) -> Tensor:
    # 64-bit accumulator, result cast back to the buffer dtype
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)
    shape = a.shape

    def bwd(g, needs):
        return (np.broadcast_to(g.astype(a.dtype, copy=False), shape).copy(),)

    return _wrap("sum", (a,), out, bwd,
                 lambda x: np.asarray(x.sum(dtype=np.float64), dtype=x.dtype))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    out = np.asarray(a.data.sum(dtype=np.float64) / n, dtype=a.dtype)
    shape = a.shape

    def bwd(g, needs):
        full = np.full(shape, 1.0 / n, dtype=a.dtype)
        return (full * g.astype(a.dtype, copy=False),)

    return _wrap("mean", (a,), out, bwd,
                 lambda x: np.asarray(x.sum(dtype=np.float64) / n, dtype=x.dtype))


def dot(a: Tensor, b: Tensor) -> Tensor:
    return sum_all(mul(a, b))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (n,k)@(k,m), got {a.shape} @ {b.shape}")
    out = a.data @ b.data
    xa, xb = a.data, b.data

    def bwd(g, needs):
        ga = g @ xb.T if needs[0] else None
        gb = xa.T @ g if needs[1] else None
        return (ga, gb)

    return _wrap("matmul", (a, b), out, bwd, lambda x, y: x @ y)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    mask = a.data > 0

    def bwd(g, needs):
        return (g * mask,)

    return _wrap("relu", (a,), out, bwd, lambda x: np.maximum(x, 0))


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps a tensor to a scalar tensor. Central differences are evaluated
    without a tape; the analytic gradient comes from one taped pass. Pass a
    float64 ``x`` to run the oracle in shadow precision.
    """
    with Tape():
        xt = Tensor(x.data.copy(), requires_grad=True)
        loss = f(xt)
    if loss.size != 1:
        raise GradientError("finite_diff_check needs a scalar-valued function")
    backward(loss)
    analytic = xt.grad.reshape(-1).astype(np.float64)

    base = x.data.copy()
    flat = base.reshape(-1)
    central = np.empty(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(Tensor(base)).item()
        flat[i] = orig - h
        lo = f(Tensor(base)).item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise GradientError("function produced non-finite values during probing")
        central[i] = (hi - lo) / (2.0 * h)

    denom = np.maximum(1e-12, np.abs(central))
    return float(np.max(np.abs(analytic - central) / denom))
