"""Dense tensors (rank <= 3) with tape-based reverse-mode differentiation.

Two precisions are in play: float64 for verification (gradchecks, oracle
comparisons) and float32 for training and checkpoint storage.  Every op
checks its output for NaN/Inf; producing a non-finite value from finite
inputs is a contract violation and raises FloatingPointError.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# Stack of at most one recording tape; ops record only while a tape is active.
_ACTIVE_TAPES: list["Tape"] = []


def _active_tape() -> "Tape | None":
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


class Tensor:
    """Dense numeric array of rank <= 3, optionally accumulating a gradient.

    Values are treated as immutable after construction (ops never write into
    an existing tensor's data).  `grad` is allocated when requires_grad is
    set and accumulates across backward passes until zero_grad().
    """

    __slots__ = ("data", "grad", "node_id", "_tape")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim > 3:
            raise ValueError(f"rank {arr.ndim} exceeds the supported maximum of 3")
        if any(n < 1 for n in arr.shape):
            raise ValueError(f"zero-size extent in shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise FloatingPointError("tensor constructed from non-finite values")
        self.data = arr
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"


class Tape:
    """Ordered record of primitive ops for one reverse-mode sweep.

    Single-owner: enter the context, run the forward computation, then call
    backward(loss).  Entries are stored in execution order, which is a
    topological order by construction.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._leaves: list[Tensor] = []
        self._next_id = 0

    def __enter__(self) -> "Tape":
        if _ACTIVE_TAPES:
            raise RuntimeError("a Tape is already active; tapes do not nest")
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.pop()

    def _node_id(self, t: Tensor) -> int | None:
        if t._tape is self and t.node_id is not None:
            return t.node_id
        if t.grad is not None:  # un-enrolled leaf parameter
            t._tape = self
            t.node_id = self._next_id
            self._next_id += 1
            self._leaves.append(t)
            return t.node_id
        return None

    def _maybe_record(self, out: Tensor, inputs: tuple[Tensor, ...],
                      backward_fn: Callable) -> None:
        ids = [self._node_id(t) for t in inputs]  # enroll every leaf input
        if all(i is None for i in ids):
            return
        out._tape = self
        out.node_id = self._next_id
        self._next_id += 1
        self._entries.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)=1 through the tape, accumulating leaf grads.

        Each reachable gradient is populated in one traversal; fan-out
        accumulates.  Repeated calls without zero_grad() keep accumulating.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
        if loss._tape is not self or loss.node_id is None:
            raise RuntimeError("loss was not recorded on this tape")
        adjoint: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for out, inputs, backward_fn in reversed(self._entries):
            g = adjoint.pop(out.node_id, None)
            if g is None:
                continue
            for t, gi in zip(inputs, backward_fn(g)):
                if gi is None or t._tape is not self or t.node_id is None:
                    continue
                prev = adjoint.get(t.node_id)
                adjoint[t.node_id] = gi if prev is None else prev + gi
        for leaf in self._leaves:
            g = adjoint.get(leaf.node_id)
            if g is not None:
                leaf.grad += g


def backward(loss: Tensor) -> None:
    """Backward pass through the tape that recorded `loss`."""
    if loss._tape is None:
        raise RuntimeError("loss is not attached to any tape")
    loss._tape.backward(loss)


def _finish(data: np.ndarray, inputs: tuple[Tensor, ...],
            backward_fn: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise FloatingPointError("op produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = None
    out._tape = None
    tape = _active_tape()
    if tape is not None:
        tape._maybe_record(out, inputs, backward_fn)
    return out


def record_op(data, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Register a custom primitive: `backward_fn(g)` must return one adjoint
    (or None) per input.  Used for ops whose gradient is computed analytically
    rather than by composing tape primitives."""
    return _finish(np.asarray(data), tuple(inputs), backward_fn)


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; `b` may also be rank-1 and broadcast as a bias over
    the leading axes of `a`."""
    _check_same_dtype(a, b, "add")
    if a.shape != b.shape:
        if b.data.ndim != 1 or a.shape[-1] != b.shape[0]:
            raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")
        lead = tuple(range(a.data.ndim - 1))

        def bfn(g):
            return g, g.sum(axis=lead)
    else:
        def bfn(g):
            return g, g
    return _finish(a.data + b.data, (a, b), bfn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "mul")
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return _finish(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant (no gradient w.r.t. c)."""
    return _finish(x.data * c, (x,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "matmul")
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    return _finish(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError("transpose expects a rank-2 tensor")
    return _finish(np.ascontiguousarray(x.data.T), (x,),
                   lambda g: (np.ascontiguousarray(g.T),))


def relu(x: Tensor) -> Tensor:
    return _finish(np.maximum(x.data, 0.0), (x,),
                   lambda g: (g * (x.data > 0),))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _finish(s, (x,), lambda g: (g * s * (1.0 - s),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # piecewise form avoids overflow in exp for large |v|
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def swish(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _finish(x.data * s, (x,),
                   lambda g: (g * (s + x.data * s * (1.0 - s)),))


def glu(x: Tensor) -> Tensor:
    """Gated linear unit over the last axis: first half gated by the sigmoid
    of the second half."""
    width = x.shape[-1]
    if width % 2:
        raise ValueError(f"glu needs an even last extent, got {width}")
    half = width // 2
    return mul(slice_last(x, 0, half), sigmoid(slice_last(x, half, width)))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = _softmax(x.data, axis)

    def bfn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return _finish(y, (x,), bfn)


def _softmax(v: np.ndarray, axis: int) -> np.ndarray:
    # max-subtraction for stability
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bfn(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)
    return _finish(y, (x,), bfn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance (population
    variance), then apply the affine transform gain * xhat + bias."""
    _check_same_dtype(x, gain, "layer_norm")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    lead = tuple(range(x.data.ndim - 1))

    def bfn(g):
        gx = g * gain.data
        n = x.shape[-1]
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return _finish(xhat * gain.data + bias.data, (x, gain, bias), bfn)


def depthwise_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel 1-d convolution with same padding.

    x is (T, C), kernel is (K, C) with odd K; each channel is convolved
    independently and the output keeps length T.
    """
    _check_same_dtype(x, kernel, "depthwise_conv1d")
    if x.data.ndim != 2 or kernel.data.ndim != 2:
        raise ValueError("depthwise_conv1d expects rank-2 input and kernel")
    steps, channels = x.shape
    width, kc = kernel.shape
    if kc != channels:
        raise ValueError(f"kernel channels {kc} != input channels {channels}")
    if width % 2 == 0:
        raise ValueError(f"kernel width must be odd, got {width}")
    pad = width // 2
    xp = np.zeros((steps + 2 * pad, channels), dtype=x.data.dtype)
    xp[pad:pad + steps] = x.data
    out = np.zeros_like(x.data)
    for j in range(width):
        out += xp[j:j + steps] * kernel.data[j]

    def bfn(g):
        dk = np.empty_like(kernel.data)
        dxp = np.zeros_like(xp)
        for j in range(width):
            dk[j] = (xp[j:j + steps] * g).sum(axis=0)
            dxp[j:j + steps] += g * kernel.data[j]
        return dxp[pad:pad + steps], dk
    return _finish(out, (x, kernel), bfn)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[-1]:
        raise ValueError(f"slice [{start}:{stop}] out of range for shape {x.shape}")

    def bfn(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)
    return _finish(np.ascontiguousarray(x.data[..., start:stop]), (x,), bfn)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_last of no tensors")
    widths = [p.shape[-1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def bfn(g):
        return tuple(np.ascontiguousarray(g[..., offsets[i]:offsets[i + 1]])
                     for i in range(len(parts)))
    return _finish(np.concatenate([p.data for p in parts], axis=-1),
                   tuple(parts), bfn)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    return _finish(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,),
                   lambda g: (np.ones_like(x.data) * g,))


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradcheckReport:
    """Per-parameter worst relative error between analytic and central
    finite-difference gradients."""

    per_param: dict[str, float]

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol

    def lines(self) -> list[str]:
        width = max((len(n) for n in self.per_param), default=0)
        return [f"{name:<{width}}  {err:.3e}"
                for name, err in sorted(self.per_param.items())]


def gradcheck(f: Callable[[], Tensor],
              params: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]],
              eps: float = 1e-5) -> GradcheckReport:
    """Compare tape gradients of the scalar f() against central differences.

    f must re-evaluate the computation from the current parameter values on
    every call and be deterministic.  Parameters must be float64 for the
    stated tolerances to be meaningful.
    """
    items = list(params.items()) if isinstance(params, Mapping) else list(params)
    for _, p in items:
        if p.grad is None:
            raise ValueError("gradcheck parameters need requires_grad=True")
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)

    report: dict[str, float] = {}
    for name, p in items:
        analytic = p.grad.astype(np.float64, copy=True)
        numeric = np.zeros_like(analytic)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
        report[name] = float((np.abs(analytic - numeric) / denom).max())
    return GradcheckReport(report)
