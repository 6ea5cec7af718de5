"""Tape-based reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` records every primitive application while it is active.
Calling :func:`backward` on a scalar output walks the tape in fixed reverse
order and accumulates gradients into every watched tensor, which makes the
whole pass deterministic: two backward runs over the same tape produce
bit-identical gradients.

The primitive set is intentionally small.  There is no implicit broadcasting
(the one exception is ``scalar-scale``, whose factor is a plain Python
number); shape alignment is always spelled out with ``reshape``/``matmul``.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional

import numpy as np


class ShapeError(ValueError):
    """Raised when operands do not conform to a primitive's shape rule."""


class Tensor:
    """Dense float64 array with a gradient slot and optional tape identity.

    ``node_id`` is the tensor's position on the tape it was watched by or
    created on; constants (never watched) keep ``node_id = None``.
    """

    __slots__ = ("values", "grad", "node_id", "tape")

    def __init__(self, values) -> None:
        arr = np.asarray(values, dtype=np.float64)
        self.values = arr
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.tape: Optional["Tape"] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, watched={self.node_id is not None})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class TapeRecord:
    __slots__ = ("kind", "inputs", "output", "attrs", "cache")

    def __init__(self, kind, inputs, output, attrs, cache) -> None:
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.attrs = attrs
        self.cache = cache


_TAPE_STACK: list["Tape"] = []


def active_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of primitive applications.

    Topological order holds by construction: an operation can only consume
    tensors that already exist, so every record's inputs precede it.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self.records: list[TapeRecord] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def watch(self, tensor: Tensor) -> Tensor:
        """Register a leaf tensor so gradients accumulate into it."""
        if tensor.tape is self:
            return tensor
        tensor.tape = self
        tensor.node_id = len(self.nodes)
        self.nodes.append(tensor)
        return tensor

    def watch_all(self, tensors: Iterable[Tensor]) -> None:
        for t in tensors:
            self.watch(t)

    def replay(self) -> dict[int, np.ndarray]:
        """Re-execute the recorded forward pass from current leaf values.

        Returns the recomputed values per node id.  With unchanged inputs the
        result is bit-identical to the originally recorded forward values.
        """
        values: dict[int, np.ndarray] = {}
        produced = {rec.output.node_id for rec in self.records}
        for t in self.nodes:
            if t.node_id not in produced:
                values[t.node_id] = t.values
        for rec in self.records:
            in_vals = [
                values[t.node_id] if (t.tape is self and t.node_id in values) else t.values
                for t in rec.inputs
            ]
            out, _ = _PRIMITIVES[rec.kind].forward(in_vals, rec.attrs)
            values[rec.output.node_id] = out
        return values

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Accumulate gradients of a scalar loss over the whole tape.

        Every watched tensor reachable backward from ``loss`` receives its
        gradient (also stored in ``tensor.grad``); unreachable watched tensors
        get zeros.  Accumulation follows the fixed reverse record order.
        """
        if loss.tape is not self or loss.node_id is None:
            raise ValueError("loss tensor does not belong to this tape")
        if loss.values.size != 1:
            raise ShapeError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        grads: dict[int, np.ndarray] = {
            loss.node_id: np.ones_like(loss.values)
        }
        for rec in reversed(self.records):
            gout = grads.get(rec.output.node_id)
            if gout is None:
                continue
            in_vals = [t.values for t in rec.inputs]
            gins = _PRIMITIVES[rec.kind].vjp(
                in_vals, rec.output.values, gout, rec.attrs, rec.cache
            )
            for t, g in zip(rec.inputs, gins):
                if g is None or t.tape is not self:
                    continue
                acc = grads.get(t.node_id)
                grads[t.node_id] = g if acc is None else acc + g
        out: dict[int, Tensor] = {}
        for t in self.nodes:
            g = grads.get(t.node_id)
            t.grad = g if g is not None else np.zeros_like(t.values)
            out[t.node_id] = Tensor(t.grad)
        return out


def backward(loss: Tensor) -> dict[int, Tensor]:
    if loss.tape is None:
        raise ValueError("loss was not recorded on any tape")
    return loss.tape.backward(loss)


# --- primitive registry ----------------------------------------------------

class _Primitive:
    __slots__ = ("forward", "vjp", "n_inputs")

    def __init__(self, forward: Callable, vjp: Callable, n_inputs) -> None:
        self.forward = forward
        self.vjp = vjp
        self.n_inputs = n_inputs


_PRIMITIVES: dict[str, _Primitive] = {}


def _register(kind: str, n_inputs) -> Callable:
    def deco(pair):
        fwd, vjp = pair()
        _PRIMITIVES[kind] = _Primitive(fwd, vjp, n_inputs)
        return pair

    return deco


def _fail(kind: str, msg: str):
    raise ShapeError(f"{kind}: {msg}")


@_register("matmul", 2)
def _matmul():
    def fwd(vals, attrs):
        a, b = vals
        if a.ndim < 2 or b.ndim < 2:
            _fail("matmul", f"operands must be at least 2-d, got {a.shape} and {b.shape}")
        if a.ndim != b.ndim:
            _fail("matmul", f"rank mismatch {a.shape} vs {b.shape}")
        if a.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
            _fail("matmul", f"stacked dims differ: {a.shape} vs {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            _fail("matmul", f"inner extents differ: {a.shape} x {b.shape}")
        return np.matmul(a, b), None

    def vjp(vals, out, gout, attrs, cache):
        a, b = vals
        ga = np.matmul(gout, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), gout)
        return ga, gb

    return fwd, vjp


def _same_shape(kind, a, b):
    if a.shape != b.shape:
        _fail(kind, f"shapes must match exactly, got {a.shape} and {b.shape}")


@_register("add", 2)
def _add():
    def fwd(vals, attrs):
        a, b = vals
        _same_shape("add", a, b)
        return a + b, None

    def vjp(vals, out, gout, attrs, cache):
        return gout, gout

    return fwd, vjp


@_register("sub", 2)
def _sub():
    def fwd(vals, attrs):
        a, b = vals
        _same_shape("sub", a, b)
        return a - b, None

    def vjp(vals, out, gout, attrs, cache):
        return gout, -gout

    return fwd, vjp


@_register("elementwise-mul", 2)
def _mul():
    def fwd(vals, attrs):
        a, b = vals
        _same_shape("elementwise-mul", a, b)
        return a * b, None

    def vjp(vals, out, gout, attrs, cache):
        a, b = vals
        return gout * b, gout * a

    return fwd, vjp


@_register("scalar-scale", 1)
def _scale():
    def fwd(vals, attrs):
        (a,) = vals
        return a * float(attrs["scale"]), None

    def vjp(vals, out, gout, attrs, cache):
        return (gout * float(attrs["scale"]),)

    return fwd, vjp


@_register("relu", 1)
def _relu():
    def fwd(vals, attrs):
        (a,) = vals
        return np.maximum(a, 0.0), None

    def vjp(vals, out, gout, attrs, cache):
        (a,) = vals
        return (gout * (a > 0.0),)

    return fwd, vjp


@_register("sigmoid", 1)
def _sigmoid():
    def fwd(vals, attrs):
        (a,) = vals
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        return out, None

    def vjp(vals, out, gout, attrs, cache):
        return (gout * out * (1.0 - out),)

    return fwd, vjp


@_register("tanh", 1)
def _tanh():
    def fwd(vals, attrs):
        (a,) = vals
        return np.tanh(a), None

    def vjp(vals, out, gout, attrs, cache):
        return (gout * (1.0 - out * out),)

    return fwd, vjp


@_register("exp", 1)
def _exp():
    def fwd(vals, attrs):
        (a,) = vals
        return np.exp(a), None

    def vjp(vals, out, gout, attrs, cache):
        return (gout * out,)

    return fwd, vjp


@_register("softmax-over-axis", 1)
def _softmax():
    def fwd(vals, attrs):
        (a,) = vals
        axis = int(attrs["axis"])
        shifted = a - np.max(a, axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / np.sum(e, axis=axis, keepdims=True), None

    def vjp(vals, out, gout, attrs, cache):
        axis = int(attrs["axis"])
        inner = np.sum(gout * out, axis=axis, keepdims=True)
        return (out * (gout - inner),)

    return fwd, vjp


@_register("concat-over-axis", None)
def _concat():
    def fwd(vals, attrs):
        axis = int(attrs["axis"])
        if not vals:
            _fail("concat-over-axis", "needs at least one input")
        base = vals[0].shape
        for v in vals[1:]:
            if v.ndim != vals[0].ndim or any(
                v.shape[d] != base[d] for d in range(v.ndim) if d != axis % v.ndim
            ):
                _fail(
                    "concat-over-axis",
                    f"incompatible shapes {[v.shape for v in vals]} on axis {axis}",
                )
        return np.concatenate(vals, axis=axis), None

    def vjp(vals, out, gout, attrs, cache):
        axis = int(attrs["axis"])
        sizes = [v.shape[axis] for v in vals]
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(gout, splits, axis=axis))

    return fwd, vjp


@_register("slice", 1)
def _slice():
    def fwd(vals, attrs):
        (a,) = vals
        axis, start, stop = int(attrs["axis"]), int(attrs["start"]), int(attrs["stop"])
        if not (0 <= start < stop <= a.shape[axis]):
            _fail("slice", f"range [{start}:{stop}) outside extent {a.shape[axis]}")
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, stop)
        return a[tuple(idx)].copy(), None

    def vjp(vals, out, gout, attrs, cache):
        (a,) = vals
        axis, start, stop = int(attrs["axis"]), int(attrs["start"]), int(attrs["stop"])
        g = np.zeros_like(a)
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, stop)
        g[tuple(idx)] = gout
        return (g,)

    return fwd, vjp


@_register("reshape", 1)
def _reshape():
    def fwd(vals, attrs):
        (a,) = vals
        shape = tuple(int(s) for s in attrs["shape"])
        if math.prod(shape) != a.size:
            _fail("reshape", f"cannot view {a.shape} as {shape}")
        return a.reshape(shape).copy(), None

    def vjp(vals, out, gout, attrs, cache):
        (a,) = vals
        return (gout.reshape(a.shape),)

    return fwd, vjp


@_register("sum-over-axis", 1)
def _sum_axis():
    def fwd(vals, attrs):
        (a,) = vals
        return np.sum(a, axis=int(attrs["axis"])), None

    def vjp(vals, out, gout, attrs, cache):
        (a,) = vals
        axis = int(attrs["axis"])
        return (np.broadcast_to(np.expand_dims(gout, axis), a.shape).copy(),)

    return fwd, vjp


@_register("mean-over-axis", 1)
def _mean_axis():
    def fwd(vals, attrs):
        (a,) = vals
        return np.mean(a, axis=int(attrs["axis"])), None

    def vjp(vals, out, gout, attrs, cache):
        (a,) = vals
        axis = int(attrs["axis"])
        n = a.shape[axis]
        return (np.broadcast_to(np.expand_dims(gout / n, axis), a.shape).copy(),)

    return fwd, vjp


@_register("causal-dilated-conv1d", 2)
def _causal_conv():
    # x: (T, R, Cin), w: (k, Cin, Cout); y[t] = sum_k x[t - k*dilation] @ w[k]
    # with left zero padding, so the time extent is preserved and y[t] never
    # depends on inputs after t.
    def fwd(vals, attrs):
        x, w = vals
        if x.ndim != 3 or w.ndim != 3:
            _fail("causal-dilated-conv1d", f"expected 3-d input and kernel, got {x.shape}, {w.shape}")
        if x.shape[2] != w.shape[1]:
            _fail(
                "causal-dilated-conv1d",
                f"input channels {x.shape[2]} differ from kernel channels {w.shape[1]}",
            )
        dilation = int(attrs.get("dilation", 1))
        if dilation < 1:
            _fail("causal-dilated-conv1d", f"dilation must be >= 1, got {dilation}")
        t_len = x.shape[0]
        y = np.zeros((t_len, x.shape[1], w.shape[2]))
        for k in range(w.shape[0]):
            shift = k * dilation
            if shift >= t_len:
                break
            y[shift:] += x[: t_len - shift] @ w[k]
        return y, None

    def vjp(vals, out, gout, attrs, cache):
        x, w = vals
        dilation = int(attrs.get("dilation", 1))
        t_len = x.shape[0]
        gx = np.zeros_like(x)
        gw = np.zeros_like(w)
        for k in range(w.shape[0]):
            shift = k * dilation
            if shift >= t_len:
                break
            gx[: t_len - shift] += gout[shift:] @ w[k].T
            gw[k] = np.tensordot(x[: t_len - shift], gout[shift:], axes=([0, 1], [0, 1]))
        return gx, gw

    return fwd, vjp


@_register("transpose", 1)
def _transpose():
    def fwd(vals, attrs):
        (a,) = vals
        axes = tuple(int(i) for i in attrs["axes"])
        if sorted(axes) != list(range(a.ndim)):
            _fail("transpose", f"axes {axes} is not a permutation for rank {a.ndim}")
        return np.transpose(a, axes).copy(), None

    def vjp(vals, out, gout, attrs, cache):
        axes = tuple(int(i) for i in attrs["axes"])
        inv = tuple(np.argsort(axes))
        return (np.transpose(gout, inv).copy(),)

    return fwd, vjp


def apply_primitive(kind: str, inputs: list, attrs: Optional[dict] = None) -> Tensor:
    """Run one primitive, recording it on the active tape when one exists.

    Inputs without a tape identity are treated as constants: they take part
    in the forward computation but never receive gradients.
    """
    prim = _PRIMITIVES.get(kind)
    if prim is None:
        raise ValueError(f"unknown primitive kind {kind!r}")
    tensors = [as_tensor(x) for x in inputs]
    if prim.n_inputs is not None and len(tensors) != prim.n_inputs:
        raise ShapeError(f"{kind}: expected {prim.n_inputs} inputs, got {len(tensors)}")
    attrs = attrs or {}
    out_vals, cache = prim.forward([t.values for t in tensors], attrs)
    out = Tensor(out_vals)
    tape = active_tape()
    if tape is not None:
        tape.watch(out)
        tape.records.append(TapeRecord(kind, tensors, out, attrs, cache))
    return out


# --- thin wrappers, one per primitive --------------------------------------

def matmul(a, b) -> Tensor:
    return apply_primitive("matmul", [a, b])


def add(a, b) -> Tensor:
    return apply_primitive("add", [a, b])


def sub(a, b) -> Tensor:
    return apply_primitive("sub", [a, b])


def mul(a, b) -> Tensor:
    return apply_primitive("elementwise-mul", [a, b])


def scale(a, s: float) -> Tensor:
    return apply_primitive("scalar-scale", [a], {"scale": s})


def relu(a) -> Tensor:
    return apply_primitive("relu", [a])


def sigmoid(a) -> Tensor:
    return apply_primitive("sigmoid", [a])


def tanh(a) -> Tensor:
    return apply_primitive("tanh", [a])


def exp(a) -> Tensor:
    return apply_primitive("exp", [a])


def softmax(a, axis: int) -> Tensor:
    return apply_primitive("softmax-over-axis", [a], {"axis": axis})


def concat(parts: list, axis: int) -> Tensor:
    return apply_primitive("concat-over-axis", list(parts), {"axis": axis})


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    return apply_primitive("slice", [a], {"axis": axis, "start": start, "stop": stop})


def reshape(a, shape) -> Tensor:
    return apply_primitive("reshape", [a], {"shape": tuple(shape)})


def sum_axis(a, axis: int) -> Tensor:
    return apply_primitive("sum-over-axis", [a], {"axis": axis})


def mean_axis(a, axis: int) -> Tensor:
    return apply_primitive("mean-over-axis", [a], {"axis": axis})


def causal_conv1d(x, w, dilation: int = 1) -> Tensor:
    return apply_primitive("causal-dilated-conv1d", [x, w], {"dilation": dilation})


def transpose(a, axes) -> Tensor:
    return apply_primitive("transpose", [a], {"axes": tuple(axes)})


def grad_check(fn: Callable[[Tensor], Tensor], point: Tensor, eps: float = 1e-5) -> float:
    """Compare analytic gradients against central finite differences.

    ``fn`` maps a tensor to a scalar tensor.  Returns the max over
    coordinates of ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with Tape() as tape:
        tape.watch(point)
        out = fn(point)
        if out.values.size != 1:
            raise ShapeError(f"grad_check target must be scalar, got {out.shape}")
        if not np.isfinite(out.values).all():
            raise ValueError("function value is not finite at the check point")
        tape.backward(out)
    analytic = point.grad.reshape(-1).copy()

    flat = point.values.reshape(-1)
    numeric = np.zeros_like(analytic)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(fn(point).values)
        flat[i] = orig - eps
        f_minus = float(fn(point).values)
        flat[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise ValueError("function value is not finite near the check point")
        numeric[i] = (f_plus - f_minus) / (2.0 * eps)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0


PRIMITIVE_KINDS = tuple(sorted(_PRIMITIVES))
