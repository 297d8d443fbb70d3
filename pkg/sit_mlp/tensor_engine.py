"""
Tensor Engine
=============

Dense numpy-backed tensors with tape-based reverse-mode differentiation.

Features:
- Tensor creation (zeros, ones, seeded uniform, explicit values) at 32/64-bit
- Recording Tape: one per forward pass, spent by exactly one backward
- Contractions (matmul, einsum), broadcasting elementwise ops, reductions
- Activations (relu, tanh-approximated gelu, softmax)
- Fused kernels used by the layers: temporal convolution, temporal max-pool,
  batch normalization, softmax cross-entropy
- Central finite-difference gradient checking
- FLOP instrumentation for contraction ops
- SITT little-endian binary tensor serialization

Usage:
    x = create([3, 4], "uniform", seed=0, requires_grad=True)
    with Tape() as tape:
        loss = reduce("mean", gelu(x))
    backward(loss, tape)
    x.grad  # same shape as x
"""

import itertools
import logging
import math
import os
import struct
import threading
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, ContractError, DataError, FormatError, ShapeError, StateError

logger = logging.getLogger(__name__)

_DEBUG = os.environ.get("SIT_MLP_DEBUG", "") not in ("", "0")
_node_ids = itertools.count()
_local = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def set_debug(enabled: bool) -> None:
    """Toggle finiteness checks after every forward op"""
    global _DEBUG
    _DEBUG = bool(enabled)


def debug_enabled() -> bool:
    return _DEBUG


def _stack(name: str) -> list:
    stack = getattr(_local, name, None)
    if stack is None:
        stack = []
        setattr(_local, name, stack)
    return stack


# ============================================================
# Tensor
# ============================================================

class Tensor:
    """Dense n-dimensional array participating in the autodiff graph"""

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_node_ids)
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    # Operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce("sum", self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce("mean", self, axes, keepdims)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def _as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def create(
    shape: Sequence[int],
    init: str = "zeros",
    *,
    values=None,
    seed: Optional[int] = None,
    low: float = -1.0,
    high: float = 1.0,
    dtype=np.float64,
    requires_grad: bool = False,
    name: Optional[str] = None,
) -> Tensor:
    """
    Build a tensor from an initializer.

    Args:
        shape: Non-negative extents
        init: "zeros", "ones", "uniform" (seeded, in [low, high)) or "values"
        values: Explicit row-major values for init="values"

    Returns:
        Tensor (requires_grad defaults to False)
    """
    shape = tuple(int(n) for n in shape)
    if any(n < 0 for n in shape):
        raise ShapeError(f"Negative extent in shape {shape}")
    if init == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif init == "ones":
        data = np.ones(shape, dtype=dtype)
    elif init == "uniform":
        rng = np.random.default_rng(seed)
        data = rng.uniform(low, high, size=shape).astype(dtype)
    elif init == "values":
        flat = np.asarray(values, dtype=dtype).reshape(-1)
        if flat.size != math.prod(shape):
            raise ShapeError(f"{flat.size} values cannot fill shape {shape}")
        data = flat.reshape(shape).copy()
    else:
        raise ConfigError(f"Unknown initializer: {init}")
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(values, dtype=None) -> Tensor:
    """Tensor that never receives a gradient"""
    return Tensor(np.array(values, dtype=dtype))


# ============================================================
# Tape
# ============================================================

@dataclass
class TapeRecord:
    """One recorded forward op"""
    op: str
    inputs: Tuple[Tensor, ...]
    output_id: int
    backward: BackwardFn

    @property
    def input_ids(self) -> Tuple[int, ...]:
        return tuple(t.node_id for t in self.inputs)


class Tape:
    """
    Ordered record of the ops of one forward pass.

    Records are appended as ops execute, so every input precedes its consumer.
    A tape is spent by one backward call and must not be written from two
    threads at once.
    """

    def __init__(self):
        self.records: List[TapeRecord] = []
        self.consumed = False
        self._produced: set = set()

    def __enter__(self) -> "Tape":
        _stack("tapes").append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _stack("tapes")
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn: BackwardFn):
        if self.consumed:
            raise StateError("Tape already spent by backward; record a new forward pass")
        self.records.append(TapeRecord(op, inputs, output.node_id, backward_fn))
        self._produced.add(output.node_id)

    def produced(self, node_id: int) -> bool:
        return node_id in self._produced


class no_grad:
    """Context in which no op is recorded, even inside an open Tape"""

    def __enter__(self):
        _stack("tapes").append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack("tapes").pop()
        return False


def current_tape() -> Optional[Tape]:
    stack = _stack("tapes")
    return stack[-1] if stack else None


def _emit(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise ContractError(f"{op} produced non-finite values from finite inputs")
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor, tape: Tape) -> None:
    """
    Propagate d(loss)/d(leaf) for every requires_grad leaf of the tape.

    Raises:
        ContractError: loss is not a scalar
        StateError: tape already spent, or a leaf still holds a gradient
            from an earlier backward (call zero_grad first)
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise StateError("Tape already spent by backward; record a new forward pass")

    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    if loss.requires_grad and not tape.produced(loss.node_id):
        leaves[loss.node_id] = loss

    for rec in reversed(tape.records):
        g = grads.pop(rec.output_id, None)
        if g is None:
            continue
        for inp, ig in zip(rec.inputs, rec.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            ig = _unbroadcast(np.asarray(ig), inp.shape)
            if inp.node_id in grads:
                grads[inp.node_id] = grads[inp.node_id] + ig
            else:
                grads[inp.node_id] = ig
            if not tape.produced(inp.node_id):
                leaves[inp.node_id] = inp

    stale = [leaf for leaf in leaves.values() if leaf.grad is not None]
    if stale:
        names = ", ".join(leaf.name or f"#{leaf.node_id}" for leaf in stale[:5])
        raise StateError(f"Gradients already populated for {names}; reset them before another backward")
    for node_id, leaf in leaves.items():
        leaf.grad = np.array(grads[node_id], dtype=leaf.dtype)
    tape.consumed = True


# ============================================================
# FLOP Instrumentation
# ============================================================

class FlopCounter:
    """Accumulates 2 x multiply-accumulate counts of contraction ops"""

    def __init__(self):
        self.flops = 0
        self.by_op: Dict[str, int] = defaultdict(int)

    def __enter__(self) -> "FlopCounter":
        _stack("flop_counters").append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack("flop_counters").remove(self)
        return False

    @property
    def macs(self) -> int:
        return self.flops // 2

    def add(self, op: str, flops: int):
        self.flops += flops
        self.by_op[op] += flops


def _count_flops(op: str, flops: int):
    for counter in _stack("flop_counters"):
        counter.add(op, int(flops))


class KinkMonitor:
    """Fingerprints the branch taken by every relu / max op while active"""

    def __init__(self):
        self.signature: List[Tuple[str, int]] = []

    def __enter__(self) -> "KinkMonitor":
        _stack("kink_monitors").append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack("kink_monitors").remove(self)
        return False


def _note_branch(op: str, pattern: np.ndarray):
    monitors = _stack("kink_monitors")
    if monitors:
        key = (op, hash(np.ascontiguousarray(pattern).tobytes()))
        for monitor in monitors:
            monitor.signature.append(key)


# ============================================================
# Elementwise / Contractions
# ============================================================

def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "add")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "sub")
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "mul")
    a_data, b_data = a.data, b.data
    return _emit("mul", a_data * b_data, (a, b), lambda g: (g * b_data, g * a_data))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a, b) -> Tensor:
    """Broadcasting add / sub / mul"""
    fn = _ELEMENTWISE.get(op)
    if fn is None:
        raise ConfigError(f"Unknown elementwise op: {op}")
    return fn(a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched contraction [..., m, k] x [..., k, n] -> [..., m, n]"""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch extents not broadcastable: {a.shape} x {b.shape}") from None
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    _count_flops("matmul", 2 * math.prod(batch) * m * k * n)
    a_data, b_data = a.data, b.data

    def _backward(g):
        return (
            np.matmul(g, np.swapaxes(b_data, -1, -2)),
            np.matmul(np.swapaxes(a_data, -1, -2), g),
        )

    return _emit("matmul", np.matmul(a_data, b_data), (a, b), _backward)


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """
    Two-operand einsum without repeated or summed-away-only indices.

    Every index of one operand must appear in the other operand or in the
    output, which keeps both gradients expressible as einsums.
    """
    spec = subscripts.replace(" ", "")
    try:
        lhs, out = spec.split("->")
        sa, sb = lhs.split(",")
    except ValueError:
        raise ConfigError(f"einsum needs explicit 'ab,bc->ac' form, got {subscripts!r}") from None
    for operand, other in ((sa, sb), (sb, sa)):
        if len(set(operand)) != len(operand):
            raise ConfigError(f"einsum operand {operand!r} repeats an index")
        if any(ch not in other and ch not in out for ch in operand):
            raise ConfigError(f"einsum index of {operand!r} vanishes from {subscripts!r}")
    if len(sa) != a.ndim or len(sb) != b.ndim:
        raise ShapeError(f"einsum {subscripts!r} does not match ranks {a.shape}, {b.shape}")
    sizes: Dict[str, int] = {}
    for chars, shape in ((sa, a.shape), (sb, b.shape)):
        for ch, n in zip(chars, shape):
            if sizes.setdefault(ch, n) != n:
                raise ShapeError(f"einsum index {ch!r} has extents {sizes[ch]} and {n}")
    _count_flops("einsum", 2 * math.prod(sizes.values()))
    a_data, b_data = a.data, b.data

    def _backward(g):
        return (
            np.einsum(f"{out},{sb}->{sa}", g, b_data, optimize=True),
            np.einsum(f"{out},{sa}->{sb}", g, a_data, optimize=True),
        )

    return _emit("einsum", np.einsum(spec, a_data, b_data, optimize=True), (a, b), _backward)


# ============================================================
# Reductions
# ============================================================

def _normalize_axes(axes, ndim: int) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    normalized = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"Axis {ax} out of range for rank {ndim}")
        normalized.append(ax % ndim)
    if len(set(normalized)) != len(normalized):
        raise ShapeError(f"Repeated axis in {tuple(axes)}")
    return tuple(sorted(normalized))


def _keepdims_shape(shape: Tuple[int, ...], axes: Tuple[int, ...]) -> Tuple[int, ...]:
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


def reduce_max(x: Tensor, axes=None, keepdims: bool = False) -> Tuple[Tensor, np.ndarray]:
    """Max over axes; also returns the flat argmax within the reduced block"""
    ax = _normalize_axes(axes, x.ndim)
    if any(x.shape[i] == 0 for i in ax):
        raise ShapeError("max over an empty axis")
    kept = tuple(n for i, n in enumerate(x.shape) if i not in ax)
    moved = np.moveaxis(x.data, ax, tuple(range(x.ndim - len(ax), x.ndim)))
    flat = moved.reshape(kept + (-1,))
    idx = flat.argmax(axis=-1)
    _note_branch("max", idx)
    values = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if keepdims:
        values = values.reshape(_keepdims_shape(x.shape, ax))
    moved_shape = moved.shape

    def _backward(g):
        gflat = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(gflat, idx[..., None], g.reshape(kept)[..., None], axis=-1)
        return (np.moveaxis(gflat.reshape(moved_shape), tuple(range(x.ndim - len(ax), x.ndim)), ax),)

    return _emit("max", values, (x,), _backward), idx


def reduce(op: str, x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """sum / mean / max over the given axes (None = all)"""
    if op == "max":
        return reduce_max(x, axes, keepdims)[0]
    if op not in ("sum", "mean"):
        raise ConfigError(f"Unknown reduction: {op}")
    ax = _normalize_axes(axes, x.ndim)
    count = math.prod(x.shape[i] for i in ax)
    data = x.data.sum(axis=ax, keepdims=keepdims)
    if op == "mean":
        data = data / count
    keep_shape = _keepdims_shape(x.shape, ax)
    in_shape = x.shape
    scale = 1.0 / count if op == "mean" else 1.0

    def _backward(g):
        return (np.broadcast_to(g.reshape(keep_shape) * scale, in_shape),)

    return _emit(op, np.asarray(data), (x,), _backward)


# ============================================================
# Activations
# ============================================================

_GELU_C = math.sqrt(2.0 / math.pi)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note_branch("relu", mask)
    return _emit("relu", np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))"""
    v = x.data
    th = np.tanh(_GELU_C * (v + 0.044715 * v ** 3))
    out = 0.5 * v * (1.0 + th)

    def _backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * v ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th ** 2) * d_inner),)

    return _emit("gelu", out, (x,), _backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _normalize_axes(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", s, (x,), _backward)


def identity(x: Tensor) -> Tensor:
    return x


def activation(kind: str, x: Tensor, axis: int = -1) -> Tensor:
    """Dispatch relu / gelu / softmax(axis) / identity"""
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    if kind == "softmax":
        return softmax(x, axis)
    if kind == "identity":
        return identity(x)
    raise ConfigError(f"Unknown activation: {kind}")


# ============================================================
# Shape Ops
# ============================================================

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"Cannot reshape {x.shape} to {tuple(shape)}") from None
    in_shape = x.shape
    return _emit("reshape", data, (x,), lambda g: (g.reshape(in_shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)) or len(axes) != x.ndim:
        raise ShapeError(f"Invalid permutation {axes} for rank {x.ndim}")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))
    return _emit("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = np.broadcast_to(x.data, tuple(shape)).copy()
    except ValueError:
        raise ShapeError(f"Cannot broadcast {x.shape} to {tuple(shape)}") from None
    return _emit("broadcast_to", data, (x,), lambda g: (g,))


def slice_axis(x: Tensor, axis: int, start: int, stop: Optional[int] = None, step: int = 1) -> Tensor:
    ax = _normalize_axes(axis, x.ndim)[0]
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop, step)
    index = tuple(index)
    in_shape, dtype = x.shape, x.dtype

    def _backward(g):
        full = np.zeros(in_shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _emit("slice", x.data[index].copy(), (x,), _backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    ax = _normalize_axes(axis, tensors[0].ndim)[0]
    try:
        data = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit("concat", data, tuple(tensors), _backward)


# ============================================================
# Fused Kernels
# ============================================================

def conv_output_length(length: int, kernel: int, dilation: int = 1, stride: int = 1, padding: int = 0) -> int:
    """floor((T + 2 pad - d (k - 1) - 1) / s) + 1"""
    return (length + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def same_padding(kernel: int, dilation: int = 1) -> int:
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigError(f"Same padding needs an odd kernel, got {kernel}")
    return dilation * (kernel - 1) // 2


def _window_index(t_out: int, kernel: int, dilation: int, stride: int) -> np.ndarray:
    return (np.arange(t_out) * stride)[:, None] + (np.arange(kernel) * dilation)[None, :]


def temporal_conv(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
) -> Tensor:
    """Per-joint 1-D convolution along frames: [B, Ci, T, V] * [Co, Ci, k] -> [B, Co, T', V]"""
    if x.ndim != 4 or weight.ndim != 3:
        raise ShapeError(f"temporal_conv expects [B,C,T,V] and [Co,Ci,k], got {x.shape}, {weight.shape}")
    B, ci, T, V = x.shape
    co, wci, k = weight.shape
    if wci != ci:
        raise ShapeError(f"temporal_conv: input has {ci} channels, weight expects {wci}")
    t_out = conv_output_length(T, k, dilation, stride, padding)
    if t_out < 1:
        raise ShapeError(f"temporal_conv: sequence of {T} frames too short for kernel {k}, dilation {dilation}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (0, 0)))
    idx = _window_index(t_out, k, dilation, stride)
    cols = xp[:, :, idx, :]
    w = weight.data
    out = np.einsum("bctkv,ock->botv", cols, w, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    _count_flops("temporal_conv", 2 * B * co * ci * k * t_out * V)
    padded_shape = xp.shape

    def _backward(g):
        gw = np.einsum("botv,bctkv->ock", g, cols, optimize=True)
        gcols = np.einsum("botv,ock->bctkv", g, w, optimize=True)
        gxp = np.zeros(padded_shape, dtype=g.dtype)
        for j in range(k):
            gxp[:, :, idx[:, j], :] += gcols[:, :, :, j, :]
        gx = gxp[:, :, padding:padding + T, :]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("temporal_conv", out, inputs, _backward)


def temporal_maxpool(x: Tensor, kernel: int, stride: int = 1, padding: Optional[int] = None) -> Tensor:
    """Windowed max along frames of [B, C, T, V]; padding uses a -inf sentinel"""
    if kernel < 1:
        raise ConfigError(f"Pool kernel must be >= 1, got {kernel}")
    if x.ndim != 4:
        raise ShapeError(f"temporal_maxpool expects [B,C,T,V], got {x.shape}")
    pad = (kernel - 1) // 2 if padding is None else padding
    B, C, T, V = x.shape
    t_out = conv_output_length(T, kernel, 1, stride, pad)
    if t_out < 1:
        raise ShapeError(f"temporal_maxpool: {T} frames too short for kernel {kernel}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (0, 0)), constant_values=-np.inf)
    idx = _window_index(t_out, kernel, 1, stride)
    windows = xp[:, :, idx, :]
    arg = windows.argmax(axis=3)
    _note_branch("temporal_maxpool", arg)
    out = np.take_along_axis(windows, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    src = idx[np.arange(t_out)[None, None, :, None], arg]
    padded_shape = xp.shape

    def _backward(g):
        gxp = np.zeros(padded_shape, dtype=g.dtype)
        bi = np.arange(B)[:, None, None, None]
        ci = np.arange(C)[None, :, None, None]
        vi = np.arange(V)[None, None, None, :]
        np.add.at(gxp, (bi, ci, src, vi), g)
        return (gxp[:, :, pad:pad + T, :],)

    return _emit("temporal_maxpool", out, (x,), _backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    axis: int = -1,
    eps: float = 1e-5,
) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """
    Batch-statistics normalization over every axis except `axis`.

    Returns:
        (output, batch mean [C], biased batch variance [C])
    """
    ax = _normalize_axes(axis, x.ndim)[0]
    red = tuple(i for i in range(x.ndim) if i != ax)
    n = math.prod(x.shape[i] for i in red)
    bshape = [1] * x.ndim
    bshape[ax] = x.shape[ax]
    v = x.data
    mean = v.mean(axis=red, keepdims=True)
    var = ((v - mean) ** 2).mean(axis=red, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (v - mean) * inv_std
    g_r = gamma.data.reshape(bshape)
    out = xhat * g_r + beta.data.reshape(bshape)

    def _backward(g):
        dxhat = g * g_r
        gx = inv_std / n * (
            n * dxhat
            - dxhat.sum(axis=red, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=red, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    result = _emit("batch_norm", out.astype(x.dtype, copy=False), (x, gamma, beta), _backward)
    return result, mean.reshape(-1), var.reshape(-1)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-shifted"""
    if logits.ndim != 2:
        raise ShapeError(f"cross entropy expects [B, K] logits, got {logits.shape}")
    labels = np.asarray(labels)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"{labels.shape} labels for {B} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= K or not np.issubdtype(labels.dtype, np.integer)):
        raise DataError(f"Labels must be integers in [0, {K})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1)
    rows = np.arange(B)
    loss = np.asarray(-(shifted[rows, labels] - np.log(total)).mean(), dtype=logits.dtype)

    def _backward(g):
        probs = exp / total[:, None]
        probs[rows, labels] -= 1.0
        return (g * probs / B,)

    return _emit("cross_entropy", loss, (logits,), _backward)


# ============================================================
# Finite-Difference Gradient Check
# ============================================================

def numerical_gradient(f: Callable[..., Tensor], inputs: Sequence[Tensor], target: Tensor,
                       coords: Sequence[int], h: float = 1e-5) -> Tuple[np.ndarray, np.ndarray]:
    """
    Central differences of scalar f w.r.t. selected flat coordinates of target.

    Returns:
        (derivatives, smooth) where smooth[j] is False when f(x+h) and
        f(x-h) took different relu / max branches (a kink lies in between)
    """
    result = np.zeros(len(coords))
    smooth = np.ones(len(coords), dtype=bool)
    with no_grad():
        for j, i in enumerate(coords):
            orig = target.data.flat[i]
            target.data.flat[i] = orig + h
            with KinkMonitor() as plus:
                fp = f(*inputs).item()
            target.data.flat[i] = orig - h
            with KinkMonitor() as minus:
                fm = f(*inputs).item()
            target.data.flat[i] = orig
            result[j] = (fp - fm) / (2.0 * h)
            smooth[j] = plus.signature == minus.signature
    return result, smooth


@dataclass
class GradCheckResult:
    max_error: float
    checked: int
    skipped: int                     # coordinates straddling a kink


def grad_check_detailed(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> GradCheckResult:
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = f(*inputs)
    backward(out, tape)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    for t, a in zip(inputs, analytic):
        coords = np.arange(t.size)
        if max_coords is not None and t.size > max_coords:
            coords = np.sort(rng.choice(t.size, size=max_coords, replace=False))
        num, smooth = numerical_gradient(f, inputs, t, coords, h)
        ana = a.reshape(-1)[coords][smooth]
        num = num[smooth]
        checked += int(smooth.sum())
        skipped += int((~smooth).sum())
        if ana.size:
            denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-8)
            worst = max(worst, float(np.max(np.abs(ana - num) / denom)))
    for t in inputs:
        t.grad = None
    if skipped:
        logger.debug(f"grad_check skipped {skipped} coordinates at relu/max kinks")
    return GradCheckResult(worst, checked, skipped)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
    max_coords samples that many coordinates per input (None = all).
    Coordinates whose +h / -h evaluations fall on different sides of a
    relu or max kink are left out.
    """
    return grad_check_detailed(f, inputs, h, max_coords, seed).max_error


# ============================================================
# SITT Serialization
# ============================================================

SITT_MAGIC = b"SITT"
SITT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}
_HEADER = struct.Struct("<4sII")


def tensor_to_bytes(tensor: Union[Tensor, np.ndarray]) -> bytes:
    """magic, version u32, rank u32, extents u64..., dtype u8, row-major LE buffer"""
    data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    code = _DTYPE_CODES.get(data.dtype)
    if code is None:
        raise FormatError(f"Unsupported dtype for serialization: {data.dtype}")
    header = _HEADER.pack(SITT_MAGIC, SITT_VERSION, data.ndim)
    header += struct.pack(f"<{data.ndim}Q", *data.shape) + struct.pack("<B", code)
    return header + np.ascontiguousarray(data, dtype=data.dtype.newbyteorder("<")).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> Tuple[Tensor, int]:
    """Decode one SITT record; returns the tensor and the offset after it"""
    try:
        magic, version, rank = _HEADER.unpack_from(buf, offset)
    except struct.error:
        raise FormatError("Truncated tensor header") from None
    if magic != SITT_MAGIC:
        raise FormatError(f"Bad tensor magic {magic!r}")
    if version != SITT_VERSION:
        raise FormatError(f"Unsupported tensor version {version}")
    pos = offset + _HEADER.size
    try:
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        (code,) = struct.unpack_from("<B", buf, pos)
    except struct.error:
        raise FormatError("Truncated tensor header") from None
    pos += 1
    dtype = _CODE_DTYPES.get(code)
    if dtype is None:
        raise FormatError(f"Unknown dtype code {code}")
    count = math.prod(shape)
    nbytes = count * dtype.itemsize
    if pos + nbytes > len(buf):
        raise FormatError("Truncated tensor payload")
    data = np.frombuffer(buf, dtype=dtype.newbyteorder("<"), count=count, offset=pos)
    return Tensor(data.astype(dtype).reshape(shape)), pos + nbytes


def save_tensor(path: Union[str, Path], tensor: Union[Tensor, np.ndarray]):
    Path(path).write_bytes(tensor_to_bytes(tensor))


def load_tensor(path: Union[str, Path]) -> Tensor:
    tensor, _ = tensor_from_bytes(Path(path).read_bytes())
    return tensor
