"""
Layer Vocabulary
================

Parameter containers and the five building layers of the network:

- ChannelLinear: weight along the channel axis, per joint and frame
- SpatialLinear: per-head V x V mixing along the joint axis, per frame and channel
- TemporalConv: per-joint dilated / strided convolution along frames
- TemporalMaxPool: windowed max along frames
- BatchNorm: channel batch normalization with running statistics

plus `init_params` for the kaiming-uniform / identity / zeros / binary-graph
initializers.

Feature maps are channel-last [B, T, V, C] except at TemporalConv and
TemporalMaxPool, which take [B, C, T, V].
"""

import logging
import math
from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor_engine as te
from .errors import ConfigError, ContractError, ShapeError, StateError
from .tensor_engine import Tensor

logger = logging.getLogger(__name__)


def kaiming_bound(fan_in: int) -> float:
    """Kaiming-uniform bound sqrt(6 / fan_in)"""
    return math.sqrt(6.0 / fan_in)


def _rng(rng: Optional[np.random.Generator]) -> np.random.Generator:
    return rng if rng is not None else np.random.default_rng(0)


# ============================================================
# Layer Base
# ============================================================

class Layer:
    """
    Base container: registers Tensor parameters and child layers on assignment.

    Buffers (BatchNorm running statistics) are plain Tensors listed in
    `buffer_names`; they appear in state_dict but not among parameters.
    """

    buffer_names: Tuple[str, ...] = ()

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        params = self.__dict__.get("_params")
        children = self.__dict__.get("_children")
        if params is None:
            raise StateError(f"{type(self).__name__}.__init__ must call Layer.__init__ first")
        params.pop(name, None)
        children.pop(name, None)
        if isinstance(value, Tensor) and value.requires_grad:
            value.name = value.name or name
            params[name] = value
        elif isinstance(value, Layer):
            children[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    # --------------------------------------------------------
    # Traversal
    # --------------------------------------------------------

    def children(self) -> Iterator[Tuple[str, "Layer"]]:
        return iter(self._children.items())

    def active_children(self) -> Iterator[Tuple[str, "Layer"]]:
        """Children that take part in the forward pass"""
        return self.children()

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        result = [(prefix + name, p) for name, p in self._params.items()]
        for name, child in self.active_children():
            result.extend(child.named_parameters(f"{prefix}{name}."))
        return result

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        result = [(prefix + name, getattr(self, name)) for name in self.buffer_names]
        for name, child in self.children():
            result.extend(child.named_buffers(f"{prefix}{name}."))
        return result

    def _all_params(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        result = [(prefix + name, p) for name, p in self._params.items()]
        for name, child in self.children():
            result.extend(child._all_params(f"{prefix}{name}."))
        return result

    def count_params(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    # --------------------------------------------------------
    # State
    # --------------------------------------------------------

    def state_dict(self) -> "OrderedDict[str, Tensor]":
        """Every parameter (active or not) and buffer, by dotted name"""
        state = OrderedDict(self._all_params())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, Tensor], strict: bool = True):
        own = self.state_dict()
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise StateError(f"State mismatch; missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, target in own.items():
            if name not in state:
                continue
            value = state[name]
            value = value.data if isinstance(value, Tensor) else np.asarray(value)
            if value.shape != target.shape:
                raise ShapeError(f"{name}: stored shape {value.shape} != expected {target.shape}")
            target.data[...] = value.astype(target.dtype)

    def zero_grad(self):
        for _, p in self._all_params():
            p.grad = None

    def train(self, mode: bool = True) -> "Layer":
        object.__setattr__(self, "training", mode)
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Layer":
        return self.train(False)


class LayerList(Layer):
    """Indexed sequence of child layers named "0", "1", ..."""

    def __init__(self, layers: Sequence[Layer]):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def __len__(self) -> int:
        return len(self._children)

    def __getitem__(self, index: int) -> Layer:
        return list(self._children.values())[index]

    def __iter__(self) -> Iterator[Layer]:
        return iter(self._children.values())


def _param(shape, dtype, name: str) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)


# ============================================================
# Layers
# ============================================================

class ChannelLinear(Layer):
    """x[..., C_in] @ W[C_in, C_out] + bias, independently per joint and frame"""

    def __init__(self, c_in: int, c_out: int, bias: bool = True, dtype=np.float64,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.weight = _param((c_in, c_out), dtype, "weight")
        self.bias = _param((c_out,), dtype, "bias") if bias else None
        init_params(self, "kaiming-uniform", rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.c_in:
            raise ShapeError(f"ChannelLinear expects {self.c_in} channels, got {x.shape[-1]}")
        out = te.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class SpatialLinear(Layer):
    """
    Joint mixing with block-diagonal heads.

    Channel slice h of x is mixed by W[h] ([V, V]); out[..., u, c] = sum_v W[h, u, v] x[..., v, c].
    """

    def __init__(self, joints: int, channels: int, heads: int = 1, bias: bool = False,
                 dtype=np.float64, init: str = "identity", rng: Optional[np.random.Generator] = None,
                 adjacency: Optional[np.ndarray] = None):
        super().__init__()
        if heads < 1 or channels % heads:
            raise ConfigError(f"{channels} channels not divisible by {heads} heads")
        self.joints, self.channels, self.heads = joints, channels, heads
        self.weight = _param((heads, joints, joints), dtype, "weight")
        self.bias = _param((heads, joints), dtype, "bias") if bias else None
        init_params(self, init, rng, adjacency)

    def forward(self, x: Tensor) -> Tensor:
        B, T, V, C = x.shape
        if V != self.joints or C != self.channels:
            raise ShapeError(f"SpatialLinear expects [*, *, {self.joints}, {self.channels}], got {x.shape}")
        xr = te.reshape(x, (B, T, V, self.heads, C // self.heads))
        out = te.einsum("huv,btvhc->btuhc", self.weight, xr)
        if self.bias is not None:
            out = out + te.reshape(te.transpose(self.bias, (1, 0)), (V, self.heads, 1))
        return te.reshape(out, (B, T, V, C))


class TemporalConv(Layer):
    """Same-padded (odd kernel) convolution along frames, [B, C_in, T, V] -> [B, C_out, T', V]"""

    def __init__(self, c_in: int, c_out: int, kernel: int, dilation: int = 1, stride: int = 1,
                 bias: bool = True, dtype=np.float64, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.kernel, self.dilation, self.stride = kernel, dilation, stride
        self.padding = te.same_padding(kernel, dilation)
        self.weight = _param((c_out, c_in, kernel), dtype, "weight")
        self.bias = _param((c_out,), dtype, "bias") if bias else None
        init_params(self, "kaiming-uniform", rng)

    def output_length(self, frames: int) -> int:
        return te.conv_output_length(frames, self.kernel, self.dilation, self.stride, self.padding)

    def forward(self, x: Tensor) -> Tensor:
        return te.temporal_conv(x, self.weight, self.bias, self.stride, self.dilation, self.padding)


class TemporalMaxPool(Layer):
    def __init__(self, kernel: int, stride: int = 1):
        super().__init__()
        if kernel < 1:
            raise ConfigError(f"Pool kernel must be >= 1, got {kernel}")
        self.kernel, self.stride = kernel, stride

    def forward(self, x: Tensor) -> Tensor:
        return te.temporal_maxpool(x, self.kernel, self.stride)


class BatchNorm(Layer):
    """
    Channel batch normalization.

    Train mode normalizes with batch statistics over every axis but `axis`
    and folds them into the running statistics (momentum 0.1, unbiased
    variance). Eval mode is the fixed affine map built from those.
    """

    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, axis: int = -1, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float64):
        super().__init__()
        self.channels, self.axis, self.momentum, self.eps = channels, axis, momentum, eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name="gamma")
        self.beta = _param((channels,), dtype, "beta")
        self.running_mean = Tensor(np.zeros(channels, dtype=dtype))
        self.running_var = Tensor(np.ones(channels, dtype=dtype))

    def _broadcast_shape(self, ndim: int) -> List[int]:
        shape = [1] * ndim
        shape[self.axis] = self.channels
        return shape

    def affine(self) -> Tuple[np.ndarray, np.ndarray]:
        """Eval-mode (scale, shift) from the running statistics"""
        scale = self.gamma.data / np.sqrt(self.running_var.data + self.eps)
        return scale, self.beta.data - self.running_mean.data * scale

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[self.axis] != self.channels:
            raise ShapeError(f"BatchNorm expects {self.channels} channels on axis {self.axis}, got {x.shape}")
        if not self.training:
            scale, shift = self.affine()
            shape = self._broadcast_shape(x.ndim)
            return x * Tensor(scale.reshape(shape)) + Tensor(shift.reshape(shape))
        if x.shape[0] < 2:
            raise ContractError("BatchNorm in train mode needs a batch of at least 2")
        out, mean, var = te.batch_norm(x, self.gamma, self.beta, self.axis, self.eps)
        n = x.size // self.channels
        unbiased = var * n / max(n - 1, 1)
        m = self.momentum
        self.running_mean.data[...] = (1 - m) * self.running_mean.data + m * mean
        self.running_var.data[...] = (1 - m) * self.running_var.data + m * unbiased
        return out


# ============================================================
# Initializers
# ============================================================

INIT_SCHEMES = ("kaiming-uniform", "identity", "zeros", "binary-graph")


def init_params(layer: Layer, scheme: str, rng: Optional[np.random.Generator] = None,
                adjacency: Optional[np.ndarray] = None):
    """
    Initialize a layer in place.

    kaiming-uniform: weight ~ U(-sqrt(6/fan_in), +), bias 0 (ChannelLinear,
        TemporalConv, SpatialLinear)
    identity: W[h] = I for every head (SpatialLinear only)
    zeros: every parameter 0
    binary-graph: the given V x V 0/1 matrix in every head (SpatialLinear only)
    """
    if scheme not in INIT_SCHEMES:
        raise ConfigError(f"Unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")
    weight = getattr(layer, "weight", None)
    if weight is None:
        raise ConfigError(f"{type(layer).__name__} has no weight to initialize")
    bias = getattr(layer, "bias", None)
    spatial = isinstance(layer, SpatialLinear)

    if scheme in ("identity", "binary-graph") and not spatial:
        raise ConfigError(f"{scheme} init applies to SpatialLinear only, not {type(layer).__name__}")

    if scheme == "kaiming-uniform":
        if isinstance(layer, ChannelLinear):
            fan_in = layer.c_in
        elif isinstance(layer, TemporalConv):
            fan_in = weight.shape[1] * weight.shape[2]
        else:
            fan_in = layer.joints
        bound = kaiming_bound(fan_in)
        weight.data[...] = _rng(rng).uniform(-bound, bound, size=weight.shape)
    elif scheme == "identity":
        weight.data[...] = np.eye(layer.joints)[None]
    elif scheme == "zeros":
        weight.data[...] = 0.0
    else:
        if adjacency is None:
            raise ConfigError("binary-graph init needs an adjacency matrix")
        adjacency = np.asarray(adjacency)
        if adjacency.shape != (layer.joints, layer.joints):
            raise ConfigError(f"Adjacency shape {adjacency.shape} != ({layer.joints}, {layer.joints})")
        if not np.isin(adjacency, (0, 1)).all():
            raise ConfigError("Adjacency must be a 0/1 matrix")
        weight.data[...] = adjacency[None]
    if bias is not None:
        bias.data[...] = 0.0
