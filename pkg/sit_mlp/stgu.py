"""
Spatial Topology Gating Unit
============================

    shortcut = shortcut_proj(x)            (identity when widths match)
    z = act(proj_in(norm(x)))              2 * d_model channels
    F1, F2 = split(z)                      contiguous halves
    A = attn_proj(F2)                      per-head joint mixing, zero-init
    specific = F1 * A                      point-wise gate
    generic = shared_proj(F1)              per-head joint mixing, identity-init
    out = shortcut + proj_out(specific + generic)

A keeps one value per (frame, joint, channel). With attn_proj at its exact
zero init the gate contributes exactly 0 and the block reduces to its
shortcut plus the sample-generic path.
"""

import copy
import logging
from dataclasses import dataclass
from typing import Iterator, Mapping, Optional, Tuple, Union

import numpy as np

from . import tensor_engine as te
from .config import AblationFlags
from .errors import ShapeError, StateError
from .layers import BatchNorm, ChannelLinear, Layer, SpatialLinear
from .tensor_engine import Tensor

logger = logging.getLogger(__name__)


@dataclass
class StguBranches:
    """Intermediate feature maps of one STGU forward"""
    shortcut: Tensor
    f1: Tensor
    f2: Tensor
    attention: Optional[Tensor]      # A, None when the specific path is off
    specific: Optional[Tensor]       # F1 * A
    generic: Optional[Tensor]        # shared_proj(F1)
    out: Tensor


def split_channels(z: Tensor) -> Tuple[Tensor, Tensor]:
    """First half of the trailing axis -> F1, second half -> F2"""
    width = z.shape[-1]
    if width % 2:
        raise ShapeError(f"Cannot split an odd channel width {width}")
    half = width // 2
    return te.slice_axis(z, -1, 0, half), te.slice_axis(z, -1, half, None)


class StguBlock(Layer):
    def __init__(
        self,
        c_in: int,
        d_model: int,
        joints: int,
        heads: int = 8,
        flags: AblationFlags = AblationFlags(),
        spatial_bias: bool = False,
        shared_init: str = "identity",
        adjacency: Optional[np.ndarray] = None,
        use_norm: bool = True,
        activation: str = "gelu",
        dtype=np.float64,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        self.c_in, self.d_model, self.joints, self.heads = c_in, d_model, joints, heads
        self.flags = flags
        self.activation = activation
        self.norm = BatchNorm(c_in, dtype=dtype) if use_norm else None
        self.proj_in = ChannelLinear(c_in, 2 * d_model, dtype=dtype, rng=rng)
        self.attn_proj = SpatialLinear(joints, d_model, heads, bias=spatial_bias, dtype=dtype, init="zeros")
        shared_scheme = "binary-graph" if shared_init in ("binary_graph", "binary-graph") else "identity"
        self.shared_proj = SpatialLinear(joints, d_model, heads, bias=spatial_bias, dtype=dtype,
                                         init=shared_scheme, adjacency=adjacency)
        self.proj_out = ChannelLinear(d_model, d_model, dtype=dtype, rng=rng)
        self.shortcut_proj = ChannelLinear(c_in, d_model, dtype=dtype, rng=rng) if c_in != d_model else None
        self.capture = False
        self.captured: Optional[Tensor] = None

    def active_children(self) -> Iterator[Tuple[str, Layer]]:
        for name, child in self.children():
            if name == "attn_proj" and self.flags.disable_specific:
                continue
            if name == "shared_proj" and self.flags.disable_generic:
                continue
            yield name, child

    def _pool_attention(self, attention: Tensor) -> Tensor:
        if self.flags.pool_temporal_attention:
            attention = te.broadcast_to(te.reduce("mean", attention, 1, keepdims=True), attention.shape)
        if self.flags.pool_channel_attention:
            attention = te.broadcast_to(te.reduce("mean", attention, 3, keepdims=True), attention.shape)
        return attention

    def forward_branches(self, x: Tensor) -> StguBranches:
        if x.ndim != 4 or x.shape[2] != self.joints or x.shape[3] != self.c_in:
            raise ShapeError(f"STGU expects [B, T, {self.joints}, {self.c_in}], got {x.shape}")
        shortcut = self.shortcut_proj(x) if self.shortcut_proj is not None else x
        u = self.norm(x) if self.norm is not None else x
        z = te.activation(self.activation, self.proj_in(u))
        f1, f2 = split_channels(z)

        attention = specific = generic = None
        if not self.flags.disable_specific:
            attention = self._pool_attention(self.attn_proj(f2))
            specific = f1 * attention
        if not self.flags.disable_generic:
            generic = self.shared_proj(f1)
        object.__setattr__(self, "captured", attention if self.capture else None)

        if specific is None:
            mixed = generic
        elif generic is None:
            mixed = specific
        else:
            mixed = specific + generic
        out = shortcut + self.proj_out(mixed)
        return StguBranches(shortcut, f1, f2, attention, specific, generic, out)

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_branches(x).out

    def export_attention(self) -> Tensor:
        return export_attention(self)


def apply_ablation(block: StguBlock, flags: Union[AblationFlags, Mapping[str, bool]]) -> StguBlock:
    """Copy of block with other ablation flags; weights are shared, not copied"""
    if not isinstance(flags, AblationFlags):
        flags = AblationFlags(**dict(flags))
    clone = copy.copy(block)
    object.__setattr__(clone, "flags", flags)
    object.__setattr__(clone, "captured", None)
    return clone


def export_attention(block: StguBlock) -> Tensor:
    """Attention map A [B, T, V, d_model] of the last forward run with capture on"""
    if block.captured is None:
        raise StateError("No attention captured; set block.capture = True and run a forward pass "
                         "with the sample-specific path enabled")
    return Tensor(block.captured.data.copy())
