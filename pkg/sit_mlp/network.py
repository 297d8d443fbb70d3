"""
Network Assembly
================

Embedding block, MS-TC temporal module, basic blocks and the full model,
plus the parameter and FLOP counters behind `inspect`.

Input [B, M, T, V, D] -> persons folded into the batch -> embedding
[B*M, T, V, C0] -> 5 basic blocks (time halved at blocks 2 and 4) ->
mean over (T, V) -> mean over persons -> linear classifier [B, K].
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor_engine as te
from .config import ModelConfig
from .data import SkeletonGraph, graph_for
from .errors import ConfigError, ShapeError
from .layers import BatchNorm, ChannelLinear, Layer, LayerList, TemporalConv, TemporalMaxPool
from .stgu import StguBlock
from .tensor_engine import FlopCounter, Tensor

logger = logging.getLogger(__name__)

PE_INIT_BOUND = 0.02


# ============================================================
# Blocks
# ============================================================

class EmbeddingBlock(Layer):
    """x_t = BN(s_t) W + PE, with PE [V, C0] shared across frames"""

    def __init__(self, joints: int, coord_dim: int, channels: int, input_norm: bool = True,
                 dtype=np.float64, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.joints, self.coord_dim, self.channels = joints, coord_dim, channels
        self.input_norm = BatchNorm(joints * coord_dim, dtype=dtype) if input_norm else None
        self.proj = ChannelLinear(coord_dim, channels, dtype=dtype, rng=rng)
        self.pe = Tensor(rng.uniform(-PE_INIT_BOUND, PE_INIT_BOUND, size=(joints, channels)).astype(dtype),
                         requires_grad=True, name="pe")

    def forward(self, s: Tensor) -> Tensor:
        if s.ndim != 5 or s.shape[3] != self.joints or s.shape[4] != self.coord_dim:
            raise ShapeError(f"Embedding expects [B, M, T, {self.joints}, {self.coord_dim}], got {s.shape}")
        B, M, T, V, D = s.shape
        x = te.reshape(s, (B * M, T, V, D))
        if self.input_norm is not None:
            x = te.reshape(self.input_norm(te.reshape(x, (B * M, T, V * D))), (B * M, T, V, D))
        return self.proj(x) + self.pe


class MsTcBlock(Layer):
    """
    Multi-scale temporal convolution.

    Each branch reduces to C_out / n_branches channels with a ReLU'd
    ChannelLinear, then runs a dilated TemporalConv (one per kernel spec) or,
    for the last branch, a max-pool. Branches are concatenated on channels
    and batch-normalized. The convolutions carry no bias: the batch
    statistics of the closing norm would cancel it.
    """

    def __init__(self, c_in: int, c_out: int, stride: int = 1,
                 kernels: Sequence[Tuple[int, int]] = ((5, 1), (5, 2)), pool_kernel: int = 3,
                 dtype=np.float64, rng: Optional[np.random.Generator] = None):
        super().__init__()
        n_branches = len(kernels) + 1
        if c_out % n_branches:
            raise ConfigError(f"MS-TC width {c_out} not divisible by {n_branches} branches")
        width = c_out // n_branches
        self.c_in, self.c_out, self.stride, self.branch_width = c_in, c_out, stride, width
        self.reduce = LayerList([ChannelLinear(c_in, width, dtype=dtype, rng=rng) for _ in range(n_branches)])
        self.convs = LayerList([
            TemporalConv(width, width, k, dilation=d, stride=stride, bias=False, dtype=dtype, rng=rng)
            for k, d in kernels
        ])
        self.pool = TemporalMaxPool(pool_kernel, stride)
        self.norm = BatchNorm(c_out, dtype=dtype)

    def branch(self, index: int, x: Tensor) -> Tensor:
        h = te.relu(self.reduce[index](x))
        h = te.transpose(h, (0, 3, 1, 2))
        h = self.convs[index](h) if index < len(self.convs) else self.pool(h)
        return te.transpose(h, (0, 2, 3, 1))

    def forward(self, x: Tensor) -> Tensor:
        outs = [self.branch(i, x) for i in range(len(self.reduce))]
        return self.norm(te.concat(outs, axis=-1))


class BasicBlock(Layer):
    """out = ReLU(MsTc(Stgu(x)) + residual(x))"""

    def __init__(self, c_in: int, c_out: int, stride: int, cfg: ModelConfig,
                 adjacency: Optional[np.ndarray] = None, rng: Optional[np.random.Generator] = None):
        super().__init__()
        dtype = cfg.np_dtype
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.stgu = StguBlock(
            c_in, c_out, cfg.joints, cfg.heads, flags=cfg.ablation, spatial_bias=cfg.spatial_bias,
            shared_init=cfg.shared_init, adjacency=adjacency, dtype=dtype, rng=rng,
        ) if cfg.uses_stgu else None
        self.adapter = (ChannelLinear(c_in, c_out, dtype=dtype, rng=rng)
                        if not cfg.uses_stgu and c_in != c_out else None)
        self.mstc = MsTcBlock(
            c_out, c_out, stride, cfg.mstc_kernels, cfg.mstc_pool_kernel, dtype=dtype, rng=rng,
        ) if cfg.uses_mstc else None
        self.residual = (ChannelLinear(c_in, c_out, dtype=dtype, rng=rng)
                         if c_in != c_out or stride != 1 else None)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        if self.stgu is not None:
            h = self.stgu(h)
        elif self.adapter is not None:
            h = self.adapter(h)
        if self.mstc is not None:
            h = self.mstc(h)
        elif self.stride > 1:
            h = te.slice_axis(h, 1, 0, None, self.stride)
        r = te.slice_axis(x, 1, 0, None, self.stride) if self.stride > 1 else x
        if self.residual is not None:
            r = self.residual(r)
        return te.relu(h + r)


class SitMlpModel(Layer):
    def __init__(self, cfg: ModelConfig, graph: Optional[SkeletonGraph] = None):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        adjacency = None
        if cfg.shared_init == "binary_graph":
            adjacency = graph_for(cfg.joints, graph).binary_adjacency()
        dtype = cfg.np_dtype
        self.embedding = EmbeddingBlock(cfg.joints, cfg.coord_dim, cfg.base_channels, cfg.input_norm,
                                        dtype=dtype, rng=rng)
        self.blocks = LayerList([
            BasicBlock(c_in, c_out, stride, cfg, adjacency, rng) for c_in, c_out, stride in cfg.block_plan()
        ])
        self.head = ChannelLinear(cfg.widths[-1], cfg.num_classes, dtype=dtype, rng=rng)

    def stgu_blocks(self) -> List[StguBlock]:
        return [b.stgu for b in self.blocks if b.stgu is not None]

    def set_capture(self, enabled: bool = True):
        for block in self.stgu_blocks():
            block.capture = enabled

    def as_input(self, batch: Union[Tensor, np.ndarray]) -> Tensor:
        if isinstance(batch, Tensor):
            return batch
        return Tensor(np.asarray(batch, dtype=self.cfg.np_dtype))

    def forward(self, batch: Union[Tensor, np.ndarray], trace: Optional[List[Tuple[int, ...]]] = None) -> Tensor:
        """
        Logits [B, num_classes] for a [B, M, T, V, D] batch.

        trace, when given, receives the [B*M, T, V, C] shape after every basic block.
        """
        s = self.as_input(batch)
        if s.ndim != 5:
            raise ShapeError(f"Model expects [B, M, T, V, D], got {s.shape}")
        B, M, T = s.shape[:3]
        reduction = int(np.prod(self.cfg.strides))
        if T % reduction:
            raise ShapeError(f"{T} frames not divisible by the temporal reduction {reduction}")
        x = self.embedding(s)
        for block in self.blocks:
            x = block(x)
            if trace is not None:
                trace.append(x.shape)
        pooled = te.reduce("mean", x, (1, 2))
        pooled = te.reduce("mean", te.reshape(pooled, (B, M, pooled.shape[-1])), 1)
        return self.head(pooled)


def build_model(cfg: ModelConfig, graph: Optional[SkeletonGraph] = None) -> SitMlpModel:
    model = SitMlpModel(cfg, graph)
    logger.debug(f"Built {cfg.variant} model: {count_params(model)} parameters")
    return model


# ============================================================
# Counters
# ============================================================

def _report_key(name: str) -> str:
    parts = name.split(".")
    return ".".join(parts[:3]) if parts[0] == "blocks" else parts[0]


@dataclass
class ParamReport:
    total: int
    items: "OrderedDict[str, int]" = field(default_factory=OrderedDict)


@dataclass
class FlopReport:
    """FLOPs count a multiply-accumulate as 2; macs as 1"""
    flops: int
    items: "OrderedDict[str, int]" = field(default_factory=OrderedDict)

    @property
    def macs(self) -> int:
        return self.flops // 2


def count_params(model: Layer) -> int:
    """Learnable scalars taking part in the forward pass (buffers excluded)"""
    return model.count_params()


def param_report(model: Layer) -> ParamReport:
    items: "OrderedDict[str, int]" = OrderedDict()
    for name, p in model.named_parameters():
        key = _report_key(name)
        items[key] = items.get(key, 0) + p.size
    return ParamReport(sum(items.values()), items)


def _linear_macs(positions: int, c_in: int, c_out: int) -> int:
    return positions * c_in * c_out


def flop_report(model: SitMlpModel, input_shape: Sequence[int]) -> FlopReport:
    """Analytic per-module FLOPs of one forward over input_shape [B, M, T, V, D]"""
    cfg = model.cfg
    B, M, T, V, D = input_shape
    N = B * M
    items: "OrderedDict[str, int]" = OrderedDict()
    items["embedding"] = 2 * _linear_macs(N * T * V, D, cfg.base_channels)
    for i, block in enumerate(model.blocks):
        pos = N * T * V
        t_out = T // block.stride
        if block.stgu is not None:
            stgu = block.stgu
            d = stgu.d_model
            macs = _linear_macs(pos, block.c_in, 2 * d) + _linear_macs(pos, d, d)
            if stgu.shortcut_proj is not None:
                macs += _linear_macs(pos, block.c_in, d)
            mixing = N * T * V * V * d
            macs += mixing * (int(not stgu.flags.disable_specific) + int(not stgu.flags.disable_generic))
            items[f"blocks.{i}.stgu"] = 2 * macs
        if block.adapter is not None:
            items[f"blocks.{i}.adapter"] = 2 * _linear_macs(pos, block.c_in, block.c_out)
        if block.mstc is not None:
            mstc = block.mstc
            w = mstc.branch_width
            macs = len(mstc.reduce) * _linear_macs(pos, mstc.c_in, w)
            for conv in mstc.convs:
                macs += N * w * w * conv.kernel * conv.output_length(T) * V
            items[f"blocks.{i}.mstc"] = 2 * macs
        if block.residual is not None:
            items[f"blocks.{i}.residual"] = 2 * _linear_macs(N * t_out * V, block.c_in, block.c_out)
        T = t_out
    items["head"] = 2 * _linear_macs(B, cfg.widths[-1], cfg.num_classes)
    return FlopReport(sum(items.values()), items)


def count_flops(model: SitMlpModel, input_shape: Sequence[int]) -> int:
    """2 x multiply-accumulates of one forward; normalization, pooling and elementwise ops are free"""
    return flop_report(model, input_shape).flops


def measure_flops(model: SitMlpModel, input_shape: Sequence[int]) -> int:
    """FLOPs counted by instrumenting an eval forward on zeros"""
    was_training = model.training
    model.eval()
    try:
        with te.no_grad(), FlopCounter() as counter:
            model(np.zeros(tuple(input_shape), dtype=model.cfg.np_dtype))
    finally:
        model.train(was_training)
    return counter.flops


def default_input_shape(cfg: ModelConfig, batch: int = 1) -> Tuple[int, int, int, int, int]:
    return (batch, cfg.persons, cfg.frames, cfg.joints, cfg.coord_dim)


def model_summary(model: SitMlpModel, input_shape: Optional[Sequence[int]] = None) -> Dict[str, object]:
    """Parameter and FLOP tables of one model, JSON-ready"""
    input_shape = tuple(input_shape or default_input_shape(model.cfg))
    params = param_report(model)
    flops = flop_report(model, input_shape)
    return {
        "variant": model.cfg.variant,
        "ablation": model.cfg.ablation.active(),
        "input_shape": list(input_shape),
        "params": {"total": params.total, "items": dict(params.items)},
        "flops": {"total": flops.flops, "macs": flops.macs, "items": dict(flops.items)},
    }
