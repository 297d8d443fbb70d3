"""
Finite-difference gradient suite run by `sit-mlp gradcheck`.

Every case builds a tiny 64-bit instance, reduces its output to a scalar
with a fixed random projection sum(out * R) and compares analytic against
central-difference gradients (h = 1e-5) for the inputs and every parameter.
"""

import logging
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor_engine as te
from .config import AblationFlags, ModelConfig
from .layers import BatchNorm, ChannelLinear, Layer, SpatialLinear, TemporalConv
from .network import EmbeddingBlock, MsTcBlock, SitMlpModel
from .stgu import StguBlock, split_channels
from .tensor_engine import Tensor

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
QUICK_COORDS = 4
FULL_COORDS = 24


@dataclass
class GradcheckCase:
    name: str
    max_error: float
    checked: int
    skipped: int
    seconds: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_error < self.tolerance


def _uniform(rng: np.random.Generator, shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _away_from_zero(rng: np.random.Generator, shape, margin=0.1) -> Tensor:
    values = rng.uniform(margin, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(values, requires_grad=True)


def projected(fn: Callable[..., Tensor], out_shape: Sequence[int], seed: int) -> Callable[..., Tensor]:
    """Scalar sum(fn(*args) * R) with a fixed random R"""
    R = Tensor(np.random.default_rng(seed).uniform(-1.0, 1.0, size=tuple(out_shape)))

    def loss(*args):
        return te.reduce("sum", fn(*args) * R)

    return loss


def _randomize(layer: Layer, rng: np.random.Generator, scale: float = 0.5):
    """Random values for every parameter so no gradient is trivially zero"""
    for name, p in layer.state_dict().items():
        if name.endswith("gamma"):
            p.data[...] = rng.uniform(0.5, 1.5, size=p.shape)
        elif p.requires_grad:
            p.data[...] = rng.uniform(-scale, scale, size=p.shape)


def _case(name: str, f: Callable[..., Tensor], inputs: Sequence[Tensor], max_coords: Optional[int]) -> GradcheckCase:
    start = time.perf_counter()
    result = te.grad_check_detailed(f, inputs, max_coords=max_coords)
    case = GradcheckCase(name, result.max_error, result.checked, result.skipped, time.perf_counter() - start)
    logger.debug(f"{name}: max rel err {case.max_error:.2e} ({case.checked} checked, {case.skipped} at kinks)")
    return case


def _layer_case(name: str, layer: Layer, x: Tensor, fn: Callable[[Tensor], Tensor], seed: int,
                max_coords: Optional[int]) -> GradcheckCase:
    with te.no_grad():
        out_shape = fn(x).shape
    params = [p for _, p in layer.named_parameters()]
    return _case(name, projected(lambda *args: fn(x), out_shape, seed), [x] + params, max_coords)


def op_cases(max_coords: Optional[int]) -> List[GradcheckCase]:
    rng = np.random.default_rng(11)
    cases = []

    a, b = _uniform(rng, (3, 4)), _uniform(rng, (4, 2))
    cases.append(_case("matmul", projected(te.matmul, (3, 2), 1), [a, b], max_coords))

    a, b = _uniform(rng, (2, 3, 4)), _uniform(rng, (3, 1))
    for op in ("add", "sub", "mul"):
        f = projected(lambda p, q, op=op: te.elementwise(op, p, q), (2, 3, 4), 2)
        cases.append(_case(op, f, [a, b], max_coords))

    x = _uniform(rng, (3, 4, 5))
    cases.append(_case("sum", projected(lambda t: te.reduce("sum", t, (0, 2)), (4,), 3), [x], max_coords))
    cases.append(_case("mean", projected(lambda t: te.reduce("mean", t, 1, keepdims=True), (3, 1, 5), 4),
                       [x], max_coords))
    cases.append(_case("max", projected(lambda t: te.reduce("max", t, (1, 2)), (3,), 5), [x], max_coords))

    cases.append(_case("relu", projected(te.relu, (4, 5), 6), [_away_from_zero(rng, (4, 5))], max_coords))
    cases.append(_case("gelu", projected(te.gelu, (4, 5), 7), [_uniform(rng, (4, 5), -3, 3)], max_coords))
    cases.append(_case("softmax", projected(lambda t: te.softmax(t, 1), (3, 4), 8),
                       [_uniform(rng, (3, 4))], max_coords))

    y = _uniform(rng, (2, 3, 4))
    cases.append(_case("transpose+reshape",
                       projected(lambda t: te.reshape(te.transpose(t, (2, 0, 1)), (4, 6)), (4, 6), 9),
                       [y], max_coords))
    cases.append(_case("split+concat",
                       projected(lambda t: te.concat(list(split_channels(t))[::-1], -1), (2, 3, 4), 10),
                       [y], max_coords))
    cases.append(_case("broadcast_to", projected(lambda t: te.broadcast_to(t, (2, 3, 4)), (2, 3, 4), 12),
                       [_uniform(rng, (3, 1))], max_coords))
    cases.append(_case("einsum", projected(lambda p, q: te.einsum("huv,btvhc->btuhc", p, q), (2, 3, 4, 2, 2), 13),
                       [_uniform(rng, (2, 4, 4)), _uniform(rng, (2, 3, 4, 2, 2))], max_coords))

    xc, wc, bc = _uniform(rng, (2, 2, 9, 3)), _uniform(rng, (3, 2, 3)), _uniform(rng, (3,))
    f = projected(lambda p, q, r: te.temporal_conv(p, q, r, stride=2, dilation=2, padding=2), (2, 3, 5, 3), 14)
    cases.append(_case("temporal_conv", f, [xc, wc, bc], max_coords))

    xp = Tensor(rng.permutation(2 * 2 * 7 * 3).reshape(2, 2, 7, 3) * 0.1, requires_grad=True)
    cases.append(_case("temporal_maxpool", projected(lambda t: te.temporal_maxpool(t, 3, 2), (2, 2, 4, 3), 15),
                       [xp], max_coords))

    xb = _uniform(rng, (4, 3, 5))
    gamma, beta = _uniform(rng, (5,), 0.5, 1.5), _uniform(rng, (5,))
    f = projected(lambda p, g, s: te.batch_norm(p, g, s)[0], (4, 3, 5), 16)
    cases.append(_case("batch_norm", f, [xb, gamma, beta], max_coords))

    labels = np.array([0, 2, 1, 2])
    cases.append(_case("cross_entropy", lambda t: te.softmax_cross_entropy(t, labels),
                       [_uniform(rng, (4, 3), -2, 2)], max_coords))
    return cases


def layer_cases(max_coords: Optional[int]) -> List[GradcheckCase]:
    rng = np.random.default_rng(21)
    cases = []

    lin = ChannelLinear(3, 4, rng=rng)
    _randomize(lin, rng)
    cases.append(_layer_case("ChannelLinear", lin, _uniform(rng, (2, 3, 2, 3)), lin, 1, max_coords))

    sp = SpatialLinear(3, 4, heads=2, bias=True)
    _randomize(sp, rng)
    cases.append(_layer_case("SpatialLinear", sp, _uniform(rng, (2, 2, 3, 4)), sp, 2, max_coords))

    conv = TemporalConv(2, 3, kernel=3, dilation=2, stride=2, rng=rng)
    _randomize(conv, rng)
    cases.append(_layer_case("TemporalConv", conv, _uniform(rng, (2, 2, 8, 3)), conv, 3, max_coords))

    bn = BatchNorm(4)
    _randomize(bn, rng)
    cases.append(_layer_case("BatchNorm", bn, _uniform(rng, (3, 2, 2, 4)), bn, 4, max_coords))
    return cases


def block_cases(max_coords: Optional[int]) -> List[GradcheckCase]:
    rng = np.random.default_rng(31)
    cases = []

    stgu = StguBlock(4, 4, joints=4, heads=1, rng=rng)
    _randomize(stgu, rng)
    cases.append(_layer_case("StguBlock", stgu, _uniform(rng, (2, 3, 4, 4)), stgu, 1, max_coords))

    wide = StguBlock(4, 6, joints=4, heads=2, rng=rng)
    _randomize(wide, rng)
    cases.append(_layer_case("StguBlock(shortcut, 2 heads)", wide, _uniform(rng, (2, 3, 4, 4)), wide, 2,
                             max_coords))

    pooled = StguBlock(4, 4, joints=4, heads=1, rng=rng,
                       flags=AblationFlags(pool_temporal_attention=True, pool_channel_attention=True))
    _randomize(pooled, rng)
    cases.append(_layer_case("StguBlock(pooled attention)", pooled, _uniform(rng, (2, 3, 4, 4)), pooled, 3,
                             max_coords))

    emb = EmbeddingBlock(joints=4, coord_dim=3, channels=6, rng=rng)
    _randomize(emb, rng)
    cases.append(_layer_case("EmbeddingBlock", emb, _uniform(rng, (2, 2, 3, 4, 3)), emb, 4, max_coords))

    mstc = MsTcBlock(6, 6, stride=2, rng=rng)
    _randomize(mstc, rng)
    cases.append(_layer_case("MsTcBlock", mstc, _uniform(rng, (2, 8, 4, 6)), mstc, 5, max_coords))
    return cases


def model_case(max_coords: Optional[int]) -> GradcheckCase:
    rng = np.random.default_rng(41)
    model = SitMlpModel(ModelConfig.micro())
    _randomize(model, rng, scale=0.3)
    x = _uniform(rng, (2, 2, 8, 4, 3))
    labels = np.array([0, 1])

    def loss(*args):
        return te.softmax_cross_entropy(model(x), labels)

    params = [p for _, p in model.named_parameters()]
    return _case("SitMlpModel(micro)", loss, [x] + params, max_coords)


def run_gradcheck_suite(quick: bool = False) -> List[GradcheckCase]:
    """All cases; quick samples fewer coordinates per tensor"""
    max_coords = QUICK_COORDS if quick else FULL_COORDS
    cases = op_cases(max_coords) + layer_cases(max_coords) + block_cases(max_coords)
    cases.append(model_case(max_coords))
    failed = [c.name for c in cases if not c.passed]
    if failed:
        logger.warning(f"Gradient check failed for: {', '.join(failed)}")
    return cases
