"""
Sequence normalization and modality derivation.

Works on plain float32 arrays shaped [M, T, V, D]; tensors are only built
at batch time.
"""

from typing import Optional, Union

import numpy as np

from ..errors import ConfigError, DataError
from . import ModalityKind, SkeletonGraph, SkeletonSequence, default_graph, graph_for


def resample_frames(x: np.ndarray, valid_frames: int, target_frames: int) -> np.ndarray:
    """Linearly interpolate the first valid_frames of axis 1 onto target_frames points"""
    if valid_frames < 1:
        raise DataError("Cannot resample a sequence with zero valid frames")
    if valid_frames == 1:
        return np.repeat(x[:, :1], target_frames, axis=1)
    pos = np.linspace(0.0, valid_frames - 1, target_frames)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, valid_frames - 1)
    w = (pos - lo)[None, :, None, None]
    return x[:, lo] * (1.0 - w) + x[:, hi] * w


def preprocess(
    seq: SkeletonSequence,
    target_frames: int,
    persons: Optional[int] = None,
    center_joint: Optional[int] = None,
) -> np.ndarray:
    """
    Center, resample and pad one sequence.

    1. Translate so `center_joint` (default: the skeleton root) of person 1's
       first valid frame sits at the origin. All-zero persons stay zero.
    2. Resample the valid frames to target_frames by linear interpolation.
    3. Zero-fill missing persons up to `persons` (default: keep M).

    Returns:
        float32 array [persons, target_frames, V, D]
    """
    if seq.valid_frames < 1:
        raise DataError(f"{seq.sample_id}: no valid frames")
    if target_frames < 1:
        raise ConfigError("target_frames must be >= 1")
    x = seq.data[:, :seq.valid_frames].astype(np.float64)
    if center_joint is None:
        center_joint = default_graph(seq.joints).root
    present = np.any(x != 0, axis=(1, 2, 3))
    origin = x[0, 0, center_joint]
    x[present] -= origin

    out = resample_frames(x, seq.valid_frames, target_frames)
    M = seq.persons if persons is None else persons
    result = np.zeros((M,) + out.shape[1:], dtype=np.float32)
    keep = min(M, out.shape[0])
    result[:keep] = out[:keep]
    return result


def derive_modality(
    x: np.ndarray,
    kind: Union[ModalityKind, str],
    graph: Optional[SkeletonGraph] = None,
) -> np.ndarray:
    """
    joint: identity
    bone: x[v] - x[parent(v)] (zero at the root)
    joint_motion: x[t+1] - x[t], last frame zero
    bone_motion: motion of the bone modality

    x is [..., T, V, D].
    """
    kind = ModalityKind.parse(kind)
    if kind is ModalityKind.JOINT:
        return x
    if kind in (ModalityKind.BONE, ModalityKind.BONE_MOTION):
        graph = graph_for(x.shape[-2], graph)
        x = x - x[..., list(graph.parent), :]
    if kind in (ModalityKind.JOINT_MOTION, ModalityKind.BONE_MOTION):
        motion = np.zeros_like(x)
        motion[..., :-1, :, :] = x[..., 1:, :, :] - x[..., :-1, :, :]
        x = motion
    return x
