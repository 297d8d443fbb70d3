"""
Skeleton Data
=============

Sequence container, skeleton tree, modality derivation, synthetic dataset
generation and batching.

Features:
- SITS sample files, TSV manifests and graph files (skeleton_io)
- Centering + linear time resampling, joint / bone / motion modalities (preprocessing)
- Separable synthetic motion families checked by a centroid oracle (synthetic)
- Seeded, preloaded batch stream (loader)
"""

from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from ..errors import ConfigError, DataError

# ============================================================
# Shared Data Types
# ============================================================


@dataclass
class SkeletonSequence:
    """One labeled action sample"""
    data: np.ndarray                 # [M, T_raw, V, D] float32, meters
    label: int
    sample_id: str
    valid_frames: int                # frames past this are padding

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise DataError(f"{self.sample_id}: expected [M, T, V, D] data, got shape {self.data.shape}")
        if not 1 <= self.valid_frames <= self.data.shape[1]:
            raise DataError(f"{self.sample_id}: valid_frames={self.valid_frames} outside [1, {self.data.shape[1]}]")
        if not np.all(np.isfinite(self.data)):
            raise DataError(f"{self.sample_id}: non-finite coordinates")

    @property
    def persons(self) -> int:
        return self.data.shape[0]

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    @property
    def joints(self) -> int:
        return self.data.shape[2]

    @property
    def coord_dim(self) -> int:
        return self.data.shape[3]


class ModalityKind(str, Enum):
    JOINT = "joint"
    BONE = "bone"
    JOINT_MOTION = "joint_motion"
    BONE_MOTION = "bone_motion"

    @classmethod
    def parse(cls, value) -> "ModalityKind":
        try:
            return cls(value)
        except ValueError:
            choices = ", ".join(m.value for m in cls)
            raise ConfigError(f"Unknown modality {value!r}; expected one of {choices}") from None


@dataclass(frozen=True)
class SkeletonGraph:
    """Parent map of a skeleton tree (parent[root] == root); used for bones only"""
    parent: Tuple[int, ...]
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "parent", tuple(int(p) for p in self.parent))
        V = len(self.parent)
        if V == 0:
            raise ConfigError("Empty skeleton graph")
        if any(not 0 <= p < V for p in self.parent):
            raise ConfigError(f"Parent index out of range [0, {V})")
        roots = [v for v, p in enumerate(self.parent) if p == v]
        if len(roots) != 1:
            raise ConfigError(f"Skeleton graph needs exactly one root, found {len(roots)}")
        for v in range(V):
            node, steps = v, 0
            while self.parent[node] != node:
                node = self.parent[node]
                steps += 1
                if steps > V:
                    raise ConfigError(f"Cycle through joint {v} in skeleton graph")

    @property
    def joints(self) -> int:
        return len(self.parent)

    @property
    def root(self) -> int:
        return next(v for v, p in enumerate(self.parent) if p == v)

    def edges(self) -> List[Tuple[int, int]]:
        """(parent, child) pairs"""
        return [(p, v) for v, p in enumerate(self.parent) if p != v]

    def binary_adjacency(self, self_loops: bool = True) -> np.ndarray:
        """Outward connection matrix A[parent, child] = 1, plus I when self_loops"""
        adjacency = np.eye(self.joints) if self_loops else np.zeros((self.joints, self.joints))
        for p, v in self.edges():
            adjacency[p, v] = 1.0
        return adjacency


@dataclass
class ManifestEntry:
    path: str                        # relative to the manifest's directory
    label: int


@dataclass
class DatasetManifest:
    """Ordered (file, label) list of one split"""
    entries: List[ManifestEntry]
    split: str = "train"
    seed: int = 0
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def resolve(self, entry: ManifestEntry) -> Path:
        return Path(self.root) / entry.path

    def validate(self, num_classes: int):
        if not self.entries:
            raise DataError(f"Manifest for split {self.split!r} is empty")
        bad = [e for e in self.entries if not 0 <= e.label < num_classes]
        if bad:
            raise DataError(f"Label {bad[0].label} of {bad[0].path} outside [0, {num_classes})")


# ============================================================
# Default Skeleton Trees
# ============================================================

# 25-joint Kinect v2 layout, 0-indexed; spine (20) is the root
NTU_PARENTS = (1, 20, 20, 2, 20, 4, 5, 6, 20, 8, 9, 10, 0, 12, 13, 14, 0, 16, 17, 18, 20, 22, 7, 24, 11)


def heap_parents(joints: int) -> Tuple[int, ...]:
    """Binary-heap tree rooted at 0"""
    return tuple([0] + [(v - 1) // 2 for v in range(1, joints)])


@lru_cache(maxsize=None)
def default_graph(joints: int = 25) -> SkeletonGraph:
    """Shipped 25-joint tree, or a heap tree for other joint counts"""
    if joints == len(NTU_PARENTS):
        return SkeletonGraph(NTU_PARENTS, name="ntu25")
    return SkeletonGraph(heap_parents(joints), name=f"heap{joints}")


def graph_for(joints: int, graph: Optional[SkeletonGraph] = None) -> SkeletonGraph:
    graph = graph or default_graph(joints)
    if graph.joints != joints:
        raise ConfigError(f"Skeleton graph has {graph.joints} joints, data has {joints}")
    return graph


__all__ = [
    "SkeletonSequence",
    "ModalityKind",
    "SkeletonGraph",
    "ManifestEntry",
    "DatasetManifest",
    "NTU_PARENTS",
    "heap_parents",
    "default_graph",
    "graph_for",
]
