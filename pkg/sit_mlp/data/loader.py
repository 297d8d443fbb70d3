"""
Batching.

SkeletonDataset reads, preprocesses and derives the modality of every
sample up front (optionally on a thread pool); batch order depends only on
the shuffle seed, never on loader parallelism.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, List, Optional, Union

import numpy as np

from ..errors import ConfigError, DataError
from . import DatasetManifest, ManifestEntry, ModalityKind, SkeletonGraph
from .preprocessing import derive_modality, preprocess
from .skeleton_io import read_sample

logger = logging.getLogger(__name__)


@dataclass
class SkeletonBatch:
    data: np.ndarray                 # [B, M, T, V, D]
    labels: np.ndarray               # [B] int64
    sample_ids: List[str]

    def __len__(self) -> int:
        return len(self.labels)


class SkeletonDataset:
    """Preloaded, preprocessed samples of one manifest"""

    def __init__(
        self,
        manifest: DatasetManifest,
        frames: int,
        persons: Optional[int] = None,
        modality: Union[ModalityKind, str] = ModalityKind.JOINT,
        graph: Optional[SkeletonGraph] = None,
        workers: int = 0,
        dtype=np.float32,
    ):
        if not manifest.entries:
            raise DataError(f"Manifest for split {manifest.split!r} is empty")
        self.manifest = manifest
        self.frames = frames
        self.persons = persons
        self.modality = ModalityKind.parse(modality)
        self.graph = graph

        if workers > 0:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                arrays = list(pool.map(self._load, manifest.entries))
        else:
            arrays = [self._load(e) for e in manifest.entries]

        self.data = np.stack(arrays).astype(dtype)
        self.labels = manifest.labels
        self.sample_ids = [self._sample_id(e) for e in manifest.entries]
        logger.debug(f"Loaded {len(self)} samples of split {manifest.split!r}, shape {self.data.shape}")

    @staticmethod
    def _sample_id(entry: ManifestEntry) -> str:
        name = entry.path.replace("\\", "/").rsplit("/", 1)[-1]
        return name[:-5] if name.endswith(".sits") else name

    def _load(self, entry: ManifestEntry) -> np.ndarray:
        seq = read_sample(self.manifest.resolve(entry))
        if seq.label != entry.label:
            raise DataError(f"{entry.path}: file label {seq.label} != manifest label {entry.label}")
        x = preprocess(seq, self.frames, self.persons)
        return derive_modality(x, self.modality, self.graph)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self):
        return self.data.shape[1:]

    def order(self, shuffle_seed: Optional[int] = None) -> np.ndarray:
        if shuffle_seed is None:
            return np.arange(len(self))
        return np.random.default_rng(shuffle_seed).permutation(len(self))

    def batches(self, batch_size: int, shuffle_seed: Optional[int] = None) -> Iterator[SkeletonBatch]:
        """Seeded epoch order; the final partial batch is kept"""
        if batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
        return self._iter_batches(batch_size, self.order(shuffle_seed))

    def _iter_batches(self, batch_size: int, order: np.ndarray) -> Iterator[SkeletonBatch]:
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            yield SkeletonBatch(self.data[idx], self.labels[idx], [self.sample_ids[i] for i in idx])


def batch_iter(
    manifest: DatasetManifest,
    batch_size: int,
    shuffle_seed: Optional[int],
    frames: int,
    **dataset_options,
) -> Iterator[SkeletonBatch]:
    """One epoch over a manifest"""
    return SkeletonDataset(manifest, frames, **dataset_options).batches(batch_size, shuffle_seed)
