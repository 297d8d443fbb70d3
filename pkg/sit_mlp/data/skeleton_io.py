"""
On-disk formats of the data pipeline.

Sample (.sits): magic "SITS", then u32 version, M, T, V, D, label,
valid_frames, then M*T*V*D little-endian float32, row-major.
Manifest (.tsv): one `path<TAB>label` line per sample, paths relative to
the manifest's directory.
Graph (.tsv): line v is `v<TAB>parent(v)`.
"""

import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from ..errors import DataError, FormatError
from . import DatasetManifest, ManifestEntry, SkeletonGraph, SkeletonSequence

logger = logging.getLogger(__name__)

SITS_MAGIC = b"SITS"
SITS_VERSION = 1
_HEADER = struct.Struct("<4s7I")
_F32_LE = np.dtype("<f4")

PathLike = Union[str, Path]


def sample_to_bytes(seq: SkeletonSequence) -> bytes:
    M, T, V, D = seq.data.shape
    header = _HEADER.pack(SITS_MAGIC, SITS_VERSION, M, T, V, D, seq.label, seq.valid_frames)
    return header + np.ascontiguousarray(seq.data, dtype=_F32_LE).tobytes()


def sample_from_bytes(buf: bytes, sample_id: str = "") -> SkeletonSequence:
    if len(buf) < _HEADER.size:
        raise FormatError(f"{sample_id}: truncated sample header")
    magic, version, M, T, V, D, label, valid = _HEADER.unpack_from(buf)
    if magic != SITS_MAGIC:
        raise FormatError(f"{sample_id}: bad sample magic {magic!r}")
    if version != SITS_VERSION:
        raise FormatError(f"{sample_id}: unsupported sample version {version}")
    count = M * T * V * D
    if len(buf) != _HEADER.size + 4 * count:
        raise FormatError(f"{sample_id}: payload holds {len(buf) - _HEADER.size} bytes, expected {4 * count}")
    data = np.frombuffer(buf, dtype=_F32_LE, count=count, offset=_HEADER.size)
    return SkeletonSequence(data.astype(np.float32).reshape(M, T, V, D), label, sample_id, valid)


def write_sample(path: PathLike, seq: SkeletonSequence):
    Path(path).write_bytes(sample_to_bytes(seq))


def read_sample(path: PathLike) -> SkeletonSequence:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Sample file not found: {path}")
    return sample_from_bytes(path.read_bytes(), sample_id=path.stem)


def write_manifest(path: PathLike, manifest: DatasetManifest):
    lines = [f"{e.path}\t{e.label}" for e in manifest.entries]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_manifest(path: PathLike, split: str = "", seed: int = 0) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Manifest not found: {path}")
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'path<TAB>label'")
        try:
            label = int(parts[1])
        except ValueError:
            raise DataError(f"{path}:{lineno}: label {parts[1]!r} is not an integer") from None
        entries.append(ManifestEntry(parts[0], label))
    return DatasetManifest(entries, split=split or path.stem, seed=seed, root=path.parent)


def load_split(data_dir: PathLike, split: str) -> DatasetManifest:
    """Manifest `<data_dir>/<split>.tsv`"""
    return read_manifest(Path(data_dir) / f"{split}.tsv", split=split)


def write_graph(path: PathLike, graph: SkeletonGraph):
    lines = [f"{v}\t{p}" for v, p in enumerate(graph.parent)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_graph(path: PathLike) -> SkeletonGraph:
    path = Path(path)
    pairs = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            v, p = (int(s) for s in line.split("\t"))
        except ValueError:
            raise DataError(f"{path}:{lineno}: expected 'joint<TAB>parent'") from None
        pairs[v] = p
    if sorted(pairs) != list(range(len(pairs))):
        raise DataError(f"{path}: joint indices must be 0..V-1")
    return SkeletonGraph(tuple(pairs[v] for v in range(len(pairs))), name=path.stem)
