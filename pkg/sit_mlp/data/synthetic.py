"""
Synthetic Motion Families
=========================

Desk-scale stand-in for a skeleton action dataset. Every class is a motion
family on a fixed skeleton tree: a few active joints oscillate along
class-specific directions with a class-specific frequency and phase.
Samples vary in amplitude, phase, global position, length and noise.

Generation is deterministic per seed (byte-identical files) and ends with a
nearest-centroid oracle on the preprocessed held-out split; generation fails
if the classes are not separable enough for learnability tests to mean
anything.
"""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from sklearn.neighbors import NearestCentroid
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from tqdm import tqdm

from ..errors import ConfigError, DataError
from . import DatasetManifest, ManifestEntry, SkeletonGraph, SkeletonSequence, default_graph
from .preprocessing import preprocess
from .skeleton_io import read_sample, write_graph, write_manifest, write_sample

logger = logging.getLogger(__name__)

NOISE_SIGMA = 0.01
ORACLE_MIN_ACCURACY = 0.8
ACTIVE_JOINTS = 3
BONE_LENGTH = (0.1, 0.2)
AMPLITUDE = 0.15


@dataclass
class MotionFamily:
    """Class-level motion parameters"""
    label: int
    active_joints: List[int]
    directions: np.ndarray           # [len(active_joints), D], unit rows
    frequency: float                 # cycles per sequence
    phase: float


@dataclass
class SyntheticDataset:
    root: Path
    train: DatasetManifest
    test: DatasetManifest
    oracle_accuracy: Optional[float]


def rest_pose(graph: SkeletonGraph, coord_dim: int, rng: np.random.Generator) -> np.ndarray:
    """Joint positions [V, D] grown outward from the root along random bone directions"""
    pose = np.zeros((graph.joints, coord_dim))
    pose[graph.root, min(1, coord_dim - 1)] = 1.0
    order = _topological_order(graph)
    for v in order:
        p = graph.parent[v]
        if p == v:
            continue
        direction = rng.normal(size=coord_dim)
        direction /= np.linalg.norm(direction) + 1e-12
        pose[v] = pose[p] + direction * rng.uniform(*BONE_LENGTH)
    return pose


def _topological_order(graph: SkeletonGraph) -> List[int]:
    depth = []
    for v in range(graph.joints):
        d, node = 0, v
        while graph.parent[node] != node:
            node = graph.parent[node]
            d += 1
        depth.append(d)
    return sorted(range(graph.joints), key=lambda v: (depth[v], v))


def make_families(num_classes: int, graph: SkeletonGraph, coord_dim: int,
                  rng: np.random.Generator) -> List[MotionFamily]:
    candidates = [v for v in range(graph.joints) if v != graph.root] or [graph.root]
    families = []
    for label in range(num_classes):
        count = min(ACTIVE_JOINTS, len(candidates))
        active = sorted(rng.choice(candidates, size=count, replace=False).tolist())
        directions = rng.normal(size=(count, coord_dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True) + 1e-12
        families.append(MotionFamily(
            label=label,
            active_joints=active,
            directions=directions,
            frequency=float(1 + label % 3),
            phase=float(rng.uniform(0.0, 2.0 * np.pi)),
        ))
    return families


def sample_sequence(family: MotionFamily, pose: np.ndarray, frames: int, persons: int,
                    sample_id: str, rng: np.random.Generator) -> SkeletonSequence:
    """One noisy, translated, variable-length realization of a motion family"""
    V, D = pose.shape
    valid = int(rng.integers(max(1, int(np.ceil(0.75 * frames))), frames + 1))
    amplitude = AMPLITUDE * rng.uniform(0.85, 1.15)
    phase = family.phase + rng.uniform(-0.3, 0.3)
    t = np.arange(valid) / max(valid - 1, 1)
    wave = np.sin(2.0 * np.pi * family.frequency * t + phase)

    motion = np.repeat(pose[None], valid, axis=0)
    for j, direction in zip(family.active_joints, family.directions):
        motion[:, j] += amplitude * wave[:, None] * direction[None]
    motion += rng.uniform(-0.5, 0.5, size=D)
    motion += rng.normal(0.0, NOISE_SIGMA, size=motion.shape)

    data = np.zeros((persons, frames, V, D), dtype=np.float32)
    data[0, :valid] = motion
    return SkeletonSequence(data, family.label, sample_id, valid)


def centroid_oracle(train: List[SkeletonSequence], test: List[SkeletonSequence], frames: int) -> float:
    """Held-out accuracy of a nearest-centroid classifier on flattened preprocessed sequences"""
    def features(seqs):
        return np.stack([preprocess(s, frames).reshape(-1) for s in seqs])

    y_train = np.array([s.label for s in train])
    y_test = np.array([s.label for s in test])
    oracle = make_pipeline(StandardScaler(), NearestCentroid())
    oracle.fit(features(train), y_train)
    return float((oracle.predict(features(test)) == y_test).mean())


def synth_generate(
    out_dir: Union[str, Path],
    num_classes: int,
    samples_per_class: int,
    joints: int = 25,
    frames: int = 64,
    persons: int = 2,
    coord_dim: int = 3,
    seed: int = 0,
    test_fraction: float = 0.2,
    verify: bool = True,
    quiet: bool = False,
) -> SyntheticDataset:
    """
    Write a synthetic dataset under out_dir.

    Layout: samples/<id>.sits, train.tsv, test.tsv, graph.tsv, dataset.json.

    Raises:
        ConfigError: fewer than 2 classes or no samples
        DataError: nearest-centroid oracle below 80% on the held-out split
    """
    if num_classes < 2:
        raise ConfigError("Synthetic generation needs at least 2 classes")
    if samples_per_class < 1:
        raise ConfigError("samples_per_class must be >= 1")
    if not 0 <= test_fraction < 1:
        raise ConfigError("test_fraction must lie in [0, 1)")
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    graph = default_graph(joints)
    pose = rest_pose(graph, coord_dim, rng)
    families = make_families(num_classes, graph, coord_dim, rng)

    n_test = int(round(samples_per_class * test_fraction)) if samples_per_class > 1 else 0
    if test_fraction > 0 and samples_per_class > 1:
        n_test = max(1, n_test)
    train_seqs, test_seqs = [], []
    train_entries, test_entries = [], []
    jobs = [(f, i) for f in families for i in range(samples_per_class)]
    for family, i in tqdm(jobs, desc="generate", disable=quiet):
        sample_id = f"c{family.label:03d}_s{i:04d}"
        seq = sample_sequence(family, pose, frames, persons, sample_id, rng)
        rel = f"samples/{sample_id}.sits"
        write_sample(out / rel, seq)
        if i < samples_per_class - n_test:
            train_seqs.append(seq)
            train_entries.append(ManifestEntry(rel, family.label))
        else:
            test_seqs.append(seq)
            test_entries.append(ManifestEntry(rel, family.label))

    train = DatasetManifest(train_entries, "train", seed, out)
    test = DatasetManifest(test_entries, "test", seed, out)
    write_manifest(out / "train.tsv", train)
    write_manifest(out / "test.tsv", test)
    write_graph(out / "graph.tsv", graph)

    accuracy = None
    if verify and test_seqs:
        # oracle sees exactly what was written
        train_seqs = [read_sample(train.resolve(e)) for e in train.entries]
        test_seqs = [read_sample(test.resolve(e)) for e in test.entries]
        accuracy = centroid_oracle(train_seqs, test_seqs, frames)
        logger.info(f"Nearest-centroid oracle accuracy: {accuracy:.3f}")
        if accuracy < ORACLE_MIN_ACCURACY:
            raise DataError(f"Synthetic classes not separable: oracle accuracy {accuracy:.3f} < {ORACLE_MIN_ACCURACY}")
    elif verify:
        logger.warning("No held-out samples; skipping the separability oracle")

    meta = {
        "num_classes": num_classes,
        "samples_per_class": samples_per_class,
        "joints": joints,
        "frames": frames,
        "persons": persons,
        "coord_dim": coord_dim,
        "seed": seed,
        "graph": graph.name,
        "oracle_accuracy": accuracy,
        "families": [
            {k: v for k, v in asdict(f).items() if k != "directions"} for f in families
        ],
    }
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    logger.info(f"Wrote {len(train)} train / {len(test)} test samples to {out}")
    return SyntheticDataset(out, train, test, accuracy)


def load_dataset_meta(data_dir: Union[str, Path]) -> dict:
    path = Path(data_dir) / "dataset.json"
    if not path.exists():
        return {}
    return json.loads(path.read_text(encoding="utf-8"))
