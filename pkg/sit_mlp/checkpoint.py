"""
Checkpoint files.

Layout: magic "SITC", u32 version, u64 index length, UTF-8 JSON index,
then one SITT tensor record per entry. The index holds the model config,
the training modality and, per tensor, its name, byte offset (from the
start of the tensor section), shape and dtype.
"""

import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Tuple, Union

from .config import ModelConfig, config_from_dict
from .errors import ConfigError, FormatError
from .layers import Layer
from .tensor_engine import Tensor, tensor_from_bytes, tensor_to_bytes

logger = logging.getLogger(__name__)

SITC_MAGIC = b"SITC"
SITC_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    config: ModelConfig
    modality: str
    state: "OrderedDict[str, Tensor]"
    meta: Dict[str, Any] = field(default_factory=dict)


def save_checkpoint(path: Union[str, Path], model: Layer, modality: str = "joint",
                    meta: Dict[str, Any] = None) -> Path:
    path = Path(path)
    blobs, entries, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        blob = tensor_to_bytes(tensor)
        entries.append({"name": name, "offset": offset, "shape": list(tensor.shape), "dtype": str(tensor.dtype)})
        blobs.append(blob)
        offset += len(blob)
    index = {
        "config": model.cfg.to_dict(),
        "modality": str(modality),
        "meta": meta or {},
        "tensors": entries,
    }
    index_bytes = json.dumps(index, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(_HEADER.pack(SITC_MAGIC, SITC_VERSION, len(index_bytes)))
        f.write(index_bytes)
        for blob in blobs:
            f.write(blob)
    logger.debug(f"Saved {len(entries)} tensors to {path}")
    return path


def _read_index(buf: bytes, path: Path) -> Tuple[dict, int]:
    try:
        magic, version, length = _HEADER.unpack_from(buf)
    except struct.error:
        raise FormatError(f"{path}: truncated checkpoint header") from None
    if magic != SITC_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != SITC_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    start = _HEADER.size
    try:
        index = json.loads(buf[start:start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt checkpoint index ({e})") from None
    return index, start + length


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"Checkpoint not found: {path}")
    buf = path.read_bytes()
    index, data_start = _read_index(buf, path)
    try:
        cfg, _ = config_from_dict({"model": index["config"]})
    except (KeyError, ConfigError) as e:
        raise FormatError(f"{path}: invalid model config in checkpoint ({e})") from None
    state: "OrderedDict[str, Tensor]" = OrderedDict()
    for entry in index.get("tensors", []):
        tensor, _ = tensor_from_bytes(buf, data_start + entry["offset"])
        if list(tensor.shape) != entry["shape"]:
            raise FormatError(f"{path}: tensor {entry['name']} shape {tensor.shape} != index {entry['shape']}")
        state[entry["name"]] = tensor
    return Checkpoint(cfg, index.get("modality", "joint"), state, index.get("meta", {}))


def load_model(path: Union[str, Path]):
    """(model with restored weights and statistics, checkpoint)"""
    from .network import build_model

    ckpt = load_checkpoint(path)
    model = build_model(ckpt.config)
    model.load_state_dict(ckpt.state)
    return model, ckpt
