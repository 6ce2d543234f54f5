"""
RVW1 weight container.

Layout (little-endian):
    4 bytes   magic b"RVW1"
    u32       format version
    u64       JSON header length in bytes
    header    UTF-8 JSON {"tensors": [{name, shape, dtype, offset}], "meta": {...}}
    payload   raw IEEE-754 f32 data; offsets count from the first payload byte

One file can hold several networks under distinct name prefixes
("vae.", "pnet.").
"""
import json
import struct
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np

from core.errors import ConfigurationError
from utils.logging_config import get_logger

logger = get_logger(__name__)

MAGIC = b"RVW1"
VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")
_F32 = np.dtype("<f4")


def write_weights(path: Union[str, Path], tensors: Mapping[str, np.ndarray],
                  meta: Optional[dict] = None) -> Path:
    """Write tensors (cast to f32) in insertion order."""
    records, payloads, offset = [], [], 0
    for name, value in tensors.items():
        array = np.ascontiguousarray(np.asarray(value, dtype=_F32))
        if not np.all(np.isfinite(array)):
            raise ConfigurationError(f"tensor {name!r} holds non-finite values")
        records.append({"name": name, "shape": list(array.shape), "dtype": "f32", "offset": offset})
        payloads.append(array.tobytes())
        offset += array.nbytes
    header = json.dumps({"tensors": records, "meta": meta or {}}, sort_keys=True).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(_PREAMBLE.pack(MAGIC, VERSION, len(header)))
        f.write(header)
        for payload in payloads:
            f.write(payload)
    logger.debug(f"Wrote {len(records)} tensors ({offset} payload bytes) to {path}")
    return path


def read_weights(path: Union[str, Path], prefix: Optional[str] = None) -> Tuple[Dict[str, np.ndarray], dict]:
    """
    Read every tensor (optionally only names starting with prefix) and the
    header meta object.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError as e:
        raise ConfigurationError(f"weight file not found: {path}") from e
    if len(data) < _PREAMBLE.size:
        raise ConfigurationError(f"{path} is too short to be a weight container")
    magic, version, header_len = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise ConfigurationError(f"{path} is not an RVW1 weight container (magic {magic!r})")
    if version != VERSION:
        raise ConfigurationError(f"{path}: unsupported container version {version}")
    start = _PREAMBLE.size + header_len
    if start > len(data):
        raise ConfigurationError(f"{path}: truncated header")
    try:
        header = json.loads(data[_PREAMBLE.size:start].decode("utf-8"))
        records = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise ConfigurationError(f"{path}: malformed header: {e}") from e

    tensors = {}
    for record in records:
        name = record["name"]
        if prefix is not None and not name.startswith(prefix):
            continue
        if record.get("dtype") != "f32":
            raise ConfigurationError(f"{path}: tensor {name!r} has unsupported dtype {record.get('dtype')!r}")
        shape = tuple(int(s) for s in record["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        begin = start + int(record["offset"])
        end = begin + count * _F32.itemsize
        if end > len(data):
            raise ConfigurationError(f"{path}: tensor {name!r} runs past the end of the file")
        tensors[name] = np.frombuffer(data, dtype=_F32, count=count, offset=begin).reshape(shape).astype(np.float32)
    return tensors, header.get("meta", {})


def strip_prefix(tensors: Mapping[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    return {name[len(prefix):]: value for name, value in tensors.items() if name.startswith(prefix)}


def add_prefix(tensors: Mapping[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    return {prefix + name: value for name, value in tensors.items()}
