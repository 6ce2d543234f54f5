"""
JSON-lines corpus manifests.

One JSON object per line, keys sorted, so regenerating a corpus rewrites
byte-identical manifests.
"""
import json
from pathlib import Path
from typing import Iterable, List, Union

from core.errors import ConfigurationError


def write_manifest(path: Union[str, Path], records: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def read_manifest(path: Union[str, Path]) -> List[dict]:
    """Read every record; record paths are relative to the manifest directory."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Manifest not found: {path}")
    records = []
    with path.open("r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"{path}:{number}: invalid manifest record: {e}") from e
    return records


def record_path(manifest: Union[str, Path], relative: str) -> Path:
    """Resolve a record path against the manifest's directory."""
    path = Path(relative)
    return path if path.is_absolute() else Path(manifest).parent / path
