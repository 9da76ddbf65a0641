"""
On-disk formats: the binary joint-field container, CSV tables carrying a
metadata comment line, per-channel CSV grids and JSON manifests
"""
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union
import csv
import hashlib
import io
import json
import logging
import struct

import numpy as np
from pydantic import BaseModel

from exceptions import DataError
from multimodal import JointField, JointLayout, stack_fields

logger = logging.getLogger(__name__)

FIELD_MAGIC = b"JFLD"
FIELD_VERSION = 1
_FIELD_HEADER = struct.Struct("<4sIIIIIII")

PathLike = Union[str, Path]


def config_hash(config: Union[BaseModel, Dict[str, Any]]) -> str:
    """SHA-256 of the sorted-key compact JSON form"""
    data = config.model_dump(mode="json") if isinstance(config, BaseModel) else config
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Joint-field container
# ---------------------------------------------------------------------------

def write_fields(path: PathLike, fields: Union[List[JointField], np.ndarray], layout: JointLayout) -> Path:
    """
    Write fields as: magic, version, count, H, W, C_main, C_aux, names length,
    newline-joined channel names, then little-endian float32 joint vectors.

    Args:
        path: Destination file
        fields: JointField list or an (n, d) array of joint vectors
        layout: Layout of every field

    Returns:
        The written path
    """
    path = Path(path)
    array = stack_fields(fields) if isinstance(fields, list) else np.asarray(fields)
    if array.size == 0:
        array = np.zeros((0, layout.dim))
    if array.ndim != 2 or array.shape[1] != layout.dim:
        raise DataError(f"fields have shape {array.shape}, layout needs (n, {layout.dim})")
    names = "\n".join(layout.names()).encode("utf-8")
    header = _FIELD_HEADER.pack(
        FIELD_MAGIC,
        FIELD_VERSION,
        array.shape[0],
        layout.height,
        layout.width,
        layout.c_main,
        layout.c_aux,
        len(names),
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(names)
        fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())
    logger.info(f"Wrote {array.shape[0]} fields to {path}")
    return path


def read_fields(path: PathLike) -> Tuple[np.ndarray, JointLayout]:
    """Inverse of write_fields: returns the (n, d) float32 array and the layout"""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _FIELD_HEADER.size:
        raise DataError(f"{path} is too short for a field container header")
    magic, version, count, H, W, c_main, c_aux, names_len = _FIELD_HEADER.unpack_from(blob)
    if magic != FIELD_MAGIC:
        raise DataError(f"{path} is not a field container (magic {magic!r})")
    if version != FIELD_VERSION:
        raise DataError(f"{path} has container version {version}, expected {FIELD_VERSION}")
    offset = _FIELD_HEADER.size
    names = blob[offset: offset + names_len].decode("utf-8").split("\n") if names_len else []
    offset += names_len
    layout = JointLayout(height=H, width=W, c_main=c_main, c_aux=c_aux, channel_names=names)
    expected = count * layout.dim * 4
    if len(blob) - offset != expected:
        raise DataError(f"{path} holds {len(blob) - offset} payload bytes, header implies {expected}")
    array = np.frombuffer(blob, dtype="<f4", offset=offset).reshape(count, layout.dim).astype(np.float32)
    return array, layout


def export_channel_csv(grid: np.ndarray, directory: PathLike, prefix: str, names: Optional[Sequence[str]] = None) -> List[Path]:
    """One H-row by W-column CSV per channel of an H x W x C grid (or one for an H x W grid)"""
    grid = np.asarray(grid)
    if grid.ndim == 2:
        grid = grid[..., None]
    names = list(names) if names else [f"c{c}" for c in range(grid.shape[-1])]
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for c, name in enumerate(names):
        target = directory / f"{prefix}_{name}.csv"
        np.savetxt(target, grid[..., c], delimiter=",", fmt="%.8g")
        written.append(target)
    return written


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

def _format_value(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_table(
    path: PathLike,
    header: Sequence[str],
    rows: Iterable[Sequence[Any]],
    metadata: Dict[str, Any],
) -> Path:
    """
    Write a CSV whose first line is a `# key=value ...` metadata comment,
    followed by the header row and the data rows.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    parts = []
    for key, value in metadata.items():
        rendered = value if isinstance(value, str) else json.dumps(value, sort_keys=True, separators=(",", ":"))
        parts.append(f"{key}={rendered}")
    buffer = io.StringIO()
    buffer.write("# " + " ".join(parts) + "\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    count = 0
    for row in rows:
        writer.writerow([_format_value(value) for value in row])
        count += 1
    path.write_text(buffer.getvalue(), encoding="utf-8")
    logger.info(f"Wrote {count} rows to {path}")
    return path


def read_table(path: PathLike) -> Tuple[Dict[str, str], List[Dict[str, str]]]:
    """Metadata and rows (as header-keyed string dicts) of a table written by write_table"""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# "):
        raise DataError(f"{path} has no metadata line")
    metadata = {}
    for part in lines[0][2:].split(" "):
        if "=" in part:
            key, value = part.split("=", 1)
            metadata[key] = value
    rows = list(csv.DictReader(lines[1:]))
    return metadata, rows


def write_manifest(path: PathLike, manifest: BaseModel) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path
