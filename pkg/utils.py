# utils.py
"""Utility functions for the DPPA toolkit."""

import csv
import hashlib
import json
import logging
import math
import os
import re
from typing import Any, Dict, Iterable, List, Mapping, Sequence

import numpy as np

from config import LOG_LEVEL
from errors import ArgumentError, IoError

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_logging(level: str = LOG_LEVEL) -> None:
    """Configure the root logger once per process."""
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.INFO), format=LOG_FORMAT)


def setup_directories(*paths: str) -> None:
    """Create output directories if they don't exist."""
    for path in paths:
        if path:
            os.makedirs(path, exist_ok=True)


def validate_fraction(name: str, value: float, *, upper_open: bool = False) -> float:
    """
    Check that a rate lies in [0, 1] (or [0, 1) when upper_open).

    Args:
        name: Parameter name used in the error message
        value: Value to check
        upper_open: Whether 1.0 itself is rejected

    Returns:
        The value as float
    """
    value = float(value)
    upper_ok = value < 1.0 if upper_open else value <= 1.0
    if math.isnan(value) or value < 0.0 or not upper_ok:
        bound = "[0, 1)" if upper_open else "[0, 1]"
        raise ArgumentError(f"{name} must lie in {bound}, got {value}")
    return value


def kept_count(count: int, rate: float) -> int:
    """
    Number of elements a unit keeps at a pruning rate.

    Args:
        count: Element count of the unit
        rate: Fraction of elements to prune

    Returns:
        floor(count * (1 - rate) + 0.5), clamped into [0, count]
    """
    k = int(math.floor(count * (1.0 - rate) + 0.5))
    return min(max(k, 0), count)


def content_hash(named_arrays: Iterable[tuple]) -> str:
    """
    SHA-256 over (name, dtype, shape, bytes) of each array, in the given order.

    Args:
        named_arrays: Iterable of (name, ndarray) pairs

    Returns:
        Hex digest
    """
    digest = hashlib.sha256()
    for name, array in named_arrays:
        array = np.ascontiguousarray(array)
        digest.update(str(name).encode("utf-8"))
        digest.update(array.dtype.str.encode("ascii"))
        digest.update(repr(tuple(array.shape)).encode("ascii"))
        digest.update(array.tobytes())
    return digest.hexdigest()


def hash_json(payload: Any) -> str:
    """SHA-256 of the canonical JSON encoding of a payload."""
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


def write_json(path: str, payload: Any) -> str:
    """Write a JSON document, creating the parent directory."""
    setup_directories(os.path.dirname(path))
    try:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(payload, handle, indent=2, sort_keys=True)
    except OSError as e:
        raise IoError(f"Cannot write {path}: {e}") from e
    return path


def write_jsonl(path: str, records: Iterable[Mapping[str, Any]]) -> str:
    """Write one JSON object per line."""
    setup_directories(os.path.dirname(path))
    try:
        with open(path, "w", encoding="utf-8") as handle:
            for record in records:
                handle.write(json.dumps(record, sort_keys=True) + "\n")
    except OSError as e:
        raise IoError(f"Cannot write {path}: {e}") from e
    return path


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    """Write a CSV table with a header row."""
    setup_directories(os.path.dirname(path))
    try:
        with open(path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as e:
        raise IoError(f"Cannot write {path}: {e}") from e
    return path


def read_json(path: str) -> Any:
    """Read a JSON document, mapping OS failures to IoError."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return json.load(handle)
    except OSError as e:
        raise IoError(f"Cannot read {path}: {e}") from e


def sanitize_filename(filename: str) -> str:
    """
    Sanitize a filename stem by removing invalid characters.

    Args:
        filename: Original filename

    Returns:
        Sanitized filename
    """
    filename = re.sub(r'[<>:"/\\|?*]', '', filename)
    filename = filename.replace(' ', '_')
    if len(filename) > 100:
        filename = filename[:100]
    return filename


def file_stem(path: str) -> str:
    """Filename without directory and extension, sanitized for reuse in output names."""
    return sanitize_filename(os.path.splitext(os.path.basename(path))[0])


def get_file_size(filepath: str) -> str:
    """
    Get human-readable file size.

    Args:
        filepath: Path to the file

    Returns:
        Human-readable file size string
    """
    try:
        size_bytes = float(os.path.getsize(filepath))
    except OSError:
        return "Unknown"
    for unit in ['B', 'KB', 'MB', 'GB']:
        if size_bytes < 1024.0:
            return f"{size_bytes:.1f} {unit}"
        size_bytes /= 1024.0
    return f"{size_bytes:.1f} TB"


def sorted_unique(values: Iterable[float]) -> List[float]:
    """Ascending, de-duplicated list of floats."""
    return sorted({float(v) for v in values})
