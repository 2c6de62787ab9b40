# tensor_archive.py
"""Single-file tensor checkpoints and their (layer, linear unit) index."""

import json
import logging
import os
import re
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from errors import ArgumentError, IoError, ParseError, TopologyError

logger = logging.getLogger(__name__)

METADATA_KEY = "__metadata__"
HEADER_LENGTH_BYTES = 8

# Storage dtypes: checkpoints are f32, deltas keep f64, masks are u8
DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "u8": np.dtype("u1"),
}


def _dtype_tag(array: np.ndarray) -> str:
    for tag, dtype in DTYPES.items():
        if array.dtype == dtype or array.dtype == dtype.newbyteorder("="):
            return tag
    raise ArgumentError(f"Unsupported tensor dtype {array.dtype}; expected one of {list(DTYPES)}")


class TensorArchive:
    """Ordered, immutable map of tensor name to numpy array plus a string metadata map."""

    def __init__(self, entries: Optional[Mapping[str, np.ndarray]] = None,
                 metadata: Optional[Mapping[str, str]] = None):
        self._entries: Dict[str, np.ndarray] = {}
        for name, value in (entries or {}).items():
            array = np.ascontiguousarray(value)
            if array.dtype == np.bool_:
                array = array.astype(np.uint8)
            _dtype_tag(array)
            if array.size < 1:
                raise ArgumentError(f"Tensor {name!r} has no elements")
            if array.flags.writeable:
                array = array.copy()
                array.setflags(write=False)
            self._entries[str(name)] = array
        self.metadata: Dict[str, str] = {str(k): str(v) for k, v in (metadata or {}).items()}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, name: object) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def names(self) -> List[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def element_count(self) -> int:
        return int(sum(a.size for a in self._entries.values()))

    def equals(self, other: "TensorArchive") -> bool:
        """Bit-exact comparison of names, order, dtypes, shapes and payload bytes."""
        if self.names() != other.names():
            return False
        for name, array in self._entries.items():
            theirs = other[name]
            if array.dtype != theirs.dtype or array.shape != theirs.shape:
                return False
            if array.tobytes() != theirs.tobytes():
                return False
        return True


@dataclass(frozen=True, order=True)
class LinearKey:
    """One linear unit j of model layer l, bound to the tensor that holds it."""

    layer: int
    unit: str
    tensor_name: str = field(default="", compare=False)

    def label(self) -> str:
        return f"{self.layer}.{self.unit}"


@dataclass
class ModelTopology:
    """Linear units found in an archive, grouped by model layer."""

    layer_count: int
    units: List[LinearKey]
    unclassified: List[str]

    def layers(self) -> List[int]:
        return sorted({key.layer for key in self.units})

    def units_in_layer(self, layer: int) -> List[LinearKey]:
        return [key for key in self.units if key.layer == layer]

    def find(self, layer: int, unit: str) -> LinearKey:
        for key in self.units:
            if key.layer == layer and key.unit == unit:
                return key
        raise TopologyError(f"No linear unit {unit!r} in layer {layer}")

    def to_json(self) -> Dict[str, Any]:
        return {
            "layer_count": self.layer_count,
            "units": [[key.layer, key.unit, key.tensor_name] for key in self.units],
            "unclassified": list(self.unclassified),
        }

    @classmethod
    def from_json(cls, payload: Mapping[str, Any]) -> "ModelTopology":
        try:
            units = [LinearKey(int(l), str(j), str(name)) for l, j, name in payload["units"]]
            unclassified = [str(name) for name in payload["unclassified"]]
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"Malformed topology record: {e}") from e
        return cls(layer_count=len({k.layer for k in units}), units=units, unclassified=unclassified)


@dataclass
class NamingRule:
    """Regex with a named 'layer' group and either a 'unit' group or a fixed unit label."""

    pattern: str
    unit: Optional[str] = None

    def __post_init__(self):
        try:
            self._regex = re.compile(self.pattern)
        except re.error as e:
            raise ArgumentError(f"Invalid naming rule {self.pattern!r}: {e}") from e
        groups = self._regex.groupindex
        if "layer" not in groups:
            raise ArgumentError(f"Naming rule {self.pattern!r} needs a (?P<layer>...) group")
        if "unit" not in groups and not self.unit:
            raise ArgumentError(f"Naming rule {self.pattern!r} needs a (?P<unit>...) group or a fixed unit")

    def match(self, name: str) -> Optional[Tuple[int, str]]:
        found = self._regex.search(name)
        if not found:
            return None
        unit = self.unit or found.group("unit")
        return int(found.group("layer")), unit


def _as_rules(naming_rules: Sequence[Any]) -> List[NamingRule]:
    rules = []
    for rule in naming_rules:
        if isinstance(rule, NamingRule):
            rules.append(rule)
        elif isinstance(rule, Mapping):
            pattern, unit = rule.get("pattern"), rule.get("unit")
            if not isinstance(pattern, str):
                raise ArgumentError(f"Naming rule {dict(rule)!r} needs a string 'pattern'")
            if unit is not None and not isinstance(unit, str):
                raise ArgumentError(f"Naming rule {pattern!r} has a non-string 'unit'")
            rules.append(NamingRule(pattern=pattern, unit=unit))
        elif isinstance(rule, str):
            rules.append(NamingRule(pattern=rule))
        else:
            raise ArgumentError(f"Naming rule must be a pattern string or an object, got {rule!r}")
    return rules


def _reject_duplicates(pairs: List[Tuple[str, Any]]) -> Dict[str, Any]:
    result: Dict[str, Any] = {}
    for key, value in pairs:
        if key in result:
            raise ParseError(f"Duplicate tensor name {key!r} in archive header")
        result[key] = value
    return result


def load_archive(path: str) -> TensorArchive:
    """
    Load an archive: 8-byte little-endian header length, JSON header, raw payload.

    Args:
        path: Archive file path

    Returns:
        TensorArchive with every tensor materialized in declaration order
    """
    try:
        with open(path, "rb") as handle:
            data = handle.read()
    except OSError as e:
        raise IoError(f"Cannot read archive {path}: {e}") from e

    if len(data) < HEADER_LENGTH_BYTES:
        raise IoError(f"Archive {path} is truncated before the header length")
    (header_len,) = struct.unpack("<Q", data[:HEADER_LENGTH_BYTES])
    payload_start = HEADER_LENGTH_BYTES + header_len
    if payload_start > len(data):
        raise IoError(f"Archive {path} is truncated inside the header")

    try:
        header = json.loads(data[HEADER_LENGTH_BYTES:payload_start].decode("utf-8"),
                            object_pairs_hook=_reject_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"Archive {path} has a malformed header: {e}") from e
    if not isinstance(header, dict):
        raise ParseError(f"Archive {path} header must be a JSON object")

    metadata = header.pop(METADATA_KEY, {})
    if not isinstance(metadata, dict) or not all(isinstance(v, str) for v in metadata.values()):
        raise ParseError(f"Archive {path} metadata must be a string map")

    payload = memoryview(data)[payload_start:]
    entries: Dict[str, np.ndarray] = {}
    cursor = 0
    for name, info in header.items():
        try:
            dtype = DTYPES[info["dtype"]]
            shape = [int(dim) for dim in info["shape"]]
            begin, end = int(info["offset_begin"]), int(info["offset_end"])
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"Tensor {name!r} has a malformed header entry: {e}") from e
        if any(dim < 1 for dim in shape):
            raise ParseError(f"Tensor {name!r} has a non-positive dimension {shape}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if begin != cursor:
            raise ParseError(f"Tensor {name!r} is not contiguous with its predecessor")
        if end - begin != count * dtype.itemsize:
            raise ParseError(f"Tensor {name!r} byte range does not match shape {shape}")
        if end > len(payload):
            raise IoError(f"Archive {path} payload is truncated at tensor {name!r}")
        entries[name] = np.frombuffer(payload, dtype=dtype, count=count, offset=begin).reshape(shape)
        cursor = end

    if cursor != len(payload):
        raise ParseError(f"Archive {path} has {len(payload) - cursor} trailing payload bytes")

    logger.debug("Loaded %d tensors from %s", len(entries), path)
    return TensorArchive(entries, metadata)


def save_archive(archive: TensorArchive, path: str) -> None:
    """
    Write an archive readable by load_archive with identical content.

    Args:
        archive: Archive to write
        path: Destination file path
    """
    header: Dict[str, Any] = {}
    chunks = []
    cursor = 0
    for name, array in archive.items():
        tag = _dtype_tag(array)
        raw = np.ascontiguousarray(array, dtype=DTYPES[tag]).tobytes()
        header[name] = {
            "dtype": tag,
            "shape": [int(dim) for dim in array.shape],
            "offset_begin": cursor,
            "offset_end": cursor + len(raw),
        }
        chunks.append(raw)
        cursor += len(raw)
    if archive.metadata:
        header[METADATA_KEY] = dict(archive.metadata)

    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    tmp_path = f"{path}.tmp"
    try:
        with open(tmp_path, "wb") as handle:
            handle.write(struct.pack("<Q", len(header_bytes)))
            handle.write(header_bytes)
            for raw in chunks:
                handle.write(raw)
        os.replace(tmp_path, path)
    except OSError as e:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise IoError(f"Cannot write archive {path}: {e}") from e
    logger.debug("Saved %d tensors to %s", len(archive), path)


def parse_topology(archive: TensorArchive, naming_rules: Sequence[Any]) -> ModelTopology:
    """
    Classify archive tensors into (layer, linear unit) keys.

    Args:
        archive: Archive to index
        naming_rules: NamingRule objects or {"pattern", "unit"} dicts

    Returns:
        ModelTopology; names matching no rule are listed as unclassified
    """
    if not naming_rules:
        raise ArgumentError("naming_rules must not be empty")
    rules = _as_rules(naming_rules)

    units: List[LinearKey] = []
    unclassified: List[str] = []
    seen: Dict[Tuple[int, str], str] = {}
    for name in archive.names():
        matches = {m for m in (rule.match(name) for rule in rules) if m is not None}
        if not matches:
            unclassified.append(name)
            continue
        if len(matches) > 1:
            raise TopologyError(f"Tensor {name!r} matches conflicting rules: {sorted(matches)}")
        layer, unit = matches.pop()
        if (layer, unit) in seen:
            raise TopologyError(f"Tensors {seen[(layer, unit)]!r} and {name!r} both map to layer {layer} unit {unit}")
        seen[(layer, unit)] = name
        units.append(LinearKey(layer, unit, name))

    layer_count = len({key.layer for key in units})
    logger.debug("Topology: %d layers, %d linear units, %d unclassified", layer_count, len(units), len(unclassified))
    return ModelTopology(layer_count=layer_count, units=units, unclassified=unclassified)
