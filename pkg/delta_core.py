# delta_core.py
"""Delta parameters: extraction, merging back onto the base model, and offset statistics."""

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from errors import ArgumentError, ParseError, ShapeError, TopologyError
from tensor_archive import LinearKey, ModelTopology, TensorArchive, parse_topology

logger = logging.getLogger(__name__)

ARCHIVE_KIND_DELTA = "delta"


@dataclass
class DeltaModel:
    """finetuned - base per tensor, held in float64 and addressable by LinearKey."""

    topology: ModelTopology
    tensors: Dict[LinearKey, np.ndarray]
    passthrough: Dict[str, np.ndarray] = field(default_factory=dict)

    def named_tensors(self) -> Iterator[Tuple[str, np.ndarray]]:
        """Classified tensors in topology order, then passthrough tensors."""
        for key in self.topology.units:
            yield key.tensor_name, self.tensors[key]
        for name, array in self.passthrough.items():
            yield name, array

    def by_name(self) -> Dict[str, np.ndarray]:
        return dict(self.named_tensors())

    def count(self, key: LinearKey) -> int:
        return int(self.tensors[key].size)

    def classified_count(self) -> int:
        return int(sum(a.size for a in self.tensors.values()))

    def scaled(self, factor: float) -> "DeltaModel":
        return DeltaModel(
            topology=self.topology,
            tensors={k: v * factor for k, v in self.tensors.items()},
            passthrough={k: v * factor for k, v in self.passthrough.items()},
        )


@dataclass
class OffsetQuantileReport:
    """Empirical quantiles of the pooled delta values plus the global extremes."""

    percentiles: List[float]
    values: List[float]
    min: float
    max: float
    count: int = 0

    def to_json(self) -> Dict[str, object]:
        return {
            "percentiles": list(self.percentiles),
            "values": list(self.values),
            "min": self.min,
            "max": self.max,
            "count": self.count,
        }

    def table_row(self) -> Dict[str, float]:
        """Min, one column per percentile, max; the layout of an offset table row."""
        row = {"min": self.min}
        for p, v in zip(self.percentiles, self.values):
            row[f"{p * 100:g}%"] = v
        row["max"] = self.max
        return row


def compute_delta(base: TensorArchive, finetuned: TensorArchive, topology: ModelTopology) -> DeltaModel:
    """
    Compute delta = finetuned - base for every tensor.

    Args:
        base: Base checkpoint
        finetuned: Checkpoint fine-tuned from base
        topology: Linear-unit index of base

    Returns:
        DeltaModel with classified and passthrough deltas
    """
    missing = [name for name in base.names() if name not in finetuned]
    if missing:
        raise TopologyError(f"Fine-tuned checkpoint is missing tensor {missing[0]!r}")
    extra = [name for name in finetuned.names() if name not in base]
    if extra:
        raise TopologyError(f"Fine-tuned checkpoint has tensor {extra[0]!r} that the base lacks")

    deltas: Dict[str, np.ndarray] = {}
    for name in base.names():
        if base[name].shape != finetuned[name].shape:
            raise ShapeError(
                f"Tensor {name!r} has shape {list(base[name].shape)} in base "
                f"but {list(finetuned[name].shape)} in fine-tuned"
            )
        deltas[name] = finetuned[name].astype(np.float64) - base[name].astype(np.float64)

    tensors: Dict[LinearKey, np.ndarray] = {}
    for key in topology.units:
        if key.tensor_name not in deltas:
            raise TopologyError(f"Topology names tensor {key.tensor_name!r} absent from the base checkpoint")
        tensors[key] = deltas.pop(key.tensor_name)

    logger.info("Computed delta over %d linear units and %d passthrough tensors", len(tensors), len(deltas))
    return DeltaModel(topology=topology, tensors=tensors, passthrough=deltas)


def merge(base: TensorArchive, processed_deltas: Sequence[DeltaModel],
          coefficients: Optional[Sequence[float]] = None) -> TensorArchive:
    """
    Add processed deltas onto the base model: W_m = W_B + sum_i c_i * delta_i.

    Accumulation runs per element in float64 in delta-list order and is rounded
    once to the base dtype.

    Args:
        base: Shared base checkpoint
        processed_deltas: Pruned/amplified deltas, one per domain
        coefficients: Optional per-delta scalars, default 1.0 each

    Returns:
        Merged TensorArchive with the base's names, order and metadata
    """
    if not processed_deltas:
        raise ArgumentError("merge needs at least one delta")
    if coefficients is None:
        coefficients = [1.0] * len(processed_deltas)
    if len(coefficients) != len(processed_deltas):
        raise ArgumentError(f"Got {len(coefficients)} coefficients for {len(processed_deltas)} deltas")

    lookups = [delta.by_name() for delta in processed_deltas]
    for index, lookup in enumerate(lookups):
        unknown = [name for name in lookup if name not in base]
        if unknown:
            raise TopologyError(f"Delta {index} has tensor {unknown[0]!r} that the base lacks")

    merged: Dict[str, np.ndarray] = {}
    for name, weights in base.items():
        acc = weights.astype(np.float64)
        for index, (lookup, coef) in enumerate(zip(lookups, coefficients)):
            if name not in lookup:
                raise TopologyError(f"Delta {index} is missing tensor {name!r}")
            update = lookup[name]
            if update.shape != weights.shape:
                raise ShapeError(f"Delta {index} tensor {name!r} has shape {list(update.shape)}, base has {list(weights.shape)}")
            acc = acc + update if coef == 1.0 else acc + float(coef) * update
        merged[name] = acc.astype(weights.dtype)

    logger.info("Merged %d deltas into %d tensors", len(processed_deltas), len(merged))
    return TensorArchive(merged, base.metadata)


def offset_quantiles(delta: DeltaModel, percentiles: Sequence[float]) -> OffsetQuantileReport:
    """
    Empirical quantiles (linear interpolation) over all pooled delta values.

    Args:
        delta: Delta to summarize, classified and passthrough tensors alike
        percentiles: Sorted fractions in [0, 1]

    Returns:
        OffsetQuantileReport
    """
    percentiles = [float(p) for p in percentiles]
    if any(p < 0.0 or p > 1.0 for p in percentiles):
        raise ArgumentError("percentiles must lie in [0, 1]")
    if any(a > b for a, b in zip(percentiles, percentiles[1:])):
        raise ArgumentError("percentiles must be sorted")

    arrays = [array.ravel() for _, array in delta.named_tensors()]
    if not arrays:
        raise ArgumentError("offset_quantiles needs a nonempty delta")
    pooled = np.concatenate(arrays).astype(np.float64, copy=False)

    values = np.quantile(pooled, percentiles, method="linear").tolist() if percentiles else []
    return OffsetQuantileReport(
        percentiles=percentiles,
        values=[float(v) for v in values],
        min=float(pooled.min()),
        max=float(pooled.max()),
        count=int(pooled.size),
    )


def delta_to_archive(delta: DeltaModel, kind: str = ARCHIVE_KIND_DELTA,
                     extra_metadata: Optional[Dict[str, str]] = None) -> TensorArchive:
    """Pack a delta into an archive of float64 tensors with its topology in the metadata."""
    metadata = {"kind": kind, "topology": json.dumps(delta.topology.to_json())}
    metadata.update(extra_metadata or {})
    return TensorArchive(dict(delta.named_tensors()), metadata)


def archive_to_delta(archive: TensorArchive, naming_rules: Optional[Sequence] = None) -> DeltaModel:
    """
    Rebuild a DeltaModel from an archive written by delta_to_archive.

    Args:
        archive: Delta archive
        naming_rules: Used only when the archive carries no topology record

    Returns:
        DeltaModel in float64
    """
    if "topology" in archive.metadata:
        try:
            topology = ModelTopology.from_json(json.loads(archive.metadata["topology"]))
        except json.JSONDecodeError as e:
            raise ParseError(f"Delta archive topology record is not JSON: {e}") from e
    elif naming_rules:
        topology = parse_topology(archive, naming_rules)
    else:
        raise ParseError("Delta archive has no topology record and no naming rules were given")

    tensors: Dict[LinearKey, np.ndarray] = {}
    for key in topology.units:
        if key.tensor_name not in archive:
            raise TopologyError(f"Delta archive is missing tensor {key.tensor_name!r}")
        tensors[key] = archive[key.tensor_name].astype(np.float64)
    classified = {key.tensor_name for key in topology.units}
    passthrough = {name: array.astype(np.float64) for name, array in archive.items() if name not in classified}
    return DeltaModel(topology=topology, tensors=tensors, passthrough=passthrough)
