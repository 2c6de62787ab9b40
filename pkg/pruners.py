# pruners.py
"""Delta sparsification: magnitude, OWL-style, DP and DARE pruners."""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional

import numpy as np

from config import DEFAULT_LAMBDA, DEFAULT_N
from delta_core import DeltaModel
from errors import ArgumentError, ParseError, TopologyError
from significance import PruneRatePlan, compute_significance, plan_from_json, plan_layer_rates
from tensor_archive import LinearKey, ModelTopology, TensorArchive
from utils import kept_count, validate_fraction

logger = logging.getLogger(__name__)

ARCHIVE_KIND_SPARSE = "sparse"
MASK_SUFFIX = "::mask"


@dataclass
class SparseDelta:
    """Masked delta: values are zero wherever the mask is zero, kept_counts are exact popcounts."""

    topology: ModelTopology
    masks: Dict[LinearKey, np.ndarray]
    values: Dict[LinearKey, np.ndarray]
    kept_counts: Dict[LinearKey, int]
    method: str
    rate: Optional[float] = None
    rate_plan: Optional[PruneRatePlan] = None
    seed: Optional[int] = None
    passthrough: Dict[str, np.ndarray] = field(default_factory=dict)
    gammas: Optional[List[float]] = None

    def to_delta(self) -> DeltaModel:
        return DeltaModel(topology=self.topology, tensors=dict(self.values), passthrough=dict(self.passthrough))

    def total_count(self) -> int:
        return int(sum(m.size for m in self.masks.values()))

    def total_kept(self) -> int:
        return int(sum(self.kept_counts.values()))

    def global_sparsity(self) -> float:
        total = self.total_count()
        return 1.0 - self.total_kept() / total if total else 0.0

    def unit_sparsity(self, key: LinearKey) -> float:
        return 1.0 - self.kept_counts[key] / self.masks[key].size

    def target_rate(self, key: LinearKey) -> Optional[float]:
        if self.rate_plan is not None:
            return self.rate_plan.theta[key]
        return self.rate


def topk_mask(values: np.ndarray, k: int) -> np.ndarray:
    """
    Keep the k largest-magnitude elements; among equal magnitudes the lower flat index wins.

    Args:
        values: Tensor of any shape
        k: Number of elements to keep

    Returns:
        Boolean mask shaped like values
    """
    flat = np.abs(values).ravel()
    mask = np.zeros(flat.size, dtype=bool)
    if k > 0:
        order = np.argsort(-flat, kind="stable")
        mask[order[:k]] = True
    return mask.reshape(values.shape)


def _prune_at_rates(delta: DeltaModel, rates: Mapping[LinearKey, float], method: str,
                    rate: Optional[float], plan: Optional[PruneRatePlan] = None) -> SparseDelta:
    masks, values, kept = {}, {}, {}
    for key in delta.topology.units:
        tensor = delta.tensors[key]
        k = kept_count(tensor.size, rates[key])
        mask = topk_mask(tensor, k)
        masks[key] = mask
        values[key] = np.where(mask, tensor, 0.0)
        kept[key] = int(np.count_nonzero(mask))
        logger.debug("%s %s: rate %.4f keeps %d of %d", method, key.label(), rates[key], k, tensor.size)
    sparse = SparseDelta(
        topology=delta.topology,
        masks=masks,
        values=values,
        kept_counts=kept,
        method=method,
        rate=rate,
        rate_plan=plan,
        passthrough=dict(delta.passthrough),
    )
    logger.info("%s pruning: realized global sparsity %.4f", method, sparse.global_sparsity())
    return sparse


def prune_magnitude(delta: DeltaModel, alpha: float) -> SparseDelta:
    """Within each linear unit keep the round(count * (1 - alpha)) largest-|delta| elements."""
    alpha = validate_fraction("alpha", alpha)
    return _prune_at_rates(delta, {key: alpha for key in delta.topology.units}, "magnitude", alpha)


def prune_owl(delta: DeltaModel, alpha: float, lam: float = DEFAULT_LAMBDA, n_factor: float = DEFAULT_N,
              scope: str = "global", mode: str = "normalized") -> SparseDelta:
    """Magnitude pruning at a per-layer rate clip(alpha + norm(dif(l))); no unit-level term."""
    report = compute_significance(delta, n_factor, scope=scope, mode=mode)
    plan = plan_layer_rates(report, alpha, lam)
    return _prune_at_rates(delta, plan.theta, "owl", plan.alpha, plan)


def prune_dp(delta: DeltaModel, plan: PruneRatePlan) -> SparseDelta:
    """Magnitude pruning within each linear unit at its planned rate theta."""
    expected = {key: delta.count(key) for key in delta.topology.units}
    planned = dict(plan.unit_counts)
    if set(expected) != set(planned):
        raise TopologyError("Rate plan and delta cover different linear units")
    for key, count in expected.items():
        if planned[key] != count:
            raise TopologyError(f"Rate plan counts {planned[key]} elements for {key.label()}, delta has {count}")
    return _prune_at_rates(delta, plan.theta, "dp", plan.alpha, plan)


def tensor_rng(seed: int, tensor_name: str) -> np.random.Generator:
    """Generator whose stream depends only on (seed, tensor_name)."""
    words = np.frombuffer(hashlib.sha256(tensor_name.encode("utf-8")).digest()[:16], dtype="<u4")
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(w) for w in words]))


def prune_dare(delta: DeltaModel, p: float, seed: int) -> SparseDelta:
    """
    Drop each element with probability p and rescale survivors by 1 / (1 - p).

    Args:
        delta: Delta to sparsify
        p: Drop probability in [0, 1)
        seed: Non-negative seed; each tensor derives its own stream from (seed, name)

    Returns:
        SparseDelta with method "dare"
    """
    p = validate_fraction("p", p, upper_open=True)
    if int(seed) < 0:
        raise ArgumentError(f"seed must be non-negative, got {seed}")
    scale = 1.0 / (1.0 - p)
    masks, values, kept = {}, {}, {}
    for key in delta.topology.units:
        tensor = delta.tensors[key]
        mask = tensor_rng(seed, key.tensor_name).random(tensor.shape) >= p
        masks[key] = mask
        values[key] = np.where(mask, tensor * scale, 0.0)
        kept[key] = int(np.count_nonzero(mask))
    sparse = SparseDelta(
        topology=delta.topology,
        masks=masks,
        values=values,
        kept_counts=kept,
        method="dare",
        rate=p,
        seed=int(seed),
        passthrough=dict(delta.passthrough),
    )
    logger.info("dare pruning: p %.3f, realized global sparsity %.4f", p, sparse.global_sparsity())
    return sparse


def sparsity_summary(sparse: SparseDelta) -> Dict[str, Any]:
    """Realized sparsity per unit and overall, next to each unit's target rate."""
    units = []
    for key in sparse.topology.units:
        units.append({
            "layer": key.layer,
            "unit": key.unit,
            "count": int(sparse.masks[key].size),
            "kept": sparse.kept_counts[key],
            "sparsity": sparse.unit_sparsity(key),
            "target": sparse.target_rate(key),
        })
    return {
        "method": sparse.method,
        "rate": sparse.rate,
        "seed": sparse.seed,
        "total": sparse.total_count(),
        "kept": sparse.total_kept(),
        "global_sparsity": sparse.global_sparsity(),
        "units": units,
    }


def sparse_to_archive(sparse: SparseDelta) -> TensorArchive:
    """Values as float64 tensors, masks as 0/1 uint8 tensors, provenance in the metadata."""
    entries: Dict[str, np.ndarray] = {}
    for key in sparse.topology.units:
        entries[key.tensor_name] = sparse.values[key]
        entries[key.tensor_name + MASK_SUFFIX] = sparse.masks[key].astype(np.uint8)
    entries.update(sparse.passthrough)
    metadata = {
        "kind": ARCHIVE_KIND_SPARSE,
        "method": sparse.method,
        "topology": json.dumps(sparse.topology.to_json()),
    }
    if sparse.rate is not None:
        metadata["p" if sparse.method == "dare" else "alpha"] = repr(float(sparse.rate))
    if sparse.seed is not None:
        metadata["seed"] = str(sparse.seed)
    if sparse.rate_plan is not None:
        metadata["plan_hash"] = sparse.rate_plan.plan_hash()
        metadata["plan"] = json.dumps(sparse.rate_plan.to_json())
    if sparse.gammas is not None:
        metadata["gammas"] = json.dumps(sparse.gammas)
    return TensorArchive(entries, metadata)


def archive_to_sparse(archive: TensorArchive) -> SparseDelta:
    """Rebuild a SparseDelta from an archive written by sparse_to_archive."""
    meta = archive.metadata
    if meta.get("kind") != ARCHIVE_KIND_SPARSE:
        raise ParseError(f"Archive kind is {meta.get('kind')!r}, expected {ARCHIVE_KIND_SPARSE!r}")
    try:
        topology = ModelTopology.from_json(json.loads(meta["topology"]))
        method = meta["method"]
        rate_text = meta.get("p", meta.get("alpha"))
        rate = float(rate_text) if rate_text is not None else None
        seed = int(meta["seed"]) if "seed" in meta else None
        plan = plan_from_json(json.loads(meta["plan"])) if "plan" in meta else None
        gammas = [float(g) for g in json.loads(meta["gammas"])] if "gammas" in meta else None
    except (KeyError, ValueError) as e:
        raise ParseError(f"Sparse archive metadata is malformed: {e}") from e

    masks, values, kept = {}, {}, {}
    for key in topology.units:
        mask_name = key.tensor_name + MASK_SUFFIX
        if key.tensor_name not in archive or mask_name not in archive:
            raise TopologyError(f"Sparse archive is missing values or mask for {key.tensor_name!r}")
        mask = archive[mask_name].astype(bool)
        value = archive[key.tensor_name].astype(np.float64)
        if mask.shape != value.shape:
            raise ParseError(f"Mask and values of {key.tensor_name!r} differ in shape")
        if np.any(value[~mask] != 0.0):
            raise ParseError(f"Tensor {key.tensor_name!r} has values outside its mask")
        masks[key] = mask
        values[key] = value
        kept[key] = int(np.count_nonzero(mask))

    classified = {key.tensor_name for key in topology.units}
    passthrough = {
        name: array.astype(np.float64)
        for name, array in archive.items()
        if name not in classified and not name.endswith(MASK_SUFFIX)
    }
    return SparseDelta(
        topology=topology,
        masks=masks,
        values=values,
        kept_counts=kept,
        method=method,
        rate=rate,
        rate_plan=plan,
        seed=seed,
        passthrough=passthrough,
        gammas=gammas,
    )
