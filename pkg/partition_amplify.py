# partition_amplify.py
"""Partition amplification: band the kept delta by pruning rate and search one scale factor per band."""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from delta_core import DeltaModel
from errors import ArgumentError, InternalError
from oracle_engine import Oracle, OracleSpec, build_oracle
from pruners import SparseDelta, prune_dp
from significance import PruneRatePlan
from tensor_archive import LinearKey, ModelTopology
from utils import sorted_unique

logger = logging.getLogger(__name__)

# scores this close (relative) to the best one count as tied
SCORE_TIE_TOLERANCE = 1e-12


@dataclass
class PartitionSchedule:
    """
    Disjoint partitions of the kept elements, most important first.

    source holds the values the partitions select from: the dense delta for DP
    ladders, the rescaled survivors for DARE bands.
    """

    topology: ModelTopology
    source: Dict[LinearKey, np.ndarray]
    partitions: List[Dict[LinearKey, np.ndarray]]
    rates: List[float]
    method: str = "dp"
    passthrough: Dict[str, np.ndarray] = field(default_factory=dict)
    reference: Optional[DeltaModel] = None
    rate_plan: Optional[PruneRatePlan] = None
    rate: Optional[float] = None
    seed: Optional[int] = None

    def sizes(self) -> List[int]:
        return [int(sum(np.count_nonzero(m) for m in part.values())) for part in self.partitions]

    def empty(self) -> List[bool]:
        return [size == 0 for size in self.sizes()]

    def union_mask(self, key: LinearKey) -> np.ndarray:
        mask = np.zeros(self.source[key].shape, dtype=bool)
        for part in self.partitions:
            mask |= part[key]
        return mask


@dataclass
class TraceRecord:
    step: int
    gamma: float
    score: float
    candidate_hash: str
    cached: bool = False

    def to_json(self) -> Dict[str, Any]:
        return {
            "step": self.step,
            "gamma": self.gamma,
            "score": self.score,
            "candidate_hash": self.candidate_hash,
            "cached": self.cached,
        }


@dataclass
class AmplificationProfile:
    """Searched gammas, one per partition, with the full oracle trace."""

    method: str
    gammas: List[float]
    trace: List[TraceRecord]
    final_score: float
    final_hash: str = ""
    reproducible: bool = True
    evaluations: int = 0
    schedule: Optional[PartitionSchedule] = field(default=None, repr=False)

    def chosen_scores(self) -> Dict[int, float]:
        """Best recorded score of every searched step."""
        best: Dict[int, float] = {}
        for record in self.trace:
            if record.step not in best or record.score > best[record.step]:
                best[record.step] = record.score
        return best

    def to_json(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {
            "method": self.method,
            "gammas": list(self.gammas),
            "final_score": self.final_score,
            "final_hash": self.final_hash,
            "reproducible": self.reproducible,
            "evaluations": self.evaluations,
            "steps": len(self.gammas),
        }
        if self.schedule is not None:
            payload["rates"] = list(self.schedule.rates)
            payload["partition_sizes"] = self.schedule.sizes()
        return payload


def _check_rates(rates: Sequence[float]) -> List[float]:
    rates = [float(r) for r in rates]
    if not rates:
        raise ArgumentError("rate ladder must not be empty")
    if any(not 0.0 < r < 1.0 for r in rates):
        raise ArgumentError(f"every ladder rate must lie in (0, 1), got {rates}")
    if any(a <= b for a, b in zip(rates, rates[1:])):
        raise ArgumentError(f"ladder rates must be strictly descending, got {rates}")
    return rates


def build_schedule(delta: DeltaModel, plan: PruneRatePlan, rates: Sequence[float]) -> PartitionSchedule:
    """
    DP masks at each ladder rate (same plan offsets, varying alpha) cut into bands.

    Partition 0 is the mask at rates[0]; partition i is mask(rates[i]) minus mask(rates[i-1]).

    Args:
        delta: Dense delta
        plan: Rate plan of this delta; only its offsets are used
        rates: Strictly descending rates, the last one being the target

    Returns:
        PartitionSchedule whose union is the DP mask at the target rate
    """
    rates = _check_rates(rates)
    partitions: List[Dict[LinearKey, np.ndarray]] = []
    previous: Optional[Dict[LinearKey, np.ndarray]] = None
    for rate in rates:
        masks = prune_dp(delta, plan.with_alpha(rate)).masks
        if previous is None:
            partitions.append({key: mask.copy() for key, mask in masks.items()})
        else:
            for key, mask in masks.items():
                if np.any(previous[key] & ~mask):
                    raise InternalError(f"Mask at rate {rate} does not contain the previous rung for {key.label()}")
            partitions.append({key: masks[key] & ~previous[key] for key in masks})
        previous = masks

    schedule = PartitionSchedule(
        topology=delta.topology,
        source=dict(delta.tensors),
        partitions=partitions,
        rates=rates,
        method="dp",
        passthrough=dict(delta.passthrough),
        reference=delta,
        rate_plan=plan.with_alpha(rates[-1]),
        rate=rates[-1],
    )
    for rate, size in zip(rates, schedule.sizes()):
        if size == 0:
            logger.warning("Partition at rate %.3f is empty", rate)
    logger.info("Built %d partitions with sizes %s", len(partitions), schedule.sizes())
    return schedule


def build_dare_bands(sparse: SparseDelta, bands: int) -> PartitionSchedule:
    """
    Split the DARE survivors into magnitude-quantile bands, largest |value| first.

    Ties keep topology order, then flat index; band sizes differ by at most one.
    """
    if sparse.method != "dare":
        raise ArgumentError(f"DARE bands need a dare SparseDelta, got {sparse.method!r}")
    if bands < 1:
        raise ArgumentError("bands must be at least 1")

    keys = list(sparse.topology.units)
    unit_ids, flat_ids, magnitudes = [], [], []
    for uid, key in enumerate(keys):
        kept = np.flatnonzero(sparse.masks[key].ravel())
        unit_ids.append(np.full(kept.size, uid, dtype=np.int64))
        flat_ids.append(kept)
        magnitudes.append(np.abs(sparse.values[key].ravel()[kept]))
    unit_ids = np.concatenate(unit_ids) if unit_ids else np.zeros(0, dtype=np.int64)
    flat_ids = np.concatenate(flat_ids) if flat_ids else np.zeros(0, dtype=np.int64)
    magnitudes = np.concatenate(magnitudes) if magnitudes else np.zeros(0)

    order = np.argsort(-magnitudes, kind="stable")
    partitions = []
    for chunk in np.array_split(order, bands):
        part = {key: np.zeros(sparse.masks[key].size, dtype=bool) for key in keys}
        for uid, key in enumerate(keys):
            selected = flat_ids[chunk[unit_ids[chunk] == uid]]
            part[key][selected] = True
        partitions.append({key: part[key].reshape(sparse.masks[key].shape) for key in keys})

    return PartitionSchedule(
        topology=sparse.topology,
        source=dict(sparse.values),
        partitions=partitions,
        rates=[],
        method="dare",
        passthrough=dict(sparse.passthrough),
        rate=sparse.rate,
        seed=sparse.seed,
    )


def _combine(schedule: PartitionSchedule, coefficients: Sequence[float]) -> Dict[LinearKey, np.ndarray]:
    values = {}
    for key, source in schedule.source.items():
        out = np.zeros(source.shape, dtype=np.float64)
        for part, coef in zip(schedule.partitions, coefficients):
            if coef == 0.0:
                continue
            mask = part[key]
            out[mask] = source[mask] if coef == 1.0 else source[mask] * coef
        values[key] = out
    return values


def _candidate(schedule: PartitionSchedule, coefficients: Sequence[float]) -> DeltaModel:
    return DeltaModel(topology=schedule.topology, tensors=_combine(schedule, coefficients),
                      passthrough=dict(schedule.passthrough))


def assemble(schedule: PartitionSchedule, gammas: Sequence[float]) -> SparseDelta:
    """
    Scale each partition by its gamma; the mask is the union of all partitions.

    Args:
        schedule: Partition schedule
        gammas: One factor per partition

    Returns:
        SparseDelta carrying the gammas
    """
    if len(gammas) != len(schedule.partitions):
        raise ArgumentError(f"Got {len(gammas)} gammas for {len(schedule.partitions)} partitions")
    values = _combine(schedule, [float(g) for g in gammas])
    masks = {key: schedule.union_mask(key) for key in schedule.topology.units}
    return SparseDelta(
        topology=schedule.topology,
        masks=masks,
        values=values,
        kept_counts={key: int(np.count_nonzero(mask)) for key, mask in masks.items()},
        method=schedule.method,
        rate=schedule.rate,
        rate_plan=schedule.rate_plan,
        seed=schedule.seed,
        passthrough=dict(schedule.passthrough),
        gammas=[float(g) for g in gammas],
    )


def _check_grid(grid: Sequence[float]) -> List[float]:
    points = sorted_unique(grid)
    if not points:
        raise ArgumentError("gamma grid must not be empty")
    if 1.0 not in points:
        raise ArgumentError("gamma grid must contain 1.0")
    return points


def _resolve_oracle(oracle: Union[Oracle, OracleSpec], reference: Optional[DeltaModel]) -> Oracle:
    if isinstance(oracle, Oracle):
        return oracle
    if reference is None:
        raise ArgumentError("An OracleSpec needs the dense delta as reference; pass a built Oracle instead")
    return build_oracle(oracle, reference)


def pick_gamma(scored: Sequence[Tuple[float, float]]) -> Tuple[float, float]:
    """
    Argmax over (gamma, score) pairs with a tolerant tie rule.

    Scores within SCORE_TIE_TOLERANCE (relative) of the best are tied; among tied
    points the gamma closest to 1.0 wins, then the smallest.

    Returns:
        (gamma, score) of the chosen point
    """
    top = max(score for _, score in scored)
    floor = top - SCORE_TIE_TOLERANCE * max(1.0, abs(top))
    tied = [(gamma, score) for gamma, score in scored if score >= floor]
    return min(tied, key=lambda pair: (abs(pair[0] - 1.0), pair[0]))


def _coordinate_search(schedule: PartitionSchedule, oracle: Oracle, grid: List[float],
                       method: str, tail: float) -> AmplificationProfile:
    count = len(schedule.partitions)
    empty = schedule.empty()
    gammas = [1.0] * count
    trace: List[TraceRecord] = []

    for step in range(count):
        if empty[step]:
            logger.warning("Step %d: partition is empty, gamma left at 1.0", step)
            continue
        scored = []
        for gamma in grid:
            coefficients = gammas[:step] + [gamma] + [tail] * (count - step - 1)
            score, digest, cached = oracle.score(_candidate(schedule, coefficients), step)
            trace.append(TraceRecord(step, gamma, score, digest, cached))
            logger.debug("Step %d gamma %g score %.6g%s", step, gamma, score, " (cached)" if cached else "")
            scored.append((gamma, score))
        best_gamma, best_score = pick_gamma(scored)
        gammas[step] = best_gamma
        logger.info("Step %d: gamma %g, score %.6g", step, best_gamma, best_score)

    final_score, final_hash, _ = oracle.score(_candidate(schedule, gammas), count)
    return AmplificationProfile(
        method=method,
        gammas=gammas,
        trace=trace,
        final_score=final_score,
        final_hash=final_hash,
        reproducible=oracle.spec.deterministic,
        evaluations=oracle.evaluations,
        schedule=schedule,
    )


def search_method1(schedule: PartitionSchedule, oracle: Union[Oracle, OracleSpec],
                   grid: Sequence[float]) -> AmplificationProfile:
    """
    Grow the candidate one partition at a time with later partitions zeroed.

    Step k scores sum_{i<k} gamma_i P_i + g P_k for every grid point g and keeps
    the argmax (see pick_gamma for ties).
    """
    return _coordinate_search(schedule, _resolve_oracle(oracle, schedule.reference), _check_grid(grid), "method1", 0.0)


def search_method2(schedule: PartitionSchedule, oracle: Union[Oracle, OracleSpec],
                   grid: Sequence[float]) -> AmplificationProfile:
    """Like search_method1, but later partitions stay present at unit scale."""
    return _coordinate_search(schedule, _resolve_oracle(oracle, schedule.reference), _check_grid(grid), "method2", 1.0)


def amplify_dare(sparse: SparseDelta, oracle: Union[Oracle, OracleSpec], grid: Sequence[float], bands: int,
                 reference: Optional[DeltaModel] = None) -> AmplificationProfile:
    """
    Dynamic reduction for DARE: magnitude bands searched with the Method 2 loop.

    Args:
        sparse: Output of prune_dare
        oracle: Built oracle, or a spec together with the dense reference delta
        grid: Factors including at least one value below 1.0
        bands: Number of magnitude bands
        reference: Dense delta, needed only when oracle is an OracleSpec

    Returns:
        AmplificationProfile with method "dare_reduction"
    """
    points = _check_grid(grid)
    if not any(g < 1.0 for g in points):
        logger.warning("Reduction grid %s has no factor below 1.0; bands can only be amplified", points)
    schedule = build_dare_bands(sparse, bands)
    return _coordinate_search(schedule, _resolve_oracle(oracle, reference), points, "dare_reduction", 1.0)
