# metrics_analysis.py
"""Task-Ratio / Domain-Ratio metrics and the structural reports of a pruned delta."""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Sequence, Tuple

import numpy as np

from config import STRUCTURE_DISPLAY_SCALE
from errors import ArgumentError, ParseError, TopologyError
from pruners import SparseDelta
from tensor_archive import LinearKey
from utils import read_json

logger = logging.getLogger(__name__)


@dataclass
class TaskScore:
    name: str
    dense: float
    pruned: float


@dataclass
class TaskScoreSet:
    """Dense and pruned benchmark scores of one domain's tasks."""

    domain: str
    entries: List[TaskScore]

    def __post_init__(self):
        names = [entry.name for entry in self.entries]
        if len(set(names)) != len(names):
            raise ArgumentError(f"Task names must be unique in domain {self.domain!r}")
        for entry in self.entries:
            if entry.dense < 0 or entry.pruned < 0:
                raise ArgumentError(f"Task {entry.name!r} has a negative score")


@dataclass
class DomainReport:
    domain: str
    task_ratios: Dict[str, float]
    domain_ratio: float
    degenerate: bool = False

    def percent(self) -> float:
        return self.domain_ratio * 100.0

    def to_json(self) -> Dict[str, Any]:
        return {
            "domain": self.domain,
            "task_ratios": dict(self.task_ratios),
            "domain_ratio": self.domain_ratio,
            "domain_ratio_pct": self.percent(),
            "degenerate": self.degenerate,
        }


@dataclass
class StructureReport:
    """Kept-element counts per layer, per unit, and along each axis of selected units."""

    per_layer_kept: Dict[int, int]
    per_unit_kept: Dict[LinearKey, int]
    row_kept: Dict[LinearKey, List[int]] = field(default_factory=dict)
    col_kept: Dict[LinearKey, List[int]] = field(default_factory=dict)
    row_mass: Dict[LinearKey, List[float]] = field(default_factory=dict)
    col_mass: Dict[LinearKey, List[float]] = field(default_factory=dict)
    display_scale: float = STRUCTURE_DISPLAY_SCALE

    def to_json(self) -> Dict[str, Any]:
        return {
            "display_scale": self.display_scale,
            "per_layer_kept": {str(l): k for l, k in sorted(self.per_layer_kept.items())},
            "per_unit_kept": {key.label(): k for key, k in self.per_unit_kept.items()},
            "row_kept": {key.label(): v for key, v in self.row_kept.items()},
            "col_kept": {key.label(): v for key, v in self.col_kept.items()},
            "row_mass": {key.label(): v for key, v in self.row_mass.items()},
            "col_mass": {key.label(): v for key, v in self.col_mass.items()},
        }

    def csv_rows(self) -> List[Tuple[str, str, str, int, int, float]]:
        """(level, layer, unit, index, kept, scaled_mass) rows for external plotting."""
        rows = []
        for layer, kept in sorted(self.per_layer_kept.items()):
            rows.append(("layer", str(layer), "", layer, kept, ""))
        for key, kept in self.per_unit_kept.items():
            rows.append(("unit", str(key.layer), key.unit, 0, kept, ""))
        for key in self.row_kept:
            for index, (kept, mass) in enumerate(zip(self.row_kept[key], self.row_mass[key])):
                rows.append(("row", str(key.layer), key.unit, index, kept, mass))
            for index, (kept, mass) in enumerate(zip(self.col_kept[key], self.col_mass[key])):
                rows.append(("col", str(key.layer), key.unit, index, kept, mass))
        return rows


CSV_HEADER = ["level", "layer", "unit", "index", "kept", "scaled_mass"]


def task_ratio(dense: float, pruned: float) -> float:
    """Pruned score over dense score for one task."""
    if not dense > 0:
        raise ArgumentError(f"dense score must be positive, got {dense}")
    return pruned / dense


def domain_ratio(ratios: Sequence[float]) -> float:
    """
    Geometric mean of task ratios, computed in log space.

    Args:
        ratios: Positive task ratios

    Returns:
        Geometric mean as a fraction (multiply by 100 for the table value)
    """
    if not ratios:
        raise ArgumentError("domain_ratio needs at least one task ratio")
    if any(not r > 0 for r in ratios):
        raise ArgumentError("every task ratio must be positive for a geometric mean")
    return math.exp(math.fsum(math.log(r) for r in ratios) / len(ratios))


def score_domain(scores: TaskScoreSet) -> DomainReport:
    """Task ratios and Domain-Ratio; a zero pruned score yields 0 with the degenerate flag set."""
    ratios = {entry.name: task_ratio(entry.dense, entry.pruned) for entry in scores.entries}
    if any(r == 0.0 for r in ratios.values()):
        logger.warning("Domain %s has a zero pruned score; Domain-Ratio reported as 0", scores.domain)
        return DomainReport(scores.domain, ratios, 0.0, degenerate=True)
    return DomainReport(scores.domain, ratios, domain_ratio(list(ratios.values())))


def _parse_score_set(payload: Mapping[str, Any]) -> TaskScoreSet:
    try:
        entries = [
            TaskScore(str(task["name"]), float(task["dense"]), float(task["pruned"]))
            for task in payload["tasks"]
        ]
        return TaskScoreSet(domain=str(payload["domain"]), entries=entries)
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ArgumentError):
            raise
        raise ParseError(f"Malformed task-score record: {e}") from e


def load_task_scores(path: str) -> List[TaskScoreSet]:
    """
    Read a task-score JSON file: one domain object or a list of them.

    Args:
        path: JSON file with {"domain", "tasks": [{"name", "dense", "pruned"}]}

    Returns:
        One TaskScoreSet per domain
    """
    payload = read_json(path)
    records = payload if isinstance(payload, list) else [payload]
    if not all(isinstance(record, dict) for record in records):
        raise ParseError(f"Task-score file {path} must hold domain objects")
    return [_parse_score_set(record) for record in records]


def _axis_counts(mask: np.ndarray, values: np.ndarray, scale: float):
    matrix_mask = mask.reshape(1, -1) if mask.ndim == 1 else mask.reshape(mask.shape[0], -1)
    matrix_vals = np.abs(values).reshape(matrix_mask.shape) * scale
    kept_vals = np.where(matrix_mask, matrix_vals, 0.0)
    return (
        matrix_mask.sum(axis=1).astype(int).tolist(),
        matrix_mask.sum(axis=0).astype(int).tolist(),
        kept_vals.sum(axis=1).tolist(),
        kept_vals.sum(axis=0).tolist(),
    )


def structure_report(sparse: SparseDelta, units_of_interest: Sequence[LinearKey] = (),
                     display_scale: float = STRUCTURE_DISPLAY_SCALE) -> StructureReport:
    """
    Aggregate kept counts per layer, per unit, and per row/column of selected units.

    Args:
        sparse: Pruned (or amplified) delta
        units_of_interest: Units to break down by row and column
        display_scale: Factor applied to the kept-magnitude sums

    Returns:
        StructureReport
    """
    per_unit = {key: sparse.kept_counts[key] for key in sparse.topology.units}
    per_layer: Dict[int, int] = {}
    for key, kept in per_unit.items():
        per_layer[key.layer] = per_layer.get(key.layer, 0) + kept

    report = StructureReport(per_layer_kept=per_layer, per_unit_kept=per_unit, display_scale=display_scale)
    known = set(sparse.topology.units)
    for wanted in units_of_interest:
        if wanted not in known:
            raise TopologyError(f"Unknown linear unit {wanted.label()}")
        key = sparse.topology.find(wanted.layer, wanted.unit)
        rows, cols, row_mass, col_mass = _axis_counts(sparse.masks[key], sparse.values[key], display_scale)
        report.row_kept[key] = rows
        report.col_kept[key] = cols
        report.row_mass[key] = row_mass
        report.col_mass[key] = col_mass
    return report
