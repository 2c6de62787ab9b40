# significance.py
"""Outlier significance of delta parameters and the per-linear-unit pruning rates built from it."""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping

import numpy as np

from config import DEFAULT_LAMBDA, DEFAULT_N, SIGNIFICANCE_MODES, SIGNIFICANCE_SCOPES
from delta_core import DeltaModel
from errors import ArgumentError, ParseError
from tensor_archive import LinearKey
from utils import hash_json, kept_count, validate_fraction

logger = logging.getLogger(__name__)


@dataclass
class SignificanceReport:
    """Outlier mass per linear unit and per model layer."""

    n_factor: float
    global_mean_magnitude: float
    per_layer_sig: Dict[int, float]
    per_unit_sig: Dict[LinearKey, float]
    per_unit_count: Dict[LinearKey, int]
    per_unit_outlier_mass: Dict[LinearKey, float] = field(default_factory=dict)
    scope: str = "global"
    mode: str = "normalized"


@dataclass
class PruneRatePlan:
    """
    Per-linear-unit pruning rates theta = clip(alpha + layer_offset + unit_offset).

    The offsets are norm(dif) values and do not depend on alpha, so a plan can be
    re-targeted with with_alpha() while keeping every unit's relative position.
    """

    alpha: float
    lam: float
    layer_dif: Dict[int, float]
    unit_dif: Dict[LinearKey, float]
    layer_offset: Dict[int, float]
    unit_offset: Dict[LinearKey, float]
    unit_counts: Dict[LinearKey, int]
    theta: Dict[LinearKey, float] = field(default_factory=dict)
    realized_sparsity: float = 0.0
    clamped: int = 0
    granularity: str = "unit"

    def __post_init__(self):
        if not self.theta:
            self._fill_theta()

    def _fill_theta(self) -> None:
        theta = {}
        clamped = 0
        for key, count in self.unit_counts.items():
            raw = self.alpha + self.layer_offset[key.layer] + self.unit_offset[key]
            rate = min(max(raw, 0.0), 1.0)
            if rate != raw:
                clamped += 1
            theta[key] = rate
        self.theta = theta
        self.clamped = clamped
        total = sum(self.unit_counts.values())
        kept = sum(kept_count(count, theta[key]) for key, count in self.unit_counts.items())
        self.realized_sparsity = 1.0 - kept / total if total else 0.0

    def with_alpha(self, alpha: float) -> "PruneRatePlan":
        """Same offsets, different base rate."""
        validate_fraction("alpha", alpha)
        return replace(self, alpha=float(alpha), theta={})

    def to_json(self) -> Dict[str, Any]:
        return {
            "alpha": self.alpha,
            "lambda": self.lam,
            "granularity": self.granularity,
            "realized_sparsity": self.realized_sparsity,
            "clamped_units": self.clamped,
            "layers": [
                {"layer": l, "dif": self.layer_dif[l], "offset": self.layer_offset[l]}
                for l in sorted(self.layer_dif)
            ],
            "units": [
                {
                    "layer": key.layer,
                    "unit": key.unit,
                    "tensor": key.tensor_name,
                    "count": count,
                    "dif": self.unit_dif[key],
                    "offset": self.unit_offset[key],
                    "theta": self.theta[key],
                }
                for key, count in self.unit_counts.items()
            ],
        }

    def plan_hash(self) -> str:
        return hash_json(self.to_json())


def compute_significance(delta: DeltaModel, n_factor: float = DEFAULT_N,
                         scope: str = "global", mode: str = "normalized") -> SignificanceReport:
    """
    Accumulated magnitude of delta elements exceeding N times the mean magnitude.

    Args:
        delta: Delta whose linear units are scored
        n_factor: Outlier factor N (> 0)
        scope: Where the mean magnitude is taken: global, per_layer or per_unit
        mode: normalized (outlier mass per element) or raw (outlier mass)

    Returns:
        SignificanceReport
    """
    if not n_factor > 0:
        raise ArgumentError(f"N must be positive, got {n_factor}")
    if scope not in SIGNIFICANCE_SCOPES:
        raise ArgumentError(f"Invalid scope. Must be one of: {SIGNIFICANCE_SCOPES}")
    if mode not in SIGNIFICANCE_MODES:
        raise ArgumentError(f"Invalid mode. Must be one of: {SIGNIFICANCE_MODES}")
    if not delta.tensors:
        raise ArgumentError("compute_significance needs a delta with linear units")

    magnitudes = {key: np.abs(delta.tensors[key]).ravel() for key in delta.topology.units}
    counts = {key: int(m.size) for key, m in magnitudes.items()}
    sums = {key: float(m.sum()) for key, m in magnitudes.items()}
    total_count = sum(counts.values())
    global_mean = math.fsum(sums.values()) / total_count

    layer_units: Dict[int, List[LinearKey]] = {}
    for key in delta.topology.units:
        layer_units.setdefault(key.layer, []).append(key)

    def threshold(key: LinearKey) -> float:
        if scope == "per_unit":
            return n_factor * sums[key] / counts[key]
        if scope == "per_layer":
            members = layer_units[key.layer]
            return n_factor * math.fsum(sums[k] for k in members) / sum(counts[k] for k in members)
        return n_factor * global_mean

    mass: Dict[LinearKey, float] = {}
    for key, m in magnitudes.items():
        mass[key] = float(m[m > threshold(key)].sum())

    if mode == "normalized":
        unit_sig = {key: mass[key] / counts[key] for key in mass}
        layer_sig = {
            l: math.fsum(mass[k] for k in keys) / sum(counts[k] for k in keys)
            for l, keys in layer_units.items()
        }
    else:
        unit_sig = dict(mass)
        layer_sig = {l: math.fsum(mass[k] for k in keys) for l, keys in layer_units.items()}

    logger.info("Significance: mean |delta| %.3e, outlier threshold factor %g (%s, %s)",
                global_mean, n_factor, scope, mode)
    return SignificanceReport(
        n_factor=float(n_factor),
        global_mean_magnitude=global_mean,
        per_layer_sig=layer_sig,
        per_unit_sig=unit_sig,
        per_unit_count=counts,
        per_unit_outlier_mass=mass,
        scope=scope,
        mode=mode,
    )


def normalize_fluctuation(values: Mapping[Any, float], lam: float) -> Dict[Any, float]:
    """norm(x) = x * lam / max|x| over one collection; all zeros when max|x| is 0."""
    peak = max((abs(v) for v in values.values()), default=0.0)
    if peak == 0.0:
        return {k: 0.0 for k in values}
    return {k: v * lam / peak for k, v in values.items()}


def layer_fluctuation(report: SignificanceReport) -> Dict[int, float]:
    """dif(l) = -sig(l) + mean over layers of sig."""
    if len(set(report.per_layer_sig.values())) == 1:
        return {l: 0.0 for l in report.per_layer_sig}
    layer_mean = math.fsum(report.per_layer_sig.values()) / len(report.per_layer_sig)
    return {l: -s + layer_mean for l, s in report.per_layer_sig.items()}


def unit_fluctuation(report: SignificanceReport) -> Dict[LinearKey, float]:
    """dif'(l, j) = -sig(l, j) + count-weighted mean of unit sigs."""
    # identical sigs give exact zeros rather than rounding noise
    if len(set(report.per_unit_sig.values())) == 1:
        return {k: 0.0 for k in report.per_unit_sig}
    total = sum(report.per_unit_count.values())
    weighted_mean = math.fsum(report.per_unit_sig[k] * c for k, c in report.per_unit_count.items()) / total
    return {k: -s + weighted_mean for k, s in report.per_unit_sig.items()}


def _check_plan_args(report: SignificanceReport, alpha: float, lam: float) -> None:
    validate_fraction("alpha", alpha)
    if not lam > 0:
        raise ArgumentError(f"lambda must be positive, got {lam}")
    if not report.per_layer_sig:
        raise ArgumentError("Cannot plan rates for a model with zero layers")


def plan_rates(report: SignificanceReport, alpha: float, lam: float = DEFAULT_LAMBDA) -> PruneRatePlan:
    """
    Per-linear-unit pruning rates from layer- and unit-level significance fluctuations.

    Args:
        report: Output of compute_significance
        alpha: Base pruning rate
        lam: Largest fluctuation either level may add

    Returns:
        PruneRatePlan with theta clamped into [0, 1]
    """
    _check_plan_args(report, alpha, lam)
    layer_dif = layer_fluctuation(report)
    unit_dif = unit_fluctuation(report)
    plan = PruneRatePlan(
        alpha=float(alpha),
        lam=float(lam),
        layer_dif=layer_dif,
        unit_dif=unit_dif,
        layer_offset=normalize_fluctuation(layer_dif, lam),
        unit_offset=normalize_fluctuation(unit_dif, lam),
        unit_counts=dict(report.per_unit_count),
    )
    if plan.clamped:
        logger.warning("%d of %d unit rates clamped into [0, 1]", plan.clamped, len(plan.theta))
    logger.info("Planned rates: alpha %.3f, realized sparsity %.4f", plan.alpha, plan.realized_sparsity)
    return plan


def plan_layer_rates(report: SignificanceReport, alpha: float, lam: float = DEFAULT_LAMBDA) -> PruneRatePlan:
    """Layer-level restriction of plan_rates: every unit in layer l gets clip(alpha + norm(dif(l)))."""
    _check_plan_args(report, alpha, lam)
    layer_dif = layer_fluctuation(report)
    zeros = {key: 0.0 for key in report.per_unit_count}
    plan = PruneRatePlan(
        alpha=float(alpha),
        lam=float(lam),
        layer_dif=layer_dif,
        unit_dif=dict(zeros),
        layer_offset=normalize_fluctuation(layer_dif, lam),
        unit_offset=dict(zeros),
        unit_counts=dict(report.per_unit_count),
        granularity="layer",
    )
    if plan.clamped:
        logger.warning("%d of %d unit rates clamped into [0, 1]", plan.clamped, len(plan.theta))
    return plan


def plan_uniform_rates(report: SignificanceReport, alpha: float, lam: float = DEFAULT_LAMBDA) -> PruneRatePlan:
    """Plan with zero offsets: every unit pruned at alpha, as plain magnitude pruning does."""
    _check_plan_args(report, alpha, lam)
    layers = {l: 0.0 for l in report.per_layer_sig}
    units = {key: 0.0 for key in report.per_unit_count}
    return PruneRatePlan(
        alpha=float(alpha),
        lam=float(lam),
        layer_dif=dict(layers),
        unit_dif=dict(units),
        layer_offset=dict(layers),
        unit_offset=dict(units),
        unit_counts=dict(report.per_unit_count),
        granularity="uniform",
    )


def plan_from_json(payload: Mapping[str, Any]) -> PruneRatePlan:
    """Rebuild a plan written by PruneRatePlan.to_json."""
    try:
        layer_dif = {int(row["layer"]): float(row["dif"]) for row in payload["layers"]}
        layer_offset = {int(row["layer"]): float(row["offset"]) for row in payload["layers"]}
        unit_dif, unit_offset, counts, theta = {}, {}, {}, {}
        for row in payload["units"]:
            key = LinearKey(int(row["layer"]), str(row["unit"]), str(row["tensor"]))
            unit_dif[key] = float(row["dif"])
            unit_offset[key] = float(row["offset"])
            counts[key] = int(row["count"])
            theta[key] = float(row["theta"])
        plan = PruneRatePlan(
            alpha=float(payload["alpha"]),
            lam=float(payload["lambda"]),
            layer_dif=layer_dif,
            unit_dif=unit_dif,
            layer_offset=layer_offset,
            unit_offset=unit_offset,
            unit_counts=counts,
            granularity=str(payload.get("granularity", "unit")),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"Malformed rate plan: {e}") from e
    for key, rate in theta.items():
        if abs(plan.theta[key] - rate) > 1e-12:
            raise ParseError(f"Rate plan theta for {key.label()} does not match its offsets")
    return plan
