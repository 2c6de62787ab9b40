# oracle_engine.py
"""Scoring oracles that guide the amplification search (higher score is better)."""

import logging
import math
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from config import DEFAULT_ORACLE, SUPPORTED_ORACLES, get_temp_dir
from delta_core import DeltaModel, delta_to_archive
from errors import ArgumentError, OracleError
from pruners import tensor_rng
from tensor_archive import LinearKey, save_archive
from utils import content_hash

logger = logging.getLogger(__name__)


@dataclass
class OracleSpec:
    """Oracle kind plus its string settings (command, probe_seed, probe_batch, probe, timeout, deterministic)."""

    kind: str
    config: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_config(cls, mapping: Mapping[str, str]) -> "OracleSpec":
        settings = {str(k): str(v) for k, v in mapping.items()}
        kind = settings.pop("kind", DEFAULT_ORACLE["kind"])
        return cls(kind=kind, config=settings)

    @property
    def deterministic(self) -> bool:
        return self.config.get("deterministic", "true").strip().lower() not in ("false", "0", "no")

    def get_float(self, key: str, default: float) -> float:
        try:
            return float(self.config.get(key, default))
        except ValueError as e:
            raise ArgumentError(f"Oracle setting {key!r} must be numeric") from e

    def get_int(self, key: str, default: int) -> int:
        try:
            return int(self.config.get(key, default))
        except ValueError as e:
            raise ArgumentError(f"Oracle setting {key!r} must be an integer") from e


def candidate_hash(candidate: DeltaModel) -> str:
    """Content hash of a candidate delta, tensor by tensor in topology order."""
    return content_hash(candidate.named_tensors())


class Oracle:
    """Base oracle: caches scores by candidate content hash."""

    def __init__(self, spec: OracleSpec, reference: DeltaModel):
        self.spec = spec
        self.reference = reference
        self.cache: Dict[str, float] = {}
        self.evaluations = 0

    def score(self, candidate: DeltaModel, step: Optional[int] = None) -> Tuple[float, str, bool]:
        """
        Score a candidate delta.

        Args:
            candidate: Candidate delta (same topology as the reference)
            step: Search step, reported on failure

        Returns:
            (score, candidate hash, whether the score came from the cache)
        """
        digest = candidate_hash(candidate)
        if digest in self.cache:
            return self.cache[digest], digest, True
        value = float(self._evaluate(candidate, step))
        if not math.isfinite(value):
            raise OracleError(f"{self.spec.kind} oracle returned non-finite score {value}", step)
        self.evaluations += 1
        self.cache[digest] = value
        return value, digest, False

    def _evaluate(self, candidate: DeltaModel, step: Optional[int]) -> float:
        raise NotImplementedError


class CosineOracle(Oracle):
    """Cosine similarity between the flattened candidate and the dense delta."""

    def _evaluate(self, candidate: DeltaModel, step: Optional[int]) -> float:
        dot = cand_sq = ref_sq = 0.0
        for key in self.reference.topology.units:
            c = candidate.tensors[key].ravel()
            r = self.reference.tensors[key].ravel()
            dot += float(np.dot(c, r))
            cand_sq += float(np.dot(c, c))
            ref_sq += float(np.dot(r, r))
        if cand_sq == 0.0 or ref_sq == 0.0:
            return 0.0
        return dot / math.sqrt(cand_sq * ref_sq)


class QuadraticOracle(Oracle):
    """-||candidate - dense||^2 summed over linear units."""

    def _evaluate(self, candidate: DeltaModel, step: Optional[int]) -> float:
        total = 0.0
        for key in self.reference.topology.units:
            diff = candidate.tensors[key] - self.reference.tensors[key]
            total += float(np.sum(diff * diff))
        return -total


def _as_matrix(array: np.ndarray) -> np.ndarray:
    if array.ndim == 1:
        return array.reshape(1, -1)
    return array.reshape(array.shape[0], -1)


class ReconstructionOracle(Oracle):
    """
    -sum over units of ||(W_B + C) X - (W_B + D) X||^2 on seeded probe inputs X.

    W_B cancels, so only (C - D) X is formed. probe=identity makes X the identity,
    which turns the score into the quadratic oracle.
    """

    def __init__(self, spec: OracleSpec, reference: DeltaModel):
        super().__init__(spec, reference)
        self.probe_kind = spec.config.get("probe", "gaussian")
        if self.probe_kind not in ("gaussian", "identity"):
            raise ArgumentError(f"Unknown probe kind {self.probe_kind!r}")
        self.probe_seed = spec.get_int("probe_seed", 0)
        self.probe_batch = spec.get_int("probe_batch", 16)
        if self.probe_batch < 1:
            raise ArgumentError("probe_batch must be at least 1")
        self._probes: Dict[LinearKey, np.ndarray] = {}

    def probe(self, key: LinearKey) -> np.ndarray:
        """Probe inputs X of shape (in_features, batch) for one unit."""
        if key not in self._probes:
            in_features = _as_matrix(self.reference.tensors[key]).shape[1]
            if self.probe_kind == "identity":
                self._probes[key] = np.eye(in_features)
            else:
                rng = tensor_rng(self.probe_seed, key.tensor_name)
                self._probes[key] = rng.standard_normal((in_features, self.probe_batch))
        return self._probes[key]

    def _evaluate(self, candidate: DeltaModel, step: Optional[int]) -> float:
        total = 0.0
        for key in self.reference.topology.units:
            diff = _as_matrix(candidate.tensors[key] - self.reference.tensors[key])
            projected = diff @ self.probe(key)
            total += float(np.sum(projected * projected))
        return -total


class ExternalCommandOracle(Oracle):
    """
    Runs `command <base-archive> <candidate-delta-archive>` and reads one number from stdout.

    The candidate is written to a temporary archive (DPPA_TEMP_DIR overrides the
    location) and removed after the call.
    """

    def __init__(self, spec: OracleSpec, reference: DeltaModel, base_path: Optional[str]):
        super().__init__(spec, reference)
        command = spec.config.get("command", "").strip()
        if not command:
            raise ArgumentError("external_command oracle needs a 'command' setting")
        if not base_path:
            raise ArgumentError("external_command oracle needs the base archive path")
        self.argv = shlex.split(command)
        self.base_path = base_path
        self.timeout = spec.get_float("timeout", 600.0)
        if not spec.deterministic:
            logger.warning("External oracle declared non-deterministic; search results are not reproducible")

    def _evaluate(self, candidate: DeltaModel, step: Optional[int]) -> float:
        handle, path = tempfile.mkstemp(prefix="dppa_candidate_", suffix=".archive", dir=get_temp_dir())
        os.close(handle)
        try:
            save_archive(delta_to_archive(candidate), path)
            try:
                result = subprocess.run(
                    self.argv + [self.base_path, path],
                    capture_output=True,
                    text=True,
                    timeout=self.timeout,
                    check=False,
                )
            except subprocess.TimeoutExpired as e:
                raise OracleError(f"oracle command timed out after {self.timeout:g}s", step) from e
            except OSError as e:
                raise OracleError(f"oracle command could not start: {e}", step) from e
        finally:
            try:
                os.remove(path)
            except OSError as e:
                logger.warning("Could not remove candidate file %s: %s", path, e)

        if result.returncode != 0:
            detail = result.stderr.strip() or result.stdout.strip()
            raise OracleError(f"oracle command exited with status {result.returncode}: {detail}", step)
        text = result.stdout.strip()
        try:
            return float(text)
        except ValueError as e:
            raise OracleError(f"oracle output {text!r} is not a number", step) from e


def build_oracle(spec: OracleSpec, reference: DeltaModel, base_path: Optional[str] = None) -> Oracle:
    """
    Create the oracle named by spec.kind.

    Args:
        spec: Oracle kind and settings
        reference: Dense delta the proxy oracles compare against
        base_path: Base archive path handed to external commands

    Returns:
        Oracle instance with an empty cache
    """
    if spec.kind == "proxy_cosine":
        return CosineOracle(spec, reference)
    if spec.kind == "proxy_quadratic":
        return QuadraticOracle(spec, reference)
    if spec.kind == "proxy_reconstruction":
        return ReconstructionOracle(spec, reference)
    if spec.kind == "external_command":
        return ExternalCommandOracle(spec, reference, base_path)
    raise ArgumentError(f"Invalid oracle kind {spec.kind!r}. Must be one of: {SUPPORTED_ORACLES}")
