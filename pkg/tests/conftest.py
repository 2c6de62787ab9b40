"""Shared fixtures: seeded synthetic LLaMA-shaped checkpoints and small hand-built deltas."""

from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pytest

from config import DEFAULT_NAMING_RULES, LINEAR_UNITS
from delta_core import DeltaModel, compute_delta
from tensor_archive import LinearKey, ModelTopology, TensorArchive, parse_topology, save_archive

ATTENTION_UNITS = {"q_proj", "k_proj", "v_proj", "o_proj"}


def unit_shape(unit: str, hidden: int) -> Tuple[int, int]:
    if unit in ATTENTION_UNITS:
        return hidden, hidden
    if unit == "down_proj":
        return hidden, 2 * hidden
    return 2 * hidden, hidden


def tensor_name(layer: int, unit: str) -> str:
    block = "self_attn" if unit in ATTENTION_UNITS else "mlp"
    return f"model.layers.{layer}.{block}.{unit}.weight"


def synthetic_pair(layers: int = 2, hidden: int = 64, seed: int = 0,
                   units: Sequence[str] = LINEAR_UNITS, extras: bool = True) -> Tuple[TensorArchive, TensorArchive]:
    """Base checkpoint and a fine-tuned copy: small Gaussian offsets plus a few large outliers."""
    rng = np.random.default_rng(seed)
    base: Dict[str, np.ndarray] = {}
    tuned: Dict[str, np.ndarray] = {}

    def add(name: str, shape, outliers: bool) -> None:
        weights = rng.normal(0.0, 0.02, size=shape).astype(np.float32)
        offset = rng.normal(0.0, 0.001 * (1.0 + rng.random()), size=shape)
        if outliers:
            picks = rng.random(shape) < 0.01
            offset = np.where(picks, offset * 20.0, offset)
        base[name] = weights
        tuned[name] = (weights + offset).astype(np.float32)

    if extras:
        add("model.embed_tokens.weight", (16, hidden), False)
    for layer in range(layers):
        if extras:
            add(f"model.layers.{layer}.input_layernorm.weight", (hidden,), False)
        for unit in units:
            add(tensor_name(layer, unit), unit_shape(unit, hidden), True)
    return TensorArchive(base), TensorArchive(tuned)


def delta_from_units(units: Dict[Tuple[int, str], np.ndarray],
                     passthrough: Optional[Dict[str, np.ndarray]] = None) -> DeltaModel:
    """DeltaModel built directly from {(layer, unit): array}."""
    keys = [LinearKey(layer, unit, f"layers.{layer}.{unit}.weight") for layer, unit in units]
    topology = ModelTopology(
        layer_count=len({k.layer for k in keys}),
        units=keys,
        unclassified=list(passthrough or {}),
    )
    tensors = {key: np.asarray(units[(key.layer, key.unit)], dtype=np.float64) for key in keys}
    return DeltaModel(topology=topology, tensors=tensors,
                      passthrough={k: np.asarray(v, dtype=np.float64) for k, v in (passthrough or {}).items()})


@pytest.fixture
def make_pair():
    return synthetic_pair


@pytest.fixture
def make_delta():
    return delta_from_units


@pytest.fixture
def pair():
    return synthetic_pair()


@pytest.fixture
def delta(pair):
    base, tuned = pair
    return compute_delta(base, tuned, parse_topology(base, DEFAULT_NAMING_RULES))


@pytest.fixture
def archive_files(tmp_path, pair):
    base, tuned = pair
    base_path = tmp_path / "base.archive"
    tuned_path = tmp_path / "math.archive"
    save_archive(base, str(base_path))
    save_archive(tuned, str(tuned_path))
    return base_path, tuned_path
