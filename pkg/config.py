# config.py
"""Configuration settings for the DPPA delta-pruning toolkit."""

import json
import os
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from errors import ArgumentError, IoError, ParseError

# Load environment variables from .env file
load_dotenv()

# Application settings
APP_TITLE = "dppa"
APP_SUBTITLE = "Dynamic pruning and partition amplification of delta parameters for model merging"

# Pruning settings
DEFAULT_ALPHA = 0.9
DEFAULT_LAMBDA = 0.08  # cap on the rate fluctuation added to alpha
DEFAULT_N = 5.0  # outlier factor over the mean delta magnitude
DEFAULT_SEED = 0

SUPPORTED_METHODS = ["magnitude", "owl", "dp", "dare"]
SIGNIFICANCE_SCOPES = ["global", "per_layer", "per_unit"]
SIGNIFICANCE_MODES = ["normalized", "raw"]

# Linear units of a LLaMA-shaped transformer layer, in canonical order
LINEAR_UNITS = ["q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj"]

# Naming rules map tensor names to (layer, unit); "unit" pins the label when the pattern has no unit group
DEFAULT_NAMING_RULES = [
    {
        "pattern": r"^(?:model\.)?layers\.(?P<layer>\d+)\.(?:self_attn|mlp)\."
                   r"(?P<unit>q_proj|k_proj|v_proj|o_proj|gate_proj|up_proj|down_proj)\.weight$",
    },
    {
        "pattern": r"^(?:model\.)?layers\.(?P<layer>\d+)\.(?P<unit>(?!\w*norm\.)\w+)\.weight$",
    },
]

# Amplification search settings
SEARCH_METHODS = ["method1", "method2"]
SUPPORTED_ORACLES = ["proxy_cosine", "proxy_reconstruction", "proxy_quadratic", "external_command"]
DEFAULT_GAMMA_GRID = [round(0.5 + 0.25 * i, 2) for i in range(19)]  # 0.5 .. 5.0
DEFAULT_REDUCTION_GRID = [round(0.1 * i, 1) for i in range(1, 21)]  # 0.1 .. 2.0
DEFAULT_LADDER_TOP = 0.9
DEFAULT_LADDER_STEP = 0.1
DEFAULT_BANDS = 4
DEFAULT_ORACLE = {"kind": "proxy_reconstruction", "probe_batch": "16", "probe_seed": "0", "timeout": "600"}

# Reporting settings
DEFAULT_PERCENTILES = [round(0.1 * i, 1) for i in range(1, 10)]
STRUCTURE_DISPLAY_SCALE = 1000.0

# File paths
TEMP_DIR = os.getenv("DPPA_TEMP_DIR", "") or None
LOG_LEVEL = os.getenv("DPPA_LOG_LEVEL", "INFO")
EFFECTIVE_CONFIG_NAME = "effective_config.json"

# JSON keys that differ from the dataclass attribute names
_KEY_ALIASES = {"lambda": "lam", "N": "n_factor"}


@dataclass
class PipelineConfig:
    """Every knob of a pipeline run; a run is reproducible from this plus its input files."""

    base_path: str = ""
    finetuned_paths: List[str] = field(default_factory=list)
    method: str = "dp"
    alpha: float = DEFAULT_ALPHA
    lam: float = DEFAULT_LAMBDA
    n_factor: float = DEFAULT_N
    significance_scope: str = "global"
    significance_mode: str = "normalized"
    rate_ladder: Optional[List[float]] = None
    gamma_grid: Optional[List[float]] = None
    search_method: str = "method2"
    bands: int = DEFAULT_BANDS
    oracle: Dict[str, str] = field(default_factory=lambda: dict(DEFAULT_ORACLE))
    seed: int = DEFAULT_SEED
    output_dir: str = "outputs"
    naming_rules: List[Dict[str, str]] = field(default_factory=lambda: [dict(r) for r in DEFAULT_NAMING_RULES])
    percentiles: List[float] = field(default_factory=lambda: list(DEFAULT_PERCENTILES))

    def validate(self) -> "PipelineConfig":
        """
        Check value ranges and enumerations.

        Returns:
            self, so calls can be chained

        Raises:
            ArgumentError: on the first invalid setting
        """
        if self.method not in SUPPORTED_METHODS:
            raise ArgumentError(f"Invalid method {self.method!r}. Must be one of: {SUPPORTED_METHODS}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ArgumentError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.method == "dare" and self.alpha >= 1.0:
            raise ArgumentError("dare drop rate must be below 1")
        if self.lam <= 0:
            raise ArgumentError(f"lambda must be positive, got {self.lam}")
        if self.n_factor <= 0:
            raise ArgumentError(f"N must be positive, got {self.n_factor}")
        if self.significance_scope not in SIGNIFICANCE_SCOPES:
            raise ArgumentError(f"Invalid significance_scope. Must be one of: {SIGNIFICANCE_SCOPES}")
        if self.significance_mode not in SIGNIFICANCE_MODES:
            raise ArgumentError(f"Invalid significance_mode. Must be one of: {SIGNIFICANCE_MODES}")
        if self.search_method not in SEARCH_METHODS:
            raise ArgumentError(f"Invalid search_method. Must be one of: {SEARCH_METHODS}")
        if self.bands < 1:
            raise ArgumentError("bands must be at least 1")
        if self.oracle.get("kind") not in SUPPORTED_ORACLES:
            raise ArgumentError(f"Invalid oracle kind. Must be one of: {SUPPORTED_ORACLES}")
        if not self.naming_rules:
            raise ArgumentError("naming_rules must not be empty")
        return self

    def ladder(self) -> List[float]:
        """Rate ladder for partition amplification, explicit or derived from alpha."""
        if self.rate_ladder:
            return list(self.rate_ladder)
        return default_rate_ladder(self.alpha)

    def grid(self) -> List[float]:
        """Gamma grid for the search, explicit or the method's default."""
        if self.gamma_grid:
            return list(self.gamma_grid)
        return list(DEFAULT_REDUCTION_GRID if self.method == "dare" else DEFAULT_GAMMA_GRID)

    def to_dict(self) -> Dict[str, Any]:
        """Serialize with the documented JSON key names."""
        reverse = {v: k for k, v in _KEY_ALIASES.items()}
        return {reverse.get(f.name, f.name): getattr(self, f.name) for f in fields(self)}


def default_rate_ladder(target: float) -> List[float]:
    """
    Build the descending rate ladder from 0.9 down to the target rate.

    Args:
        target: Final pruning rate of the ladder

    Returns:
        Rates such as [0.9, 0.8, 0.7] for a target of 0.7
    """
    rates = []
    step = 0
    while True:
        rate = round(DEFAULT_LADDER_TOP - DEFAULT_LADDER_STEP * step, 10)
        if rate <= target + 1e-9:
            break
        rates.append(rate)
        step += 1
    rates.append(target)
    return rates


def load_pipeline_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """
    Load a flat JSON config file and apply command-line overrides.

    Args:
        path: Config file path, or None for defaults only
        overrides: Values that win over the file; None entries are ignored

    Returns:
        Validated PipelineConfig
    """
    raw: Dict[str, Any] = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as handle:
                raw = json.load(handle)
        except OSError as e:
            raise IoError(f"Cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ParseError(f"Config {path} is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ParseError(f"Config {path} must be a JSON object")

    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value

    known = {f.name for f in fields(PipelineConfig)}
    kwargs = {}
    for key, value in raw.items():
        name = _KEY_ALIASES.get(key, key)
        if name not in known:
            raise ArgumentError(f"Unknown config key {key!r}")
        kwargs[name] = value

    return PipelineConfig(**_coerce(kwargs)).validate()


def _coerce(kwargs: Dict[str, Any]) -> Dict[str, Any]:
    """Check value types from a JSON config and convert them to the dataclass field types."""
    if "oracle" in kwargs:
        if not isinstance(kwargs["oracle"], dict):
            raise ArgumentError(f"oracle must be an object of string settings, got {kwargs['oracle']!r}")
        kwargs["oracle"] = {str(k): str(v) for k, v in kwargs["oracle"].items()}
    for name in ("base_path", "method", "significance_scope", "significance_mode", "search_method", "output_dir"):
        if name in kwargs and not isinstance(kwargs[name], str):
            raise ArgumentError(f"{name} must be a string, got {kwargs[name]!r}")
    if "finetuned_paths" in kwargs:
        paths = kwargs["finetuned_paths"]
        if not isinstance(paths, list) or not all(isinstance(p, str) for p in paths):
            raise ArgumentError(f"finetuned_paths must be a list of paths, got {paths!r}")
    if "naming_rules" in kwargs:
        rules = kwargs["naming_rules"]
        if not isinstance(rules, list) or not all(isinstance(r, (dict, str)) for r in rules):
            raise ArgumentError("naming_rules must be a list of pattern strings or objects")

    for name in ("rate_ladder", "gamma_grid", "percentiles"):
        value = kwargs.get(name)
        if value is None:
            continue
        if not isinstance(value, list):
            raise ArgumentError(f"{name} must be a list of numbers, got {value!r}")
        kwargs[name] = [_number(name, v, float) for v in value]
    for name in ("alpha", "lam", "n_factor"):
        if name in kwargs:
            kwargs[name] = _number(name, kwargs[name], float)
    for name in ("seed", "bands"):
        if name in kwargs:
            kwargs[name] = _number(name, kwargs[name], int)
    return kwargs


def _number(name: str, value: Any, kind: type) -> Any:
    if isinstance(value, bool):
        raise ArgumentError(f"{name} must be a number, got {value!r}")
    try:
        return kind(value)
    except (TypeError, ValueError) as e:
        raise ArgumentError(f"{name} must be a number, got {value!r}") from e


def get_temp_dir() -> Optional[str]:
    """Directory for external-oracle candidate files (None means the system default)."""
    return TEMP_DIR
