# main.py
"""Command-line entry point for the DPPA delta-pruning toolkit."""

import argparse
import logging
import os
import sys
from typing import List, Optional, Sequence

from config import (
    APP_SUBTITLE, APP_TITLE, DEFAULT_NAMING_RULES, DEFAULT_PERCENTILES, EFFECTIVE_CONFIG_NAME,
    LOG_LEVEL, SEARCH_METHODS, SIGNIFICANCE_MODES, SIGNIFICANCE_SCOPES, STRUCTURE_DISPLAY_SCALE,
    SUPPORTED_METHODS, SUPPORTED_ORACLES, PipelineConfig, load_pipeline_config,
)
from delta_core import (
    ARCHIVE_KIND_DELTA, DeltaModel, archive_to_delta, compute_delta, delta_to_archive, merge,
    offset_quantiles,
)
from errors import ArgumentError, DppaError, IoError, OracleError, ParseError
from metrics_analysis import CSV_HEADER, load_task_scores, score_domain, structure_report
from oracle_engine import OracleSpec, build_oracle
from partition_amplify import amplify_dare, assemble, build_schedule, search_method1, search_method2
from pruners import (
    ARCHIVE_KIND_SPARSE, SparseDelta, archive_to_sparse, prune_dare, prune_dp, prune_magnitude,
    prune_owl, sparse_to_archive, sparsity_summary,
)
from significance import (
    PruneRatePlan, compute_significance, plan_layer_rates, plan_rates, plan_uniform_rates,
)
from tensor_archive import LinearKey, load_archive, parse_topology, save_archive
from utils import (
    file_stem, get_file_size, setup_directories, setup_logging, write_csv, write_json, write_jsonl,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_ORACLE = 4


class PipelineInputs:
    """Loads the base checkpoint once and produces one delta per fine-tuned checkpoint."""

    def __init__(self, config: PipelineConfig):
        if not config.base_path:
            raise ArgumentError("base_path is required")
        if not config.finetuned_paths:
            raise ArgumentError("finetuned_paths must list at least one checkpoint")
        self.config = config
        self.base = load_archive(config.base_path)
        self.topology = parse_topology(self.base, config.naming_rules)
        logger.info("Loaded base %s (%s): %d layers, %d linear units",
                    config.base_path, get_file_size(config.base_path),
                    self.topology.layer_count, len(self.topology.units))

    def deltas(self):
        for path in self.config.finetuned_paths:
            yield path, compute_delta(self.base, load_archive(path), self.topology)


def _echo_config(config: PipelineConfig) -> None:
    setup_directories(config.output_dir)
    write_json(os.path.join(config.output_dir, EFFECTIVE_CONFIG_NAME), config.to_dict())


def _plan_for(delta: DeltaModel, config: PipelineConfig, alpha: float) -> PruneRatePlan:
    report = compute_significance(delta, config.n_factor, scope=config.significance_scope,
                                  mode=config.significance_mode)
    if config.method == "dp":
        return plan_rates(report, alpha, config.lam)
    if config.method == "owl":
        return plan_layer_rates(report, alpha, config.lam)
    return plan_uniform_rates(report, alpha, config.lam)


def prune_delta(delta: DeltaModel, config: PipelineConfig, alpha: Optional[float] = None) -> SparseDelta:
    """Dispatch to the configured pruner; alpha overrides config.alpha (p for dare)."""
    alpha = config.alpha if alpha is None else alpha
    if config.method == "magnitude":
        return prune_magnitude(delta, alpha)
    if config.method == "owl":
        return prune_owl(delta, alpha, config.lam, config.n_factor,
                         scope=config.significance_scope, mode=config.significance_mode)
    if config.method == "dp":
        return prune_dp(delta, _plan_for(delta, config, alpha))
    if config.method == "dare":
        return prune_dare(delta, alpha, config.seed)
    raise ArgumentError(f"Invalid method {config.method!r}. Must be one of: {SUPPORTED_METHODS}")


def load_processed_delta(path: str) -> DeltaModel:
    """Read a delta or sparse-delta archive as a DeltaModel ready for merging."""
    archive = load_archive(path)
    kind = archive.metadata.get("kind")
    if kind == ARCHIVE_KIND_SPARSE:
        return archive_to_sparse(archive).to_delta()
    if kind == ARCHIVE_KIND_DELTA:
        return archive_to_delta(archive)
    raise ParseError(f"{path} is neither a delta nor a sparse-delta archive (kind={kind!r})")


def cmd_delta(base_path: str, finetuned_path: str, out_path: str,
              naming_rules: Optional[Sequence] = None) -> str:
    """
    Write finetuned - base as a delta archive.

    Args:
        base_path: Base checkpoint archive
        finetuned_path: Fine-tuned checkpoint archive
        out_path: Destination delta archive
        naming_rules: Rules for classifying linear units

    Returns:
        out_path
    """
    base = load_archive(base_path)
    topology = parse_topology(base, naming_rules or DEFAULT_NAMING_RULES)
    delta = compute_delta(base, load_archive(finetuned_path), topology)
    setup_directories(os.path.dirname(out_path))
    save_archive(delta_to_archive(delta), out_path)
    logger.info("Wrote delta %s (%s)", out_path, get_file_size(out_path))
    return out_path


def cmd_prune(config: PipelineConfig) -> List[str]:
    """Prune every fine-tuned delta; write sparse archive, plan JSON and sparsity summary."""
    _echo_config(config)
    inputs = PipelineInputs(config)
    outputs = []
    for path, delta in inputs.deltas():
        stem = f"{file_stem(path)}.{config.method}"
        sparse = prune_delta(delta, config)
        sparse_path = os.path.join(config.output_dir, f"{stem}.sparse")
        save_archive(sparse_to_archive(sparse), sparse_path)
        summary = sparsity_summary(sparse)
        write_json(os.path.join(config.output_dir, f"{stem}.summary.json"), summary)
        if sparse.rate_plan is not None:
            write_json(os.path.join(config.output_dir, f"{stem}.plan.json"), sparse.rate_plan.to_json())
        logger.info("%s: target %.3f, realized sparsity %.4f -> %s",
                    path, config.alpha, summary["global_sparsity"], sparse_path)
        outputs.append(sparse_path)
    return outputs


def cmd_amplify(config: PipelineConfig) -> List[str]:
    """Prune, then search partition amplification factors; write amplified archive, trace and profile."""
    _echo_config(config)
    inputs = PipelineInputs(config)
    spec = OracleSpec.from_config(config.oracle)
    outputs = []
    for path, delta in inputs.deltas():
        stem = f"{file_stem(path)}.{config.method}"
        oracle = build_oracle(spec, delta, config.base_path)
        if config.method == "dare":
            sparse = prune_dare(delta, config.alpha, config.seed)
            profile = amplify_dare(sparse, oracle, config.grid(), config.bands)
        else:
            schedule = build_schedule(delta, _plan_for(delta, config, config.alpha), config.ladder())
            search = search_method1 if config.search_method == "method1" else search_method2
            profile = search(schedule, oracle, config.grid())
        amplified = assemble(profile.schedule, profile.gammas)

        sparse_path = os.path.join(config.output_dir, f"{stem}.amplified.sparse")
        save_archive(sparse_to_archive(amplified), sparse_path)
        write_jsonl(os.path.join(config.output_dir, f"{stem}.trace.jsonl"),
                    (record.to_json() for record in profile.trace))
        write_json(os.path.join(config.output_dir, f"{stem}.profile.json"), profile.to_json())
        logger.info("%s: gammas %s, final score %.6g -> %s", path, profile.gammas, profile.final_score, sparse_path)
        outputs.append(sparse_path)
    return outputs


def cmd_merge(base_path: str, delta_paths: Sequence[str], out_path: str,
              coefficients: Optional[Sequence[float]] = None) -> str:
    """Add delta or sparse-delta files onto the base checkpoint."""
    base = load_archive(base_path)
    deltas = [load_processed_delta(path) for path in delta_paths]
    merged = merge(base, deltas, coefficients)
    setup_directories(os.path.dirname(out_path))
    save_archive(merged, out_path)
    logger.info("Wrote merged checkpoint %s (%s)", out_path, get_file_size(out_path))
    return out_path


def _parse_unit(text: str) -> LinearKey:
    layer, sep, unit = text.partition(":")
    if not sep or not layer.strip().isdigit() or not unit:
        raise ArgumentError(f"Unit {text!r} must look like <layer>:<unit>, e.g. 0:q_proj")
    return LinearKey(int(layer), unit.strip())


def cmd_analyze(input_path: str, out_dir: str, percentiles: Sequence[float] = DEFAULT_PERCENTILES,
                units: Sequence[str] = (), display_scale: float = STRUCTURE_DISPLAY_SCALE) -> List[str]:
    """Offset quantiles for any delta file, plus the structure report for sparse files."""
    archive = load_archive(input_path)
    stem = file_stem(input_path)
    outputs = []
    sparse = archive_to_sparse(archive) if archive.metadata.get("kind") == ARCHIVE_KIND_SPARSE else None
    delta = sparse.to_delta() if sparse is not None else archive_to_delta(archive)

    quantiles = offset_quantiles(delta, percentiles)
    outputs.append(write_json(os.path.join(out_dir, f"{stem}.quantiles.json"), quantiles.to_json()))
    row = quantiles.table_row()
    outputs.append(write_csv(os.path.join(out_dir, f"{stem}.offsets.csv"), list(row), [list(row.values())]))

    if sparse is not None:
        report = structure_report(sparse, [_parse_unit(u) for u in units], display_scale)
        outputs.append(write_json(os.path.join(out_dir, f"{stem}.structure.json"), report.to_json()))
        outputs.append(write_csv(os.path.join(out_dir, f"{stem}.structure.csv"), CSV_HEADER, report.csv_rows()))
    elif units:
        logger.warning("Ignoring --units: %s is a dense delta without masks", input_path)
    logger.info("Analysis of %s written to %s", input_path, out_dir)
    return outputs


def cmd_metrics(scores_path: str, out_path: str) -> str:
    """Task-Ratio and Domain-Ratio for every domain in a task-score file."""
    reports = [score_domain(scores) for scores in load_task_scores(scores_path)]
    write_json(out_path, [report.to_json() for report in reports])
    rows = []
    for report in reports:
        for task, ratio in report.task_ratios.items():
            rows.append([report.domain, task, ratio * 100.0, ""])
        rows.append([report.domain, "", report.percent(), report.degenerate])
    write_csv(os.path.splitext(out_path)[0] + ".csv", ["domain", "task", "ratio_pct", "degenerate"], rows)
    for report in reports:
        logger.info("%s: Domain-Ratio %.2f%s", report.domain, report.percent(),
                    " (degenerate)" if report.degenerate else "")
    return out_path


def cmd_sweep(config: PipelineConfig, rates: Sequence[float], methods: Sequence[str]) -> str:
    """Realized sparsity of every method at every rate, for the first fine-tuned delta."""
    _echo_config(config)
    inputs = PipelineInputs(config)
    path, delta = next(inputs.deltas())
    rows = []
    for method in methods:
        method_config = PipelineConfig(**{**vars(config), "method": method}).validate()
        for rate in rates:
            sparse = prune_delta(delta, method_config, rate)
            worst = max(abs(sparse.unit_sparsity(k) - sparse.target_rate(k)) for k in sparse.topology.units)
            rows.append([method, rate, sparse.global_sparsity(), worst, sparse.total_kept(), sparse.total_count()])
    out_path = os.path.join(config.output_dir, f"{file_stem(path)}.sweep.csv")
    write_csv(out_path, ["method", "rate", "global_sparsity", "max_unit_deviation", "kept", "total"], rows)
    return out_path


def _config_from_args(args: argparse.Namespace) -> PipelineConfig:
    overrides = {
        "base_path": args.base,
        "finetuned_paths": args.finetuned,
        "method": args.method,
        "alpha": args.alpha,
        "lambda": args.lam,
        "N": args.n_factor,
        "significance_scope": args.significance_scope,
        "significance_mode": args.significance_mode,
        "rate_ladder": args.rate_ladder,
        "gamma_grid": args.gamma_grid,
        "search_method": args.search_method,
        "bands": args.bands,
        "seed": args.seed,
        "output_dir": args.output_dir,
    }
    config = load_pipeline_config(args.config, overrides)
    if args.oracle_kind:
        config.oracle["kind"] = args.oracle_kind
    if args.oracle_command:
        config.oracle["command"] = args.oracle_command
    return config.validate()


def _add_pipeline_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat JSON config file")
    parser.add_argument("--base", help="base checkpoint archive")
    parser.add_argument("--finetuned", nargs="+", help="fine-tuned checkpoint archives")
    parser.add_argument("--method", choices=SUPPORTED_METHODS)
    parser.add_argument("--alpha", type=float, help="target pruning rate (drop rate p for dare)")
    parser.add_argument("--lambda", dest="lam", type=float, help="largest rate fluctuation")
    parser.add_argument("--N", dest="n_factor", type=float, help="outlier factor over the mean magnitude")
    parser.add_argument("--significance-scope", choices=SIGNIFICANCE_SCOPES)
    parser.add_argument("--significance-mode", choices=SIGNIFICANCE_MODES)
    parser.add_argument("--rate-ladder", nargs="+", type=float)
    parser.add_argument("--gamma-grid", nargs="+", type=float)
    parser.add_argument("--search-method", choices=SEARCH_METHODS)
    parser.add_argument("--bands", type=int)
    parser.add_argument("--oracle-kind", choices=SUPPORTED_ORACLES)
    parser.add_argument("--oracle-command", help="command for the external_command oracle")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--output-dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=APP_TITLE, description=APP_SUBTITLE)
    parser.add_argument("--log-level", default=LOG_LEVEL)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("delta", help="compute finetuned - base")
    p.add_argument("--config", help="config file supplying naming_rules")
    p.add_argument("--base", required=True)
    p.add_argument("--finetuned", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=lambda a: cmd_delta(
        a.base, a.finetuned, a.out, load_pipeline_config(a.config).naming_rules))

    p = sub.add_parser("prune", help="sparsify deltas with the configured method")
    _add_pipeline_flags(p)
    p.set_defaults(handler=lambda a: cmd_prune(_config_from_args(a)))

    p = sub.add_parser("amplify", help="prune and search partition amplification factors")
    _add_pipeline_flags(p)
    p.set_defaults(handler=lambda a: cmd_amplify(_config_from_args(a)))

    p = sub.add_parser("merge", help="add processed deltas onto the base checkpoint")
    p.add_argument("--base", required=True)
    p.add_argument("--deltas", nargs="+", required=True)
    p.add_argument("--coefficients", nargs="+", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=lambda a: cmd_merge(a.base, a.deltas, a.out, a.coefficients))

    p = sub.add_parser("analyze", help="offset quantiles and structure report")
    p.add_argument("--input", required=True, help="delta or sparse-delta archive")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--percentiles", nargs="+", type=float, default=DEFAULT_PERCENTILES)
    p.add_argument("--units", nargs="*", default=[], help="units to break down, as <layer>:<unit>")
    p.add_argument("--display-scale", type=float, default=STRUCTURE_DISPLAY_SCALE)
    p.set_defaults(handler=lambda a: cmd_analyze(a.input, a.out_dir, a.percentiles, a.units, a.display_scale))

    p = sub.add_parser("metrics", help="Task-Ratio and Domain-Ratio from a task-score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=lambda a: cmd_metrics(a.scores, a.out))

    p = sub.add_parser("sweep", help="realized sparsity of several methods across a rate ladder")
    _add_pipeline_flags(p)
    p.add_argument("--rates", nargs="+", type=float, default=[round(0.1 * i, 1) for i in range(1, 10)])
    p.add_argument("--methods", nargs="+", choices=SUPPORTED_METHODS, default=list(SUPPORTED_METHODS))
    p.set_defaults(handler=lambda a: cmd_sweep(_config_from_args(a), a.rates, a.methods))
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        args.handler(args)
    except OracleError as e:
        logger.error("Oracle failure: %s", e)
        return EXIT_ORACLE
    except (IoError, OSError) as e:
        logger.error("I/O failure: %s", e)
        return EXIT_IO
    except DppaError as e:
        logger.error("%s", e)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
