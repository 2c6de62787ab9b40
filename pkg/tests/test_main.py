import csv
import json
import shlex
import sys

import numpy as np
import pytest

from main import EXIT_IO, EXIT_OK, EXIT_ORACLE, EXIT_USAGE, main
from pruners import archive_to_sparse
from tensor_archive import TensorArchive, load_archive, save_archive


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.reader(handle))


def _prune(base, tuned, out, method, alpha, *extra):
    return main([
        "prune", "--base", str(base), "--finetuned", str(tuned), "--method", method,
        "--alpha", str(alpha), "--output-dir", str(out), *extra,
    ])


def test_delta_then_merge_reproduces_finetuned(tmp_path, archive_files):
    base, tuned = archive_files
    delta_path, merged_path = tmp_path / "math.delta", tmp_path / "merged.archive"

    assert main(["delta", "--base", str(base), "--finetuned", str(tuned), "--out", str(delta_path)]) == EXIT_OK
    assert main(["merge", "--base", str(base), "--deltas", str(delta_path), "--out", str(merged_path)]) == EXIT_OK

    assert merged_path.read_bytes() == tuned.read_bytes()


def test_shape_mismatch_is_usage_error(tmp_path):
    base, tuned = tmp_path / "base.archive", tmp_path / "tuned.archive"
    save_archive(TensorArchive({"layers.0.q.weight": np.zeros((2, 2), dtype=np.float32)}), str(base))
    save_archive(TensorArchive({"layers.0.q.weight": np.zeros((2, 3), dtype=np.float32)}), str(tuned))

    code = main(["delta", "--base", str(base), "--finetuned", str(tuned), "--out", str(tmp_path / "d")])

    assert code == EXIT_USAGE


def test_missing_file_is_io_error(tmp_path, archive_files):
    base, _ = archive_files
    code = main(["delta", "--base", str(base), "--finetuned", str(tmp_path / "nope"), "--out", str(tmp_path / "d")])
    assert code == EXIT_IO


@pytest.mark.parametrize("method", ["magnitude", "owl", "dp", "dare"])
def test_prune_writes_summary(tmp_path, archive_files, method):
    base, tuned = archive_files
    out = tmp_path / "out"

    assert _prune(base, tuned, out, method, 0.9) == EXIT_OK

    summary = json.loads((out / f"math.{method}.summary.json").read_text(encoding="utf-8"))
    assert summary["method"] == method
    assert summary["global_sparsity"] == pytest.approx(0.9, abs=0.08 if method in ("owl", "dp") else 0.02)
    sparse = archive_to_sparse(load_archive(str(out / f"math.{method}.sparse")))
    assert sparse.total_kept() == summary["kept"]
    assert (out / f"math.{method}.plan.json").exists() == (method in ("owl", "dp"))
    effective = json.loads((out / "effective_config.json").read_text(encoding="utf-8"))
    assert effective["method"] == method
    assert effective["lambda"] == 0.08


@pytest.mark.parametrize("method", ["dp", "dare"])
def test_prune_is_repeatable(tmp_path, archive_files, method):
    base, tuned = archive_files

    assert _prune(base, tuned, tmp_path / "a", method, 0.8, "--seed", "7") == EXIT_OK
    assert _prune(base, tuned, tmp_path / "b", method, 0.8, "--seed", "7") == EXIT_OK

    first = (tmp_path / "a" / f"math.{method}.sparse").read_bytes()
    assert first == (tmp_path / "b" / f"math.{method}.sparse").read_bytes()


def test_pruned_delta_merges(tmp_path, archive_files):
    base, tuned = archive_files
    out = tmp_path / "out"
    assert _prune(base, tuned, out, "dp", 0.9) == EXIT_OK

    merged = tmp_path / "merged.archive"
    code = main(["merge", "--base", str(base), "--deltas", str(out / "math.dp.sparse"), "--out", str(merged)])

    assert code == EXIT_OK
    assert load_archive(str(merged)).names() == load_archive(str(base)).names()


def test_amplify_with_unit_grid_matches_prune(tmp_path, archive_files):
    base, tuned = archive_files
    out = tmp_path / "out"
    assert _prune(base, tuned, out, "dp", 0.8) == EXIT_OK

    code = main([
        "amplify", "--base", str(base), "--finetuned", str(tuned), "--method", "dp", "--alpha", "0.8",
        "--rate-ladder", "0.9", "0.8", "--gamma-grid", "1.0", "--output-dir", str(out),
    ])

    assert code == EXIT_OK
    pruned = archive_to_sparse(load_archive(str(out / "math.dp.sparse")))
    amplified = archive_to_sparse(load_archive(str(out / "math.dp.amplified.sparse")))
    assert amplified.gammas == [1.0, 1.0]
    for key in pruned.topology.units:
        np.testing.assert_array_equal(amplified.values[key], pruned.values[key])
    trace = (out / "math.dp.trace.jsonl").read_text(encoding="utf-8").splitlines()
    assert len(trace) == 2
    assert set(json.loads(trace[0])) >= {"step", "gamma", "score", "candidate_hash"}
    profile = json.loads((out / "math.dp.profile.json").read_text(encoding="utf-8"))
    assert profile["method"] == "method2"


def test_amplify_dare(tmp_path, archive_files):
    base, tuned = archive_files
    out = tmp_path / "out"

    code = main([
        "amplify", "--base", str(base), "--finetuned", str(tuned), "--method", "dare", "--alpha", "0.5",
        "--bands", "2", "--gamma-grid", "0.5", "1.0", "--oracle-kind", "proxy_cosine", "--output-dir", str(out),
    ])

    assert code == EXIT_OK
    profile = json.loads((out / "math.dare.profile.json").read_text(encoding="utf-8"))
    assert profile["method"] == "dare_reduction"
    assert len(profile["gammas"]) == 2


def test_failing_oracle_exits_with_oracle_code(tmp_path, archive_files):
    base, tuned = archive_files
    script = tmp_path / "oracle.py"
    script.write_text("import sys\nsys.exit(1)\n", encoding="utf-8")

    code = main([
        "amplify", "--base", str(base), "--finetuned", str(tuned), "--rate-ladder", "0.9",
        "--gamma-grid", "1.0", "--oracle-kind", "external_command",
        "--oracle-command", f"{shlex.quote(sys.executable)} {shlex.quote(str(script))}",
        "--output-dir", str(tmp_path / "out"),
    ])

    assert code == EXIT_ORACLE


def test_analyze_sparse_file(tmp_path, archive_files):
    base, tuned = archive_files
    out = tmp_path / "out"
    assert _prune(base, tuned, out, "magnitude", 0.9) == EXIT_OK

    code = main([
        "analyze", "--input", str(out / "math.magnitude.sparse"), "--out-dir", str(tmp_path / "report"),
        "--units", "0:q_proj", "--percentiles", "0.1", "0.9",
    ])

    assert code == EXIT_OK
    sparse = archive_to_sparse(load_archive(str(out / "math.magnitude.sparse")))
    rows = _read_csv(tmp_path / "report" / "math.magnitude.structure.csv")
    assert rows[0] == ["level", "layer", "unit", "index", "kept", "scaled_mass"]
    assert sum(int(r[4]) for r in rows[1:] if r[0] == "layer") == sparse.total_kept()
    assert sum(int(r[4]) for r in rows[1:] if r[0] == "row") == sparse.kept_counts[sparse.topology.find(0, "q_proj")]
    offsets = _read_csv(tmp_path / "report" / "math.magnitude.offsets.csv")
    assert offsets[0] == ["min", "10%", "90%", "max"]


def test_analyze_rejects_bad_unit(tmp_path, archive_files):
    base, tuned = archive_files
    out = tmp_path / "out"
    assert _prune(base, tuned, out, "magnitude", 0.5) == EXIT_OK

    code = main(["analyze", "--input", str(out / "math.magnitude.sparse"), "--out-dir", str(out),
                 "--units", "q_proj"])

    assert code == EXIT_USAGE


def test_metrics(tmp_path):
    scores = tmp_path / "scores.json"
    scores.write_text(json.dumps({"domain": "math", "tasks": [
        {"name": "gsm8k", "dense": 0.5, "pruned": 0.125},
        {"name": "MATH", "dense": 1.0, "pruned": 4.0},
    ]}), encoding="utf-8")
    out = tmp_path / "metrics.json"

    assert main(["metrics", "--scores", str(scores), "--out", str(out)]) == EXIT_OK

    (report,) = json.loads(out.read_text(encoding="utf-8"))
    assert report["domain_ratio_pct"] == pytest.approx(100.0)
    assert len(_read_csv(tmp_path / "metrics.csv")) == 4


def test_sweep(tmp_path, archive_files):
    base, tuned = archive_files
    out = tmp_path / "out"

    code = main([
        "sweep", "--base", str(base), "--finetuned", str(tuned), "--output-dir", str(out),
        "--rates", "0.5", "0.9", "--methods", "magnitude", "dp",
    ])

    assert code == EXIT_OK
    rows = _read_csv(out / "math.sweep.csv")
    assert len(rows) == 5
    for row in rows[1:]:
        assert float(row[3]) <= 1.0 / 4096


def test_unknown_config_key(tmp_path, archive_files):
    base, tuned = archive_files
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"alpha": 0.5, "sparsity": 0.5}), encoding="utf-8")

    code = main(["prune", "--config", str(cfg), "--base", str(base), "--finetuned", str(tuned)])

    assert code == EXIT_USAGE


@pytest.mark.parametrize("payload", [
    {"oracle": "proxy_cosine"},
    {"alpha": "high"},
    {"seed": [1]},
    {"gamma_grid": 1.0},
    {"rate_ladder": ["a", "b"]},
    {"naming_rules": [{"unit": "q_proj"}]},
    {"naming_rules": "layers"},
], ids=["oracle_str", "alpha_text", "seed_list", "grid_scalar", "ladder_text", "rule_no_pattern", "rules_str"])
def test_malformed_config_values_are_usage_errors(tmp_path, archive_files, payload):
    base, tuned = archive_files
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(payload), encoding="utf-8")

    code = main(["prune", "--config", str(cfg), "--base", str(base), "--finetuned", str(tuned),
                 "--output-dir", str(tmp_path / "out")])

    assert code == EXIT_USAGE


def test_finetuned_paths_must_be_a_list(tmp_path, archive_files):
    base, tuned = archive_files
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"base_path": str(base), "finetuned_paths": str(tuned)}), encoding="utf-8")

    assert main(["prune", "--config", str(cfg), "--output-dir", str(tmp_path / "out")]) == EXIT_USAGE


def test_config_file_values_are_used(tmp_path, archive_files):
    base, tuned = archive_files
    out = tmp_path / "out"
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({
        "base_path": str(base), "finetuned_paths": [str(tuned)], "method": "magnitude",
        "alpha": 0.5, "output_dir": str(out),
    }), encoding="utf-8")

    assert main(["prune", "--config", str(cfg)]) == EXIT_OK

    summary = json.loads((out / "math.magnitude.summary.json").read_text(encoding="utf-8"))
    assert summary["global_sparsity"] == pytest.approx(0.5, abs=1e-3)
