import shlex
import sys

import numpy as np
import pytest

import config
from errors import ArgumentError, OracleError
from oracle_engine import (
    CosineOracle, ExternalCommandOracle, OracleSpec, QuadraticOracle, ReconstructionOracle,
    build_oracle, candidate_hash,
)


def _command(script) -> str:
    return f"{shlex.quote(sys.executable)} {shlex.quote(str(script))}"


def _script(tmp_path, body: str):
    path = tmp_path / "oracle.py"
    path.write_text("import os, sys, time\n" + body, encoding="utf-8")
    return path


@pytest.fixture
def small_delta(make_delta):
    rng = np.random.default_rng(0)
    return make_delta({(l, u): rng.standard_normal((4, 6)) for l in range(2) for u in ("q", "k")})


def test_build_oracle_kinds(small_delta):
    assert isinstance(build_oracle(OracleSpec("proxy_cosine"), small_delta), CosineOracle)
    assert isinstance(build_oracle(OracleSpec("proxy_quadratic"), small_delta), QuadraticOracle)
    assert isinstance(build_oracle(OracleSpec("proxy_reconstruction"), small_delta), ReconstructionOracle)
    with pytest.raises(ArgumentError):
        build_oracle(OracleSpec("benchmark"), small_delta)


def test_spec_from_config():
    spec = OracleSpec.from_config({"kind": "proxy_reconstruction", "probe_batch": 8, "deterministic": "false"})

    assert spec.kind == "proxy_reconstruction"
    assert spec.get_int("probe_batch", 16) == 8
    assert not spec.deterministic
    with pytest.raises(ArgumentError):
        OracleSpec("proxy_reconstruction", {"probe_seed": "x"}).get_int("probe_seed", 0)


def test_cosine_of_reference_is_one(small_delta):
    score, _, _ = build_oracle(OracleSpec("proxy_cosine"), small_delta).score(small_delta)
    assert score == pytest.approx(1.0)


def test_cosine_of_zero_candidate_is_zero(small_delta):
    score, _, _ = build_oracle(OracleSpec("proxy_cosine"), small_delta).score(small_delta.scaled(0.0))
    assert score == 0.0


def test_quadratic_score(small_delta):
    oracle = build_oracle(OracleSpec("proxy_quadratic"), small_delta)
    expected = -sum(float(np.sum(t * t)) for t in small_delta.tensors.values())

    assert oracle.score(small_delta)[0] == 0.0
    assert oracle.score(small_delta.scaled(0.0))[0] == pytest.approx(expected)


def test_identity_probe_matches_quadratic(small_delta):
    candidate = small_delta.scaled(1.7)
    reconstruction = build_oracle(OracleSpec("proxy_reconstruction", {"probe": "identity"}), small_delta)
    quadratic = build_oracle(OracleSpec("proxy_quadratic"), small_delta)

    assert reconstruction.score(candidate)[0] == pytest.approx(quadratic.score(candidate)[0], rel=1e-12)


def test_gaussian_probes_are_seeded(small_delta):
    spec = OracleSpec("proxy_reconstruction", {"probe_seed": "4", "probe_batch": "3"})
    first, second = build_oracle(spec, small_delta), build_oracle(spec, small_delta)
    key = small_delta.topology.units[0]

    assert first.probe(key).shape == (6, 3)
    np.testing.assert_array_equal(first.probe(key), second.probe(key))


def test_unknown_probe_kind(small_delta):
    with pytest.raises(ArgumentError):
        build_oracle(OracleSpec("proxy_reconstruction", {"probe": "uniform"}), small_delta)


def test_scores_are_cached_by_content(small_delta):
    oracle = build_oracle(OracleSpec("proxy_quadratic"), small_delta)
    candidate = small_delta.scaled(0.5)

    first = oracle.score(candidate)
    second = oracle.score(small_delta.scaled(0.5))

    assert first[0] == second[0]
    assert first[1] == second[1] == candidate_hash(candidate)
    assert (first[2], second[2]) == (False, True)
    assert oracle.evaluations == 1


def test_external_command_success(tmp_path, small_delta, monkeypatch):
    scratch = tmp_path / "scratch"
    scratch.mkdir()
    monkeypatch.setattr(config, "TEMP_DIR", str(scratch))
    base = tmp_path / "base.archive"
    base.write_bytes(b"")
    script = _script(tmp_path, (
        "base, candidate = sys.argv[1], sys.argv[2]\n"
        "assert os.path.exists(base) and os.path.exists(candidate)\n"
        "print(1.25 if os.path.getsize(candidate) > 0 else -1)\n"
    ))
    oracle = build_oracle(OracleSpec("external_command", {"command": _command(script)}), small_delta, str(base))

    score, _, cached = oracle.score(small_delta, step=0)

    assert isinstance(oracle, ExternalCommandOracle)
    assert score == 1.25
    assert not cached
    assert list(scratch.iterdir()) == []


def test_external_command_nonzero_exit(tmp_path, small_delta):
    script = _script(tmp_path, "sys.stderr.write('boom')\nsys.exit(3)\n")
    oracle = build_oracle(OracleSpec("external_command", {"command": _command(script)}), small_delta, "base")

    with pytest.raises(OracleError, match="step 2") as info:
        oracle.score(small_delta, step=2)
    assert info.value.step == 2


def test_external_command_bad_output(tmp_path, small_delta):
    script = _script(tmp_path, "print('accuracy: high')\n")
    oracle = build_oracle(OracleSpec("external_command", {"command": _command(script)}), small_delta, "base")

    with pytest.raises(OracleError):
        oracle.score(small_delta, step=0)


def test_external_command_non_finite_output(tmp_path, small_delta):
    script = _script(tmp_path, "print('nan')\n")
    oracle = build_oracle(OracleSpec("external_command", {"command": _command(script)}), small_delta, "base")

    with pytest.raises(OracleError):
        oracle.score(small_delta, step=1)


def test_external_command_timeout(tmp_path, small_delta):
    script = _script(tmp_path, "time.sleep(10)\nprint(1)\n")
    spec = OracleSpec("external_command", {"command": _command(script), "timeout": "0.5"})
    oracle = build_oracle(spec, small_delta, "base")

    with pytest.raises(OracleError, match="timed out"):
        oracle.score(small_delta, step=0)


def test_external_command_needs_command(small_delta):
    with pytest.raises(ArgumentError):
        build_oracle(OracleSpec("external_command"), small_delta, "base")
