import numpy as np
import pytest

from config import DEFAULT_NAMING_RULES
from delta_core import (
    archive_to_delta, compute_delta, delta_to_archive, merge, offset_quantiles,
)
from errors import ArgumentError, ShapeError, TopologyError
from tensor_archive import TensorArchive, load_archive, parse_topology, save_archive


def _topology(archive):
    return parse_topology(archive, DEFAULT_NAMING_RULES)


def test_identical_checkpoints_give_zero_delta(pair):
    base, _ = pair
    delta = compute_delta(base, base, _topology(base))

    for _, array in delta.named_tensors():
        assert not np.any(array)


def test_zero_base_gives_finetuned_values(pair):
    _, tuned = pair
    zeros = TensorArchive({name: np.zeros_like(array) for name, array in tuned.items()})
    delta = compute_delta(zeros, tuned, _topology(zeros))

    for name, array in delta.named_tensors():
        np.testing.assert_array_equal(array, tuned[name].astype(np.float64))


def test_delta_matches_scalar_loop(pair):
    base, tuned = pair
    delta = compute_delta(base, tuned, _topology(base))
    lookup = delta.by_name()

    name = "model.layers.1.self_attn.v_proj.weight"
    b, f = base[name], tuned[name]
    for i in range(0, b.shape[0], 7):
        for j in range(0, b.shape[1], 5):
            assert lookup[name][i, j] == float(f[i, j]) - float(b[i, j])


def test_passthrough_deltas_are_kept(delta):
    assert "model.embed_tokens.weight" in delta.passthrough
    assert "model.layers.0.input_layernorm.weight" in delta.passthrough


def test_shape_mismatch_names_tensor():
    base = TensorArchive({"layers.0.q.weight": np.zeros((2, 2), dtype=np.float32)})
    tuned = TensorArchive({"layers.0.q.weight": np.zeros((2, 3), dtype=np.float32)})

    with pytest.raises(ShapeError, match="layers.0.q.weight"):
        compute_delta(base, tuned, _topology(base))


def test_missing_tensor_is_topology_error():
    base = TensorArchive({"a": np.zeros(2, dtype=np.float32), "b": np.zeros(2, dtype=np.float32)})
    tuned = TensorArchive({"a": np.zeros(2, dtype=np.float32)})

    with pytest.raises(TopologyError):
        compute_delta(base, tuned, _topology(base))


def test_merge_of_unpruned_delta_reproduces_finetuned(pair):
    base, tuned = pair
    delta = compute_delta(base, tuned, _topology(base))

    assert merge(base, [delta]).equals(tuned)


def test_merge_identity_survives_delta_file(tmp_path, pair):
    base, tuned = pair
    path = tmp_path / "delta.archive"
    save_archive(delta_to_archive(compute_delta(base, tuned, _topology(base))), str(path))

    assert merge(base, [archive_to_delta(load_archive(str(path)))]).equals(tuned)


def test_opposite_deltas_cancel(pair):
    base, tuned = pair
    delta = compute_delta(base, tuned, _topology(base))

    assert merge(base, [delta, delta.scaled(-1.0)]).equals(base)


def test_three_deltas_match_scalar_summation(make_pair):
    base, _ = make_pair(layers=1, hidden=8, seed=1)
    topology = _topology(base)
    deltas = [compute_delta(base, make_pair(layers=1, hidden=8, seed=s)[1], topology) for s in (2, 3, 4)]
    merged = merge(base, deltas)

    name = "model.layers.0.mlp.up_proj.weight"
    expected = np.empty(base[name].shape, dtype=np.float64)
    for idx in np.ndindex(base[name].shape):
        acc = float(base[name][idx])
        for d in deltas:
            acc = acc + float(d.by_name()[name][idx])
        expected[idx] = acc
    np.testing.assert_array_equal(merged[name], expected.astype(np.float32))


def test_merge_is_order_insensitive(make_pair):
    base, _ = make_pair(layers=1, hidden=8, seed=1)
    topology = _topology(base)
    deltas = [compute_delta(base, make_pair(layers=1, hidden=8, seed=s)[1], topology) for s in (5, 6, 7)]

    forward = merge(base, deltas)
    backward = merge(base, deltas[::-1])
    for name in base.names():
        np.testing.assert_allclose(forward[name], backward[name], rtol=1e-6)


def test_merge_coefficients(pair):
    base, tuned = pair
    delta = compute_delta(base, tuned, _topology(base))

    assert merge(base, [delta], coefficients=[0.0]).equals(base)


def test_merge_needs_deltas(pair):
    base, _ = pair
    with pytest.raises(ArgumentError):
        merge(base, [])


def test_merge_shape_mismatch(make_delta):
    base = TensorArchive({"layers.0.q.weight": np.zeros((2, 2), dtype=np.float32)})
    bad = make_delta({(0, "q"): np.zeros((3, 2))})

    with pytest.raises(ShapeError):
        merge(base, [bad])


def test_zero_delta_quantiles(make_delta):
    report = offset_quantiles(make_delta({(0, "q"): np.zeros((4, 4))}), [0.1, 0.5, 0.9])

    assert report.values == [0.0, 0.0, 0.0]
    assert report.min == report.max == 0.0


def test_normal_delta_quantiles_match_analytic(make_delta):
    rng = np.random.default_rng(0)
    samples = rng.standard_normal(1_000_000) * 0.001
    report = offset_quantiles(make_delta({(0, "q"): samples.reshape(1000, 1000)}), [0.1, 0.9])

    assert report.values[0] == pytest.approx(-0.001282, rel=0.02)
    assert report.values[1] == pytest.approx(0.001282, rel=0.02)
    assert report.min <= report.values[0] <= report.values[1] <= report.max


def test_quantiles_pool_passthrough(make_delta):
    delta = make_delta({(0, "q"): np.array([1.0, 2.0])}, passthrough={"embed": np.array([-5.0, 10.0])})
    report = offset_quantiles(delta, [0.0, 1.0])

    assert report.values == [-5.0, 10.0]
    assert report.count == 4


def test_quantiles_ignore_element_order(make_delta):
    values = np.arange(20, dtype=np.float64) - 7.5
    shuffled = np.random.default_rng(3).permutation(values)
    a = offset_quantiles(make_delta({(0, "q"): values}), [0.25, 0.5, 0.75])
    b = offset_quantiles(make_delta({(0, "q"): shuffled}), [0.25, 0.5, 0.75])

    assert a.to_json() == b.to_json()


def test_quantiles_need_sorted_percentiles(make_delta):
    with pytest.raises(ArgumentError):
        offset_quantiles(make_delta({(0, "q"): np.ones(3)}), [0.9, 0.1])


def test_quantiles_need_nonempty_delta(make_delta):
    with pytest.raises(ArgumentError):
        offset_quantiles(make_delta({}), [0.5])
