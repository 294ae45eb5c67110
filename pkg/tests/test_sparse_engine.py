# tests/test_sparse_engine.py
import itertools

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.signal import convolve

from rsn.core import Rng
from rsn.sparse_engine import (
    SPFE_PRESETS,
    SparseTensor,
    SpfeBlock,
    SpfeConfig,
    build_rulebook_sc,
    build_rulebook_ssc,
    kernel_offsets,
    run_spfe,
    sparse_conv_forward,
    sparse_max_pool,
    spfe_layer_specs,
    trace_spfe,
)
from rsn.weights import init_from_specs


def _random_tensor(rng, dims, n_sites, channels, extent=6):
    cells = list(itertools.product(range(extent), repeat=dims))
    chosen = rng.choice(len(cells), size=min(n_sites, len(cells)), replace=False)
    coords = np.array([cells[i] for i in chosen], dtype=np.int64)
    return SparseTensor(dims, coords, rng.normal(size=(len(coords), channels)))


def _dense_reference(tensor, weights, bias, stride, submanifold):
    """
    Zero-densify the input, convolve every channel pair with scipy, and read
    the result at s * o. out[o] = sum_k W[k] x[s * o - k] is a true convolution.
    """
    dims = tensor.dims
    lo = tensor.coords.min(axis=0)
    shape = tuple(int(n) for n in tensor.coords.max(axis=0) - lo + 1)
    dense = tensor.to_dense(origin=lo, shape=shape)
    c_in, c_out = weights.shape[1:]
    kernel = weights.reshape((3,) * dims + (c_in, c_out))

    full = np.zeros(tuple(n + 2 for n in shape) + (c_out,))
    for a in range(c_in):
        for b in range(c_out):
            full[..., b] += convolve(dense[..., a], kernel[..., a, b], mode="full", method="direct")
    occupancy = np.zeros(shape)
    occupancy[tuple((tensor.coords - lo).T)] = 1.0
    support = convolve(occupancy, np.ones((3,) * dims), mode="full", method="direct") > 0.5

    # full index n holds position p = lo + n - 1
    if submanifold:
        return {tuple(c.tolist()): full[tuple(c - lo + 1)] + bias for c in tensor.coords}
    expected = {}
    for n in np.argwhere(support):
        p = lo + n - 1
        if np.all(p % stride == 0):
            expected[tuple((p // stride).tolist())] = full[tuple(n)] + bias
    return expected


class TestSparseConvAgainstDenseConvolution:
    @pytest.mark.parametrize("dims", [2, 3])
    @pytest.mark.parametrize("kind,stride", [("SSC", 1), ("SC", 1), ("SC", 2)])
    @pytest.mark.parametrize("seed", range(100))
    def test_matches_dense(self, dims, kind, stride, seed):
        rng = np.random.default_rng(seed)
        tensor = _random_tensor(rng, dims, n_sites=int(rng.integers(1, 25)), channels=3)
        volume = 3 ** dims
        weights = rng.normal(size=(volume, 3, 2))
        bias = rng.normal(size=2)
        if kind == "SSC":
            rulebook = build_rulebook_ssc(tensor)
        else:
            rulebook = build_rulebook_sc(tensor, stride=stride)
        out = sparse_conv_forward(tensor, weights, rulebook, bias)
        expected = _dense_reference(tensor, weights, bias, stride, kind == "SSC")

        assert sorted(expected) == [tuple(c) for c in out.coords.tolist()]
        for coord, feature in zip(out.coords.tolist(), out.features):
            np.testing.assert_allclose(feature, expected[tuple(coord)], atol=1e-5)
        assert out.stride_level == stride


def test_offsets_are_lexicographic():
    offsets = kernel_offsets(2)
    assert offsets.shape == (9, 2)
    np.testing.assert_array_equal(offsets[0], [-1, -1])
    np.testing.assert_array_equal(offsets[4], [0, 0])
    np.testing.assert_array_equal(offsets[-1], [1, 1])
    assert kernel_offsets(3, 5).shape == (125, 3)
    with pytest.raises(ValueError):
        kernel_offsets(2, 4)


def test_sparse_tensor_sorts_and_rejects_duplicates():
    tensor = SparseTensor(2, [[3, 1], [0, 5], [0, 2]], [[1.0], [2.0], [3.0]])
    np.testing.assert_array_equal(tensor.coords, [[0, 2], [0, 5], [3, 1]])
    np.testing.assert_array_equal(tensor.features[:, 0], [3.0, 2.0, 1.0])
    with pytest.raises(ValueError):
        SparseTensor(2, [[1, 1], [1, 1]], np.zeros((2, 1)))
    with pytest.raises(ValueError):
        SparseTensor(4, np.zeros((1, 4)), np.zeros((1, 1)))


def test_to_dense_places_features():
    tensor = SparseTensor(2, [[1, 2], [3, 0]], [[1.0, 2.0], [3.0, 4.0]])
    dense = tensor.to_dense(origin=[1, 0], shape=(3, 3))
    assert dense.shape == (3, 3, 2)
    np.testing.assert_array_equal(dense[0, 2], [1.0, 2.0])
    np.testing.assert_array_equal(dense[2, 0], [3.0, 4.0])
    assert dense.sum() == 10.0


def test_single_site_regular_conv_dilates():
    tensor = SparseTensor(2, [[5, 5]], [[1.0]])
    rulebook = build_rulebook_sc(tensor, stride=1)
    assert rulebook.num_out_sites == 9
    assert rulebook.total_pairs == 9


def test_single_site_strided_conv_has_four_outputs():
    tensor = SparseTensor(2, [[5, 5]], [[1.0]])
    rulebook = build_rulebook_sc(tensor, stride=2)
    np.testing.assert_array_equal(rulebook.out_coords, [[2, 2], [2, 3], [3, 2], [3, 3]])
    assert rulebook.out_stride_level == 2
    with pytest.raises(ValueError):
        build_rulebook_sc(tensor, stride=3)


def test_empty_input():
    empty = SparseTensor(2, np.zeros((0, 2)), np.zeros((0, 4)))
    for rulebook in (build_rulebook_ssc(empty), build_rulebook_sc(empty, stride=2)):
        assert rulebook.num_out_sites == 0 and rulebook.total_pairs == 0
        out = sparse_conv_forward(empty, np.ones((9, 4, 2)), rulebook)
        assert out.num_sites == 0 and out.channels == 2


def test_two_adjacent_sites_submanifold_pairs():
    tensor = SparseTensor(2, [[0, 0], [0, 1]], np.ones((2, 1)))
    assert build_rulebook_ssc(tensor).total_pairs == 4


def test_identity_and_zero_weights():
    rng = np.random.default_rng(0)
    tensor = _random_tensor(rng, 3, 20, 4)
    identity = np.zeros((27, 4, 4))
    identity[13] = np.eye(4)
    out = sparse_conv_forward(tensor, identity, build_rulebook_ssc(tensor))
    np.testing.assert_array_equal(out.features, tensor.features)
    np.testing.assert_array_equal(out.coords, tensor.coords)

    bias = np.array([0.5, -1.0])
    zero = sparse_conv_forward(tensor, np.zeros((27, 4, 2)), build_rulebook_ssc(tensor), bias)
    np.testing.assert_array_equal(zero.features, np.tile(bias, (20, 1)))


def test_conv_rejects_mismatched_weights():
    tensor = SparseTensor(2, [[0, 0]], [[1.0, 2.0]])
    rulebook = build_rulebook_ssc(tensor)
    with pytest.raises(ValueError):
        sparse_conv_forward(tensor, np.zeros((27, 2, 1)), rulebook)
    with pytest.raises(ValueError):
        sparse_conv_forward(tensor, np.zeros((9, 3, 1)), rulebook)
    with pytest.raises(ValueError):
        sparse_conv_forward(tensor, np.zeros((9, 2, 1)), rulebook, bias=np.zeros(2))


def test_conv_is_linear_in_features():
    rng = np.random.default_rng(1)
    a = _random_tensor(rng, 2, 15, 3)
    b = a.with_features(rng.normal(size=a.features.shape))
    weights = rng.normal(size=(9, 3, 2))
    rulebook = build_rulebook_sc(a, stride=2)
    combined = sparse_conv_forward(a.with_features(2.0 * a.features - 3.0 * b.features), weights, rulebook)
    separate = 2.0 * sparse_conv_forward(a, weights, rulebook).features \
        - 3.0 * sparse_conv_forward(b, weights, rulebook).features
    np.testing.assert_allclose(combined.features, separate, atol=1e-10)


def test_translation_equivariance():
    rng = np.random.default_rng(2)
    tensor = _random_tensor(rng, 2, 18, 3)
    weights = rng.normal(size=(9, 3, 3))
    shift = np.array([4, -6])
    moved = SparseTensor(2, tensor.coords + shift, tensor.features)

    ssc = sparse_conv_forward(tensor, weights, build_rulebook_ssc(tensor))
    ssc_moved = sparse_conv_forward(moved, weights, build_rulebook_ssc(moved))
    np.testing.assert_array_equal(ssc_moved.coords, ssc.coords + shift)
    np.testing.assert_allclose(ssc_moved.features, ssc.features, atol=1e-12)

    sc = sparse_conv_forward(tensor, weights, build_rulebook_sc(tensor, stride=2))
    sc_moved = sparse_conv_forward(moved, weights, build_rulebook_sc(moved, stride=2))
    np.testing.assert_array_equal(sc_moved.coords, sc.coords + shift // 2)
    np.testing.assert_allclose(sc_moved.features, sc.features, atol=1e-12)


def test_max_pool_cases():
    isolated = SparseTensor(2, [[0, 0], [5, 5]], [[1.0], [2.0]])
    np.testing.assert_array_equal(sparse_max_pool(isolated).features, isolated.features)
    pair = SparseTensor(2, [[0, 0], [1, 1]], [[1.0], [5.0]])
    np.testing.assert_array_equal(sparse_max_pool(pair).features[:, 0], [5.0, 5.0])

    rng = np.random.default_rng(3)
    tensor = _random_tensor(rng, 3, 30, 2)
    pooled = sparse_max_pool(tensor)
    for coord, feature in zip(tensor.coords, pooled.features):
        near = np.all(np.abs(tensor.coords - coord) <= 1, axis=1)
        np.testing.assert_array_equal(feature, tensor.features[near].max(axis=0))


def _spfe_weights(config, in_channels, seed=0):
    return init_from_specs(spfe_layer_specs(config, in_channels), Rng(seed))


def test_spfe_empty_config_is_identity():
    tensor = _random_tensor(np.random.default_rng(4), 2, 10, 3)
    out, stats = trace_spfe(tensor, SpfeConfig(dims=2), {})
    assert out is tensor and stats == []


def test_spfe_submanifold_blocks_keep_sites():
    config = SpfeConfig(dims=3, blocks=[SpfeBlock(kind="SSC", channels=5)] * 3)
    tensor = _random_tensor(np.random.default_rng(5), 3, 25, 4)
    out, stats = trace_spfe(tensor, config, _spfe_weights(config, 4))
    np.testing.assert_array_equal(out.coords, tensor.coords)
    assert out.channels == 5
    assert np.all(out.features >= 0.0)
    assert [s.out_sites for s in stats] == [25, 25, 25]
    assert all(s.pairs >= 25 for s in stats)


def test_spfe_strided_block_reports_stride():
    config = SpfeConfig(dims=2, blocks=[SpfeBlock(kind="SSC", channels=4), SpfeBlock(kind="SC", stride=2, channels=4)])
    tensor = _random_tensor(np.random.default_rng(6), 2, 20, 3)
    out = run_spfe(tensor, config, _spfe_weights(config, 3))
    assert out.stride_level == 2
    assert config.total_stride == 2 and config.out_channels == 4


def test_spfe_validation():
    config = SpfeConfig(dims=2, blocks=[SpfeBlock(kind="SSC", channels=4)])
    with pytest.raises(ValueError):
        run_spfe(_random_tensor(np.random.default_rng(7), 3, 5, 3), config, _spfe_weights(config, 3))
    with pytest.raises(ValueError):
        run_spfe(_random_tensor(np.random.default_rng(7), 2, 5, 3), config, {})
    with pytest.raises(ValidationError):
        SpfeBlock(kind="SSC", stride=2, channels=4)


def test_presets():
    assert set(SPFE_PRESETS) == {"CarS", "CarL", "PedS", "PedL", "CarXL"}
    assert SpfeConfig.preset("CarS").total_stride == 2
    assert SpfeConfig.preset("PedS").total_stride == 1
    assert SpfeConfig.preset("CarXL").dims == 3
    assert len(SpfeConfig.preset("CarL").blocks) > len(SpfeConfig.preset("CarS").blocks)
    with pytest.raises(ValueError):
        SpfeConfig.preset("Truck")
    specs = spfe_layer_specs(SpfeConfig.preset("CarS"), 10)
    assert specs["spfe.block0.weight"] == (9, 10, 96)
    assert specs["spfe.block1.weight"] == (9, 96, 96)
