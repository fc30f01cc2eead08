import numpy as np
import pytest

from aqmm.binning import (
    BinPartition,
    bin_of,
    constrained_width,
    illegal_masks,
    min_magnitude,
    sentence_of,
    strictly_illegal_mask,
)
from aqmm.errors import InvalidInputError
from aqmm.so3 import sample_uniform_rotation


def test_partition_edges_and_midpoints():
    p = BinPartition(4)
    np.testing.assert_array_equal(p.edges, [-1.0, -0.5, 0.0, 0.5, 1.0])
    np.testing.assert_array_equal(p.midpoints, [-0.75, -0.25, 0.25, 0.75])
    assert p.width == 0.5


def test_partition_rejects_small_counts():
    with pytest.raises(InvalidInputError):
        BinPartition(1)


def test_odd_partition_warns():
    with pytest.warns(UserWarning):
        BinPartition(7)


def test_bin_of_boundaries():
    p = BinPartition(4)
    assert bin_of(-1.0, p) == 0
    assert bin_of(0.0, p) == 2
    assert bin_of(0.4999999, p) == 2
    assert bin_of(0.5, p) == 3
    assert bin_of(1.0, p) == 3


def test_bin_of_matches_edges(rng):
    p = BinPartition(4096)
    x = rng.uniform(-1.0, 1.0, 100_000)
    k = bin_of(x, p)
    assert np.all(p.lower[k] <= x)
    assert np.all(x < p.upper[k])


def test_bin_of_rejects_out_of_range():
    with pytest.raises(InvalidInputError):
        bin_of(1.5, BinPartition(4))


def test_min_magnitudes():
    p = BinPartition(4)
    np.testing.assert_array_equal(p.min_magnitudes, [0.5, 0.0, 0.0, 0.5])
    assert min_magnitude(3, p) == 0.5
    with pytest.raises(InvalidInputError):
        min_magnitude(4, p)


def test_equality_is_legal():
    """最小絶対値の二乗和がちょうど 1 のビンは合法"""
    mask = illegal_masks(np.array([0.75]), BinPartition(4))[0]
    np.testing.assert_array_equal(mask, [False, False, False, False])
    mask = illegal_masks(np.array([0.76]), BinPartition(4))[0]
    np.testing.assert_array_equal(mask, [True, False, False, True])


def test_strictly_illegal_mask_example():
    """q_x = 0.42, q_y = 0.901, N = 20 のとき [0.9, 1.0] は合法のまま"""
    p = BinPartition(20)
    prev = [int(bin_of(0.42, p))]
    assert not strictly_illegal_mask(prev, p)[bin_of(0.901, p)]


def test_strictly_illegal_mask_validation():
    p = BinPartition(10)
    with pytest.raises(InvalidInputError):
        strictly_illegal_mask([0, 1, 2], p)
    with pytest.raises(InvalidInputError):
        strictly_illegal_mask([0, 9], p)


@pytest.mark.parametrize("n_bins", [2, 64, 4096])
def test_mask_soundness(n_bins):
    """真の四元数の文は決してマスクされない"""
    p = BinPartition(n_bins)
    q = sample_uniform_rotation(np.random.default_rng(n_bins), 100_000)
    sent = sentence_of(q, p)
    mm_sq = p.min_magnitudes_sq[sent]
    prefixes = [np.zeros(len(q)), mm_sq[:, 0], mm_sq[:, 0] + mm_sq[:, 1]]
    for step, prefix in enumerate(prefixes):
        masks = illegal_masks(prefix, p)
        assert not np.any(masks[np.arange(len(q)), sent[:, step]])


def test_mask_soundness_odd_bins():
    with pytest.warns(UserWarning):
        p = BinPartition(7)
    q = sample_uniform_rotation(np.random.default_rng(7), 10_000)
    sent = sentence_of(q, p)
    mm_sq = p.min_magnitudes_sq[sent]
    assert np.all(mm_sq.sum(axis=-1) <= 1.0)


def test_constrained_width():
    p = BinPartition(4)
    assert constrained_width(1, 1.0, p) == pytest.approx(0.5)
    assert constrained_width(3, 0.36, p) == pytest.approx(0.1)
    assert constrained_width(3, 0.16, p) == 0.0
    assert constrained_width(2, 0.0, p) == 0.0


def test_sentence_shape(rng):
    q = sample_uniform_rotation(rng, 5)
    assert sentence_of(q, BinPartition(8)).shape == (5, 3)
