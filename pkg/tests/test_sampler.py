import numpy as np
import pytest
from scipy import stats

import aqmm.sampler as sampler
from aqmm.binning import BinPartition, bin_of, sentence_of, strictly_illegal_mask
from aqmm.errors import InvalidInputError, SamplingError
from aqmm.sampler import (
    MogQuaternionModel,
    QuaternionModel,
    conditioning_cache,
    log_densities,
    log_density,
    naive_illegal_mask,
    predict_quaternion,
    predict_quaternions,
    sample_quaternion,
    sample_quaternion_mog,
    sample_quaternions,
)
from aqmm.scorer import ScorerConfig, ScorerParameters, masked_log_probs, score_step


def test_sample_is_unit_quaternion_inside_cell(tiny_params, rng):
    for viewpoint in range(6):
        q, trace = sample_quaternion(tiny_params, viewpoint, rng)
        assert np.linalg.norm(q) == pytest.approx(1.0, abs=1e-12)
        assert q[3] >= 0.0
        lower, upper = trace.cell_edges[:, 0], trace.cell_edges[:, 1]
        assert np.all(lower <= trace.point) and np.all(trace.point <= upper)
        assert np.sum(trace.point**2) <= 1.0
        assert trace.q_c_hats.shape == (3,)
        assert trace.rejections >= 0


def test_sampled_sentences_are_legal(tiny_params, rng):
    partition = tiny_params.config.partition
    _, sentences = sample_quaternions(tiny_params, np.arange(600) % 6, rng)
    assert np.all(partition.min_magnitudes_sq[sentences].sum(axis=-1) <= 1.0)


def test_sample_density_is_finite(tiny_params, rng):
    viewpoints = np.arange(300) % 6
    qs, _ = sample_quaternions(tiny_params, viewpoints, rng)
    assert np.all(np.isfinite(log_densities(tiny_params, viewpoints, qs)))


def test_first_step_bins_follow_scorer():
    """10^5 回の抽出で最初のビンの頻度がスコアラーの分布に従う (χ² 検定)"""
    config = ScorerConfig(n_bins=16, n_freqs=2, d_ctx=8, hidden=(16, 16))
    params = ScorerParameters.initialize(config, np.random.default_rng(9))
    n = 100_000
    _, sentences = sample_quaternions(params, np.zeros(n, dtype=np.int64), np.random.default_rng(10))
    p = np.exp(masked_log_probs(score_step(params, 0, 0, []), np.zeros(16, dtype=bool)))
    observed = np.bincount(sentences[:, 0], minlength=16)
    _, p_value = stats.chisquare(observed, p / p.sum() * n)
    assert p_value > 0.001


def test_predict_breaks_ties_toward_lowest_bin():
    """全ロジットが 0 のとき各ステップで最小の合法ビンを選ぶ"""
    config = ScorerConfig(n_bins=4, n_freqs=1, d_ctx=4, hidden=(8, 8))
    params = ScorerParameters.initialize(config, np.random.default_rng(0))
    params.arrays["w_out"][:] = 0.0
    params.arrays["b_out"][:] = 0.0
    q = predict_quaternion(params, 0)
    # 3 成分とも中点 -0.75 のビン 0、球面へ射影して |q_c| = 1/√3
    np.testing.assert_allclose(np.abs(q[:3]), 1.0 / np.sqrt(3.0), atol=1e-6)


def test_predict_is_deterministic_and_batched_agrees(tiny_params):
    single = np.stack([predict_quaternion(tiny_params, v) for v in range(6)])
    np.testing.assert_array_equal(single, np.stack([predict_quaternion(tiny_params, v) for v in range(6)]))
    np.testing.assert_allclose(predict_quaternions(tiny_params, np.arange(6)), single, atol=1e-6)
    np.testing.assert_allclose(np.linalg.norm(single, axis=-1), 1.0)


def test_cached_predict_matches_uncached(tiny_params):
    cache = conditioning_cache(tiny_params, 4)
    np.testing.assert_array_equal(predict_quaternion(tiny_params, 4, cache), predict_quaternion(tiny_params, 4))


def test_conditioning_cache_rejects_unknown_viewpoint(tiny_params):
    with pytest.raises(InvalidInputError):
        conditioning_cache(tiny_params, 6)


def test_naive_mask_rejects_reachable_bin():
    """N = 20, q_x = 0.45 のとき素朴な判定は [0.9, 1.0] を弾くが、ビン基準の判定は許す"""
    p = BinPartition(20)
    assert naive_illegal_mask([0.45], p)[19]
    assert not strictly_illegal_mask([int(bin_of(0.45, p))], p)[19]


def test_rejection_cap_raises():
    lower, upper = np.full(3, 0.9), np.ones(3)
    with pytest.raises(SamplingError, match=r"x=\[0\.9"):
        sampler._reject_into_cell(lower, upper, np.random.default_rng(0))


def test_rejection_cap_in_batched_sampler(tiny_params, monkeypatch):
    monkeypatch.setattr(sampler, "REJECTION_CAP", 0)
    with pytest.raises(SamplingError):
        sample_quaternions(tiny_params, [0, 1], np.random.default_rng(0))


def test_log_density_matches_batch(tiny_params, rng):
    qs, _ = sample_quaternions(tiny_params, np.arange(12) % 6, rng)
    batch = log_densities(tiny_params, np.arange(12) % 6, qs)
    assert log_density(tiny_params, 3, qs[3]) == pytest.approx(batch[3], rel=1e-9)


def test_log_density_is_sign_invariant(tiny_params, rng):
    qs, _ = sample_quaternions(tiny_params, np.zeros(5, dtype=np.int64), rng)
    np.testing.assert_array_equal(
        log_densities(tiny_params, np.zeros(5), qs), log_densities(tiny_params, np.zeros(5), -qs)
    )


def test_sentence_of_sample_matches_trace(tiny_params, rng):
    partition = tiny_params.config.partition
    for _ in range(20):
        q, trace = sample_quaternion(tiny_params, 5, rng)
        if q[3] > 0.0:
            np.testing.assert_array_equal(sentence_of(q, partition), trace.sentence)


def test_model_adapters(tiny_params, rng):
    model = QuaternionModel(tiny_params)
    assert model.cache_for(2) is model.cache_for(2)
    assert model.sample_many([0, 1, 2], rng).shape == (3, 4)
    assert model.predict(2).shape == (4,)
    with pytest.raises(InvalidInputError):
        MogQuaternionModel(tiny_params)


def test_mog_model_samples(rng):
    config = ScorerConfig(n_bins=64, n_freqs=2, d_ctx=8, hidden=(16, 16), head="mog", n_components=8)
    params = ScorerParameters.initialize(config, np.random.default_rng(2))
    q = sample_quaternion_mog(params, 1, rng)
    assert np.linalg.norm(q) == pytest.approx(1.0)
    model = MogQuaternionModel(params)
    qs = model.sample_many([0, 1, 2, 3], rng)
    assert qs.shape == (4, 4)
    assert np.all(np.isfinite(model.log_densities([0, 1, 2, 3], qs)))
    with pytest.raises(InvalidInputError):
        QuaternionModel(params)
