import numpy as np
import pytest
from scipy import stats

from aqmm.binning import BinPartition, sentence_of
from aqmm.density import (
    MoGHeadOutput,
    component_density,
    dilution_log_factor,
    disk_to_hemisphere_density,
    exact_nll,
    full_log_density,
    hemisphere_demo,
    language_model_nll,
    mog_full_log_density,
    mog_dsdq,
    mog_log_prob,
    mog_q_of_s,
    mog_s_of_q,
    precision_lower_bound,
    projected_log_density,
)
from aqmm.errors import InvalidInputError
from aqmm.sampler import log_densities
from aqmm.scorer import ScorerConfig, ScorerParameters
from aqmm.so3 import SO3_VOLUME, sample_uniform_rotation


def _uniform_log_pis(n_rows, n_bins):
    return np.full((n_rows, 3, n_bins), -np.log(n_bins))


def test_component_density_truncated_cell():
    """N = 20、q_x = 0.7 のとき q_y のビン [0.7, 0.8) の幅は √0.51 - 0.7"""
    pi = np.zeros(20)
    pi[17] = 1.0
    assert component_density(0.705, pi, 1.0 - 0.7**2, BinPartition(20)) == pytest.approx(70.7, abs=0.01)


def test_component_density_full_width():
    p = BinPartition(8)
    pi = np.full(8, 1.0 / 8)
    assert component_density(0.1, pi, 1.0, p) == pytest.approx((1.0 / 8) / (2.0 / 8))


def test_component_density_zero_width_cell():
    p = BinPartition(4)
    pi = np.full(4, 0.25)
    # r = 0 のとき値 0 を含むビン [0, 0.5) の幅はゼロ
    assert component_density(0.0, pi, 0.0, p) == 0.0


def test_component_density_rejects_out_of_budget():
    with pytest.raises(InvalidInputError):
        component_density(0.9, np.full(4, 0.25), 0.25, BinPartition(4))


def test_full_density_is_projected_plus_log_qw(rng):
    p = BinPartition(32)
    q = sample_uniform_rotation(rng, 100)
    log_pis = np.log(rng.dirichlet(np.ones(32), size=(100, 3)))
    np.testing.assert_allclose(
        full_log_density(q, log_pis, p), projected_log_density(q, log_pis, p) + np.log(q[:, 3])
    )


def test_zero_probability_is_minus_inf(rng):
    p = BinPartition(16)
    q = sample_uniform_rotation(rng, 3)
    log_pis = _uniform_log_pis(3, 16)
    sent = sentence_of(q, p)
    log_pis[np.arange(3), 1, sent[:, 1]] = -np.inf
    assert np.all(full_log_density(q, log_pis, p) == -np.inf)


def test_exact_nll_decomposes(rng):
    p = BinPartition(64)
    q = sample_uniform_rotation(rng, 50)
    log_pis = np.log(rng.dirichlet(np.ones(64), size=(50, 3)))
    lm = language_model_nll(log_pis, sentence_of(q, p))
    assert exact_nll(log_pis, q, p) == pytest.approx(-np.mean(full_log_density(q, log_pis, p)))
    assert exact_nll(log_pis, q, p) == pytest.approx(lm - np.mean(dilution_log_factor(q, p)))


def test_precision_lower_bound():
    assert precision_lower_bound(50257, 1.0) == pytest.approx(50257.0**3 / 8.0)
    assert precision_lower_bound(50257, 1.0) > 1.5e13


def test_precision_lower_bound_small_n():
    assert precision_lower_bound(2, 0.3) == pytest.approx(0.3)


@pytest.mark.parametrize("n_bins", [2, 20, 500, 4096])
def test_dilution_factor_exceeds_precision_bound(rng, n_bins):
    """ω <= 2/N なので N q_w / (2 ω_y ω_z) >= N^3 q_w / 8"""
    q = sample_uniform_rotation(rng, 10_000)
    bound = np.log(precision_lower_bound(n_bins, q[:, 3]))
    assert np.all(dilution_log_factor(q, BinPartition(n_bins)) >= bound - 1e-9)


def test_full_density_of_concentrated_identity():
    """N = 500、0 を含むビンに全質量: p = 500 / (2 · 0.004²)"""
    p = BinPartition(500)
    log_pis = np.full((1, 3, 500), -np.inf)
    log_pis[:, :, 250] = 0.0
    value = full_log_density(np.array([[0.0, 0.0, 0.0, 1.0]]), log_pis, p)[0]
    assert value == pytest.approx(np.log(15_625_000.0), abs=1e-6)
    assert value == pytest.approx(16.564, abs=1e-3)


def test_uniform_language_model_nll(rng):
    sentences = rng.integers(0, 64, size=(100, 3))
    assert language_model_nll(_uniform_log_pis(100, 64), sentences) == pytest.approx(3.0 * np.log(64))


def test_density_normalizes_for_fixed_scorer():
    """
    Haar 一様な 10^6 点で π²·E[p] = 1 ± 2%。
    ビン単位のマスクは連続幅 ω が 0 のセルにも質量を残すため、N が小さいほど積分は 1 を下回ります。
    """
    config = ScorerConfig(n_bins=4096, n_freqs=1, d_ctx=4, hidden=(8, 8), n_viewpoints=1)
    params = ScorerParameters.initialize(config, np.random.default_rng(3))
    rng = np.random.default_rng(4)
    total, n = 0.0, 0
    for _ in range(10):
        q = sample_uniform_rotation(rng, 100_000)
        total += np.sum(np.exp(log_densities(params, np.zeros(len(q), dtype=np.int64), q, chunk=1024)))
        n += len(q)
    assert SO3_VOLUME * total / n == pytest.approx(1.0, abs=0.02)


def test_disk_to_hemisphere_density():
    assert disk_to_hemisphere_density(1.0 / np.pi, 0.0, 0.0) == pytest.approx(1.0 / np.pi)
    assert disk_to_hemisphere_density(1.0, 0.6, 0.0) == pytest.approx(0.8)
    with pytest.raises(InvalidInputError):
        disk_to_hemisphere_density(1.0, 0.6, 0.8)


def test_hemisphere_demo_recovers_uniform_density():
    demo = hemisphere_demo(np.random.default_rng(0))
    assert 0.14 <= demo.mean_density <= 0.18
    assert demo.true_density == pytest.approx(1.0 / (2.0 * np.pi))
    assert len(demo.points) == 1000


def test_mog_transform_round_trip(rng):
    u = rng.uniform(0.05, 1.0, 10_000)
    q = u * rng.uniform(-0.999, 0.999, 10_000)
    np.testing.assert_allclose(mog_q_of_s(mog_s_of_q(q, u), u), q, atol=1e-9)


def test_mog_dsdq_matches_finite_differences(rng):
    assert mog_dsdq(0.0, 1.0) == pytest.approx(2.0)
    u = rng.uniform(0.2, 1.0, 10_000)
    q = u * rng.uniform(-0.9, 0.9, 10_000)
    h = 1e-6 * u
    numeric = (mog_s_of_q(q + h, u) - mog_s_of_q(q - h, u)) / (2.0 * h)
    np.testing.assert_allclose(mog_dsdq(q, u), numeric, rtol=1e-5)


def test_mog_transform_rejects_boundary():
    with pytest.raises(InvalidInputError):
        mog_s_of_q(1.0, 1.0)


def test_mog_log_prob_single_component():
    head = MoGHeadOutput.from_raw(np.array([0.3, 0.5, np.log(2.0)]))
    assert head.weights.sum() == pytest.approx(1.0)
    assert mog_log_prob(1.2, head) == pytest.approx(stats.norm(0.5, 2.0).logpdf(1.2))


def test_mog_weights_sum_to_one(rng):
    head = MoGHeadOutput.from_raw(rng.standard_normal((5, 3 * 16)))
    np.testing.assert_allclose(head.weights.sum(axis=-1), 1.0, atol=1e-7)


def test_mog_full_density_boundary_is_minus_inf():
    heads = [MoGHeadOutput.from_raw(np.zeros(3)) for _ in range(3)]
    assert mog_full_log_density(np.array([1.0, 0.0, 0.0, 0.0]), heads) == -np.inf
    assert np.isfinite(mog_full_log_density(np.array([0.1, 0.2, 0.3, np.sqrt(0.86)]), heads))


def test_mog_density_normalizes_for_fixed_heads():
    """固定した 4 成分ヘッドで π²·E[p] = 1 ± 5%"""
    rng = np.random.default_rng(7)
    heads = [MoGHeadOutput.from_raw(rng.standard_normal(12) * 0.5) for _ in range(3)]
    total, n = 0.0, 0
    for _ in range(5):
        q = sample_uniform_rotation(rng, 200_000)
        total += np.sum(np.exp(mog_full_log_density(q, heads)))
        n += len(q)
    assert SO3_VOLUME * total / n == pytest.approx(1.0, abs=0.05)


def test_mog_change_of_variable_matches_histogram():
    """s を MoG から引いて q に写した標本のヒストグラムと p(s(q)) |ds/dq| の TVD"""
    rng = np.random.default_rng(8)
    head = MoGHeadOutput.from_raw(np.array([0.2, -0.4, 0.1, -1.0, 0.8, 0.3, -0.5, 0.0, -0.3]))
    n = 100_000
    component = rng.choice(3, size=n, p=head.weights)
    s = rng.normal(head.means[component], head.scales[component])
    samples = mog_q_of_s(s, 1.0)

    edges = np.linspace(-1.0, 1.0, 51)
    counts, _ = np.histogram(samples, bins=edges)
    fine = np.linspace(-1.0, 1.0, 50 * 40 + 1)[1:-1]
    density = np.exp(mog_log_prob(mog_s_of_q(fine, 1.0), head)) * mog_dsdq(fine, 1.0)
    expected = np.array([np.mean(density[(fine >= a) & (fine < b)]) * (b - a) for a, b in zip(edges[:-1], edges[1:])])
    tvd = 0.5 * np.sum(np.abs(counts / n - expected / expected.sum()))
    assert tvd <= 0.05
