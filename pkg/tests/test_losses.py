import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from memkd import numcore as nc
from memkd.errors import ContractError, DimensionError, LabelError, PairIndexError, SequenceTooShortError
from memkd.losses import (
    KdLossConfig,
    cross_entropy,
    fitnets_hint,
    init_regressor,
    kd_soft_targets,
    long_pair_population,
    memkd_loss,
    memory_signature,
    sample_pairs_long,
    short_pairs,
    smooth_l1,
    total_train_loss,
)


def random_traj(rng, T=8, b=3, m=4):
    return rng.uniform(-1, 1, (T, b, m))


# --- cross entropy --------------------------------------------------------

def test_ce_uniform_logits():
    assert cross_entropy(np.zeros((1, 4)), [2]).item() == pytest.approx(math.log(4), abs=1e-12)


def test_ce_saturates():
    assert cross_entropy([[40.0, 0.0]], [0]).item() < 1e-6


def test_ce_hand_value():
    oracle = -math.log(math.exp(2) / (math.exp(2) + math.exp(1) + 1))
    assert cross_entropy([[2.0, 1.0, 0.0]], [0]).item() == pytest.approx(oracle, abs=1e-12)
    assert oracle == pytest.approx(0.407606, abs=1e-6)


def test_ce_label_errors():
    with pytest.raises(LabelError):
        cross_entropy(np.zeros((1, 3)), [3])
    with pytest.raises(DimensionError):
        cross_entropy(np.zeros((2, 3)), [0])


# --- soft targets ---------------------------------------------------------

def test_kd_self_distance_is_zero():
    logits = np.random.default_rng(0).normal(size=(4, 3))
    assert kd_soft_targets(logits, logits, 4.0).item() == pytest.approx(0.0, abs=1e-12)


def test_kd_two_class_hand_value():
    p = np.array([1 / (1 + math.exp(-1)), 1 / (1 + math.exp(1))])
    oracle = float(np.sum(p * np.log(p / p[::-1])))
    value = kd_soft_targets([[1.0, 0.0]], [[0.0, 1.0]], 1.0).item()
    assert value == pytest.approx(oracle, abs=1e-12)
    # the closed form (p - q) * log(p / q) collapses to tanh(1/2)
    assert value == pytest.approx(math.tanh(0.5), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.5, 10.0))
def test_kd_non_negative(seed, tau):
    rng = np.random.default_rng(seed)
    assert kd_soft_targets(rng.normal(size=(3, 4)) * 5, rng.normal(size=(3, 4)) * 5, tau).item() >= -1e-12


def test_kd_gradient_flows_to_student_only():
    rng = np.random.default_rng(1)
    params = {"s": rng.normal(size=(2, 3)), "t": rng.normal(size=(2, 3))}
    _, g = nc.value_and_grad(lambda p: kd_soft_targets(p["t"], p["s"], 2.0), params)
    assert np.array_equal(g["t"], np.zeros((2, 3)))
    assert np.any(g["s"] != 0)


def test_kd_shape_mismatch():
    with pytest.raises(DimensionError):
        kd_soft_targets(np.zeros((1, 2)), np.zeros((1, 3)))


# --- FitNets --------------------------------------------------------------

def test_fitnets_identity_regressor_identical_trajectories():
    H = random_traj(np.random.default_rng(0), m=3)
    reg = {"regressor.weight": np.eye(3), "regressor.bias": np.zeros(3)}
    assert fitnets_hint(H, H, reg).item() == 0.0


def test_fitnets_zero_teacher_and_zero_output():
    reg = {"regressor.weight": np.zeros((4, 2)), "regressor.bias": np.zeros(4)}
    assert fitnets_hint(np.zeros((5, 2, 4)), np.ones((5, 2, 2)), reg).item() == 0.0


def test_fitnets_hand_mse():
    teacher = np.array([[1.0, 2.0], [3.0, 4.0]])  # [T=2, m_t=2]
    student = np.array([[1.0, 0.0], [0.0, 1.0]])
    reg = {"regressor.weight": np.array([[2.0, 0.0], [0.0, 1.0]]), "regressor.bias": np.array([0.5, 0.0])}
    mapped = student @ reg["regressor.weight"].T + reg["regressor.bias"]
    oracle = float(np.mean((teacher - mapped) ** 2))
    assert fitnets_hint(teacher, student, reg).item() == pytest.approx(oracle, abs=1e-15)
    assert oracle == pytest.approx((1.5**2 + 2**2 + 2.5**2 + 3**2) / 4)


def test_fitnets_length_mismatch():
    reg = init_regressor(2, 3, 0)
    with pytest.raises(DimensionError):
        fitnets_hint(np.zeros((5, 3)), np.zeros((4, 2)), reg)


# --- pair sets ------------------------------------------------------------

def test_short_pairs():
    assert short_pairs(2) == [(1, 1)]
    assert short_pairs(5) == [(1, 1), (2, 1), (3, 1), (4, 1)]
    assert all(len(short_pairs(T)) == T - 1 for T in range(2, 101))
    with pytest.raises(SequenceTooShortError):
        short_pairs(1)


def test_long_population_matches_brute_force():
    for T in range(3, 20):
        brute = {(t, z) for t, z in itertools.product(range(1, T + 1), repeat=2) if z >= 2 and t + z <= T}
        assert set(long_pair_population(T)) == brute
    assert sorted(long_pair_population(5)) == [(1, 2), (1, 3), (1, 4), (2, 2), (2, 3), (3, 2)]


def test_singleton_population():
    for K in (1, 5, 100):
        assert sample_pairs_long(3, K, np.random.default_rng(0)) == [(1, 2)]


def test_long_pairs_t100():
    pairs = sample_pairs_long(100, 99, np.random.default_rng(4))
    assert len(pairs) == len(set(pairs)) == 99
    assert all(t >= 1 and z >= 2 and t + z <= 100 for t, z in pairs)


def test_long_pairs_errors():
    with pytest.raises(SequenceTooShortError):
        sample_pairs_long(2, 1, np.random.default_rng(0))
    with pytest.raises(ContractError):
        sample_pairs_long(10, 0, np.random.default_rng(0))


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 60), st.integers(1, 80), st.integers(0, 2**31))
def test_long_pairs_reproducible_and_valid(T, K, seed):
    a = sample_pairs_long(T, K, np.random.default_rng(seed))
    b = sample_pairs_long(T, K, np.random.default_rng(seed))
    assert a == b
    assert len(a) == min(K, len(long_pair_population(T)))
    assert len(set(a)) == len(a)
    assert all(z >= 2 and 1 <= t and t + z <= T for t, z in a)


def test_long_pairs_roughly_uniform():
    counts = dict.fromkeys(long_pair_population(5), 0)
    rng = np.random.default_rng(0)
    for _ in range(6000):
        for p in sample_pairs_long(5, 1, rng):
            counts[p] += 1
    # each of the 6 pairs expects 1000 draws; 5 sigma is about 144
    assert all(abs(c - 1000) < 150 for c in counts.values())


# --- signature ------------------------------------------------------------

def test_signature_constant_trajectory():
    H = np.tile(np.array([0.3, -0.2]), (6, 1))
    assert np.array_equal(memory_signature(H, short_pairs(6) + [(1, 5)]).data, np.zeros((6, 1)))


def test_signature_hand_value():
    H = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert memory_signature(H, [(1, 1)], 0.0).data[0, 0] == pytest.approx(math.sqrt(2), abs=1e-15)


@pytest.mark.parametrize("c", [0.1, 2.0, 100.0])
def test_signature_positive_scale_invariance(c):
    rng = np.random.default_rng(3)
    H = random_traj(rng, T=12)
    pairs = short_pairs(12) + long_pair_population(12)
    base = memory_signature(H, pairs, 0.0).data
    scaled = memory_signature(c * H, pairs, 0.0).data
    assert np.max(np.abs(base - scaled)) <= 1e-12


def test_signature_rejects_bad_pairs():
    H = np.zeros((5, 2, 3))
    for bad in ([(0, 1)], [(4, 2)], [(2, 0)], []):
        with pytest.raises(PairIndexError):
            memory_signature(H, bad)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_signature_non_negative(seed):
    H = random_traj(np.random.default_rng(seed), T=7)
    assert np.all(memory_signature(H, long_pair_population(7)).data >= 0)


# --- smooth L1 ------------------------------------------------------------

def test_smooth_l1_examples():
    assert smooth_l1([1.0, 2.0], [1.0, 2.0]).item() == 0.0
    assert smooth_l1([0.5], [0.0]).item() == 0.125
    assert smooth_l1([3.0], [0.0]).item() == 2.5
    assert smooth_l1([0.0], [3.0]).item() == 2.5
    with pytest.raises(DimensionError):
        smooth_l1([1.0], [1.0, 2.0])


@pytest.mark.parametrize("delta", [0.5, 1.0, 3.0])
def test_smooth_l1_is_continuously_differentiable(delta):
    def slope(x):
        return nc.value_and_grad(lambda p: smooth_l1(p["x"], [0.0], delta), {"x": np.array([x])})[1]["x"][0]

    assert abs(slope(delta - 1e-9) - slope(delta + 1e-9)) < 1e-6


# --- memkd ----------------------------------------------------------------

def test_memkd_identical_trajectories_is_zero():
    for seed in range(10):
        H = random_traj(np.random.default_rng(seed), T=15)
        assert memkd_loss(H, H, KdLossConfig(), np.random.default_rng(seed)).item() == 0.0


def test_memkd_constant_trajectories_is_zero():
    a = np.full((10, 2, 5), 0.7)
    b = np.full((10, 2, 3), -0.1)
    assert memkd_loss(a, b, KdLossConfig(), np.random.default_rng(0)).item() == 0.0


def test_memkd_accepts_different_widths():
    rng = np.random.default_rng(0)
    value = memkd_loss(random_traj(rng, 100, 4, 100), random_traj(rng, 100, 4, 8), KdLossConfig(), rng).item()
    assert math.isfinite(value) and value > 0


def test_memkd_length_mismatch():
    with pytest.raises(DimensionError):
        memkd_loss(np.zeros((5, 1, 2)), np.zeros((6, 1, 2)), KdLossConfig(), np.random.default_rng(0))


def test_memkd_short_sequences_warn(caplog):
    rng = np.random.default_rng(0)
    a, b = random_traj(rng, T=2), random_traj(rng, T=2)
    value = memkd_loss(a, b, KdLossConfig(), rng)
    assert "no long pairs" in caplog.text
    assert value.item() == smooth_l1(memory_signature(a, [(1, 1)]), memory_signature(b, [(1, 1)])).item()


def test_memkd_is_short_plus_long():
    rng = np.random.default_rng(8)
    a, b = random_traj(rng, T=9), random_traj(rng, T=9)
    cfg = KdLossConfig(num_long_pairs=5)
    pairs = sample_pairs_long(9, 5, np.random.default_rng(2))
    short = smooth_l1(memory_signature(a, short_pairs(9)), memory_signature(b, short_pairs(9))).item()
    long = smooth_l1(memory_signature(a, pairs), memory_signature(b, pairs)).item()
    assert memkd_loss(a, b, cfg, np.random.default_rng(2)).item() == pytest.approx(short + long, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_memkd_non_negative(seed):
    rng = np.random.default_rng(seed)
    assert memkd_loss(random_traj(rng), random_traj(rng, m=2), KdLossConfig(), rng).item() >= 0


@pytest.mark.parametrize("seed", range(10))
def test_memkd_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    teacher = random_traj(rng, T=7, b=2, m=4)
    params = {"h": random_traj(rng, T=7, b=2, m=3)}

    def f(p):
        return memkd_loss(teacher, p["h"], KdLossConfig(delta=0.3), np.random.default_rng(seed))

    _, analytic = nc.value_and_grad(f, params)
    numeric = nc.finite_difference_gradient(lambda p: f(p).item(), params, 1e-6)
    assert nc.max_relative_error(analytic, numeric, floor=1e-5) <= 1e-4


def test_memkd_no_gradient_to_teacher():
    rng = np.random.default_rng(0)
    params = {"t": random_traj(rng), "s": random_traj(rng)}
    _, g = nc.value_and_grad(lambda p: memkd_loss(p["t"], p["s"], KdLossConfig(), np.random.default_rng(1)), params)
    assert not np.any(g["t"])


# --- total loss -----------------------------------------------------------

def test_total_loss_examples():
    ce = nc.Tensor(np.array(0.5))
    assert total_train_loss(ce, nc.Tensor(np.array(0.25)), 1.0, 0.0) is ce
    assert total_train_loss(0.5, 0.25, 1.0, 1.0).item() == 0.75
    with pytest.raises(ContractError):
        total_train_loss(0.5, 0.25, 1.0, -1.0)


def test_total_loss_gradient_is_weighted_sum():
    rng = np.random.default_rng(0)
    logits_t = rng.normal(size=(3, 4))
    labels = np.array([0, 3, 1])
    params = {"w": rng.normal(size=(5, 4)), "x": rng.normal(size=(3, 5))}
    alpha, beta = 0.7, 2.5

    def ce(p):
        return cross_entropy(nc.matmul(p["x"], p["w"]), labels)

    def kd(p):
        return kd_soft_targets(logits_t, nc.matmul(p["x"], p["w"]), 2.0)

    _, g_ce = nc.value_and_grad(ce, params)
    _, g_kd = nc.value_and_grad(kd, params)
    combined = lambda p: total_train_loss(ce(p), kd(p), alpha, beta)
    _, g_total = nc.value_and_grad(combined, params)
    numeric = nc.finite_difference_gradient(lambda p: combined(p).item(), params, 1e-6)
    for k in params:
        assert np.allclose(g_total[k], alpha * g_ce[k] + beta * g_kd[k], rtol=1e-12, atol=1e-14)
    assert nc.max_relative_error(g_total, numeric, floor=1e-5) <= 1e-4
