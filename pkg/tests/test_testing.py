import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from m2st.estimators import mmd2_u_value
from m2st.kernels import DeepKernel, GaussianKernel
from m2st.learners import TrainConfig, train_mmd_o
from m2st.seeding import stream
from m2st.tasks import hdgm_pair
from m2st.testing import SplitSpec, permutation_test, rejection_rate, split

from oracles import as_lists, gauss, h_loop, mmd2_u_loop


class TestSplit:
    def test_partition_covers_rows(self):
        S = np.arange(20.0).reshape(10, 2)
        tr, te = split(S, SplitSpec(4, 6, 3))
        rows = sorted(map(tuple, np.vstack([tr, te])))
        assert rows == sorted(map(tuple, S))

    def test_deterministic(self):
        S = np.random.default_rng(0).normal(size=(30, 2))
        a = split(S, SplitSpec(10, 15, 42))
        b = split(S, SplitSpec(10, 15, 42))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_insufficient_rows(self):
        with pytest.raises(ValueError):
            split(np.zeros((5, 2)), SplitSpec(3, 3))
        with pytest.raises(ValueError):
            SplitSpec(1, 5)

    def test_rows_land_in_train_half_the_time(self):
        S = np.arange(10.0)[:, None]
        counts = np.zeros(10)
        for seed in range(10_000):
            tr, _ = split(S, SplitSpec(5, 5, seed))
            counts[tr[:, 0].astype(int)] += 1
        assert np.all(np.abs(counts / 10_000 - 0.5) <= 0.02)


def test_identical_points_give_p_one():
    S = np.ones((6, 2))
    out = permutation_test(GaussianKernel(0.0), S, S, n_perm=50)
    assert out.statistic == 0.0 and out.p_value == 1.0 and not out.reject


def test_dominant_statistic_gives_p_zero():
    rng = np.random.default_rng(0)
    P = rng.normal(size=(30, 2))
    out = permutation_test(GaussianKernel(0.0), P, P + 10.0, n_perm=100, rng=rng)
    assert np.all(out.statistic > out.permuted)
    assert out.p_value == 0.0 and out.reject


def test_add_one_variant_never_zero():
    rng = np.random.default_rng(0)
    P = rng.normal(size=(30, 2))
    out = permutation_test(GaussianKernel(0.0), P, P + 10.0, n_perm=100, rng=rng, pvalue_add_one=True)
    assert out.p_value == pytest.approx(1 / 101)


def test_statistic_and_permutations_match_loop_oracle():
    rng = np.random.default_rng(5)
    P, Q = rng.normal(size=(6, 2)), rng.normal(size=(6, 2)) + 0.4
    k = GaussianKernel.from_lengthscale(0.9)
    perm_rng = np.random.default_rng(77)
    out = permutation_test(k, P, Q, n_perm=20, rng=perm_rng)
    kf = lambda a, b: gauss(a, b, 0.9)
    assert out.statistic == pytest.approx(mmd2_u_loop(h_loop(as_lists(P), as_lists(Q), kf)), rel=1e-12)
    Z = np.vstack([P, Q])
    replay = np.random.default_rng(77)
    for i in range(20):
        idx = replay.permutation(12)
        ref = mmd2_u_loop(h_loop(as_lists(Z[idx[:6]]), as_lists(Z[idx[6:]]), kf))
        assert out.permuted[i] == pytest.approx(ref, rel=1e-10, abs=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 40), st.floats(0.0, 1.0))
def test_outcome_invariants(seed, n_perm, shift):
    rng = np.random.default_rng(seed)
    P, Q = rng.normal(size=(8, 2)), rng.normal(size=(8, 2)) + shift
    out = permutation_test(GaussianKernel(0.0), P, Q, n_perm=n_perm, rng=rng)
    count = out.p_value * n_perm
    assert count == round(count)
    assert out.p_value == np.sum(out.permuted >= out.statistic) / n_perm
    assert out.reject == (out.p_value <= out.alpha)
    assert out.statistic == pytest.approx(mmd2_u_value(GaussianKernel(0.0), P, Q), rel=1e-10, abs=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_label_swap_gives_same_statistic(seed):
    rng = np.random.default_rng(seed)
    P, Q = rng.normal(size=(9, 2)), rng.normal(size=(9, 2)) + 0.5
    k = DeepKernel.init(2, rng)
    a = permutation_test(k, P, Q, 30, rng=stream(seed, "perm"))
    b = permutation_test(k, Q, P, 30, rng=stream(seed, "perm"))
    assert a.statistic == pytest.approx(b.statistic, rel=1e-12, abs=1e-15)


def test_single_permutation_p_is_binary():
    rng = np.random.default_rng(1)
    P, Q = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    assert permutation_test(GaussianKernel(0.0), P, Q, n_perm=1, rng=rng).p_value in (0.0, 1.0)


def test_precondition_errors():
    with pytest.raises(ValueError):
        permutation_test(GaussianKernel(0.0), np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        permutation_test(GaussianKernel(0.0), np.zeros((3, 2)), np.zeros((3, 2)), n_perm=0)


def test_outcome_serializes():
    out = permutation_test(GaussianKernel(0.0), np.eye(3), np.eye(3)[::-1] + 1, n_perm=5)
    d = out.to_dict()
    assert isinstance(d["reject"], bool) and len(d["permuted"]) == 5


class TestRejectionRate:
    sampler = staticmethod(lambda g: (g.normal(size=(5, 2)), g.normal(size=(5, 2))))

    def test_always_reject(self):
        r = rejection_rate(lambda P, Q, g: True, self.sampler, 37)
        assert r.rate == 1.0 and r.std_err == 0.0 and r.n_trials == 37

    def test_never_reject(self):
        assert rejection_rate(lambda P, Q, g: False, self.sampler, 10).rate == 0.0

    def test_binomial_std_err(self):
        r = rejection_rate(lambda P, Q, g: bool(g.random() < 0.3), self.sampler, 200, seed=4)
        assert r.std_err == pytest.approx(np.sqrt(r.rate * (1 - r.rate) / 200))

    def test_accepts_outcomes_and_is_deterministic(self):
        proc = lambda P, Q, g: permutation_test(GaussianKernel(0.0), P, Q, 20, rng=g)
        a = rejection_rate(proc, self.sampler, 15, seed=9)
        b = rejection_rate(proc, self.sampler, 15, seed=9)
        assert a == b

    def test_rejects_zero_trials(self):
        with pytest.raises(ValueError):
            rejection_rate(lambda P, Q, g: True, self.sampler, 0)


@pytest.mark.slow
def test_type_one_error_calibrated():
    k = GaussianKernel(0.0)
    proc = lambda P, Q, g: permutation_test(k, P, Q, 100, 0.05, g)
    r = rejection_rate(proc, lambda g: hdgm_pair(0.0, 100, g), 500, seed=2024)
    assert 0.02 <= r.rate <= 0.08
    assert abs(r.rate - 0.05) <= 3 * np.sqrt(0.05 * 0.95 / 500)


@pytest.mark.slow
def test_power_nondecreasing_in_test_size():
    P_tr, Q_tr = hdgm_pair(0.7, 50, stream(0, "train"))
    kernel = train_mmd_o(P_tr, Q_tr, TrainConfig(n_epochs=200)).kernel
    proc = lambda P, Q, g: permutation_test(kernel, P, Q, 100, 0.05, g)
    rates = [rejection_rate(proc, lambda g, m=m: hdgm_pair(0.7, m, g), 100, seed=11) for m in (50, 100, 150, 200, 250)]
    for a, b in zip(rates, rates[1:]):
        assert b.rate >= a.rate - max(a.std_err, b.std_err, 1e-12)
