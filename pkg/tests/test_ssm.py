import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from mambalitesr import ops
from mambalitesr.errors import ConfigurationError, DimensionError, NumericalError
from mambalitesr.ssm import (LowRankLinear, MambaMixer, MixerConfig, SsmParams, discretize, low_rank_linear,
                             low_rank_params, scan_flops, selective_scan)
from mambalitesr.tensor import Tensor, backward, no_grad

from gradcheck import check_entries, check_op, sample_resolvable
from oracles import jacobi_singular_values, naive_scan


def f64(x):
    return Tensor(np.asarray(x, dtype=np.float64), dtype="f64")


def random_scan(rng, n=None, L=None, D=None, S=None):
    L = L or int(rng.integers(1, 17))
    D = D or int(rng.integers(1, 9))
    S = S or int(rng.integers(1, 9))
    lead = (n,) if n else ()
    u = rng.normal(size=lead + (L, D))
    delta = rng.uniform(0.01, 1.5, size=lead + (L, D))
    A = -rng.uniform(0.1, 3.0, size=(D, S))
    B = rng.normal(size=lead + (L, S))
    C = rng.normal(size=lead + (L, S))
    Dp = rng.normal(size=D)
    return u, delta, A, B, C, Dp


class TestDiscretize:
    def test_half_decay(self):
        d = discretize(np.array([[math.log(2.0)]]), np.array([[-1.0]]), np.array([[1.0]]))
        assert d.A_bar[0, 0, 0] == pytest.approx(0.5, abs=1e-12)
        assert d.B_bar[0, 0, 0] == pytest.approx(0.5, abs=1e-12)

    def test_inverse_e(self):
        d = discretize(np.array([[0.5]]), np.array([[-2.0]]), np.array([[1.0]]))
        assert d.A_bar[0, 0, 0] == pytest.approx(0.367879, abs=1e-6)

    def test_small_step_limit(self):
        d = discretize(np.array([[1e-9]]), np.array([[-1.0]]), np.array([[3.0]]))
        assert d.A_bar[0, 0, 0] == pytest.approx(1.0, abs=1e-8)
        assert d.B_bar[0, 0, 0] == pytest.approx(3e-9, rel=1e-6)

    def test_taylor_branch_continuous(self):
        a = np.array([[-1.0]])
        below = discretize(np.array([[0.99e-6]]), a, np.array([[1.0]])).B_bar[0, 0, 0]
        above = discretize(np.array([[1.01e-6]]), a, np.array([[1.0]])).B_bar[0, 0, 0]
        assert below == pytest.approx(0.99e-6, rel=1e-6)
        assert above == pytest.approx(1.01e-6, rel=1e-6)

    def test_van_loan_oracle(self):
        # ZOH from the exponential of the augmented matrix [[a, b], [0, 0]] * delta
        rng = np.random.default_rng(3)
        for _ in range(20):
            dt, a, b = rng.uniform(0.01, 2.0), -rng.uniform(0.05, 4.0), rng.normal()
            M = expm(np.array([[a, b], [0.0, 0.0]]) * dt)
            d = discretize(np.array([[dt]]), np.array([[a]]), np.array([[b]]))
            assert d.A_bar[0, 0, 0] == pytest.approx(M[0, 0], rel=1e-10)
            assert d.B_bar[0, 0, 0] == pytest.approx(M[0, 1], rel=1e-9, abs=1e-14)

    def test_stability_range(self):
        rng = np.random.default_rng(4)
        d = discretize(rng.uniform(1e-3, 5.0, size=(6, 3)), -rng.uniform(0.01, 5.0, size=(3, 4)),
                       rng.normal(size=(6, 4)))
        assert np.all(d.A_bar > 0) and np.all(d.A_bar < 1)

    def test_nonpositive_step_rejected(self):
        with pytest.raises(NumericalError):
            discretize(np.array([[0.0]]), np.array([[-1.0]]), np.array([[1.0]]))


class TestSelectiveScan:
    def test_hand_unrolled(self):
        # a = -ln 2 with delta = 1 gives A_bar = 0.5 and B_bar = 0.5 / ln 2; scale B to make B_bar = 0.5
        a = -math.log(2.0)
        b = 0.5 / (0.5 / math.log(2.0))
        params = SsmParams(A=f64([[a]]), B=f64([[b], [b]]), C=f64([[1.0], [1.0]]), delta=f64([[1.0], [1.0]]),
                           D=f64([0.0]))
        y = selective_scan(f64([[1.0], [1.0]]), params).data
        np.testing.assert_allclose(y[:, 0], [0.5, 0.75], atol=1e-12)

    def test_zero_readout(self):
        rng = np.random.default_rng(0)
        u, delta, A, B, C, _ = random_scan(rng, L=5, D=3, S=2)
        y = selective_scan(f64(u), SsmParams(f64(A), f64(B), f64(np.zeros_like(C)), f64(delta), f64(np.zeros(3))))
        np.testing.assert_array_equal(y.data, 0.0)

    def test_empty_sequence(self):
        y = selective_scan(f64(np.zeros((0, 3))), SsmParams(f64(-np.ones((3, 2))), f64(np.zeros((0, 2))),
                                                          f64(np.zeros((0, 2))), f64(np.zeros((0, 3)))))
        assert y.shape == (0, 3)

    def test_matches_naive_oracle_100_instances(self):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(100):
            u, delta, A, B, C, Dp = random_scan(rng)
            y = selective_scan(f64(u), SsmParams(f64(A), f64(B), f64(C), f64(delta), f64(Dp))).data
            ref = naive_scan(u, delta, A, B, C, Dp)
            worst = max(worst, float(np.abs(y - ref).max()))
        assert worst <= 1e-6

    def test_batched_matches_unbatched(self):
        rng = np.random.default_rng(5)
        u, delta, A, B, C, Dp = random_scan(rng, n=3, L=6, D=4, S=3)
        yb = selective_scan(f64(u), SsmParams(f64(A), f64(B), f64(C), f64(delta), f64(Dp))).data
        for i in range(3):
            yi = selective_scan(f64(u[i]), SsmParams(f64(A), f64(B[i]), f64(C[i]), f64(delta[i]), f64(Dp))).data
            np.testing.assert_array_equal(yb[i], yi)

    def test_f32_within_1e4(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            u, delta, A, B, C, Dp = random_scan(rng)
            t = lambda x: Tensor(x, dtype="f32")  # noqa: E731
            y = selective_scan(t(u), SsmParams(t(A), t(B), t(C), t(delta), t(Dp))).data
            assert y.dtype == np.float32
            np.testing.assert_allclose(y, naive_scan(u, delta, A, B, C, Dp), atol=1e-4, rtol=1e-4)

    def test_state_bound(self):
        rng = np.random.default_rng(8)
        u, delta, A, B, C, _ = random_scan(rng, L=16, D=3, S=2)
        d = discretize(delta, A, B)
        bound = np.abs(d.B_bar).max() * np.abs(u).max() / (1 - d.A_bar.max())
        # readout with a one-hot C exposes each state dimension
        for s in range(2):
            onehot = np.zeros_like(C)
            onehot[:, s] = 1.0
            y = selective_scan(f64(u), SsmParams(f64(A), f64(B), f64(onehot), f64(delta))).data
            assert np.abs(y).max() <= bound + 1e-12

    def test_gradients_all_inputs(self):
        rng = np.random.default_rng(9)
        u, delta, A, B, C, Dp = random_scan(rng, n=2, L=5, D=3, S=4)

        def fn(u, delta, A, B, C, Dp):
            return selective_scan(u, SsmParams(A, B, C, delta, Dp))

        assert check_op(fn, u, delta, A, B, C, Dp) <= 1e-5

    def test_gradients_through_taylor_region(self):
        rng = np.random.default_rng(10)
        u, _, A, B, C, _ = random_scan(rng, L=4, D=2, S=2)
        delta = np.full((4, 2), 1e-3)

        def fn(u, B, C):
            return selective_scan(u, SsmParams(f64(A), B, C, f64(delta)))

        assert check_op(fn, u, B, C) <= 1e-5

    def test_shape_errors(self):
        with pytest.raises(DimensionError):
            selective_scan(f64(np.zeros((4, 3))), SsmParams(f64(-np.ones((2, 2))), f64(np.zeros((4, 2))),
                                                            f64(np.zeros((4, 2))), f64(np.ones((4, 3)))))


class TestLowRank:
    def test_hand_example(self):
        layer = LowRankLinear.from_factors(np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]]))
        np.testing.assert_array_equal(layer.dense_weight(), [[0, 1], [0, 0]])
        np.testing.assert_array_equal(low_rank_linear(Tensor([3.0, 4.0]), layer).data, [0.0, 3.0])

    def test_flops_ratio(self):
        layer = LowRankLinear(60, 60, 2)
        assert layer.flops(1) == 480
        assert layer.flops(1) * 15 == 2 * 60 * 60

    def test_full_rank_svd_reproduces_dense(self):
        rng = np.random.default_rng(11)
        W = rng.normal(size=(12, 9)).astype(np.float32)
        x = rng.normal(size=(5, 12)).astype(np.float32)
        layer = LowRankLinear.from_dense(W, 9)
        y = low_rank_linear(Tensor(x), layer).data
        assert y.dtype == np.float32
        assert np.abs(y - x @ W).max() <= 1e-5 * max(1.0, np.abs(x @ W).max())

    @pytest.mark.parametrize("m,n,r", [(8, 8, 1), (10, 6, 3), (7, 12, 5), (16, 16, 2)])
    def test_eckart_young(self, m, n, r):
        rng = np.random.default_rng(m * 100 + n * 10 + r)
        W = rng.normal(size=(m, n))
        layer = LowRankLinear.from_dense(W, r)
        err = np.linalg.norm(W - layer.dense_weight(), "fro")
        sigma = jacobi_singular_values(W)
        assert abs(err - math.sqrt(np.sum(sigma[r:] ** 2))) <= 1e-6

    def test_rank_bound(self):
        layer = LowRankLinear(10, 12, 3, np.random.default_rng(0), dtype=np.float64)
        assert np.linalg.matrix_rank(layer.dense_weight()) <= 3

    @settings(max_examples=40, deadline=None)
    @given(m=st.integers(1, 40), n=st.integers(1, 40), data=st.data())
    def test_param_count(self, m, n, data):
        r = data.draw(st.integers(1, min(m, n)))
        bias = data.draw(st.booleans())
        layer = LowRankLinear(m, n, r, np.random.default_rng(0), bias=bias)
        assert layer.num_parameters() == r * (m + n) + (n if bias else 0) == low_rank_params(m, n, r, bias)
        if r < m * n / (m + n):
            assert low_rank_params(m, n, r, bias) < m * n + (n if bias else 0)

    def test_rank_too_large(self):
        with pytest.raises(ConfigurationError):
            LowRankLinear(4, 3, 4)
        with pytest.raises(ConfigurationError):
            MixerConfig(d_model=8, rank=9)

    def test_init_variance(self):
        rng = np.random.default_rng(0)
        m, n, r = 64, 64, 2
        ws = np.concatenate([LowRankLinear(m, n, r, rng, dtype=np.float64).dense_weight().ravel()
                             for _ in range(50)])
        assert ws.var() == pytest.approx(1.0 / (3 * m), rel=0.1)

    def test_gradients(self):
        layer = LowRankLinear(5, 4, 2, np.random.default_rng(0), dtype=np.float64)
        x = np.random.default_rng(1).normal(size=(3, 5))
        err = check_op(lambda x, U, V, b: (x @ U) @ ops.transpose(V) + b, x, layer.U.data, layer.V.data,
                       layer.bias.data)
        assert err <= 1e-5


class TestMixer:
    def make(self, d=8, rank=2, seed=0, **kw):
        return MambaMixer(MixerConfig(d_model=d, rank=rank, **kw), np.random.default_rng(seed), dtype=np.float64)

    @settings(max_examples=10, deadline=None)
    @given(L=st.integers(1, 9), n=st.integers(0, 2))
    def test_shape_preserved(self, L, n):
        mixer = self.make()
        shape = (L, 8) if n == 0 else (n, L, 8)
        assert mixer(f64(np.random.default_rng(L).normal(size=shape))).shape == shape

    def test_zero_input_zero_biases(self):
        mixer = self.make()
        for name, p in mixer.named_parameters():
            if name.endswith("bias") and not name.startswith("dt_proj"):
                p.data[:] = 0.0
        np.testing.assert_array_equal(mixer(f64(np.zeros((5, 8)))).data, 0.0)

    def test_causal(self):
        mixer = self.make()
        x = np.random.default_rng(1).normal(size=(7, 8))
        y = mixer(f64(x)).data
        x2 = x.copy()
        x2[4:] += 1.0
        y2 = mixer(f64(x2)).data
        np.testing.assert_array_equal(y[:4], y2[:4])
        assert not np.allclose(y[4:], y2[4:])

    def test_gradient_ten_weights(self):
        mixer = self.make()
        # a generic timestep regime instead of the tiny init values
        mixer.dt_proj.bias.data[:] = np.log(np.expm1(np.linspace(0.3, 1.0, mixer.cfg.d_inner)))
        x = f64(np.random.default_rng(2).normal(size=(4, 8)))
        backward(mixer(x).mean())
        named = dict(mixer.named_parameters())
        picks, _ = sample_resolvable(named, 10, np.random.default_rng(3))
        assert len({name for name, _ in picks}) >= 4

        def f():
            with no_grad():
                return float(mixer(x).data.mean())

        assert check_entries(f, named, picks) <= 1e-4

    def test_dense_switch(self):
        mixer = self.make(low_rank=False)
        assert type(mixer.in_stream).__name__ == "Linear" and type(mixer.out_proj).__name__ == "Linear"

    def test_timestep_init_range(self):
        mixer = self.make(d=32)
        dt = np.logaddexp(0.0, mixer.dt_proj.bias.data)
        assert dt.min() >= 1e-3 - 1e-12 and dt.max() <= 0.1 + 1e-12

    def test_dimension_error(self):
        with pytest.raises(DimensionError):
            self.make()(f64(np.zeros((3, 7))))

    def test_scan_flops(self):
        assert scan_flops(10, 4, 16) == 6 * 10 * 4 * 16
