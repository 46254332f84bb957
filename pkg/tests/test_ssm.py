import numpy as np
import pytest

from services import tensor as T
from services.ssm import (LtiSsm, ScanMode, bilinear_discretize, causal_conv1d, discretize, init_selective_params,
                          linear_scan, lti_kernel, mamba_block_forward, scan_convolutional, scan_recurrent,
                          scan_selective, zoh_discretize)
from services.tensor import Tensor, finite_diff_check


def random_lti(rng, n):
    A = -rng.uniform(0.05, 3.0, size=n)
    B = rng.standard_normal(n)
    C = rng.standard_normal(n)
    return LtiSsm(A, B, C, delta=float(rng.uniform(0.01, 0.5)))


class TestDiscretization:

    def test_zoh_matches_scalar_formula(self, rng):
        A = -rng.uniform(0.01, 5.0, size=1000)
        B = rng.standard_normal(1000)
        delta = rng.uniform(1e-3, 1.0, size=1000)
        Abar, Bbar = zoh_discretize(A, B, delta)
        np.testing.assert_allclose(Abar, np.exp(delta * A), atol=1e-6)
        np.testing.assert_allclose(Bbar, (np.exp(delta * A) - 1.0) / A * B, atol=1e-6)

    def test_zoh_small_delta_limit(self, rng):
        A = -rng.uniform(0.01, 5.0, size=100)
        B = rng.standard_normal(100)
        Abar, Bbar = zoh_discretize(A, B, 1e-9)
        np.testing.assert_allclose(Abar, 1.0, atol=1e-6)
        np.testing.assert_allclose(Bbar, 0.0, atol=1e-6)

    def test_zero_eigenvalue_takes_limit(self):
        _, Bbar = zoh_discretize(np.array([0.0]), np.array([2.0]), 0.5)
        np.testing.assert_allclose(Bbar, [1.0])

    def test_euler_rule(self, rng):
        A, B = -rng.uniform(0.1, 1.0, 4), rng.standard_normal(4)
        Abar, Bbar = discretize("euler", A, B, 0.2)
        np.testing.assert_allclose(Abar, np.exp(0.2 * A))
        np.testing.assert_allclose(Bbar, 0.2 * B)

    def test_bilinear_close_to_zoh_for_small_step(self, rng):
        A, B = -rng.uniform(0.1, 1.0, 8), rng.standard_normal(8)
        za, zb = zoh_discretize(A, B, 1e-2)
        ba, bb = bilinear_discretize(A, B, 1e-2)
        np.testing.assert_allclose(ba, za, atol=1e-6)
        np.testing.assert_allclose(bb, zb, atol=1e-6)

    def test_unknown_method(self):
        with pytest.raises(ValueError, match="离散化"):
            discretize("rk4", np.ones(1), np.ones(1), 0.1)

    def test_nonpositive_delta_rejected(self):
        with pytest.raises(ValueError):
            LtiSsm(-np.ones(2), np.ones(2), np.ones(2), delta=0.0)


class TestLtiScans:

    def test_recurrent_equals_convolutional(self, rng):
        for _ in range(200):
            ssm = random_lti(rng, int(rng.integers(1, 9)))
            x = rng.standard_normal(int(rng.integers(1, 129)))
            Abar, Bbar = ssm.discretize("zoh")
            y_rec = scan_recurrent(Abar, Bbar, ssm.C, x)
            assert np.max(np.abs(y_rec - scan_convolutional(Abar, Bbar, ssm.C, x))) < 1e-4
            assert np.max(np.abs(y_rec - scan_convolutional(Abar, Bbar, ssm.C, x, use_fft=True))) < 1e-4

    def test_kernel_first_taps(self, rng):
        ssm = random_lti(rng, 3)
        Abar, Bbar = ssm.discretize()
        k = lti_kernel(Abar, Bbar, ssm.C, 3)
        np.testing.assert_allclose(k[0], ssm.C @ Bbar)
        np.testing.assert_allclose(k[2], ssm.C @ (Abar ** 2 * Bbar))

    def test_chunked_recurrence_carries_state(self, rng):
        ssm = random_lti(rng, 4)
        Abar, Bbar = ssm.discretize()
        x = rng.standard_normal(50)
        full = scan_recurrent(Abar, Bbar, ssm.C, x)
        first, h = scan_recurrent(Abar, Bbar, ssm.C, x[:20], return_state=True)
        second = scan_recurrent(Abar, Bbar, ssm.C, x[20:], h0=h)
        np.testing.assert_allclose(np.concatenate([first, second]), full, atol=1e-12)

    def test_convolution_rejects_per_token_parameters(self, rng):
        with pytest.raises(ValueError, match="LTI"):
            scan_convolutional(np.full((5, 2), 0.5), np.ones(2), np.ones(2), np.ones(5))


class TestLinearScan:

    @pytest.mark.parametrize("length", [1, 2, 3, 5, 8, 13])
    def test_parallel_matches_sequential(self, rng, length):
        a = rng.uniform(0.2, 1.0, size=(2, length, 3))
        b = rng.standard_normal((2, length, 3))
        np.testing.assert_allclose(linear_scan(a, b, ScanMode.PARALLEL), linear_scan(a, b, ScanMode.SEQUENTIAL),
                                   atol=1e-12)

    def test_parallel_is_repeatable(self, rng):
        a = rng.uniform(0.2, 1.0, size=(1, 37, 4))
        b = rng.standard_normal((1, 37, 4))
        assert np.array_equal(linear_scan(a, b, "parallel"), linear_scan(a, b, "parallel"))

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            ScanMode.parse("tree")


def selective_inputs(rng, batch=2, length=5, channels=3, state=2):
    u = rng.standard_normal((batch, length, channels))
    delta = np.log1p(np.exp(rng.standard_normal((batch, length, channels))))
    A = -rng.uniform(0.5, 2.0, size=(channels, state))
    Bt = rng.standard_normal((batch, length, state))
    Ct = rng.standard_normal((batch, length, state))
    D = rng.standard_normal(channels)
    return [u, delta, A, Bt, Ct, D]


class TestSelectiveScan:

    def test_modes_agree(self, rng):
        for _ in range(100):
            channels = int(rng.integers(1, 17))
            length = int(rng.integers(1, 257))
            arrays = selective_inputs(rng, batch=1, length=length, channels=channels, state=4)
            tensors = [Tensor(a, dtype=np.float64) for a in arrays]
            with T.no_grad():
                seq = scan_selective(*tensors, mode=ScanMode.SEQUENTIAL).data
                par = scan_selective(*tensors, mode=ScanMode.PARALLEL).data
            assert np.max(np.abs(seq - par)) < 1e-4

    def test_matches_reference_recurrence(self, rng):
        u, delta, A, Bt, Ct, D = selective_inputs(rng, batch=1, length=4, channels=2, state=3)
        out = scan_selective(*[Tensor(a, dtype=np.float64) for a in (u, delta, A, Bt, Ct, D)]).data
        for e in range(2):
            h = np.zeros(3)
            for t in range(4):
                h = np.exp(delta[0, t, e] * A[e]) * h + delta[0, t, e] * Bt[0, t] * u[0, t, e]
                assert out[0, t, e] == pytest.approx(Ct[0, t] @ h + D[e] * u[0, t, e], abs=1e-12)

    @pytest.mark.parametrize("mode", [ScanMode.SEQUENTIAL, ScanMode.PARALLEL])
    @pytest.mark.parametrize("which", range(6))
    def test_gradients(self, rng, mode, which):
        arrays = selective_inputs(rng)
        weights = rng.standard_normal(arrays[0].shape)

        def f(x):
            inputs = [Tensor(a, dtype=np.float64) for a in arrays]
            inputs[which] = x
            return (scan_selective(*inputs, mode=mode) * weights).sum()

        assert finite_diff_check(f, arrays[which]) < 1e-3

    def test_debug_trap_names_channel_and_position(self, rng):
        arrays = selective_inputs(rng, batch=1, length=6, channels=3)
        arrays[0][0, 3, 1] = np.nan
        T.set_debug_nan(True)
        with pytest.raises(FloatingPointError, match="通道 1, 位置 3"):
            scan_selective(*[Tensor(a, dtype=np.float64) for a in arrays])

    def test_shape_check(self, rng):
        arrays = [Tensor(a) for a in selective_inputs(rng)]
        arrays[5] = Tensor(np.ones(7))
        with pytest.raises(ValueError, match="scan_selective"):
            scan_selective(*arrays)


class TestCausalConv:

    def test_output_ignores_future(self, rng):
        x = rng.standard_normal((1, 8, 3))
        w = Tensor(rng.standard_normal((3, 4)), dtype=np.float64)
        b = Tensor(rng.standard_normal(3), dtype=np.float64)
        y1 = causal_conv1d(Tensor(x, dtype=np.float64), w, b).data
        x2 = x.copy()
        x2[:, 5:] += 10.0
        y2 = causal_conv1d(Tensor(x2, dtype=np.float64), w, b).data
        np.testing.assert_array_equal(y1[:, :5], y2[:, :5])

    def test_gradients(self, rng):
        x = rng.standard_normal((2, 6, 3))
        w = rng.standard_normal((3, 4))
        b = Tensor(rng.standard_normal(3), dtype=np.float64)
        weights = rng.standard_normal((2, 6, 3))
        assert finite_diff_check(lambda t: (causal_conv1d(t, Tensor(w, dtype=np.float64), b) * weights).sum(),
                                 x) < 1e-3
        assert finite_diff_check(lambda t: (causal_conv1d(Tensor(x, dtype=np.float64), t, b) * weights).sum(),
                                 w) < 1e-3


class TestMambaBlock:

    def test_initialization(self, rng):
        params = init_selective_params(8, rng, d_state=4)
        np.testing.assert_allclose(-np.exp(params.A_log.data[0]), [-1, -2, -3, -4], rtol=1e-6)
        dt = np.log1p(np.exp(params.dt_proj_bias.data.astype(np.float64)))
        assert np.all(dt >= 1e-3 - 1e-6) and np.all(dt <= 1e-1 + 1e-6)
        np.testing.assert_array_equal(params.D.data, 1.0)
        assert params.in_proj.shape == (8, 32)
        assert params.x_proj.shape == (16, 1 + 8)

    def test_shapes(self, rng):
        params = init_selective_params(4, rng, d_state=2)
        assert mamba_block_forward(params, Tensor(rng.standard_normal((6, 4)))).shape == (6, 4)
        assert mamba_block_forward(params, Tensor(rng.standard_normal((3, 6, 4)))).shape == (3, 6, 4)
        assert mamba_block_forward(params, Tensor(np.zeros((0, 4)))).shape == (0, 4)

    def test_width_mismatch(self, rng):
        params = init_selective_params(4, rng, d_state=2)
        with pytest.raises(ValueError, match="mamba_block_forward"):
            mamba_block_forward(params, Tensor(np.zeros((3, 5))))

    def test_causal(self, rng):
        params = init_selective_params(4, rng, d_state=2)
        x = rng.standard_normal((1, 10, 4))
        x2 = x.copy()
        x2[:, 6:] = rng.standard_normal((1, 4, 4))
        with T.no_grad():
            y1 = mamba_block_forward(params, Tensor(x, dtype=np.float64)).data
            y2 = mamba_block_forward(params, Tensor(x2, dtype=np.float64)).data
        np.testing.assert_allclose(y1[:, :6], y2[:, :6], atol=1e-12)

    @pytest.mark.parametrize("mode", ["sequential", "parallel"])
    def test_gradient_wrt_tokens(self, rng, mode):
        params = init_selective_params(4, rng, d_state=2, d_conv=2)
        x = rng.standard_normal((1, 6, 4))
        weights = rng.standard_normal((1, 6, 4))
        assert finite_diff_check(lambda t: (mamba_block_forward(params, t, mode=mode) * weights).sum(), x) < 1e-2

    def test_parameter_gradients_flow(self, rng):
        params = init_selective_params(4, rng, d_state=2)
        mamba_block_forward(params, Tensor(rng.standard_normal((5, 4)))).sum().backward()
        for name in ("in_proj", "conv_weight", "x_proj", "dt_proj_weight", "dt_proj_bias", "A_log", "D",
                     "out_proj"):
            grad = getattr(params, name).grad
            assert grad is not None and np.all(np.isfinite(grad)), name


class TestScalarExamples:

    def test_half_decay(self):
        Abar, _ = zoh_discretize(np.array([-1.0]), np.array([1.0]), np.log(2.0))
        assert Abar[0] == pytest.approx(0.5, abs=1e-15)

    def test_exact_zoh_input_matrix(self):
        _, Bbar = zoh_discretize(np.array([-2.0]), np.array([3.0]), 0.1)
        assert Bbar[0] == pytest.approx((np.exp(-0.2) - 1.0) / -2.0 * 3.0, abs=1e-12)
        assert Bbar[0] == pytest.approx(0.271904, abs=1e-5)

    def test_impulse_response_is_kernel(self, rng):
        ssm = random_lti(rng, 5)
        Abar, Bbar = ssm.discretize()
        impulse = np.zeros(40)
        impulse[0] = 1.0
        np.testing.assert_allclose(scan_recurrent(Abar, Bbar, ssm.C, impulse), lti_kernel(Abar, Bbar, ssm.C, 40),
                                   atol=1e-12)

    def test_near_integrator_accumulates(self, rng):
        Abar, Bbar = zoh_discretize(np.array([-1e-9]), np.array([1.0]), 1.0)
        C = np.array([2.0])
        x = rng.standard_normal(200)
        np.testing.assert_allclose(scan_recurrent(Abar, Bbar, C, x), 2.0 * Bbar[0] * np.cumsum(x), atol=1e-3)

    def test_zero_input_gives_zero_output(self, rng):
        ssm = random_lti(rng, 3)
        Abar, Bbar = ssm.discretize()
        assert not np.any(scan_recurrent(Abar, Bbar, ssm.C, np.zeros(25)))

    def test_single_step(self, rng):
        ssm = random_lti(rng, 3)
        Abar, Bbar = ssm.discretize()
        y = scan_recurrent(Abar, Bbar, ssm.C, np.array([1.5]))
        assert y.shape == (1,) and y[0] == pytest.approx(1.5 * ssm.C @ Bbar)

    def test_empty_sequence(self, rng):
        ssm = random_lti(rng, 3)
        Abar, Bbar = ssm.discretize()
        assert scan_recurrent(Abar, Bbar, ssm.C, np.zeros(0)).shape == (0,)
        assert scan_convolutional(Abar, Bbar, ssm.C, np.zeros(0)).shape == (0,)

    def test_long_sequence_stays_bounded(self, rng):
        ssm = random_lti(rng, 8)
        Abar, Bbar = ssm.discretize()
        x = rng.uniform(-1.0, 1.0, size=10_000)
        with np.errstate(over="raise", invalid="raise"):
            y, h = scan_recurrent(Abar, Bbar, ssm.C, x, return_state=True)
        assert np.all(np.isfinite(y))
        assert np.all(np.abs(h) <= np.abs(Bbar) / (1.0 - Abar) + 1e-9)


class TestSelectiveScanStructure:

    def test_linear_in_input(self, rng):
        u1, delta, A, Bt, Ct, D = selective_inputs(rng)
        u2 = rng.standard_normal(u1.shape)

        def run(u):
            with T.no_grad():
                return scan_selective(*[Tensor(a, dtype=np.float64) for a in (u, delta, A, Bt, Ct, D)]).data

        np.testing.assert_allclose(run(2.0 * u1 - 0.5 * u2), 2.0 * run(u1) - 0.5 * run(u2), atol=1e-10)

    @pytest.mark.parametrize("mode", [ScanMode.SEQUENTIAL, ScanMode.PARALLEL])
    def test_skip_path_only(self, rng, mode):
        u, delta, A, Bt, Ct, _ = selective_inputs(rng)
        inputs = [u, delta, A, np.zeros_like(Bt), np.zeros_like(Ct), np.ones(u.shape[2])]
        out = scan_selective(*[Tensor(a, dtype=np.float64) for a in inputs], mode=mode).data
        np.testing.assert_allclose(out, u, rtol=0, atol=1e-14)

    def test_zero_out_projection_silences_block(self, rng):
        params = init_selective_params(4, rng, d_state=2)
        params.out_proj.data[:] = 0
        out = mamba_block_forward(params, Tensor(rng.standard_normal((2, 7, 4)))).data
        assert not np.any(out)

    def test_full_width_block(self, rng):
        params = init_selective_params(128, rng, d_state=16)
        with T.no_grad():
            out = mamba_block_forward(params, Tensor(rng.standard_normal((10, 128)))).data
        assert out.shape == (10, 128) and np.all(np.isfinite(out))
