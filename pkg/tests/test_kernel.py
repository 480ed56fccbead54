import math

import numpy as np
import pytest

from infodrift.kernel import (
    FourierState,
    OffLattice,
    QuadratureDidNotConverge,
    QuadratureSpec,
    build_tail,
    cond_delta,
    cond_malliavin_B,
    cond_malliavin_N,
    delta_batch,
    delta_ygrid,
    fourier_state,
    integrand_F,
    kernel_values,
)
from infodrift.paths import simulate

from conftest import make_model


def state_at_zero(model):
    return FourierState(
        tail=build_tail(model, 0.0),
        running_jump_phase=0.0,
        running_brownian_integral=0.0,
    )


def gaussian_density(y, mean, var):
    return math.exp(-0.5 * (y - mean) ** 2 / var) / math.sqrt(2 * math.pi * var)


class TestIntegrandF:
    def test_brownian_tail_only(self, brownian_model):
        state = state_at_zero(brownian_model)
        val = integrand_F(state, 1.0, 0.0)
        assert val == pytest.approx(math.exp(-0.5), abs=1e-15)

    def test_lattice_hand_value_at_pi(self, poisson_model):
        state = state_at_zero(poisson_model)
        val = complex(integrand_F(state, math.pi, 0.0))
        expect = np.exp(1.0 * (np.exp(1j * math.pi) - 1.0 - 1j * math.pi))
        assert val == pytest.approx(expect, abs=1e-14)
        assert val == pytest.approx(np.exp(-2 - 1j * math.pi), abs=1e-14)

    def test_modulus_bounded_by_gaussian_envelope(self, mixed_model):
        ens = simulate(mixed_model, 3, seed=5)
        rng = np.random.default_rng(0)
        for i in range(3):
            state = fourier_state(mixed_model, ens.path(i), 0.25)
            xs = rng.uniform(-20, 20, size=50)
            envelope = np.exp(-0.5 * xs**2 * state.tail.tail_gaussian)
            assert np.all(np.abs(integrand_F(state, xs, 0.3)) <= envelope * (1 + 1e-12))


class TestCondDelta:
    def test_standard_normal_at_t0(self, brownian_model):
        q = QuadratureSpec.for_model(brownian_model)
        state = state_at_zero(brownian_model)
        for y in (-2.0, -1.0, 0.0, 1.0, 2.0):
            val = cond_delta(state, y, q)
            assert val == pytest.approx(gaussian_density(y, 0.0, 1.0), rel=1e-10)

    def test_conditional_gaussian_mid_path(self, brownian_model):
        # t = 0.36, Y(t) = 0.2: N(0.2, 0.64) density at 0.5
        q = QuadratureSpec.for_model(brownian_model)
        state = FourierState(
            tail=build_tail(brownian_model, 0.36),
            running_jump_phase=0.0,
            running_brownian_integral=0.2,
        )
        val = cond_delta(state, 0.5, q)
        expect = (2 * math.pi * 0.64) ** -0.5 * math.exp(-0.09 / 1.28)
        assert val == pytest.approx(expect, rel=1e-10)

    def test_lattice_masses_are_poisson(self, poisson_model):
        from scipy.stats import poisson as pois

        q = QuadratureSpec.for_model(poisson_model)
        state = state_at_zero(poisson_model)
        for k in range(7):
            val = cond_delta(state, k - 1.0, q)
            assert val == pytest.approx(pois.pmf(k, 1.0), abs=1e-12)

    def test_off_lattice_rejected(self, poisson_model):
        q = QuadratureSpec.for_model(poisson_model)
        with pytest.raises(OffLattice):
            cond_delta(state_at_zero(poisson_model), 0.4, q)

    def test_nonconvergence_is_reported(self, brownian_model):
        q = QuadratureSpec(mode="gaussian-decay", abs_tol=1e-10, max_nodes=32)
        with pytest.raises(QuadratureDidNotConverge):
            cond_delta(state_at_zero(brownian_model), 0.0, q)

    def test_truncation_doubling_invariance(self, mixed_model):
        # envelope_floor 1e-64 doubles x_max exactly; results must not move
        state = state_at_zero(mixed_model)
        q1 = QuadratureSpec.for_model(mixed_model)
        q2 = QuadratureSpec.for_model(mixed_model, envelope_floor=1e-64)
        for y in (-1.0, 0.3, 2.0):
            assert cond_delta(state, y, q1) == pytest.approx(
                cond_delta(state, y, q2), abs=q1.abs_tol
            )


class TestCondMalliavinB:
    def test_matches_gaussian_derivative_at_t0(self, brownian_model):
        q = QuadratureSpec.for_model(brownian_model)
        state = state_at_zero(brownian_model)
        for y in (0.7, -1.3, 2.1):
            val = cond_malliavin_B(state, y, q)
            assert val == pytest.approx(y * gaussian_density(y, 0, 1), rel=1e-9)

    def test_zero_by_symmetry_at_own_value(self, brownian_model):
        q = QuadratureSpec.for_model(brownian_model)
        state = FourierState(
            tail=build_tail(brownian_model, 0.3),
            running_jump_phase=0.0,
            running_brownian_integral=0.4,
        )
        val = cond_malliavin_B(state, 0.4, q)  # y = Y(t): odd integrand
        assert abs(val) < 1e-12

    def test_finite_difference_in_y(self, brownian_model):
        # d/dy cond_delta = -cond_malliavin_B / sigma_y(t)
        q = QuadratureSpec.for_model(brownian_model, abs_tol=1e-12)
        state = FourierState(
            tail=build_tail(brownian_model, 0.2),
            running_jump_phase=0.0,
            running_brownian_integral=-0.3,
        )
        y, h = 0.5, 1e-5
        fd = (cond_delta(state, y + h, q) - cond_delta(state, y - h, q)) / (2 * h)
        val = cond_malliavin_B(state, y, q)
        assert fd == pytest.approx(-val / state.tail.sigma_y_t, rel=1e-6)


class TestCondMalliavinN:
    def test_zero_when_theta_vanishes_on_cell(self):
        theta = [0.0] * 250 + [1.0] * 250
        model = make_model(sigma_y=1.0, marks=[(1.0, 1.0)], thetas=[theta], gammas=[0.5])
        q = QuadratureSpec.for_model(model)
        state = state_at_zero(model)
        assert cond_malliavin_N(state, 0, 0.3, q) == 0.0

    def test_lattice_shift_property(self, poisson_model):
        # numerator equals mass(y - theta) - mass(y)
        q = QuadratureSpec.for_model(poisson_model)
        state = state_at_zero(poisson_model)
        for k in (1, 2, 4):
            y = k - 1.0
            dn = cond_malliavin_N(state, 0, y, q)
            shift = cond_delta(state, y - 1.0, q) - cond_delta(state, y, q)
            assert dn == pytest.approx(shift, abs=1e-12)

    def test_mixed_model_matches_mixture_shift(self, mixed_model):
        # same shift identity through the Gaussian convolution
        from infodrift.drift import mixture_density

        q = QuadratureSpec.for_model(mixed_model, abs_tol=1e-12)
        state = state_at_zero(mixed_model)
        y = 0.75
        dn = cond_malliavin_N(state, 0, y, q)
        f0, _ = mixture_density(np.array([y]), 1.0, 0.64)
        f1, _ = mixture_density(np.array([y - 1.0]), 1.0, 0.64)
        assert dn == pytest.approx(float(f1[0] - f0[0]), abs=1e-10)


class TestSharedNodes:
    def test_kernel_values_consistent_with_single_ops(self, mixed_model):
        q = QuadratureSpec.for_model(mixed_model)
        ens = simulate(mixed_model, 2, seed=9)
        state = fourier_state(mixed_model, ens.path(1), 0.25)
        y = float(ens.path(1).signal)
        kv = kernel_values(state, y, q, marks=(0,), want_b=True)
        assert kv.delta == pytest.approx(cond_delta(state, y, q), abs=1e-13)
        assert kv.malliavin_b == pytest.approx(cond_malliavin_B(state, y, q), abs=1e-13)
        assert kv.malliavin_n[0] == pytest.approx(cond_malliavin_N(state, 0, y, q), abs=1e-13)
        assert abs(kv.imag_delta) <= 10 * q.abs_tol
        assert abs(kv.imag_b) <= 10 * q.abs_tol
        assert float(np.max(np.abs(kv.imag_n))) <= 10 * q.abs_tol

    def test_delta_batch_matches_loop(self, brownian_model):
        q = QuadratureSpec.for_model(brownian_model)
        tail = build_tail(brownian_model, 0.25)
        runnings = np.array([-0.8, 0.0, 0.4, 1.7])
        batch = delta_batch(tail, runnings, 0.5, q)
        for r, b in zip(runnings, batch):
            state = FourierState(tail=tail, running_jump_phase=0.0,
                                 running_brownian_integral=float(r))
            assert b == pytest.approx(cond_delta(state, 0.5, q), abs=1e-12)

    def test_delta_ygrid_matches_loop(self, mixed_model):
        q = QuadratureSpec.for_model(mixed_model)
        state = state_at_zero(mixed_model)
        ys = np.array([-1.0, 0.0, 0.5, 2.0])
        grid_vals = delta_ygrid(state, ys, q)
        for y, g in zip(ys, grid_vals):
            assert g == pytest.approx(cond_delta(state, float(y), q), abs=1e-12)


class TestDensityMartingale:
    def test_ensemble_mean_matches_t0_density(self, brownian_model):
        # tower property at fixed y, moderate ensemble
        q = QuadratureSpec.for_model(brownian_model)
        ens = simulate(brownian_model, 4000, seed=21)
        tail = build_tail(brownian_model, 0.2)
        k = brownian_model.grid.node_index(0.2)
        for y in (0.0, 1.0):
            vals = delta_batch(tail, ens.running_signal[:, k], y, q)
            target = cond_delta(state_at_zero(brownian_model), y, q)
            stderr = np.std(vals, ddof=1) / math.sqrt(len(vals))
            assert abs(np.mean(vals) - target) <= 3 * stderr
