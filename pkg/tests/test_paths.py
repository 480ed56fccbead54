import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from infodrift.paths import (
    ControlPolicy,
    InadmissibleControl,
    log_wealth,
    log_wealth_ensemble,
    simulate,
)

from conftest import make_model


class TestSimulate:
    def test_signal_moments_brownian(self, brownian_model):
        # Y = int dB over [0,1]: mean 0, variance T0
        ens = simulate(brownian_model, 20000, seed=101)
        y = ens.signal
        se_mean = np.std(y, ddof=1) / math.sqrt(len(y))
        assert abs(np.mean(y)) <= 3 * se_mean
        var = np.var(y, ddof=1)
        se_var = var * math.sqrt(2.0 / (len(y) - 1))
        assert abs(var - 1.0) <= 3 * se_var

    def test_poisson_total_count_mean(self, poisson_model):
        ens = simulate(poisson_model, 20000, seed=7)
        totals = np.sum(ens.jump_counts[:, :, 0], axis=1)
        se = np.std(totals, ddof=1) / math.sqrt(len(totals))
        assert abs(np.mean(totals) - 1.0) <= 3 * se

    def test_brownian_increment_variance(self, brownian_model):
        ens = simulate(brownian_model, 5000, seed=3)
        v = np.var(ens.d_brownian, ddof=1)
        assert v == pytest.approx(brownian_model.dt, rel=0.02)

    def test_running_signal_terminates_at_signal(self, mixed_model):
        ens = simulate(mixed_model, 50, seed=5)
        assert np.array_equal(ens.running_signal[:, -1], ens.signal)

    def test_paths_deterministic_in_seed_and_id(self, mixed_model):
        # same (seed, path_id) must be bit-identical however the run is chunked
        full = simulate(mixed_model, 8, seed=99)
        offset = simulate(mixed_model, 3, seed=99, path_id_start=5)
        assert np.array_equal(full.d_brownian[5:8], offset.d_brownian)
        assert np.array_equal(full.jump_counts[5:8], offset.jump_counts)

    def test_different_seeds_differ(self, brownian_model):
        a = simulate(brownian_model, 2, seed=1)
        b = simulate(brownian_model, 2, seed=2)
        assert not np.array_equal(a.d_brownian, b.d_brownian)

    def test_antithetic_flip_negates_brownian_contribution(self, mixed_model):
        ens = simulate(mixed_model, 10, seed=13)
        flipped = ens.with_flipped_gaussians()
        # jump draws unchanged; the theta * B part of Y flips sign exactly
        theta = 0.8
        brown = theta * np.hstack(
            [np.zeros((10, 1)), np.cumsum(ens.d_brownian, axis=1)]
        )
        assert np.array_equal(flipped.jump_counts, ens.jump_counts)
        assert np.allclose(
            flipped.running_signal, ens.running_signal - 2 * brown, atol=1e-12
        )

    def test_slice_is_row_identical(self, poisson_model):
        ens = simulate(poisson_model, 10, seed=31)
        part = ens.slice(4, 9)
        assert np.array_equal(part.d_brownian, ens.d_brownian[4:9])
        assert np.array_equal(part.signal, ens.signal[4:9])

    def test_sample_path_view(self, mixed_model):
        ens = simulate(mixed_model, 3, seed=17)
        p = ens.path(2)
        assert p.path_id == 2
        assert p.signal == pytest.approx(float(ens.signal[2]))
        assert p.brownian[0] == 0.0
        assert np.all(p.jump_counts >= 0)
        lam_dt = 1.0 * mixed_model.dt
        assert np.allclose(p.compensated_jump, p.jump_counts - lam_dt)


class TestLogWealth:
    def test_zero_policy_is_exactly_zero(self, mixed_model):
        ens = simulate(mixed_model, 20, seed=23)
        vals = log_wealth_ensemble(ens, ControlPolicy(kind="zero"), mixed_model.market)
        assert np.all(vals == 0.0)

    def test_constant_control_brownian_closed_form(self, brownian_model):
        # b = 0, sigma = 1, no jumps: ln X(T) = -u^2 T / 2 + u B(T)
        ens = simulate(brownian_model, 100, seed=29)
        u = 0.7
        vals = log_wealth_ensemble(ens, ControlPolicy(kind="constant", u0=u),
                                   brownian_model.market)
        k = brownian_model.grid.node_index(0.5)
        expect = -0.5 * u**2 * 0.5 + u * ens.brownian[:, k]
        assert np.allclose(vals, expect, atol=1e-12)

    def test_single_jump_cell_contribution(self):
        # one cell, one jump of the unit mark: ln(1 + u gamma) - u gamma lam dt
        model = make_model(
            t_end=1.0, n_steps=4, sigma_y=0.0, marks=[(1.0, 1.0)], thetas=[1.0],
            b=0.0, sigma=1.0, gammas=[0.5], horizon=0.25,
        )
        ens = simulate(model, 400, seed=37)
        vals = log_wealth_ensemble(ens, ControlPolicy(kind="constant", u0=1.0), model.market)
        counts = ens.jump_counts[:, 0, 0]
        dB = ens.d_brownian[:, 0]
        expect = (
            -0.5 * 0.25 + dB + counts * math.log(1.5) - 0.5 * 1.0 * 0.25
        )
        assert np.allclose(vals, expect, atol=1e-12)

    def test_mc_mean_matches_drift_formula(self, brownian_model):
        # E[ln X(T)] = (u b - u^2 sigma^2 / 2) T for constant coefficients
        model = make_model(b=0.1)
        ens = simulate(model, 20000, seed=41)
        u = 0.4
        vals = log_wealth_ensemble(ens, ControlPolicy(kind="constant", u0=u), model.market)
        expect = (u * 0.1 - 0.5 * u**2) * 0.5
        se = np.std(vals, ddof=1) / math.sqrt(len(vals))
        assert abs(np.mean(vals) - expect) <= 3 * se

    def test_single_path_matches_ensemble(self, mixed_model):
        ens = simulate(mixed_model, 5, seed=43)
        pol = ControlPolicy(kind="constant", u0=0.8)
        vals = log_wealth_ensemble(ens, pol, mixed_model.market)
        for i in range(5):
            v = log_wealth(ens.path(i), pol, mixed_model.market, mixed_model, path_row=i)
            assert v == pytest.approx(float(vals[i]), abs=1e-12)

    def test_inadmissible_control_rejected(self, mixed_model):
        ens = simulate(mixed_model, 4, seed=47)
        # gamma = 0.5: u = -2 makes 1 + u*gamma = 0
        with pytest.raises(InadmissibleControl):
            log_wealth_ensemble(ens, ControlPolicy(kind="constant", u0=-2.0),
                                mixed_model.market)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(min_value=-1.5, max_value=1.9, allow_nan=False))
    def test_wealth_zero_iff_zero_control_on_driftless_path(self, u):
        # admissible u on gamma=0.5 needs 1 + 0.5 u >= eps; range keeps it valid
        model = make_model(
            n_steps=20, sigma_y=0.8, marks=[(1.0, 1.0)], thetas=[1.0],
            gammas=[0.5], horizon=0.5,
        )
        ens = simulate(model, 1, seed=53)
        vals = log_wealth_ensemble(ens, ControlPolicy(kind="constant", u0=u), model.market)
        assert np.isfinite(vals).all()
        if u == 0.0:
            assert vals[0] == 0.0


class TestControlPolicy:
    def test_table_shapes(self):
        pol = ControlPolicy(kind="table", table=np.ones(5))
        assert pol.controls(3, 5).shape == (3, 5)
        pol2 = ControlPolicy(kind="table", table=np.ones((3, 5)))
        assert pol2.controls(3, 5).shape == (3, 5)
        with pytest.raises(ValueError):
            pol2.controls(4, 5)

    def test_missing_table_rejected(self):
        with pytest.raises(ValueError):
            ControlPolicy(kind="insider-optimal").controls(2, 3)
