import math

import numpy as np
import pytest

from mfbdsde.model.errors import DivergenceError, InvalidArgumentError, ShapeError, SingularSystemError
from mfbdsde.model.schemas import SolverConfig
from mfbdsde.model.types import ScenarioEnsemble, TerminalMode, TimeGrid
from mfbdsde.services.bdsde import LinearDriver, basis, regress, solve_bdsde, terminal_condition
from mfbdsde.services.dsl import parse
from mfbdsde.services.scenario import forward_levels, sample_ensemble


def test_terminal_condition_modes():
    grid = TimeGrid(0.0, 1.0, 2)
    ens = ScenarioEnsemble(grid=grid, m_outer=1, k_inner=1, dW=np.array([[[0.1, -0.2]]]), dB=np.zeros((1, 2)), seed=0)
    assert terminal_condition(TerminalMode.w_terminal(), ens)[0] == pytest.approx(-0.1, abs=1e-15)

    three = sample_ensemble(grid, 1, 3, seed=0)
    np.testing.assert_array_equal(terminal_condition(TerminalMode.constant(1.0), three), [1.0, 1.0, 1.0])

    x_paths = np.array([[0.0, 1.0, 2.0]])
    mode = TerminalMode.expression(parse("x^2"))
    assert terminal_condition(mode, ens, x_paths)[0] == 4.0
    with pytest.raises(InvalidArgumentError):
        terminal_condition(mode, ens)


def test_basis_layout():
    x = np.array([1.0, 2.0])
    np.testing.assert_array_equal(basis(x, 2), [[1, 1, 1], [1, 2, 4]])
    b = np.array([3.0, 5.0])
    # 1 | x, b | x^2, x b, b^2
    np.testing.assert_array_equal(basis(x, 2, b), [[1, 1, 3, 1, 3, 9], [1, 2, 5, 4, 10, 25]])


def test_constant_targets_fit_exactly():
    rng = np.random.default_rng(0)
    fit = regress(np.full(200, 3.5), rng.normal(size=200), SolverConfig(estimator="pooled", basis_degree=3))
    np.testing.assert_allclose(fit.fitted, 3.5, atol=1e-12)


def test_linear_targets_recovered():
    x = np.linspace(-2, 2, 50)
    fit = regress(2 * x + 3, x, SolverConfig(estimator="pooled", ridge=0.0))
    np.testing.assert_allclose(fit.coefficients[0], [3.0, 2.0], atol=1e-10)
    np.testing.assert_allclose(fit.predict(np.array([0.5])), [4.0], atol=1e-10)


def test_quadratic_targets_recovered():
    x = np.linspace(-1, 1, 100)
    fit = regress(x ** 2, x, SolverConfig(estimator="pooled", basis_degree=2, ridge=0.0))
    np.testing.assert_allclose(fit.fitted, x ** 2, atol=1e-9)


def test_grouped_fit_per_group():
    k = 20
    x = np.tile(np.linspace(0, 1, k), 3)
    slopes = np.repeat([0.0, 1.0, 2.0], k)
    fit = regress(slopes * x + 1, x, SolverConfig(ridge=0.0), group_size=k)
    np.testing.assert_allclose(fit.coefficients, [[1, 0], [1, 1], [1, 2]], atol=1e-10)


def test_constant_marker_column_drops_out():
    x = np.concatenate([np.full(10, 0.7), np.linspace(0, 1, 10)])
    fit = regress(np.arange(20.0), x, SolverConfig(), group_size=10)
    assert fit.coefficients[0, 1] == 0.0
    assert fit.coefficients[0, 0] == pytest.approx(4.5)


def test_rank_deficient_design_rejected():
    x = np.array([0.0, 1.0] * 10)
    with pytest.raises(SingularSystemError):
        regress(x, x, SolverConfig(estimator="pooled", basis_degree=2, ridge=0.0))


def test_grouped_needs_groups():
    with pytest.raises(InvalidArgumentError):
        regress(np.ones(4), np.arange(4.0), SolverConfig(estimator="grouped"))
    with pytest.raises(ShapeError):
        regress(np.ones(5), np.arange(5.0), SolverConfig(), group_size=2)


def test_constant_solution(coeffs_from, small_ens):
    bundle = solve_bdsde(coeffs_from(xi="1"), small_ens)
    np.testing.assert_allclose(bundle.Y, 1.0, atol=1e-12)
    np.testing.assert_allclose(bundle.Z, 0.0, atol=1e-10)


def test_martingale_representation(coeffs_from):
    grid = TimeGrid(0.0, 1.0, 64)
    ens = sample_ensemble(grid, 1, 8192, seed=42)
    bundle = solve_bdsde(coeffs_from(xi="W_T"), ens)
    W = forward_levels(ens)
    assert np.array_equal(bundle.Y[:, -1], W[:, -1])
    assert np.mean(np.abs(bundle.Z[:, 1:-1] - 1.0)) <= 0.05
    assert np.sqrt(np.mean((bundle.Y - W) ** 2)) <= 0.05


def test_backward_driver_variance(coeffs_from):
    grid = TimeGrid(0.0, 1.0, 32)
    ens = sample_ensemble(grid, 32768, 1, seed=42)
    bundle = solve_bdsde(coeffs_from(xi="0", theta_g="0.5"), ens)
    for i in range(grid.n_steps):
        expected = 0.25 * (grid.t_end - grid.point(i))
        assert abs(bundle.Y[:, i].var() / expected - 1) <= 0.05
    np.testing.assert_allclose(bundle.Z, 0.0, atol=1e-12)


def test_step_refinement_halves_the_error(coeffs_from):
    coeffs = coeffs_from(xi="1", theta_f="0.5*y")
    errors = []
    for n in (4, 8, 16, 32):
        bundle = solve_bdsde(coeffs, sample_ensemble(TimeGrid(0.0, 1.0, n), 4, 64, seed=3))
        errors.append(abs(bundle.Y[:, 0].mean() - math.exp(0.5)))
    assert errors == sorted(errors, reverse=True)
    for coarse, fine in zip(errors, errors[1:]):
        assert 1.8 <= coarse / fine <= 2.2


def test_group_solutions_use_only_their_own_drivers(coeffs_from):
    grid = TimeGrid(0.0, 1.0, 16)
    ens = sample_ensemble(grid, 4, 64, seed=3)
    dW = ens.dW.copy()
    dW[1] += 0.5
    dB = ens.dB.copy()
    dB[2] -= 0.3
    other = ScenarioEnsemble(grid=grid, m_outer=4, k_inner=64, dW=dW, dB=dB, seed=3)
    coeffs = coeffs_from(xi="W_T", theta_f="0.5*y")
    a = solve_bdsde(coeffs, ens)
    b = solve_bdsde(coeffs, other)
    np.testing.assert_allclose(a.Y[:64], b.Y[:64], rtol=0, atol=1e-13)
    np.testing.assert_allclose(a.Z[:64], b.Z[:64], rtol=0, atol=1e-13)
    assert not np.array_equal(a.Y[64:128], b.Y[64:128])


def test_pooled_estimator_runs(coeffs_from, small_ens, pooled):
    bundle = solve_bdsde(coeffs_from(xi="W_T", theta_g="0.1*y"), small_ens, cfg=pooled)
    assert np.all(np.isfinite(bundle.Y)) and np.all(np.isfinite(bundle.Z))


def test_primed_coefficients_need_population(coeffs_from, small_ens):
    with pytest.raises(InvalidArgumentError):
        solve_bdsde(coeffs_from(xi="1", theta_f="yp"), small_ens)


def test_blow_up_reported_as_divergence(coeffs_from):
    ens = sample_ensemble(TimeGrid(0.0, 1.0, 8), 2, 16, seed=0)
    with pytest.raises(DivergenceError) as info:
        solve_bdsde(coeffs_from(xi="1", theta_f="1000*y^2"), ens)
    assert info.value.step is not None


def test_linear_driver_reversal_round_trip():
    rng = np.random.default_rng(1)
    arrays = [rng.normal(size=(3, 5)) for _ in range(6)]
    driver = LinearDriver(*arrays)
    back = driver.time_reversed().time_reversed()
    for name, original in zip(("drift_y", "drift_z", "drift_0", "diffusion_y", "diffusion_z", "diffusion_0"), arrays):
        assert np.array_equal(getattr(back, name), original)
    assert np.array_equal(driver.time_reversed().drift_y, arrays[0][:, ::-1])
