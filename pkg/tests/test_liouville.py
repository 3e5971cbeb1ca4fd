import math

import numpy as np
import pytest

from kuramoto_mfc.circle import TWO_PI, AngularGrid, periodic_quadrature
from kuramoto_mfc.control import ControlField
from kuramoto_mfc.liouville import (
    MarginalSet,
    TensorDensity,
    first_marginal,
    liouville_solve,
    marginal_residual,
    marginal_set,
    relative_entropy,
    second_marginal,
    tensorized_law,
    transposition_residual,
)
from kuramoto_mfc.pde import DensityField, PdeParams, solve_pde
from kuramoto_mfc.profiles import cosine_density, uniform_density, von_mises_density


def random_joint_density(n, n_bodies, seed):
    rng = np.random.default_rng(seed)
    vals = rng.random((n,) * n_bodies) + 0.05
    grid = AngularGrid(n)
    vals /= vals.sum() * grid.cell_width ** n_bodies
    return TensorDensity(grid, vals)


class TestMarginals:
    def test_tensor_product_recovers_factor(self):
        grid = AngularGrid(32)
        p = cosine_density(grid, 0.7)
        state = TensorDensity(grid, np.multiply.outer(p, p))
        out = first_marginal(state)
        assert np.max(np.abs(out.values - p)) < 1e-13

    def test_round_trip_through_tensorized_law(self):
        grid = AngularGrid(24)
        q = DensityField(grid, von_mises_density(grid, 1.0, 2.0))
        tensor = tensorized_law([q], 3)[0]
        back = first_marginal(tensor)
        assert np.max(np.abs(back.values - q.values)) < 1e-14

    def test_tensorized_entry_is_product(self):
        grid = AngularGrid(16)
        q = DensityField(grid, cosine_density(grid, 0.4))
        tensor = tensorized_law([q], 3)[0]
        assert tensor.values[3, 11, 7] == pytest.approx(
            q.values[3] * q.values[11] * q.values[7], rel=1e-14)

    def test_uniform_tensor(self):
        grid = AngularGrid(16)
        q = DensityField(grid, uniform_density(grid))
        tensor = tensorized_law([q], 2)[0]
        assert np.max(np.abs(tensor.values - (1 / TWO_PI) ** 2)) < 1e-16

    def test_first_marginal_brute_force(self):
        state = random_joint_density(8, 3, seed=42)
        h = state.grid.cell_width
        out = first_marginal(state).values
        # nested-loop reference
        ref = np.zeros(8)
        for i in range(8):
            acc = 0.0
            for j in range(8):
                for k in range(8):
                    acc += state.values[i, j, k]
            ref[i] = acc * h * h
        assert np.max(np.abs(out - ref)) < 1e-14

    def test_exchangeable_state_symmetric_marginals(self):
        state = random_joint_density(12, 2, seed=3)
        sym = TensorDensity(state.grid,
                            0.5 * (state.values + state.values.T))
        m_axis0 = first_marginal(sym).values
        m_axis1 = sym.values.sum(axis=0) * sym.grid.cell_width
        assert np.max(np.abs(m_axis0 - m_axis1)) < 1e-12

    def test_second_marginal_consistency(self):
        state = random_joint_density(10, 3, seed=8)
        q2 = second_marginal(state)
        q1 = first_marginal(state).values
        integrated = q2.sum(axis=1) * state.grid.cell_width
        assert np.max(np.abs(integrated - q1)) < 1e-12


class TestRelativeEntropy:
    def test_identical_laws_zero(self):
        state = random_joint_density(10, 2, seed=1)
        assert relative_entropy(state, state) == 0.0

    def test_von_mises_against_uniform(self):
        scipy_special = pytest.importorskip("scipy.special")
        grid = AngularGrid(256)
        p = DensityField(grid, von_mises_density(grid, 0.7, 1.0))
        u = DensityField(grid, uniform_density(grid))
        qn = tensorized_law([p], 2)[0]
        ref = tensorized_law([u], 2)[0]
        got = relative_entropy(qn, ref)
        # 1-D quadrature oracle on an independent fine grid
        fine = np.linspace(0, TWO_PI, 20001)[:-1]
        pf = np.exp(1.0 * np.cos(fine - 0.7)) / (TWO_PI * np.i0(1.0))
        oracle = np.sum(pf * np.log(pf * TWO_PI)) * (fine[1] - fine[0])
        assert got == pytest.approx(oracle, abs=1e-8)
        # analytic value: kappa * I1/I0 - log I0 at kappa = 1
        i0 = scipy_special.iv(0, 1.0)
        i1 = scipy_special.iv(1, 1.0)
        assert got == pytest.approx(i1 / i0 - math.log(i0), abs=1e-10)

    def test_nonnegative_on_random_pairs(self):
        for seed in range(100):
            a = random_joint_density(6, 2, seed=seed)
            b = random_joint_density(6, 2, seed=seed + 1000)
            assert relative_entropy(a, b) >= 0.0

    def test_support_violation_reports_infinity(self):
        grid = AngularGrid(8)
        vals = np.full((8, 8), 1.0)
        vals /= vals.sum() * grid.cell_width ** 2
        qn = TensorDensity(grid, vals)
        ref_vals = vals.copy()
        ref_vals[0, 0] = 0.0
        ref = TensorDensity(grid, ref_vals)
        assert relative_entropy(qn, ref) == math.inf

    def test_zero_cells_convention(self):
        grid = AngularGrid(8)
        vals = np.zeros((8, 8))
        vals[2, 3] = 1.0
        vals /= vals.sum() * grid.cell_width ** 2
        qn = TensorDensity(grid, vals)
        ref = random_joint_density(8, 2, seed=5)
        assert math.isfinite(relative_entropy(qn, ref))


class TestLiouvilleSolve:
    def test_unsupported_body_count(self):
        grid = AngularGrid(16)
        q0 = DensityField(grid, uniform_density(grid))
        params = PdeParams(diffusion=0.5, dt=1e-3, t_final=0.01, n_theta=16)
        with pytest.raises(ValueError, match="n_bodies"):
            liouville_solve(q0, None, params, 4, [0.0])

    def test_uniform_stationary(self):
        grid = AngularGrid(24)
        q0 = DensityField(grid, uniform_density(grid))
        params = PdeParams(diffusion=0.5, dt=2e-3, t_final=0.1, n_theta=24)
        traj = liouville_solve(q0, None, params, 2, [0.0, 0.05, 0.1])
        for state in traj:
            assert np.max(np.abs(state.values - (1 / TWO_PI) ** 2)) < 1e-12

    def test_factorization_without_coupling(self):
        # u2 = 0 keeps a tensorized start tensorized: compare to the 1-D solve
        n = 64
        grid = AngularGrid(n)
        q0 = DensityField(grid, cosine_density(grid, 1.0))
        params = PdeParams(diffusion=0.5, dt=5e-4, t_final=0.25, n_theta=n)
        u = ControlField.constant(0.3, 0.0, AngularGrid(16), params.t_final)
        times = [0.0, 0.125, 0.25]
        joint = liouville_solve(q0, u, params, 2, times)
        mean_field = solve_pde(q0, u, params, times)
        for state, q in zip(joint, mean_field):
            tensor = np.multiply.outer(q.values, q.values)
            assert np.max(np.abs(state.values - tensor)) <= 1e-6
            ref = TensorDensity(grid, tensor, q.time)
            assert relative_entropy(state, ref) <= 1e-8

    def test_conservation_and_exchangeability(self):
        n = 48
        grid = AngularGrid(n)
        q0 = DensityField(grid, cosine_density(grid, 1.0))
        params = PdeParams(diffusion=0.5, dt=2e-3, t_final=0.2, n_theta=n)
        u = ControlField.constant(0.2, 1.0, AngularGrid(16), params.t_final)
        traj = liouville_solve(q0, u, params, 2, [0.0, 0.1, 0.2])
        for state in traj:
            assert abs(state.mass() - 1.0) <= 1e-10
            assert state.values.min() >= -1e-12
            assert transposition_residual(state) <= 1e-9

    def test_three_body_exchangeability(self):
        n = 24
        grid = AngularGrid(n)
        q0 = DensityField(grid, cosine_density(grid, 0.8))
        params = PdeParams(diffusion=0.5, dt=2e-3, t_final=0.05, n_theta=n)
        u = ControlField.constant(0.1, 1.0, AngularGrid(8), params.t_final)
        traj = liouville_solve(q0, u, params, 3, [0.05])
        state = traj[0]
        assert abs(state.mass() - 1.0) <= 1e-10
        assert transposition_residual(state) <= 1e-9

    def test_self_convergence_first_marginal(self):
        # coupled N=2 run; halving the grid (and dt) roughly halves the error,
        # and the deviation sits below cell_width^2 on these grids
        marg = {}
        for n, dt in [(32, 5e-3), (64, 2.5e-3), (128, 1.25e-3)]:
            grid = AngularGrid(n)
            q0 = DensityField(grid, cosine_density(grid, 1.0))
            params = PdeParams(diffusion=0.5, dt=dt, t_final=0.25, n_theta=n)
            u = ControlField.constant(0.0, 1.0, AngularGrid(16), 0.25)
            traj = liouville_solve(q0, u, params, 2, [0.25])
            marg[n] = first_marginal(traj[0]).values
        d_coarse = np.max(np.abs(marg[32] - marg[64][::2]))
        d_fine = np.max(np.abs(marg[64] - marg[128][::2]))
        assert d_coarse <= AngularGrid(32).cell_width ** 2
        assert d_fine <= AngularGrid(64).cell_width ** 2
        assert d_coarse / d_fine >= 1.8

    def test_ckp_inequality_along_run(self):
        n = 48
        grid = AngularGrid(n)
        q0 = DensityField(grid, cosine_density(grid, 1.0))
        params = PdeParams(diffusion=0.5, dt=2e-3, t_final=0.2, n_theta=n)
        u = ControlField.constant(0.0, 1.0, AngularGrid(16), params.t_final)
        times = np.linspace(0, 0.2, 6)
        joint = liouville_solve(q0, u, params, 2, times)
        mean_field = solve_pde(q0, u, params, times)
        for state, q in zip(joint, mean_field):
            ref = tensorized_law([q], 2)[0]
            entropy = relative_entropy(state, ref)
            l1 = periodic_quadrature(
                np.abs(first_marginal(state).values - q.values), grid)
            assert 2 * entropy - l1 ** 2 >= -1e-8

    def test_marginal_consistency_along_run(self):
        n = 32
        grid = AngularGrid(n)
        q0 = DensityField(grid, cosine_density(grid, 0.9))
        params = PdeParams(diffusion=0.5, dt=2e-3, t_final=0.1, n_theta=n)
        u = ControlField.constant(0.1, 0.8, AngularGrid(8), params.t_final)
        traj = liouville_solve(q0, u, params, 3, [0.1])
        state = traj[0]
        q2 = second_marginal(state)
        q1 = first_marginal(state).values
        assert np.max(np.abs(q2.sum(axis=1) * grid.cell_width - q1)) <= 1e-12


class TestMarginalResidual:
    def _marginal_sets(self, n, dt, t_final, u, n_bodies, n_snap=11):
        grid = AngularGrid(n)
        q0 = DensityField(grid, cosine_density(grid, 1.0))
        params = PdeParams(diffusion=0.5, dt=dt, t_final=t_final, n_theta=n)
        times = np.linspace(0.0, t_final, n_snap)
        traj = liouville_solve(q0, u, params, n_bodies, times)
        return [marginal_set(s) for s in traj], params

    def test_stationary_state_zero_residual(self):
        grid = AngularGrid(32)
        uniform = DensityField(grid, uniform_density(grid))
        sets = [
            MarginalSet(DensityField(grid, uniform.values.copy(), t),
                        np.full((32, 32), (1 / TWO_PI) ** 2), None, t)
            for t in (0.0, 0.1, 0.2)
        ]
        params = PdeParams(diffusion=0.5, dt=1e-3, t_final=0.2, n_theta=32)
        res = marginal_residual(sets, None, params)
        assert np.max(res.first) <= 1e-12

    def test_needs_three_snapshots(self):
        grid = AngularGrid(16)
        uniform = DensityField(grid, uniform_density(grid))
        sets = [MarginalSet(uniform, np.ones((16, 16)), None, 0.0)] * 2
        params = PdeParams(diffusion=0.5, dt=1e-3, t_final=0.1, n_theta=16)
        with pytest.raises(ValueError, match="3 snapshots"):
            marginal_residual(sets, None, params)

    def test_refinement_shrinks_residual(self):
        # upwind advection is first order in the cell width, so halving both
        # resolutions shrinks the residual by about two
        u = ControlField.constant(0.0, 1.0, AngularGrid(16), 0.2)
        sets_c, params_c = self._marginal_sets(32, 2e-3, 0.2, u, 2)
        sets_f, params_f = self._marginal_sets(64, 1e-3, 0.2, u, 2)
        res_c = marginal_residual(sets_c, u, params_c)
        res_f = marginal_residual(sets_f, u, params_f)
        assert np.max(res_f.first) < np.max(res_c.first)
        assert np.max(res_c.first) / np.max(res_f.first) >= 1.8

    def test_uncoupled_matches_one_body_level(self):
        # with u2 = 0 the tensor solve's marginal residual matches the level
        # of the 1-D solve's own residual
        u = ControlField.constant(0.3, 0.0, AngularGrid(16), 0.2)
        sets_t, params = self._marginal_sets(32, 2e-3, 0.2, u, 2)
        res_tensor = marginal_residual(sets_t, u, params)

        grid = AngularGrid(32)
        q0 = DensityField(grid, cosine_density(grid, 1.0))
        times = np.linspace(0.0, 0.2, 11)
        mean_field = solve_pde(q0, u, params, times)
        sets_1d = [
            MarginalSet(q, np.multiply.outer(q.values, q.values), None, q.time)
            for q in mean_field
        ]
        res_1d = marginal_residual(sets_1d, u, params)
        assert np.max(res_tensor.first) <= 1.1 * np.max(res_1d.first) + 1e-9

    def test_three_body_second_residual_present(self):
        u = ControlField.constant(0.1, 0.7, AngularGrid(8), 0.1)
        sets, params = self._marginal_sets(24, 2e-3, 0.1, u, 3, n_snap=6)
        res = marginal_residual(sets, u, params)
        assert res.second is not None
        assert np.all(np.isfinite(res.second))
