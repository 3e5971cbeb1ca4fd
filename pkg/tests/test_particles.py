import math

import numpy as np
import pytest

from kuramoto_mfc.circle import TWO_PI, AngularGrid
from kuramoto_mfc.particles import (
    ParticleEnsemble,
    SdeParams,
    empirical_marginal,
    ensemble_drift,
    run_particles,
    sample_initial,
    sde_step,
)
from kuramoto_mfc.pde import DensityField
from kuramoto_mfc.profiles import cosine_density, uniform_density


def make_ensemble(phases, seed=0):
    return ParticleEnsemble(np.asarray(phases, dtype=float),
                            np.random.Generator(np.random.Philox(seed)))


class TestSampleInitial:
    def test_point_mass_cell(self):
        grid = AngularGrid(32)
        vals = np.zeros(32)
        vals[7] = 1.0 / grid.cell_width
        q0 = DensityField(grid, vals)
        ens = sample_initial(q0, 500, seed=4)
        h = grid.cell_width
        lo, hi = grid.nodes[7] - h / 2, grid.nodes[7] + h / 2
        assert np.all((ens.phases >= lo) & (ens.phases < hi))

    def test_uniform_kolmogorov_smirnov(self):
        stats = pytest.importorskip("scipy.stats")
        grid = AngularGrid(256)
        q0 = DensityField(grid, uniform_density(grid))
        passed = 0
        for seed in range(100):
            ens = sample_initial(q0, 100_000, seed=seed)
            p = stats.kstest(ens.phases / TWO_PI, "uniform").pvalue
            passed += p > 0.01
        assert passed >= 95

    def test_cosine_order_parameter(self):
        grid = AngularGrid(256)
        q0 = DensityField(grid, cosine_density(grid, 1.0))
        ens = sample_initial(q0, 100_000, seed=12)
        z = np.exp(1j * ens.phases).mean()
        assert z.real == pytest.approx(0.5, abs=0.01)
        assert z.imag == pytest.approx(0.0, abs=0.01)

    def test_bad_count_rejected(self):
        grid = AngularGrid(16)
        q0 = DensityField(grid, uniform_density(grid))
        with pytest.raises(ValueError):
            sample_initial(q0, 0, seed=1)


class TestEnsembleDrift:
    def test_single_particle_self_term(self):
        ens = make_ensemble([1.0])
        alpha = 0.7
        drift = ensemble_drift(ens, 0.3, 2.0, alpha=alpha)
        assert drift[0] == pytest.approx(0.3 + 2.0 * math.sin(-alpha), abs=1e-14)

    def test_synchronized_cluster_no_force(self):
        ens = make_ensemble([2.0] * 50)
        drift = ensemble_drift(ens, 0.4, 3.0, alpha=0.0)
        assert drift == pytest.approx(np.full(50, 0.4), abs=1e-13)

    def test_modes_agree_on_random_configuration(self):
        rng = np.random.default_rng(5)
        ens = make_ensemble(rng.uniform(0, TWO_PI, 1000))
        kwargs = dict(alpha=0.3)
        d_fast = ensemble_drift(ens, 0.1, 1.7, mode="order_parameter", **kwargs)
        d_slow = ensemble_drift(ens, 0.1, 1.7, mode="pairwise", **kwargs)
        assert np.max(np.abs(d_fast - d_slow)) <= 1e-12

    def test_modes_agree_hundred_configs(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            n = int(rng.integers(2, 2001))
            ens = make_ensemble(rng.uniform(0, TWO_PI, n))
            alpha = rng.uniform(0, TWO_PI)
            u1 = rng.standard_normal(n) * 0.2
            u2 = rng.standard_normal(n) * 0.5
            d_fast = ensemble_drift(ens, u1, u2, alpha=alpha, mode="order_parameter")
            d_slow = ensemble_drift(ens, u1, u2, alpha=alpha, mode="pairwise")
            assert np.max(np.abs(d_fast - d_slow)) <= 1e-12

    def test_shape_mismatch_rejected(self):
        ens = make_ensemble([0.1, 0.2, 0.3])
        with pytest.raises(ValueError):
            ensemble_drift(ens, np.ones(2), 0.0)


class TestSdeStep:
    def test_deterministic_rotation(self):
        params = SdeParams(diffusion=0.0, dt=0.01, t_final=1.0)
        start = np.array([0.0, 1.0, 4.0])
        ens = make_ensemble(start)
        omega = 0.7
        for _ in range(250):
            sde_step(ens, omega, 0.0, params)
        expected = np.mod(start + omega * 250 * 0.01, TWO_PI)
        assert ens.phases == pytest.approx(expected, abs=1e-10)

    def test_zero_dynamics_fixed_point(self):
        params = SdeParams(diffusion=0.0, dt=0.01, t_final=1.0)
        start = np.array([0.3, 2.2, 5.1])
        ens = make_ensemble(start)
        for _ in range(100):
            sde_step(ens, 0.0, 0.0, params)
        assert ens.phases == pytest.approx(start, abs=1e-14)

    def test_heat_decay_monte_carlo(self):
        grid = AngularGrid(256)
        q0 = DensityField(grid, cosine_density(grid, 1.0))
        ens = sample_initial(q0, 100_000, seed=23)
        params = SdeParams(diffusion=0.5, dt=1e-3, t_final=1.0)
        run_particles(ens, None, params, [1.0])
        amp = abs(np.exp(-1j * ens.phases).mean())
        # MC std of the mode ~ sqrt(1/(2N)) ~ 2.2e-3; allow 3 sigma + dt bias
        assert amp == pytest.approx(0.5 * math.exp(-0.5), abs=8e-3)

    def test_exchangeability_under_permutation(self):
        rng = np.random.default_rng(9)
        phases = rng.uniform(0, TWO_PI, 200)
        perm = rng.permutation(200)
        noise = rng.standard_normal(200)
        params = SdeParams(diffusion=0.5, dt=1e-2, t_final=1.0)
        u1 = np.full(200, 0.2)
        u2 = np.full(200, 1.0)

        a = make_ensemble(phases)
        sde_step(a, u1, u2, params, noise=noise)
        b = make_ensemble(phases[perm])
        sde_step(b, u1[perm], u2[perm], params, noise=noise[perm])
        assert b.phases == pytest.approx(a.phases[perm], abs=1e-13)

    def test_bit_reproducible(self):
        grid = AngularGrid(64)
        q0 = DensityField(grid, cosine_density(grid, 0.5))
        params = SdeParams(diffusion=0.5, dt=1e-2, t_final=0.5)
        runs = []
        for _ in range(2):
            ens = sample_initial(q0, 2000, seed=77)
            run_particles(ens, None, params, [0.5])
            runs.append(ens.phases.copy())
        assert np.array_equal(runs[0], runs[1])

    def test_noise_shape_checked(self):
        ens = make_ensemble([0.1, 0.2])
        params = SdeParams(diffusion=0.5, dt=1e-2, t_final=1.0)
        with pytest.raises(ValueError):
            sde_step(ens, 0.0, 0.0, params, noise=np.zeros(3))


class TestEmpiricalMarginal:
    def test_single_cell_occupancy(self):
        grid = AngularGrid(16)
        ens = make_ensemble(np.full(40, grid.nodes[5]))
        field = empirical_marginal(ens, grid)
        expected = np.zeros(16)
        expected[5] = 1.0 / grid.cell_width
        assert field.values == pytest.approx(expected)

    def test_mass_exact(self):
        rng = np.random.default_rng(2)
        ens = make_ensemble(rng.uniform(0, TWO_PI, 12345))
        field = empirical_marginal(ens, AngularGrid(64))
        assert field.mass() == pytest.approx(1.0, abs=1e-13)

    def test_uniform_binomial_deviation(self):
        grid = AngularGrid(64)
        n = 1_000_000
        rng = np.random.Generator(np.random.Philox(31))
        ens = ParticleEnsemble(rng.uniform(0, TWO_PI, n), rng)
        field = empirical_marginal(ens, grid)
        p = 1.0 / 64
        count_std = math.sqrt(n * p * (1 - p))
        density_std = count_std / (n * grid.cell_width)
        assert np.max(np.abs(field.values - 1 / TWO_PI)) <= 5 * density_std

    def test_wrap_seam_binning(self):
        # phases just below 2*pi belong to the cell centered at 0
        grid = AngularGrid(8)
        ens = make_ensemble([TWO_PI - 1e-9])
        field = empirical_marginal(ens, grid)
        assert field.values[0] > 0
