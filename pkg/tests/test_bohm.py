import numpy as np
import pytest

from qstruct import bohm
from qstruct.errors import OutsideGrid, TooFewSamples
from qstruct.gridstate import Grid1D, SpinorGridState, gaussian_spin_state, normalize
from qstruct.sgdyn import SplitOperator
from qstruct.structure import cm_relative_map

GRIDS = (Grid1D(-12.0, 12.0, 128), Grid1D(-12.0, 12.0, 128))
MASSES = (1.0, 3.0)


def analytic_psi(x, y):
    """Smooth non-trivial wavefunction: Gaussian envelope times a curved phase."""
    env = np.exp(-(x - 0.5) ** 2 / 4 - (y + 0.3) ** 2 / 6)
    phase = 0.7 * x - 0.4 * y + 0.05 * x * y + 0.3 * np.sin(0.5 * x) + 0.02 * y**2
    return env * np.exp(1j * phase)


def state_from(func, grids=GRIDS, spin=(1.0, 0.0), label="e+p"):
    x, y = np.meshgrid(grids[0].points, grids[1].points, indexing="ij")
    f = func(x, y)
    amps = np.stack([spin[0] * f, spin[1] * f])
    return normalize(SpinorGridState(grids, amps, label))


def free_timeline(state, masses, dt, steps):
    prop = SplitOperator(state.grids, masses, np.zeros((2,) + state.amps.shape[1:]), dt)
    amps = np.array(state.amps)
    yield 0.0, state
    for n in range(1, steps + 1):
        amps = prop(amps)
        yield n * dt, state.with_amps(amps)


class TestVelocity:
    def test_zero_phase(self):
        s = gaussian_spin_state((0.5, -1), (1, 1.5), (0, 0), (0.6, 0.8), GRIDS)
        field = bohm.VelocityField(s, MASSES)
        assert np.max(np.abs(field.velocity)) < 1e-8

    @pytest.mark.parametrize("k1, k2", [(1.0, 0.0), (0.5, -1.5), (-2.0, 3.0)])
    def test_plane_wave(self, k1, k2):
        # wavenumbers commensurate with the periodic box keep the spectral derivative exact
        L = GRIDS[0].max - GRIDS[0].min
        k1, k2 = (round(k * L / (2 * np.pi)) * 2 * np.pi / L for k in (k1, k2))
        s = gaussian_spin_state((0, 0), (1.5, 1.5), (k1, k2), (1, 0), GRIDS)
        pts = np.array([[0.0, 0.0], [1.3, -0.7], [-2.0, 2.5]])
        v = bohm.velocity_field(s, pts, MASSES)
        np.testing.assert_allclose(v, np.tile([k1 / MASSES[0], k2 / MASSES[1]], (3, 1)), atol=1e-10)

    def test_finite_difference_oracle(self):
        """Grid-node velocities match centered differences of the analytic phase."""
        s = state_from(analytic_psi, spin=(0.6, 0.8))
        field = bohm.VelocityField(s, MASSES)
        g0, g1 = GRIDS
        i = np.arange(40, 88, 6)
        x, y = np.meshgrid(g0.points[i], g1.points[i], indexing="ij")
        h = 1e-5
        grad_x = np.angle(analytic_psi(x + h, y) / analytic_psi(x - h, y)) / (2 * h)
        grad_y = np.angle(analytic_psi(x, y + h) / analytic_psi(x, y - h)) / (2 * h)
        v = field.velocity[:, i[:, None], i[None, :]]
        np.testing.assert_allclose(v[0], grad_x / MASSES[0], atol=1e-6)
        np.testing.assert_allclose(v[1], grad_y / MASSES[1], atol=1e-6)

    def test_interpolation_at_node(self):
        s = state_from(analytic_psi)
        field = bohm.VelocityField(s, MASSES)
        g0, g1 = GRIDS
        pt = np.array([[g0.points[70], g1.points[55]]])
        np.testing.assert_allclose(bohm.velocity_field(s, pt, MASSES)[0], field.velocity[:, 70, 55], atol=1e-14)

    def test_outside_grid(self):
        s = state_from(analytic_psi)
        with pytest.raises(OutsideGrid):
            bohm.velocity_field(s, [20.0, 0.0], MASSES)

    def test_node_cells_filled(self):
        s = state_from(lambda x, y: x * np.exp(-(x**2 + y**2) / 4 + 0.5j * y))
        field = bohm.VelocityField(s, MASSES, node_epsilon=1e-6)
        assert np.all(np.isfinite(field.velocity))
        np.testing.assert_allclose(field.velocity[1], 0.5 / MASSES[1], atol=1e-8)


class TestSampling:
    def test_mean_within_standard_error(self):
        s = gaussian_spin_state((1.0, -2.0), (1.0, 2.0), (0, 0), (1, 0), GRIDS)
        n = 10_000
        ens = bohm.sample_initial(s, n, seed=3)
        mean = ens.initial.mean(axis=0)
        assert abs(mean[0] - 1.0) < 4 * 1.0 / np.sqrt(n)
        assert abs(mean[1] + 2.0) < 4 * 2.0 / np.sqrt(n)

    def test_empty(self):
        s = gaussian_spin_state((0, 0), (1, 1), (0, 0), (1, 0), GRIDS)
        ens = bohm.sample_initial(s, 0, seed=1)
        assert ens.n == 0 and ens.coords.shape == (1, 0, 2)
        out = bohm.integrate(ens, free_timeline(s, MASSES, 0.1, 5), 0.1, MASSES)
        assert out.coords.shape == (6, 0, 2)

    def test_deterministic(self):
        s = gaussian_spin_state((0, 0), (1, 1), (0, 0), (1, 0), GRIDS)
        a = bohm.sample_initial(s, 500, seed=11)
        b = bohm.sample_initial(s, 500, seed=11)
        c = bohm.sample_initial(s, 500, seed=12)
        np.testing.assert_array_equal(a.coords, b.coords)
        assert not np.array_equal(a.coords, c.coords)

    def test_initial_ks_small(self):
        s = gaussian_spin_state((0.5, -1), (1, 1.5), (0, 0), (1, 0), GRIDS)
        ens = bohm.sample_initial(s, 10_000, seed=5)
        assert bohm.equivariance_statistic(ens.initial, s) <= 0.02

    def test_ks_contrast(self):
        s = gaussian_spin_state((0, 0), (1, 1), (0, 0), (1, 0), GRIDS)
        other = gaussian_spin_state((3, 0), (1, 1), (0, 0), (1, 0), GRIDS)
        ens = bohm.sample_initial(other, 10_000, seed=5)
        assert bohm.equivariance_statistic(ens.initial, s) > 0.1

    def test_too_few(self):
        s = gaussian_spin_state((0, 0), (1, 1), (0, 0), (1, 0), GRIDS)
        with pytest.raises(TooFewSamples):
            bohm.equivariance_statistic(np.zeros((10, 2)), s)


class TestIntegration:
    def test_stationary_real_state(self):
        s = gaussian_spin_state((0, 0), (1, 1.5), (0, 0), (1, 0), GRIDS)
        ens = bohm.sample_initial(s, 1000, seed=2)
        frames = ((0.5 * n, s) for n in range(21))
        out = bohm.integrate(ens, frames, 0.25, MASSES, save_every=5)
        assert len(out.times) == 5
        np.testing.assert_allclose(out.final, out.initial, atol=1e-8)

    def test_free_packet_mean_velocity(self):
        k = (1.0, -0.6)
        s = gaussian_spin_state((-3.0, 2.0), (1.0, 1.0), k, (1, 0), GRIDS)
        ens = bohm.sample_initial(s, 4000, seed=9)
        dt, steps = 0.1, 40
        out = bohm.integrate(ens, free_timeline(s, MASSES, dt, steps), dt / 2, MASSES, save_every=10)
        t = out.times[-1]
        drift = (out.final.mean(axis=0) - out.initial.mean(axis=0)) / t
        np.testing.assert_allclose(drift, [k[0] / MASSES[0], k[1] / MASSES[1]], rtol=0.01)

    def test_equivariance_free(self):
        s = gaussian_spin_state((0.0, 0.0), (0.8, 1.0), (0.5, 0.0), (1, 0), GRIDS)
        ens = bohm.sample_initial(s, 10_000, seed=4)
        frames = list(free_timeline(s, MASSES, 0.1, 30))
        out = bohm.integrate(ens, frames, 0.05, MASSES, save_every=30)
        assert bohm.equivariance_statistic(out.final, frames[-1][1]) <= 0.02

    def test_on_save_calls(self):
        s = gaussian_spin_state((0, 0), (1, 1), (0, 0), (1, 0), GRIDS)
        ens = bohm.sample_initial(s, 10, seed=1)
        seen = []
        bohm.integrate(ens, ((0.1 * n, s) for n in range(8)), 0.1, MASSES, save_every=3,
                       on_save=lambda t, st, x: seen.append(round(t, 10)))
        assert seen == [0.0, 0.3, 0.6, 0.7]

    def test_frame_gap_too_large(self):
        s = gaussian_spin_state((0, 0), (1, 1), (0, 0), (1, 0), GRIDS)
        ens = bohm.sample_initial(s, 10, seed=1)
        with pytest.raises(ValueError):
            bohm.integrate(ens, [(0.0, s), (1.0, s)], 0.1, MASSES)

    def test_structure_label_checked(self):
        s = gaussian_spin_state((0, 0), (1, 1), (0, 0), (1, 0), GRIDS)
        ens = bohm.sample_initial(s, 10, seed=1)
        other = s.with_amps(s.amps, "CM+R")
        with pytest.raises(ValueError):
            bohm.integrate(ens, [(0.0, other)], 0.1, MASSES)


def test_map_consistency(rng):
    cm = cm_relative_map(1.0, 1836.0)
    coords = rng.normal(size=(3, 50, 2)) * [5.0, 1.0]
    ens = bohm.TrajectoryEnsemble(50, 0, "CM+R", np.arange(3.0), coords, cm)
    ep = ens.ep_positions()
    again = bohm.TrajectoryEnsemble(50, 0, "e+p", np.arange(3.0), ep, cm).cmr_positions()
    np.testing.assert_allclose(again, coords, rtol=0, atol=1e-10)
    # z_e - z_p = rho and the mass-weighted mean is Z_CM
    np.testing.assert_allclose(ep[..., 0] - ep[..., 1], coords[..., 1], atol=1e-10)
    np.testing.assert_allclose((ep[..., 0] + 1836 * ep[..., 1]) / 1837, coords[..., 0], atol=1e-10)


@pytest.mark.parametrize("samples, expected", [
    (np.concatenate([np.full(500, -5.0), np.full(500, 5.0)]) + np.linspace(-1, 1, 1000), True),
    (np.linspace(-3, 3, 1000), False),
])
def test_is_bimodal(samples, expected):
    assert bohm.is_bimodal(samples) is expected


def test_is_bimodal_gaussians(rng):
    assert bohm.is_bimodal(np.concatenate([rng.normal(-5, 1, 5000), rng.normal(5, 1, 5000)]))
    assert not bohm.is_bimodal(rng.normal(0, 1, 10_000))


def test_ordering_preserved():
    series = np.array([[0.0, 1.0, 2.0], [0.5, 1.5, 2.5]])
    assert bohm.ordering_preserved(series)
    assert not bohm.ordering_preserved(np.array([[0.0, 1.0], [1.0, 0.0]]))


def test_csv_limited(tmp_path, rng):
    coords = rng.normal(size=(2, 20, 2))
    ens = bohm.TrajectoryEnsemble(20, 0, "e+p", np.array([0.0, 1.0]), coords, cm_relative_map(1, 1))
    ens.to_csv(tmp_path / "t.csv", max_traj=5)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "traj_id,time,z_e,z_p,Z_CM,rho"
    assert len(lines) == 1 + 5 * 2
