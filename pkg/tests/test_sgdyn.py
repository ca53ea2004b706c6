import math
import numpy as np
import pytest

from qstruct import sgdyn
from qstruct.errors import BoundaryReached, StructureMismatch
from qstruct.gridstate import Grid1D, gaussian_packet, gaussian_spin_state, position_moments, product_spin_state
from qstruct.sgdyn import SGConfig

SQRT_HALF = 2**-0.5
SMALL = (Grid1D(-20.0, 20.0, 128), Grid1D(-16.0, 16.0, 64))


def small_cfg(**kw):
    base = dict(b=0.011, steps=200, grids=SMALL)
    base.update(kw)
    return SGConfig(**base)


@pytest.mark.filterwarnings("ignore:dt \\* max:RuntimeWarning")
class TestPotential:
    @pytest.mark.parametrize("z, rho, spin, kw, expected", [
        (0.0, 0.0, 0.5, {}, 0.0),
        (1.0, 0.0, 0.5, dict(mu=2.0, b=1.0, B0=0.0), 1.0),
        (2.0, 0.0, -0.5, dict(mu=1.0, b=0.5, B0=3.0), -2.0),
    ])
    def test_values(self, z, rho, spin, kw, expected):
        cfg = SGConfig(steps=1, **kw)
        assert sgdyn.potential_energy(z, rho, spin, cfg) == pytest.approx(expected, abs=1e-15)

    @pytest.mark.parametrize("spin", [0.5, -0.5])
    @pytest.mark.parametrize("point", [(0.0, 0.0), (3.2, -1.7), (-7.5, 4.0)])
    def test_gradient_finite_difference(self, spin, point):
        cfg = SGConfig(mu=1.3, b=0.02, B0=0.4, steps=1)
        h = 1e-4
        z, rho = point
        fd = (sgdyn.potential_energy(z + h, rho, spin, cfg) - sgdyn.potential_energy(z - h, rho, spin, cfg)) / (2 * h)
        assert fd == pytest.approx(cfg.mu * spin * cfg.b, abs=1e-8)

    @pytest.mark.filterwarnings("error")
    def test_stability_warning(self):
        with pytest.warns(RuntimeWarning):
            SGConfig(b=0.011, dt=2.0, steps=1)
        SGConfig(b=0.011)

    @pytest.mark.parametrize("kw", [dict(m_e=0), dict(m_p=-1), dict(dt=0), dict(steps=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SGConfig(**kw)


class TestInternalState:
    def test_stationary(self):
        cfg = small_cfg(b=0.0)
        s = sgdyn.sg_initial_state(cfg, spin_amps=(1, 0))
        start = s
        for _ in range(50):
            s = sgdyn.step(s, cfg)
        assert sgdyn.internal_fidelity(start, s) >= 1 - 1e-12

    def test_close_to_oscillator_ground_state(self):
        cfg = small_cfg()
        chi = sgdyn.internal_ground_state(cfg)
        rho = cfg.grids[1].points
        sigma2 = 1.0 / (2 * cfg.reduced_mass * cfg.internal_omega)
        exact = np.exp(-rho**2 / (4 * sigma2)) / (2 * np.pi * sigma2) ** 0.25
        assert abs(np.vdot(exact, chi)) * cfg.grids[1].spacing == pytest.approx(1.0, abs=1e-6)

    def test_needs_binding(self):
        with pytest.raises(ValueError):
            sgdyn.internal_ground_state(small_cfg(internal_omega=0.0))


class TestDynamics:
    def test_requires_cmr(self):
        cfg = small_cfg()
        s = gaussian_spin_state((0, 0), (1, 1), (0, 0), (1, 0), SMALL, "e+p")
        with pytest.raises(StructureMismatch):
            sgdyn.step(s, cfg)

    def test_grid_mismatch(self):
        cfg = small_cfg()
        s = sgdyn.sg_initial_state(small_cfg(grids=(Grid1D(-20, 20, 64), SMALL[1])))
        with pytest.raises(StructureMismatch):
            sgdyn.step(s, cfg)

    def test_norm_after_1000_steps(self):
        cfg = small_cfg(steps=1000)
        _, final = sgdyn.run(sgdyn.sg_initial_state(cfg), cfg, save_every=1000)
        assert final.norm_sq() == pytest.approx(1.0, abs=1e-7)

    def test_free_case(self):
        cfg = small_cfg(b=0.0, steps=400)
        record, _ = sgdyn.run(sgdyn.sg_initial_state(cfg), cfg, save_every=50)
        np.testing.assert_allclose(np.array(record.mean_z), 0.0, atol=1e-10)
        assert max(record.spin_entropy) <= 1e-6

    def test_free_case_spin_up(self):
        cfg = small_cfg(b=0.0, steps=200)
        record, _ = sgdyn.run(sgdyn.sg_initial_state(cfg, z0=1.5, spin_amps=(1, 0)), cfg, save_every=50)
        np.testing.assert_allclose([m[0] for m in record.mean_z], 1.5, atol=1e-9)
        assert max(record.spin_entropy) <= 1e-6

    def test_ehrenfest_spin_up(self):
        cfg = small_cfg(steps=400)
        record, final = sgdyn.run(sgdyn.sg_initial_state(cfg, spin_amps=(1, 0)), cfg, save_every=100)
        t = np.array(record.times[1:])
        expected = -cfg.mu * cfg.b * t / 2
        measured = np.array([p[0] for p in record.mean_p[1:]])
        np.testing.assert_allclose(measured, expected, rtol=0.01)
        assert sgdyn.branch_analysis(final).weights == pytest.approx((1.0, 0.0), abs=1e-12)

    def test_initial_overlap(self):
        cfg = small_cfg()
        assert sgdyn.branch_analysis(sgdyn.sg_initial_state(cfg)).overlap == pytest.approx(1.0, abs=1e-9)

    def test_empty_branch_overlap_is_nan(self):
        cfg = small_cfg()
        report = sgdyn.branch_analysis(sgdyn.sg_initial_state(cfg, spin_amps=(1, 0)))
        assert math.isnan(report.overlap) and math.isnan(report.mean_z[1])

    def test_mu_sign_mirrors_splitting(self):
        plus, minus = small_cfg(mu=1.0), small_cfg(mu=-1.0)
        rp, _ = sgdyn.run(sgdyn.sg_initial_state(plus), plus, save_every=100)
        rm, _ = sgdyn.run(sgdyn.sg_initial_state(minus), minus, save_every=100)
        up_p, dn_p = np.array(rp.mean_z).T
        up_m, dn_m = np.array(rm.mean_z).T
        np.testing.assert_allclose(up_p, dn_m, atol=1e-12)
        np.testing.assert_allclose(dn_p, up_m, atol=1e-12)
        assert up_p[-1] < 0 < dn_p[-1]

    def test_boundary_guard(self):
        cfg = small_cfg(steps=50)
        s = sgdyn.sg_initial_state(cfg, z0=17.0, sigma=1.0)
        with pytest.raises(BoundaryReached):
            for _ in sgdyn.evolve(s, cfg):
                pass


def test_dt_halving_convergence():
    """Successive-difference ratio of a second-order scheme is about 4."""
    grids = (Grid1D(-20.0, 20.0, 128), Grid1D(-16.0, 16.0, 128))
    finals = []
    for dt in (0.5, 0.25, 0.125):
        cfg = SGConfig(b=0.011, dt=dt, steps=int(round(50 / dt)), grids=grids)
        width = (2 * cfg.reduced_mass * cfg.internal_omega) ** -0.5
        chi = gaussian_packet(grids[1], 1.0, width)  # displaced coherent state: oscillates
        s = product_spin_state(gaussian_packet(grids[0], 0.0, 1.0), chi, (SQRT_HALF, SQRT_HALF), grids, "CM+R")
        _, final = sgdyn.run(s, cfg, save_every=cfg.steps)
        finals.append(final.amps)
    ratio = np.linalg.norm(finals[0] - finals[1]) / np.linalg.norm(finals[1] - finals[2])
    print(f"dt-halving ratio {ratio:.3f}")
    assert 3.0 <= ratio <= 5.0


@pytest.fixture(scope="module")
def short_split():
    cfg = small_cfg(steps=1000)
    initial = sgdyn.sg_initial_state(cfg)
    _, final = sgdyn.run(initial, cfg, save_every=1000)
    return cfg, initial, final


def test_internal_state_unchanged(short_split):
    cfg, initial, final = short_split
    assert sgdyn.internal_fidelity(initial, final) >= 1 - 1e-10


def test_subsystem_shifts_match_direct_moments(short_split):
    """Refactorized e+p shifts agree with z_e = Z + m_p rho / M and z_p = Z - m_e rho / M."""
    cfg, initial, final = short_split
    shifts = sgdyn.subsystem_shifts(initial, final, cfg)
    direct = {"z_e": [], "z_p": [], "Z": []}
    for spin in (0, 1):
        (z0, r0), _ = position_moments(initial, spin)
        (z1, r1), _ = position_moments(final, spin)
        direct["Z"].append(z1 - z0)
        direct["z_e"].append((z1 - z0) + cfg.m_p / cfg.total_mass * (r1 - r0))
        direct["z_p"].append((z1 - z0) - cfg.m_e / cfg.total_mass * (r1 - r0))
    np.testing.assert_allclose(shifts.d_z_cm, direct["Z"], rtol=1e-10)
    np.testing.assert_allclose(shifts.d_z_e, direct["z_e"], rtol=1e-3)
    np.testing.assert_allclose(shifts.d_z_p, direct["z_p"], rtol=1e-3)
    for name in ("z_e", "z_p"):
        assert min(shifts.ratios()[name]) > 0.1


def test_ehrenfest_helper():
    cfg = small_cfg()
    up, dn = sgdyn.ehrenfest_momentum(cfg, 100.0)
    assert up == pytest.approx(-0.55) and dn == pytest.approx(0.55)


def test_record_csv(tmp_path, short_split):
    cfg, initial, _ = short_split
    record, _ = sgdyn.run(initial, small_cfg(steps=10), save_every=5)
    record.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == ",".join(sgdyn.EvolutionRecord.CSV_COLUMNS)
    assert len(lines) == 1 + 3
