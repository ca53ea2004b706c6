"""Stern-Gerlach dynamics of a two-body atom in centre-of-mass + relative coordinates.

The Hamiltonian is

    H = P^2/2M + p_rho^2/2mu_R + 1/2 mu_R w^2 rho^2 + mu s_z (B0 + b Z)

with the electron-like sign convention mu_spin = -mu S, so for ``b > 0``
spin up (s_z = +1/2) is pushed toward -z.  The internal Coulomb term is
replaced by a harmonic well of stiffness ``internal_omega`` because the
one-dimensional Coulomb potential is singular.

Propagation uses Strang splitting with a spectral kinetic step on the
periodic grid.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator

import numpy as np

from qstruct.errors import BoundaryReached, StructureMismatch
from qstruct.gridstate import (
    DOWN,
    SPIN_Z,
    UP,
    Grid1D,
    SpinorGridState,
    change_structure,
    covering_grids,
    entanglement_entropy,
    marginal_density,
    product_spin_state,
    gaussian_packet,
    reduced_density_matrix,
    reduced_state_fidelity,
    schmidt_spectrum,
)
from qstruct.structure import cm_relative_map, invert

log = logging.getLogger(__name__)

#: dt * max|V| above this triggers a warning.
STABILITY_LIMIT = 0.5
#: Cells at each grid edge that packets must stay out of.
GUARD_CELLS = 5
#: Probability fraction (per spin branch) tolerated inside the guard band.
GUARD_MASS = 1e-7


@dataclass(frozen=True)
class SGConfig:
    """Physical and numerical parameters of a Stern-Gerlach run (hbar = 1, masses in m_e)."""

    m_e: float = 1.0
    m_p: float = 1836.0
    mu: float = 1.0
    B0: float = 0.0
    b: float = 0.0
    internal_omega: float = 0.08
    dt: float = 0.5
    steps: int = 4000
    grids: tuple[Grid1D, Grid1D] = field(
        default=(Grid1D(-20.0, 20.0, 256), Grid1D(-16.0, 16.0, 128))
    )

    def __post_init__(self):
        if not (self.m_e > 0 and self.m_p > 0):
            raise ValueError("masses must be positive")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.steps < 1:
            raise ValueError(f"steps must be at least 1, got {self.steps}")
        object.__setattr__(self, "grids", tuple(self.grids))
        bound = self.dt * self.max_potential()
        if bound >= STABILITY_LIMIT:
            warnings.warn(
                f"dt * max|V| = {bound:.3f} exceeds {STABILITY_LIMIT}; "
                "phase errors per step may be large",
                RuntimeWarning,
                stacklevel=3,
            )

    @property
    def total_mass(self) -> float:
        return self.m_e + self.m_p

    @property
    def reduced_mass(self) -> float:
        return self.m_e * self.m_p / self.total_mass

    @property
    def duration(self) -> float:
        return self.dt * self.steps

    def max_potential(self) -> float:
        return float(np.max(np.abs(potential_grid(self))))


def potential_energy(z_cm, rho, spin, cfg: SGConfig):
    """Potential energy for a spin projection ``spin`` (+0.5 or -0.5)."""
    magnetic = cfg.mu * spin * (cfg.B0 + cfg.b * np.asarray(z_cm))
    internal = 0.5 * cfg.reduced_mass * cfg.internal_omega**2 * np.asarray(rho) ** 2
    return magnetic + internal


def potential_grid(cfg: SGConfig) -> np.ndarray:
    """Potential on the grid, shape ``(2, nZ, nrho)``."""
    z, rho = np.meshgrid(cfg.grids[0].points, cfg.grids[1].points, indexing="ij")
    return np.stack([potential_energy(z, rho, sz, cfg) for sz in SPIN_Z])


class SplitOperator:
    """Strang splitting ``exp(-iV dt/2) exp(-iT dt) exp(-iV dt/2)`` on a 2-D periodic grid.

    ``potential`` has shape ``(2, n1, n2)`` (diagonal in spin);
    ``masses`` are the kinetic masses of the two coordinates.
    """

    def __init__(self, grids, masses, potential, dt):
        self.grids = tuple(grids)
        self.dt = dt
        k1, k2 = np.meshgrid(grids[0].wavenumbers, grids[1].wavenumbers, indexing="ij")
        kinetic = k1**2 / (2.0 * masses[0]) + k2**2 / (2.0 * masses[1])
        self.half_potential = np.exp(-0.5j * dt * np.asarray(potential))
        self.kinetic = np.exp(-1j * dt * kinetic)

    def __call__(self, amps: np.ndarray) -> np.ndarray:
        psi = amps * self.half_potential
        psi = np.fft.ifft2(np.fft.fft2(psi, axes=(1, 2)) * self.kinetic, axes=(1, 2))
        return psi * self.half_potential


@lru_cache(maxsize=8)
def sg_propagator(cfg: SGConfig) -> SplitOperator:
    return SplitOperator(
        cfg.grids, (cfg.total_mass, cfg.reduced_mass), potential_grid(cfg), cfg.dt
    )


def _check_state(state: SpinorGridState, cfg: SGConfig) -> None:
    if state.structure_label != "CM+R":
        raise StructureMismatch(f"expected a CM+R state, got {state.structure_label}")
    if tuple(state.grids) != tuple(cfg.grids):
        raise StructureMismatch("state grids do not match the configuration")


def step(state: SpinorGridState, cfg: SGConfig) -> SpinorGridState:
    """Advance a CM+R state by one Strang step."""
    _check_state(state, cfg)
    return state.with_amps(sg_propagator(cfg)(state.amps))


# --- initial states --------------------------------------------------------


def internal_hamiltonian(cfg: SGConfig) -> np.ndarray:
    """Dense grid Hamiltonian of the relative coordinate (spectral kinetic term)."""
    grid = cfg.grids[1]
    n = grid.n
    fourier = np.fft.fft(np.eye(n), axis=0)
    kin = np.fft.ifft(grid.wavenumbers[:, None] ** 2 / (2 * cfg.reduced_mass) * fourier, axis=0)
    v = 0.5 * cfg.reduced_mass * cfg.internal_omega**2 * grid.points**2
    h = kin + np.diag(v)
    return 0.5 * (h + h.conj().T)


def internal_ground_state(cfg: SGConfig) -> np.ndarray:
    """Stationary internal state of the discretized one-step propagator.

    The relative-coordinate part of the Strang step is itself a unitary
    ``U_R``; its eigenvector closest to the grid ground state of ``H_R``
    is returned, so the internal factor is stationary under the scheme
    (not merely to O(dt^2)).  Normalized with the grid measure, phase
    fixed to make the peak amplitude real and positive.
    """
    if cfg.internal_omega <= 0:
        raise ValueError("internal_omega must be positive for a bound internal state")
    grid = cfg.grids[1]
    n = grid.n
    _, vecs = np.linalg.eigh(internal_hamiltonian(cfg))
    ground = vecs[:, 0]
    v = 0.5 * cfg.reduced_mass * cfg.internal_omega**2 * grid.points**2
    half = np.exp(-0.5j * cfg.dt * v)
    kin = np.exp(-1j * cfg.dt * grid.wavenumbers**2 / (2 * cfg.reduced_mass))
    fourier = np.fft.fft(np.eye(n), axis=0)
    u = half[:, None] * np.fft.ifft(kin[:, None] * fourier, axis=0) * half[None, :]
    _, evecs = np.linalg.eig(u)
    best = evecs[:, np.argmax(np.abs(evecs.conj().T @ ground))]
    best = best * np.exp(-1j * np.angle(best[np.argmax(np.abs(best))]))
    return best / np.sqrt(np.sum(np.abs(best) ** 2) * grid.spacing)


def sg_initial_state(
    cfg: SGConfig,
    z0: float = 0.0,
    sigma: float = 1.0,
    k0: float = 0.0,
    spin_amps=(2**-0.5, 2**-0.5),
    internal: np.ndarray | None = None,
) -> SpinorGridState:
    """Gaussian CM packet x internal state x spinor, in CM+R coordinates."""
    chi = internal_ground_state(cfg) if internal is None else internal
    return product_spin_state(
        gaussian_packet(cfg.grids[0], z0, sigma, k0), chi, spin_amps, cfg.grids, "CM+R"
    )


# --- observables -----------------------------------------------------------


@dataclass(frozen=True)
class BranchReport:
    weights: tuple[float, float]
    mean_z: tuple[float, float]
    overlap: float


def branch_analysis(state: SpinorGridState) -> BranchReport:
    """Spin weights, spin-conditional mean of the first coordinate and branch overlap.

    The overlap is ``|<psi_up|psi_dn>| / (|psi_up| |psi_dn|)`` over the full
    spatial grid; ``nan`` when a branch is empty.
    """
    if state.structure_label != "CM+R":
        raise StructureMismatch(f"expected a CM+R state, got {state.structure_label}")
    dens = np.abs(state.amps) ** 2
    w = dens.sum(axis=(1, 2)) * state.cell_area
    z = state.grids[0].points
    means = []
    for spin in (UP, DOWN):
        if w[spin] > 0:
            means.append(float(np.sum(dens[spin].sum(axis=1) * z) * state.cell_area / w[spin]))
        else:
            means.append(float("nan"))
    if w[UP] > 0 and w[DOWN] > 0:
        ov = abs(np.vdot(state.amps[UP], state.amps[DOWN])) * state.cell_area
        overlap = float(ov / np.sqrt(w[UP] * w[DOWN]))
    else:
        overlap = float("nan")
    return BranchReport((float(w[UP]), float(w[DOWN])), tuple(means), overlap)


def branch_momenta(state: SpinorGridState) -> tuple[float, float]:
    """Spin-conditional mean momentum conjugate to the first coordinate."""
    k = state.grids[0].wavenumbers
    out = []
    for spin in (UP, DOWN):
        power = np.abs(np.fft.fft(state.amps[spin], axis=0)) ** 2
        total = power.sum()
        out.append(float(np.sum(power.sum(axis=1) * k) / total) if total > 0 else float("nan"))
    return tuple(out)


def spin_entropy(state: SpinorGridState) -> float:
    return entanglement_entropy(schmidt_spectrum(state, "q1,q2|spin"))


def check_boundaries(state: SpinorGridState, guard: int = GUARD_CELLS, tol: float = GUARD_MASS) -> None:
    """Raise BoundaryReached if a spin branch has weight in the edge guard band."""
    dens = np.abs(state.amps) ** 2
    for spin in (UP, DOWN):
        total = dens[spin].sum()
        if total == 0:
            continue
        for axis in (0, 1):
            d = dens[spin] if axis == 0 else dens[spin].T
            edge = d[:guard].sum() + d[-guard:].sum()
            if edge / total > tol:
                name = ("Z_CM", "rho")[axis] if state.structure_label == "CM+R" else f"q{axis + 1}"
                raise BoundaryReached(
                    f"spin-{('up', 'down')[spin]} branch has {edge / total:.2e} of its "
                    f"weight within {guard} cells of the {name} grid edge"
                )


# --- runs ------------------------------------------------------------------


@dataclass
class EvolutionRecord:
    times: list = field(default_factory=list)
    mean_z: list = field(default_factory=list)
    mean_p: list = field(default_factory=list)
    spin_entropy: list = field(default_factory=list)
    branch_overlap: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    norm: list = field(default_factory=list)
    r_l1_drift: list = field(default_factory=list)
    r_marginals: list = field(default_factory=list)

    CSV_COLUMNS = (
        "time", "meanZ_up", "meanZ_dn", "meanP_up", "meanP_dn",
        "S_spin", "branch_overlap", "R_L1_drift",
    )

    def append(self, t: float, state: SpinorGridState, r0: np.ndarray) -> None:
        report = branch_analysis(state)
        r = marginal_density(state, 1)
        self.times.append(float(t))
        self.mean_z.append(report.mean_z)
        self.mean_p.append(branch_momenta(state))
        self.spin_entropy.append(spin_entropy(state))
        self.branch_overlap.append(report.overlap)
        self.weights.append(report.weights)
        self.norm.append(state.norm_sq())
        self.r_l1_drift.append(float(np.sum(np.abs(r - r0)) * state.grids[1].spacing))
        self.r_marginals.append(r)

    def rows(self):
        for i, t in enumerate(self.times):
            yield (
                t, *self.mean_z[i], *self.mean_p[i],
                self.spin_entropy[i], self.branch_overlap[i], self.r_l1_drift[i],
            )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.CSV_COLUMNS)
            for row in self.rows():
                writer.writerow([repr(float(x)) for x in row])


def evolve(initial: SpinorGridState, cfg: SGConfig, check_every: int = 1) -> Iterator[tuple[float, SpinorGridState]]:
    """Yield ``(t, state)`` for t = 0, dt, ..., steps*dt.

    Raises BoundaryReached as soon as a packet enters the guard band
    (checked every ``check_every`` steps).
    """
    _check_state(initial, cfg)
    prop = sg_propagator(cfg)
    amps = np.array(initial.amps)
    state = initial
    yield 0.0, state
    for n in range(1, cfg.steps + 1):
        amps = prop(amps)
        state = initial.with_amps(amps)
        if n % check_every == 0 or n == cfg.steps:
            check_boundaries(state)
        yield n * cfg.dt, state


def run(
    initial: SpinorGridState, cfg: SGConfig, save_every: int = 100
) -> tuple[EvolutionRecord, SpinorGridState]:
    """Propagate ``initial`` for ``cfg.steps`` steps, recording observables.

    Observables are stored at t = 0, every ``save_every`` steps, and at the
    final step.
    """
    if save_every < 1:
        raise ValueError("save_every must be at least 1")
    record = EvolutionRecord()
    r0 = marginal_density(initial, 1)
    final = initial
    for n, (t, state) in enumerate(evolve(initial, cfg)):
        if n % save_every == 0 or n == cfg.steps:
            record.append(t, state, r0)
        final = state
    log.debug("run finished at t=%g, overlap %.3e", record.times[-1], record.branch_overlap[-1])
    return record, final


def ehrenfest_momentum(cfg: SGConfig, t, p0: float = 0.0) -> tuple:
    """Exact branch momenta ``p0 - mu s_z b t`` for the linear field."""
    return tuple(p0 - cfg.mu * sz * cfg.b * np.asarray(t) for sz in SPIN_Z)


def internal_fidelity(a: SpinorGridState, b: SpinorGridState) -> float:
    """Uhlmann fidelity of the reduced relative-coordinate states of two CM+R states."""
    return reduced_state_fidelity(reduced_density_matrix(a, "q2"), reduced_density_matrix(b, "q2"))


@dataclass(frozen=True)
class SubsystemShifts:
    """Branch-conditional shifts of particle and CM coordinates between two states."""

    d_z_cm: tuple[float, float]
    d_z_e: tuple[float, float]
    d_z_p: tuple[float, float]

    def ratios(self) -> dict:
        return {
            "z_e": tuple(abs(e) / abs(c) for e, c in zip(self.d_z_e, self.d_z_cm)),
            "z_p": tuple(abs(p) / abs(c) for p, c in zip(self.d_z_p, self.d_z_cm)),
        }


def _branch_means(state: SpinorGridState, axis: int) -> tuple[float, float]:
    q = state.grids[axis].points
    out = []
    for spin in (UP, DOWN):
        d = np.abs(state.amps[spin]) ** 2
        marg = d.sum(axis=1 - axis)
        out.append(float(np.sum(marg * q) / marg.sum()))
    return tuple(out)


def subsystem_shifts(initial: SpinorGridState, final: SpinorGridState, cfg: SGConfig, ep_grids=None) -> SubsystemShifts:
    """Refactorize both states to e+p and compare branch-conditional means.

    The CM shift is read from the CM+R states directly; the electron and
    proton shifts from the refactorized e+p states.
    """
    to_ep = invert(cm_relative_map(cfg.m_e, cfg.m_p))
    if ep_grids is None:
        ep_grids = covering_grids(cfg.grids, to_ep, (256, 256))
    ep0 = change_structure(initial, to_ep, ep_grids)
    ep1 = change_structure(final, to_ep, ep_grids)
    z0, z1 = _branch_means(initial, 0), _branch_means(final, 0)
    e0, e1 = _branch_means(ep0, 0), _branch_means(ep1, 0)
    p0, p1 = _branch_means(ep0, 1), _branch_means(ep1, 1)
    return SubsystemShifts(
        tuple(b - a for a, b in zip(z0, z1)),
        tuple(b - a for a, b in zip(e0, e1)),
        tuple(b - a for a, b in zip(p0, p1)),
    )
