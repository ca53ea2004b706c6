"""Bohmian trajectory ensembles guided by a two-coordinate spinor wavefunction.

Guidance uses the spin-summed current,

    v_k = Im(sum_s psi_s^* d_k psi_s) / (m_k sum_s |psi_s|^2),

evaluated from spectral derivatives on each wavefunction frame, bilinear
in space and linear in time between frames, and integrated with fixed-step
RK4.  Spin is not a trajectory variable.

Because the guidance law is covariant under linear point transformations,
trajectories may be integrated in the structure the wavefunction was
propagated in (e.g. CM+R, with masses ``(M, mu_R)``) and pushed to
``(z_e, z_p)`` afterwards by exact linear algebra.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy import ndimage, stats

from qstruct.errors import NodeEncounter, OutsideGrid, TooFewSamples
from qstruct.gridstate import SpinorGridState, projected_cdf
from qstruct.structure import LinearStructureMap, invert

#: Density floor relative to the frame maximum.
NODE_EPSILON = 1e-12
#: RK4 stages a trajectory may spend below the floor before it is aborted.
MAX_NODE_STAGES = 40
MIN_KS_SAMPLES = 1000


class VelocityField:
    """Guidance velocity on the grid of one wavefunction frame.

    Below the density floor ``node_epsilon * max|psi|^2`` the velocity of
    the nearest grid point above the floor is used.  ``table`` holds the
    flattened rows ``(v1, v2, density)``.
    """

    def __init__(self, state: SpinorGridState, masses, node_epsilon: float = NODE_EPSILON):
        self.grids = state.grids
        amps = state.amps
        dens = np.sum(np.abs(amps) ** 2, axis=0)
        self.floor = node_epsilon * dens.max()
        ok = dens >= self.floor
        velocities = []
        for axis, (grid, mass) in enumerate(zip(state.grids, masses)):
            shape = [1, 1, 1]
            shape[axis + 1] = grid.n
            k = grid.wavenumbers.copy()
            k[grid.n // 2] = 0.0  # unpaired Nyquist mode would make real derivatives complex
            k = k.reshape(shape)
            deriv = np.fft.ifft(1j * k * np.fft.fft(amps, axis=axis + 1), axis=axis + 1)
            current = np.sum(np.imag(amps.conj() * deriv), axis=0)
            v = np.zeros_like(dens)
            np.divide(current, mass * dens, out=v, where=ok)
            velocities.append(v)
        if not ok.all():
            idx = ndimage.distance_transform_edt(~ok, return_distances=False, return_indices=True)
            velocities = [v[idx[0], idx[1]] for v in velocities]
        self.table = np.stack(velocities + [dens]).reshape(3, -1)

    @property
    def velocity(self) -> np.ndarray:
        return self.table[:2].reshape(2, self.grids[0].n, self.grids[1].n)

    @property
    def density(self) -> np.ndarray:
        return self.table[2].reshape(self.grids[0].n, self.grids[1].n)

    def __call__(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Velocities ``(n, 2)`` at ``points`` and a mask of sub-floor points."""
        vals = _bilinear(self.table, self.grids, points)
        return vals[:2].T, vals[2] < self.floor


def _bilinear(table: np.ndarray, grids, points: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of flattened grid rows ``table`` (k, n1*n2) at points (n, 2)."""
    fracs, bases = [], []
    for axis, grid in enumerate(grids):
        f = (points[:, axis] - grid.min) / grid.spacing
        bad = ~((f >= 0.0) & (f <= grid.n - 1))
        if np.any(bad):
            raise OutsideGrid(f"{int(bad.sum())} trajectories left the grid along axis {axis}")
        i0 = np.minimum(f.astype(int), grid.n - 2)
        fracs.append(f - i0)
        bases.append(i0)
    n2 = grids[1].n
    flat = bases[0] * n2 + bases[1]
    u, w = fracs
    return (
        np.take(table, flat, axis=1) * ((1 - u) * (1 - w))
        + np.take(table, flat + n2, axis=1) * (u * (1 - w))
        + np.take(table, flat + 1, axis=1) * ((1 - u) * w)
        + np.take(table, flat + n2 + 1, axis=1) * (u * w)
    )


def velocity_field(state: SpinorGridState, point, masses, node_epsilon: float = NODE_EPSILON) -> np.ndarray:
    """Guidance velocity at one point ``(q1, q2)`` or an array of points ``(n, 2)``."""
    pts = np.atleast_2d(np.asarray(point, dtype=float))
    v, _ = VelocityField(state, masses, node_epsilon)(pts)
    return v[0] if np.ndim(point) == 1 else v


@dataclass
class TrajectoryEnsemble:
    """Trajectory positions at saved times, in the guiding state's coordinates.

    ``coords`` has shape ``(n_saved, n, 2)``.  ``cm_map`` is the e+p -> CM+R
    map used to express positions in the other structure.
    """

    n: int
    seed: int | None
    structure_label: str
    times: np.ndarray
    coords: np.ndarray
    cm_map: LinearStructureMap | None = None
    dt_traj: float | None = None
    aborted: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.aborted is None:
            self.aborted = np.zeros(self.n, dtype=bool)

    @property
    def initial(self) -> np.ndarray:
        return self.coords[0]

    @property
    def final(self) -> np.ndarray:
        return self.coords[-1]

    def ep_positions(self) -> np.ndarray:
        if self.structure_label == "e+p":
            return self.coords
        if self.structure_label != "CM+R" or self.cm_map is None:
            raise ValueError("need cm_map to express CM+R positions as (z_e, z_p)")
        return invert(self.cm_map).apply(self.coords)

    def cmr_positions(self) -> np.ndarray:
        if self.structure_label == "CM+R":
            return self.coords
        if self.structure_label != "e+p" or self.cm_map is None:
            raise ValueError("need cm_map to express e+p positions as (Z_CM, rho)")
        return self.cm_map.apply(self.coords)

    def to_csv(self, path, max_traj: int | None = None) -> None:
        """Write ``traj_id, time, z_e, z_p, Z_CM, rho`` rows (trajectory-major)."""
        ep = self.ep_positions()
        cmr = self.cmr_positions()
        count = self.n if max_traj is None else min(self.n, max_traj)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["traj_id", "time", "z_e", "z_p", "Z_CM", "rho"])
            for j in range(count):
                for i, t in enumerate(self.times):
                    writer.writerow([j, repr(float(t))] + [
                        repr(float(x)) for x in (ep[i, j, 0], ep[i, j, 1], cmr[i, j, 0], cmr[i, j, 1])
                    ])


def sample_initial(
    state: SpinorGridState, n: int, seed: int, cm_map: LinearStructureMap | None = None, t0: float = 0.0
) -> TrajectoryEnsemble:
    """Draw ``n`` configurations from the spin-summed ``|psi|^2``.

    A cell is chosen by inverse CDF on the discretized joint distribution,
    then the point is placed uniformly inside that cell.
    """
    rng = np.random.default_rng(seed)
    coords = np.zeros((1, n, 2))
    if n > 0:
        p = state.density().ravel()
        cdf = np.cumsum(p)
        cdf /= cdf[-1]
        cells = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), p.size - 1)
        i1, i2 = np.unravel_index(cells, state.density().shape)
        jitter = rng.random((n, 2)) - 0.5
        for axis, idx in enumerate((i1, i2)):
            grid = state.grids[axis]
            coords[0, :, axis] = grid.points[idx] + jitter[:, axis] * grid.spacing
    return TrajectoryEnsemble(n, seed, state.structure_label, np.array([t0]), coords, cm_map)


def _rk4(x, t, h, velocity):
    k1 = velocity(x, t)
    k2 = velocity(x + 0.5 * h * k1, t + 0.5 * h)
    k3 = velocity(x + 0.5 * h * k2, t + 0.5 * h)
    k4 = velocity(x + h * k3, t + h)
    return x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate(
    ensemble: TrajectoryEnsemble,
    state_timeline: Iterable[tuple[float, SpinorGridState]],
    dt_traj: float,
    masses,
    save_every: int = 1,
    node_epsilon: float = NODE_EPSILON,
    on_save=None,
) -> TrajectoryEnsemble:
    """Integrate trajectories through a sequence of ``(t, state)`` frames.

    Frames are consumed lazily, so the timeline may be a generator driving
    the wavefunction propagation.  Positions are stored at the first frame
    and every ``save_every`` frames after it (plus the last frame).
    ``on_save(t, state, positions)`` is called at each stored time.

    Raises
    ------
    ValueError
        If consecutive frames are more than ``5 * dt_traj`` apart.
    NodeEncounter
        If a trajectory spends more than ``MAX_NODE_STAGES`` RK4 stages below
        the density floor.
    OutsideGrid
        If a trajectory leaves the grid.
    """
    frames = iter(state_timeline)
    t_a, state_a = next(frames)
    if state_a.structure_label != ensemble.structure_label:
        raise ValueError(
            f"ensemble is in {ensemble.structure_label}, timeline in {state_a.structure_label}"
        )
    field_a = VelocityField(state_a, masses, node_epsilon)
    x = ensemble.final.copy()
    node_stages = np.zeros(ensemble.n, dtype=int)
    saved_t, saved_x = [t_a], [x.copy()]
    if on_save is not None:
        on_save(t_a, state_a, x)

    pending = None
    for count, (t_b, state_b) in enumerate(frames, start=1):
        gap = t_b - t_a
        if gap > 5.0 * dt_traj * (1 + 1e-12):
            raise ValueError(f"frames {gap:g} apart exceed 5 * dt_traj = {5 * dt_traj:g}")
        field_b = VelocityField(state_b, masses, node_epsilon)

        both = np.concatenate([field_a.table, field_b.table])
        floors = (field_a.floor, field_b.floor)

        def velocity(pts, t, ta=t_a):
            w = (t - ta) / gap
            vals = _bilinear(both, state_a.grids, pts)
            low = (vals[2] < floors[0]) | (vals[5] < floors[1])
            node_stages[:] = np.where(low, node_stages + 1, 0)
            return ((1.0 - w) * vals[0:2] + w * vals[3:5]).T

        if ensemble.n:
            substeps = max(1, int(np.ceil(gap / dt_traj - 1e-9)))
            h = gap / substeps
            for k in range(substeps):
                x = _rk4(x, t_a + k * h, h, velocity)
                if np.any(node_stages > MAX_NODE_STAGES):
                    bad = np.flatnonzero(node_stages > MAX_NODE_STAGES)
                    raise NodeEncounter(
                        f"{bad.size} trajectories stuck below the density floor near t={t_b:g}",
                        bad,
                    )
        t_a, state_a, field_a = t_b, state_b, field_b
        if count % save_every == 0:
            saved_t.append(t_b)
            saved_x.append(x.copy())
            pending = None
            if on_save is not None:
                on_save(t_b, state_b, x)
        else:
            pending = (t_b, state_b, x.copy())
    if pending is not None:
        saved_t.append(pending[0])
        saved_x.append(pending[2])
        if on_save is not None:
            on_save(*pending)

    coords = np.concatenate([ensemble.coords[:-1], np.stack(saved_x)])
    times = np.concatenate([ensemble.times[:-1], np.array(saved_t)])
    return TrajectoryEnsemble(
        ensemble.n, ensemble.seed, ensemble.structure_label, times, coords,
        ensemble.cm_map, dt_traj, ensemble.aborted.copy(),
    )


def _ep_rows(structure_label: str, cm_map: LinearStructureMap | None) -> np.ndarray:
    """Rows expressing (z_e, z_p) as linear combinations of native coordinates."""
    if structure_label == "e+p":
        return np.eye(2)
    if structure_label == "CM+R" and cm_map is not None:
        return invert(cm_map).coord_matrix
    raise ValueError(f"cannot express {structure_label} coordinates as (z_e, z_p)")


def equivariance_statistic(positions: np.ndarray, state: SpinorGridState, cm_map: LinearStructureMap | None = None) -> float:
    """Max Kolmogorov-Smirnov distance of the z_e and z_p marginals.

    ``positions`` are ``(n, 2)`` points in the state's own coordinates; the
    empirical marginals of z_e and z_p are compared with the exact
    marginal CDFs of the grid density.
    """
    positions = np.asarray(positions)
    if positions.shape[0] < MIN_KS_SAMPLES:
        raise TooFewSamples(f"need at least {MIN_KS_SAMPLES} trajectories, got {positions.shape[0]}")
    rows = _ep_rows(state.structure_label, cm_map)
    ks = []
    for row in rows:
        samples = positions @ row
        ks.append(stats.kstest(samples, projected_cdf(state, row)).statistic)
    return float(max(ks))


def is_bimodal(samples: np.ndarray, bins: int = 60, dip: float = 0.5) -> bool:
    """True if the smoothed histogram has two peaks separated by a valley.

    The valley must fall below ``dip`` times the lower of the two peaks.
    """
    hist, _ = np.histogram(samples, bins=bins)
    smooth = np.convolve(hist, np.ones(3) / 3.0, mode="same")
    peaks = [i for i in range(1, bins - 1)
             if smooth[i] >= smooth[i - 1] and smooth[i] > smooth[i + 1]
             and smooth[i] >= 0.1 * smooth.max()]
    for a in range(len(peaks)):
        for b in range(a + 1, len(peaks)):
            i, j = peaks[a], peaks[b]
            if smooth[i:j + 1].min() < dip * min(smooth[i], smooth[j]):
                return True
    return False


@dataclass(frozen=True)
class DeflectionReport:
    """Displacement statistics of each coordinate between first and last saved times.

    ``branch_means`` splits trajectories by whether their final Z_CM lies
    below (index 0) or above (index 1) the initial ensemble mean.
    """

    mean: dict
    spread: dict
    branch_means: dict
    branch_counts: tuple[int, int]
    rho_ks_drift: float

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "spread": self.spread,
            "branch_means": {k: list(v) for k, v in self.branch_means.items()},
            "branch_counts": list(self.branch_counts),
            "rho_ks_drift": self.rho_ks_drift,
        }


def subsystem_deflection(ensemble: TrajectoryEnsemble, map: LinearStructureMap) -> DeflectionReport:
    """Deflections of z_e, z_p, Z_CM and rho, with rho pushed through ``map``."""
    ep = ensemble.ep_positions()
    cmr = map.apply(ep)
    series = {"z_e": ep[..., 0], "z_p": ep[..., 1], "Z_CM": cmr[..., 0], "rho": cmr[..., 1]}
    z_final = cmr[-1, :, 0]
    lower = z_final < cmr[0, :, 0].mean()
    mean, spread, branch = {}, {}, {}
    for name, s in series.items():
        d = s[-1] - s[0]
        mean[name] = float(d.mean()) if d.size else 0.0
        spread[name] = float(d.std()) if d.size else 0.0
        branch[name] = tuple(
            float(d[mask].mean()) if mask.any() else float("nan") for mask in (lower, ~lower)
        )
    rho = series["rho"]
    drift = float(stats.ks_2samp(rho[0], rho[-1], method="asymp").statistic) if rho.shape[1] else 0.0
    return DeflectionReport(mean, spread, branch, (int(lower.sum()), int((~lower).sum())), drift)


def ordering_preserved(series: np.ndarray) -> bool:
    """True if the ranking of trajectories in a ``(n_saved, n)`` series never changes."""
    order = np.argsort(series[0], kind="stable")
    return bool(np.all(np.diff(series[:, order], axis=1) >= 0))


def ensemble_summary(report: DeflectionReport, ks_times, ks_values) -> str:
    return json.dumps(
        {
            "deflection": report.to_dict(),
            "ks_series": [{"time": float(t), "ks": float(k)} for t, k in zip(ks_times, ks_values)],
        },
        indent=2,
        sort_keys=True,
    ) + "\n"
