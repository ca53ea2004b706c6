"""Two-coordinate spinor wavefunctions on uniform periodic grids.

Amplitudes are stored as ``amps[spin, i1, i2]`` with spin index 0 for
up (s_z = +1/2) and 1 for down.  The discrete inner product carries the
cell area, so a normalized state has ``sum(|amps|**2) * dq1 * dq2 == 1``.
Units are natural (hbar = 1), entropies are in nats.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from qstruct.errors import (
    BadDensityMatrix,
    DimensionMismatch,
    GridTooSmall,
    NotNormalized,
    StructureMismatch,
    SupportEscape,
)
from qstruct.structure import LinearStructureMap, structure_name

UP, DOWN = 0, 1
SPIN_Z = np.array([0.5, -0.5])
FACTORS = ("spin", "q1", "q2")

#: Probability allowed to fall outside the target grid in change_structure.
MAX_SUPPORT_LOSS = 1e-6


@dataclass(frozen=True)
class Grid1D:
    """Uniform periodic grid ``min + i * spacing`` for ``i < n``; ``max`` is excluded."""

    min: float
    max: float
    n: int

    def __post_init__(self):
        if not (self.max > self.min):
            raise ValueError(f"grid max ({self.max}) must exceed min ({self.min})")
        if self.n < 2 or self.n & (self.n - 1):
            raise ValueError(f"grid point count must be a power of two, got {self.n}")

    @property
    def spacing(self) -> float:
        return (self.max - self.min) / self.n

    @property
    def points(self) -> np.ndarray:
        return self.min + self.spacing * np.arange(self.n)

    @property
    def wavenumbers(self) -> np.ndarray:
        return 2.0 * np.pi * np.fft.fftfreq(self.n, d=self.spacing)

    @property
    def last(self) -> float:
        return self.min + self.spacing * (self.n - 1)

    def to_dict(self) -> dict:
        return {"min": self.min, "max": self.max, "n": self.n}

    @classmethod
    def from_dict(cls, data: dict) -> "Grid1D":
        return cls(float(data["min"]), float(data["max"]), int(data["n"]))


@dataclass(frozen=True, eq=False)
class SpinorGridState:
    grids: tuple[Grid1D, Grid1D]
    amps: np.ndarray
    structure_label: str = "e+p"

    def __post_init__(self):
        amps = np.array(self.amps, dtype=complex)
        shape = (2, self.grids[0].n, self.grids[1].n)
        if amps.shape != shape:
            raise DimensionMismatch(f"amps shape {amps.shape} does not match grids {shape}")
        if not np.all(np.isfinite(amps)):
            raise ValueError("amplitudes must be finite")
        amps.setflags(write=False)
        object.__setattr__(self, "amps", amps)
        object.__setattr__(self, "grids", tuple(self.grids))

    @property
    def cell_area(self) -> float:
        return self.grids[0].spacing * self.grids[1].spacing

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.grids[0].points, self.grids[1].points, indexing="ij")

    def density(self) -> np.ndarray:
        """Spin-summed probability density on the grid."""
        return np.sum(np.abs(self.amps) ** 2, axis=0)

    def norm_sq(self) -> float:
        return float(np.sum(np.abs(self.amps) ** 2) * self.cell_area)

    def with_amps(self, amps: np.ndarray, structure_label: str | None = None) -> "SpinorGridState":
        label = self.structure_label if structure_label is None else structure_label
        return SpinorGridState(self.grids, amps, label)


def normalize(s: SpinorGridState) -> SpinorGridState:
    norm = s.norm_sq()
    if norm == 0.0:
        raise NotNormalized("cannot normalize a zero state")
    return s.with_amps(s.amps / np.sqrt(norm))


def inner_product(a: SpinorGridState, b: SpinorGridState) -> complex:
    """``<a|b>`` including the spin sum and cell area."""
    if a.amps.shape != b.amps.shape:
        raise DimensionMismatch("states live on different grids")
    return complex(np.vdot(a.amps, b.amps) * a.cell_area)


def state_fidelity(a: SpinorGridState, b: SpinorGridState) -> float:
    return abs(inner_product(a, b)) ** 2


def product_spin_state(
    f1: np.ndarray,
    f2: np.ndarray,
    spin_amps: Sequence[complex],
    grids: tuple[Grid1D, Grid1D],
    structure_label: str = "e+p",
) -> SpinorGridState:
    """Normalized ``f1(q1) f2(q2) (a_up|up> + a_dn|dn>)`` from sampled factors."""
    spin = np.asarray(spin_amps, dtype=complex)
    if spin.shape != (2,):
        raise DimensionMismatch("spin_amps must have two entries")
    if abs(np.sum(np.abs(spin) ** 2) - 1.0) > 1e-9:
        raise NotNormalized("spin amplitudes must satisfy |a_up|^2 + |a_dn|^2 = 1")
    amps = spin[:, None, None] * np.outer(f1, f2)[None, :, :]
    return normalize(SpinorGridState(grids, amps, structure_label))


def gaussian_packet(grid: Grid1D, center: float, sigma: float, k: float = 0.0) -> np.ndarray:
    """Unnormalized packet whose density has standard deviation ``sigma``."""
    q = grid.points
    return np.exp(-((q - center) ** 2) / (4.0 * sigma**2) + 1j * k * q)


def gaussian_spin_state(
    centers: Sequence[float],
    widths: Sequence[float],
    momenta: Sequence[float],
    spin_amps: Sequence[complex],
    grids: tuple[Grid1D, Grid1D],
    structure_label: str = "e+p",
    margin: float = 5.0,
) -> SpinorGridState:
    """Product of two Gaussian packets and a spinor.

    ``widths`` are standard deviations of the position densities.  Each
    packet must sit at least ``margin`` widths inside its grid.
    """
    factors = []
    for axis, (grid, c, sigma, k) in enumerate(zip(grids, centers, widths, momenta)):
        if not sigma > 0:
            raise ValueError(f"width on axis {axis} must be positive, got {sigma}")
        if c - margin * sigma < grid.min or c + margin * sigma > grid.last:
            raise GridTooSmall(
                f"packet on axis {axis} (center {c}, width {sigma}) needs "
                f"{margin} widths of margin inside [{grid.min}, {grid.last}]"
            )
        factors.append(gaussian_packet(grid, c, sigma, k))
    return product_spin_state(factors[0], factors[1], spin_amps, grids, structure_label)


# --- refactorization -------------------------------------------------------


def _carrier_wavenumbers(component: np.ndarray, grids) -> tuple[float, float]:
    power = np.abs(np.fft.fft2(component)) ** 2
    total = power.sum()
    k1 = np.sum(power.sum(axis=1) * grids[0].wavenumbers) / total
    k2 = np.sum(power.sum(axis=0) * grids[1].wavenumbers) / total
    return float(k1), float(k2)


def change_structure(
    s: SpinorGridState,
    map: LinearStructureMap,
    target_grids: tuple[Grid1D, Grid1D],
    *,
    demodulate: bool = True,
    max_loss: float = MAX_SUPPORT_LOSS,
) -> SpinorGridState:
    """Resample ``s`` in the coordinates ``xi = map.coord_matrix @ q``.

    The new amplitude is ``|det A|**-0.5 * psi(A^-1 xi)``, evaluated by
    cubic-spline interpolation of the source grid.  With ``demodulate``
    each spin component's mean plane-wave carrier is divided out before
    interpolation and restored afterwards, so fast but regular phases do
    not limit accuracy.

    Raises
    ------
    SupportEscape
        If more than ``max_loss`` of the probability maps outside ``target_grids``.
    """
    if map.dim != 2:
        raise DimensionMismatch(f"change_structure needs a 2x2 map, got {map.dim}x{map.dim}")
    known = {"e+p", "CM+R"}
    if map.name_in in known and s.structure_label in known and map.name_in != s.structure_label:
        raise StructureMismatch(
            f"map expects {map.name_in} coordinates, state is {s.structure_label}"
        )
    a = map.coord_matrix
    a_inv = np.linalg.inv(a)

    # probability whose image leaves the target box
    q1, q2 = s.mesh()
    xi = np.einsum("ij,jab->iab", a, np.stack([q1, q2]))
    inside = np.ones_like(q1, dtype=bool)
    for axis, grid in enumerate(target_grids):
        h = grid.spacing
        inside &= (xi[axis] >= grid.min - 0.5 * h) & (xi[axis] <= grid.last + 0.5 * h)
    lost = float(np.sum(s.density()[~inside]) * s.cell_area)
    if lost > max_loss:
        raise SupportEscape(f"{lost:.3e} of the probability maps outside the target grid")

    x1, x2 = np.meshgrid(target_grids[0].points, target_grids[1].points, indexing="ij")
    pre = np.einsum("ij,jab->iab", a_inv, np.stack([x1, x2]))
    idx = [(pre[k] - s.grids[k].min) / s.grids[k].spacing for k in range(2)]
    amp_scale = 1.0 / np.sqrt(abs(np.linalg.det(a)))

    out = np.zeros((2, target_grids[0].n, target_grids[1].n), dtype=complex)
    for spin in (UP, DOWN):
        comp = s.amps[spin]
        if not np.any(comp):
            continue
        k1 = k2 = 0.0
        if demodulate:
            k1, k2 = _carrier_wavenumbers(comp, s.grids)
            comp = comp * np.exp(-1j * (k1 * q1 + k2 * q2))
        env = ndimage.map_coordinates(comp.real, idx, order=3, mode="constant", cval=0.0)
        env = env + 1j * ndimage.map_coordinates(comp.imag, idx, order=3, mode="constant", cval=0.0)
        if demodulate:
            env *= np.exp(1j * (k1 * pre[0] + k2 * pre[1]))
        out[spin] = amp_scale * env
    return SpinorGridState(tuple(target_grids), out, map.name_out)


def covering_grids(
    source: tuple[Grid1D, Grid1D], map: LinearStructureMap, n: Sequence[int] = (256, 256)
) -> tuple[Grid1D, Grid1D]:
    """Target grids whose box contains the image of the whole source box."""
    corners = np.array([[g0, g1] for g0 in (source[0].min, source[0].max)
                         for g1 in (source[1].min, source[1].max)])
    image = map.apply(corners)
    lo, hi = image.min(axis=0), image.max(axis=0)
    return tuple(Grid1D(float(lo[k]), float(hi[k]), int(n[k])) for k in range(2))


# --- bipartitions and entropies --------------------------------------------


def _parse_split(split: str) -> tuple[list[int], list[int]]:
    try:
        left, right = split.split("|")
    except ValueError:
        raise ValueError(f"split must look like 'q1|q2,spin', got {split!r}") from None
    parts = []
    for side in (left, right):
        names = [p.strip() for p in side.split(",") if p.strip()]
        bad = [p for p in names if p not in FACTORS]
        if bad:
            raise ValueError(f"unknown factors {bad} in split {split!r}")
        parts.append([FACTORS.index(p) for p in names])
    if sorted(parts[0] + parts[1]) != [0, 1, 2] or not parts[0] or not parts[1]:
        raise ValueError(f"split {split!r} must partition {{q1, q2, spin}}")
    return parts[0], parts[1]


def matricize(s: SpinorGridState, split: str) -> np.ndarray:
    left, right = _parse_split(split)
    weighted = s.amps * np.sqrt(s.cell_area)
    arr = np.transpose(weighted, left + right)
    rows = int(np.prod([arr.shape[i] for i in range(len(left))]))
    return arr.reshape(rows, -1)


def schmidt_spectrum(s: SpinorGridState, split: str = "q1|q2,spin") -> np.ndarray:
    """Schmidt coefficients (nonincreasing) across a bipartition of ``{q1, q2, spin}``.

    ``split`` names the two sides, e.g. ``"q1|q2,spin"`` or ``"q1,q2|spin"``.
    """
    return np.linalg.svd(matricize(s, split), compute_uv=False)


def entanglement_entropy(spectrum, atol: float = 1e-6) -> float:
    """Von Neumann entropy ``-sum(l^2 ln l^2)`` of a Schmidt spectrum, in nats."""
    p = np.asarray(spectrum, dtype=float) ** 2
    total = p.sum()
    if abs(total - 1.0) > atol:
        raise NotNormalized(f"squared Schmidt coefficients sum to {total:.9f}")
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def split_entropy(s: SpinorGridState, split: str) -> float:
    return entanglement_entropy(schmidt_spectrum(s, split))


def _axis(which) -> int:
    if which in (0, 1):
        return int(which)
    names = {"q1": 0, "q2": 1}
    if which in names:
        return names[which]
    raise ValueError(f"coordinate must be 0, 1, 'q1' or 'q2', got {which!r}")


def marginal_density(s: SpinorGridState, which) -> np.ndarray:
    """Spin-summed density of one coordinate with the other integrated out."""
    axis = _axis(which)
    other = 1 - axis
    return s.density().sum(axis=other) * s.grids[other].spacing


def position_moments(s: SpinorGridState, spin: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Mean vector and covariance of ``(q1, q2)``, optionally for one spin component."""
    dens = s.density() if spin is None else np.abs(s.amps[spin]) ** 2
    dens = dens / dens.sum()
    q1, q2 = s.mesh()
    mean = np.array([np.sum(dens * q1), np.sum(dens * q2)])
    d1, d2 = q1 - mean[0], q2 - mean[1]
    cov = np.array([
        [np.sum(dens * d1 * d1), np.sum(dens * d1 * d2)],
        [np.sum(dens * d1 * d2), np.sum(dens * d2 * d2)],
    ])
    return mean, cov


def reduced_density_matrix(s: SpinorGridState, keep: str) -> np.ndarray:
    """Reduced density matrix of one factor, normalized to unit trace.

    For ``keep`` in ``{"q1", "q2"}`` entries include the cell measure of the
    kept coordinate, so the matrix is a proper trace-one operator on the
    grid's discrete basis.
    """
    if keep == "spin":
        return matricize(s, "spin|q1,q2") @ matricize(s, "spin|q1,q2").conj().T
    if keep not in ("q1", "q2"):
        raise ValueError(f"keep must be 'q1', 'q2' or 'spin', got {keep!r}")
    other = "q2" if keep == "q1" else "q1"
    m = matricize(s, f"{keep}|{other},spin")
    return m @ m.conj().T


def _check_density_matrix(rho: np.ndarray, name: str, tol: float = 1e-8) -> np.ndarray:
    rho = np.asarray(rho, dtype=complex)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise BadDensityMatrix(f"{name} is not square")
    if np.max(np.abs(rho - rho.conj().T)) > tol:
        raise BadDensityMatrix(f"{name} is not Hermitian")
    if abs(np.trace(rho).real - 1.0) > tol:
        raise BadDensityMatrix(f"{name} has trace {np.trace(rho).real:.9f}")
    if np.linalg.eigvalsh(rho).min() < -tol:
        raise BadDensityMatrix(f"{name} is not positive semidefinite")
    return 0.5 * (rho + rho.conj().T)


def reduced_state_fidelity(a: np.ndarray, b: np.ndarray) -> float:
    """Uhlmann fidelity ``(tr sqrt(sqrt(a) b sqrt(a)))**2`` of two density matrices."""
    a = _check_density_matrix(a, "a")
    b = _check_density_matrix(b, "b")
    if a.shape != b.shape:
        raise BadDensityMatrix("density matrices act on different spaces")
    w, v = np.linalg.eigh(a)
    sqrt_a = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.conj().T
    inner = sqrt_a @ b @ sqrt_a
    lam = np.linalg.eigvalsh(0.5 * (inner + inner.conj().T))
    f = float(np.sum(np.sqrt(np.clip(lam, 0.0, None))) ** 2)
    return min(max(f, 0.0), 1.0)


def projected_cdf(s: SpinorGridState, coeffs: Sequence[float]):
    """CDF of ``u = c1*q1 + c2*q2`` under the spin-summed grid density.

    The density of each grid point is spread uniformly over its cell along
    the integrated axis, which matches cell-jittered sampling.  Returns a
    vectorized callable.
    """
    c1, c2 = (float(c) for c in coeffs)
    if c1 == 0.0 and c2 == 0.0:
        raise ValueError("coefficients must not both vanish")
    dens = s.density() * s.cell_area
    # integrate along the axis with the larger coefficient
    axis = 0 if abs(c1) >= abs(c2) else 1
    c_main, c_other = (c1, c2) if axis == 0 else (c2, c1)
    grid_main, grid_other = s.grids[axis], s.grids[1 - axis]
    rows = dens.T if axis == 0 else dens  # one row per value of the other coordinate
    h = grid_main.spacing
    edges = np.concatenate([[grid_main.min - 0.5 * h], grid_main.points + 0.5 * h])
    cum = np.concatenate([np.zeros((rows.shape[0], 1)), np.cumsum(rows, axis=1)], axis=1)
    total = cum[:, -1].sum()
    live = np.flatnonzero(cum[:, -1] > 0.0)
    other_pts = grid_other.points

    def cdf(x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1)
        out = np.zeros_like(flat)
        for j in live:
            t = (flat - c_other * other_pts[j]) / c_main
            below = np.interp(t, edges, cum[j])
            out += below if c_main > 0 else cum[j, -1] - below
        return (out / total).reshape(x.shape)

    return cdf


# --- analytic Gaussian oracle ----------------------------------------------


def gaussian_split_entropy(position_cov, map: LinearStructureMap | None = None) -> float:
    """Entanglement entropy of a real two-mode Gaussian across its two coordinates.

    The wavefunction ``exp(-q^T C^-1 q / 4)`` has position covariance ``C`` and
    momentum covariance ``C^-1 / 4``; if ``map`` is given both are carried to
    the new coordinates first.  Uses the symplectic eigenvalue ``nu`` of the
    first mode's reduced covariance.
    """
    cov = np.asarray(position_cov, dtype=float)
    mom = np.linalg.inv(cov) / 4.0
    if map is not None:
        a, b = map.coord_matrix, map.momentum_matrix
        cov = a @ cov @ a.T
        mom = b @ mom @ b.T
    nu = np.sqrt(cov[0, 0] * mom[0, 0])
    if nu - 0.5 < 1e-15:
        return 0.0
    return float((nu + 0.5) * np.log(nu + 0.5) - (nu - 0.5) * np.log(nu - 0.5))


# --- snapshots -------------------------------------------------------------


def save_snapshot(s: SpinorGridState, json_path, csv_path=None) -> None:
    """Write a JSON header and a CSV of ``i1, i2, Re_up, Im_up, Re_dn, Im_dn``."""
    json_path = Path(json_path)
    csv_path = Path(csv_path) if csv_path is not None else json_path.with_suffix(".csv")
    header = {
        "grids": [g.to_dict() for g in s.grids],
        "structure_label": s.structure_label,
        "amplitudes_csv": csv_path.name,
    }
    json_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    up, dn = s.amps
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["i1", "i2", "Re_up", "Im_up", "Re_dn", "Im_dn"])
        for i1 in range(s.grids[0].n):
            for i2 in range(s.grids[1].n):
                writer.writerow([
                    i1, i2,
                    repr(float(up[i1, i2].real)), repr(float(up[i1, i2].imag)),
                    repr(float(dn[i1, i2].real)), repr(float(dn[i1, i2].imag)),
                ])


def load_snapshot(json_path) -> SpinorGridState:
    json_path = Path(json_path)
    header = json.loads(json_path.read_text())
    grids = tuple(Grid1D.from_dict(g) for g in header["grids"])
    amps = np.zeros((2, grids[0].n, grids[1].n), dtype=complex)
    with (json_path.parent / header["amplitudes_csv"]).open() as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            i1, i2 = int(row[0]), int(row[1])
            amps[0, i1, i2] = complex(float(row[2]), float(row[3]))
            amps[1, i1, i2] = complex(float(row[4]), float(row[5]))
    return SpinorGridState(grids, amps, header["structure_label"])


__all__ = [
    "DOWN",
    "Grid1D",
    "SpinorGridState",
    "UP",
    "change_structure",
    "covering_grids",
    "entanglement_entropy",
    "gaussian_spin_state",
    "gaussian_split_entropy",
    "inner_product",
    "load_snapshot",
    "marginal_density",
    "normalize",
    "position_moments",
    "product_spin_state",
    "projected_cdf",
    "reduced_density_matrix",
    "reduced_state_fidelity",
    "save_snapshot",
    "schmidt_spectrum",
    "split_entropy",
    "state_fidelity",
    "structure_name",
]
