"""Classical hidden-variable densities: finite Gaussian mixtures over two coordinates.

Mixtures are closed under linear coordinate maps, have analytic
marginals, and single components have closed-form mutual information,
which makes factorizability in one structure and non-factorizability in
another directly checkable.  Mixture integrals use deterministic
quadrature on nested uniform grids.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import logsumexp

from qstruct.errors import DimensionMismatch, QuadratureNotConverged
from qstruct.structure import LinearStructureMap

#: Half-width of the quadrature box in component standard deviations.
BOX_SIGMAS = 10.0
MI_TOL = 1e-5
GAP_TOL = 1e-4
START_POINTS = 128
MAX_POINTS = 4096
ROW_CHUNK = 256


class Gaussian1D(NamedTuple):
    mean: float
    var: float


@dataclass(frozen=True, eq=False)
class GaussianComponent:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(2)
        cov = np.asarray(self.cov, dtype=float).reshape(2, 2)
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ValueError("covariance must be symmetric")
        cov = 0.5 * (cov + cov.T)
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise ValueError("covariance must be positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def correlation(self) -> float:
        return float(self.cov[0, 1] / np.sqrt(self.cov[0, 0] * self.cov[1, 1]))

    def logpdf(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        dx, dy = x - self.mean[0], y - self.mean[1]
        inv = np.linalg.inv(self.cov)
        quad = inv[0, 0] * dx * dx + 2 * inv[0, 1] * dx * dy + inv[1, 1] * dy * dy
        return -0.5 * quad - np.log(2 * np.pi) - 0.5 * np.log(np.linalg.det(self.cov))


@dataclass(frozen=True, eq=False)
class MixtureDensity:
    """Density ``sum_i p_i N(mean_i, cov_i)`` over a coordinate pair."""

    weights: np.ndarray
    components: tuple[GaussianComponent, ...]
    coordinate_label: str = "e+p"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(w) != len(self.components) or len(w) == 0:
            raise ValueError("need one weight per component")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to one")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", tuple(self.components))

    def logpdf(self, x, y) -> np.ndarray:
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        terms = [np.log(w) + c.logpdf(x, y) for w, c in zip(self.weights, self.components) if w > 0]
        return logsumexp(np.stack(terms), axis=0)

    def pdf(self, x, y) -> np.ndarray:
        return np.exp(self.logpdf(x, y))

    def marginal_logpdf(self, axis: int, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        terms = []
        for w, c in zip(self.weights, self.components):
            if w > 0:
                var = c.cov[axis, axis]
                terms.append(np.log(w) - 0.5 * (u - c.mean[axis]) ** 2 / var - 0.5 * np.log(2 * np.pi * var))
        return logsumexp(np.stack(terms), axis=0)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "components": [{"mean": c.mean.tolist(), "cov": c.cov.tolist()} for c in self.components],
            "coordinate_label": self.coordinate_label,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "MixtureDensity":
        comps = tuple(GaussianComponent(c["mean"], c["cov"]) for c in data["components"])
        return cls(data["weights"], comps, data.get("coordinate_label", "e+p"))

    @classmethod
    def from_json(cls, text: str) -> "MixtureDensity":
        return cls.from_dict(json.loads(text))


def product_density(f1: Gaussian1D, f2: Gaussian1D, coordinate_label: str = "e+p") -> MixtureDensity:
    comp = GaussianComponent([f1.mean, f2.mean], np.diag([f1.var, f2.var]))
    return MixtureDensity([1.0], (comp,), coordinate_label)


def transform_density(d: MixtureDensity, map: LinearStructureMap) -> MixtureDensity:
    """Push a density through ``xi = A q``: means -> A m, covariances -> A S A^T.

    Weights are unchanged; the Jacobian is absorbed in the Gaussian normalization.
    """
    if map.dim != 2:
        raise DimensionMismatch(f"densities are 2-D, map is {map.dim}-D")
    a = map.coord_matrix
    comps = tuple(GaussianComponent(a @ c.mean, a @ c.cov @ a.T) for c in d.components)
    return MixtureDensity(d.weights.copy(), comps, map.name_out)


def gaussian_mutual_information(correlation: float) -> float:
    return float(-0.5 * np.log1p(-correlation**2))


def _box(d: MixtureDensity) -> list[tuple[float, float]]:
    box = []
    for axis in (0, 1):
        lo = min(c.mean[axis] - BOX_SIGMAS * np.sqrt(c.cov[axis, axis]) for c in d.components)
        hi = max(c.mean[axis] + BOX_SIGMAS * np.sqrt(c.cov[axis, axis]) for c in d.components)
        box.append((lo, hi))
    return box


def _midpoint_sum(d: MixtureDensity, integrand, n: int) -> float:
    """Tensor midpoint rule with ``n`` cells per axis, evaluated in row chunks."""
    (x0, x1), (y0, y1) = _box(d)
    hx, hy = (x1 - x0) / n, (y1 - y0) / n
    x = x0 + hx * (np.arange(n) + 0.5)
    y = y0 + hy * (np.arange(n) + 0.5)
    log_my = d.marginal_logpdf(1, y)
    total = 0.0
    for start in range(0, n, ROW_CHUNK):
        xs = x[start:start + ROW_CHUNK]
        xx, yy = np.meshgrid(xs, y, indexing="ij")
        log_joint = d.logpdf(xx, yy)
        log_prod = d.marginal_logpdf(0, xs)[:, None] + log_my[None, :]
        total += float(np.sum(integrand(log_joint, log_prod)))
    return total * hx * hy


def _converge(d: MixtureDensity, integrand, tol: float, what: str) -> float:
    n = START_POINTS
    prev = _midpoint_sum(d, integrand, n)
    while n < MAX_POINTS:
        n *= 2
        cur = _midpoint_sum(d, integrand, n)
        if abs(cur - prev) <= tol:
            return cur
        prev = cur
    raise QuadratureNotConverged(f"{what} did not converge to {tol:g} with {n}^2 points")


def _mi_integrand(log_joint, log_prod):
    return np.exp(log_joint) * (log_joint - log_prod)


def _gap_integrand(log_joint, log_prod):
    return np.abs(np.exp(log_joint) - np.exp(log_prod))


def mutual_information(d: MixtureDensity, tol: float = MI_TOL) -> float:
    """Mutual information between the two coordinates, in nats.

    Closed form ``-ln(1 - r^2)/2`` for a single component, quadrature otherwise.
    """
    if len(d.components) == 1:
        return gaussian_mutual_information(d.components[0].correlation)
    return max(0.0, _converge(d, _mi_integrand, tol, "mutual information"))


def factorization_gap(d: MixtureDensity, tol: float = GAP_TOL) -> float:
    """L1 distance between the density and the product of its marginals."""
    return _converge(d, _gap_integrand, tol, "factorization gap")


def weight_entropy(d: MixtureDensity) -> float:
    w = d.weights[d.weights > 0]
    return float(-np.sum(w * np.log(w)))


@dataclass(frozen=True)
class SweepPoint:
    sigma1: float
    sigma2: float
    m1: float
    m2: float
    mi_cmr: float
    gap: float

    @property
    def on_locus(self) -> bool:
        return bool(np.isclose(self.m1 * self.sigma1**2, self.m2 * self.sigma2**2, rtol=1e-12, atol=0))


def sweep_point(sigma1: float, sigma2: float, m1: float, m2: float) -> SweepPoint:
    """MI and factorization gap of an e+p product density after the CM+R map.

    ``sigma1``/``sigma2`` are standard deviations of the particle densities.
    """
    from qstruct.structure import cm_relative_map

    d = product_density(Gaussian1D(0.0, sigma1**2), Gaussian1D(0.0, sigma2**2))
    t = transform_density(d, cm_relative_map(m1, m2))
    return SweepPoint(sigma1, sigma2, m1, m2, mutual_information(t), factorization_gap(t))


def correlation_after_cm_map(var1: float, var2: float, m1: float, m2: float) -> float:
    """Closed-form correlation of (Z_CM, rho) for independent particle coordinates."""
    total = m1 + m2
    var_z = (m1**2 * var1 + m2**2 * var2) / total**2
    var_rho = var1 + var2
    cov = (m1 * var1 - m2 * var2) / total
    return float(cov / np.sqrt(var_z * var_rho))


def default_sweep(sigmas1: Sequence[float], sigmas2: Sequence[float], masses: Sequence[tuple[float, float]]):
    return [(s1, s2, m1, m2) for (m1, m2) in masses for s1 in sigmas1 for s2 in sigmas2]
