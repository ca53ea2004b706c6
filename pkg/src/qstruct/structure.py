"""Linear canonical transformations between subsystem decompositions.

A :class:`LinearStructureMap` links two coordinate sets ``xi = A @ q``.
Conjugate momenta transform with the inverse transpose of ``A`` so that
canonical pairs survive the change of variables; only invertibility of
``A`` is required (the centre-of-mass map is not orthogonal).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from qstruct.errors import DimensionMismatch, NonpositiveMass, SingularMatrix

#: |det A| / prod(row norms) below this counts as singular.
SINGULAR_RTOL = 1e-12

EP_LABELS = ("z_e", "z_p")
CMR_LABELS = ("Z_CM", "rho")

_STRUCTURE_NAMES = {EP_LABELS: "e+p", CMR_LABELS: "CM+R"}


def structure_name(labels: Sequence[str]) -> str:
    """Human-readable structure label for a coordinate-name list."""
    labels = tuple(labels)
    return _STRUCTURE_NAMES.get(labels, "+".join(labels))


def _default_labels(prefix: str, n: int) -> tuple[str, ...]:
    return tuple(f"{prefix}{i + 1}" for i in range(n))


@dataclass(frozen=True, eq=False)
class LinearStructureMap:
    """Invertible linear map ``xi = coord_matrix @ q`` and its momentum rule.

    Attributes
    ----------
    coord_matrix : ndarray, shape (n, n)
        Coefficients expressing the new coordinates in terms of the old.
    momentum_matrix : ndarray, shape (n, n)
        ``inv(coord_matrix).T``; maps old conjugate momenta to new ones.
    labels_in, labels_out : tuple of str
        Coordinate names before and after the map.
    """

    coord_matrix: np.ndarray
    momentum_matrix: np.ndarray = field(repr=False)
    labels_in: tuple[str, ...] = ()
    labels_out: tuple[str, ...] = ()

    @property
    def dim(self) -> int:
        return self.coord_matrix.shape[0]

    @property
    def name_in(self) -> str:
        return structure_name(self.labels_in)

    @property
    def name_out(self) -> str:
        return structure_name(self.labels_out)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map points with coordinates on the last axis."""
        points = np.asarray(points, dtype=float)
        if points.shape[-1] != self.dim:
            raise DimensionMismatch(
                f"points have {points.shape[-1]} coordinates, map expects {self.dim}"
            )
        return points @ self.coord_matrix.T

    def apply_momenta(self, momenta: np.ndarray) -> np.ndarray:
        momenta = np.asarray(momenta, dtype=float)
        if momenta.shape[-1] != self.dim:
            raise DimensionMismatch(
                f"momenta have {momenta.shape[-1]} components, map expects {self.dim}"
            )
        return momenta @ self.momentum_matrix.T

    def to_dict(self) -> dict:
        return {
            "coord_matrix": self.coord_matrix.tolist(),
            "labels_in": list(self.labels_in),
            "labels_out": list(self.labels_out),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "LinearStructureMap":
        return make_map(
            data["coord_matrix"],
            labels_in=data.get("labels_in"),
            labels_out=data.get("labels_out"),
        )

    @classmethod
    def from_json(cls, text: str) -> "LinearStructureMap":
        return cls.from_dict(json.loads(text))


def _check_square(matrix: np.ndarray) -> None:
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise DimensionMismatch(f"coord_matrix must be square, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise ValueError("coord_matrix has non-finite entries")


def make_map(
    coord_matrix,
    labels_in: Sequence[str] | None = None,
    labels_out: Sequence[str] | None = None,
) -> LinearStructureMap:
    """Build a structure map, deriving the momentum matrix as inverse-transpose.

    Raises
    ------
    SingularMatrix
        If ``|det|`` is negligible relative to the product of row norms.
    """
    a = np.array(coord_matrix, dtype=float)
    _check_square(a)
    n = a.shape[0]
    scale = np.prod(np.linalg.norm(a, axis=1))
    det = np.linalg.det(a)
    if scale == 0.0 or abs(det) <= SINGULAR_RTOL * scale:
        raise SingularMatrix(f"coord_matrix is singular (det={det:.3e})")
    labels_in = tuple(labels_in) if labels_in is not None else _default_labels("q", n)
    labels_out = tuple(labels_out) if labels_out is not None else _default_labels("xi", n)
    if len(labels_in) != n or len(labels_out) != n:
        raise DimensionMismatch("label lists must match the matrix dimension")
    a.setflags(write=False)
    momentum = np.linalg.inv(a).T.copy()
    momentum.setflags(write=False)
    return LinearStructureMap(a, momentum, labels_in, labels_out)


def identity_map(n: int = 2, labels: Sequence[str] | None = None) -> LinearStructureMap:
    labels = tuple(labels) if labels is not None else _default_labels("q", n)
    return make_map(np.eye(n), labels, labels)


def cm_relative_map(m1: float, m2: float) -> LinearStructureMap:
    """Particle coordinates ``(z_e, z_p)`` to centre of mass and relative ``(Z_CM, rho)``."""
    if not (m1 > 0 and m2 > 0):
        raise NonpositiveMass(f"masses must be positive, got {m1!r}, {m2!r}")
    total = m1 + m2
    return make_map([[m1 / total, m2 / total], [1.0, -1.0]], EP_LABELS, CMR_LABELS)


def invert(m: LinearStructureMap) -> LinearStructureMap:
    inv = np.linalg.inv(m.coord_matrix)
    return make_map(inv, m.labels_out, m.labels_in)


def compose(a: LinearStructureMap, b: LinearStructureMap) -> LinearStructureMap:
    """Map that applies ``b`` first, then ``a``.

    The coordinate matrix of the result is ``a.coord_matrix @ b.coord_matrix``.
    """
    if a.dim != b.dim:
        raise DimensionMismatch(f"cannot compose {a.dim}x{a.dim} with {b.dim}x{b.dim}")
    return make_map(a.coord_matrix @ b.coord_matrix, b.labels_in, a.labels_out)


def jacobian_abs(m: LinearStructureMap) -> float:
    return float(abs(np.linalg.det(m.coord_matrix)))


def canonical_defect(m: LinearStructureMap) -> float:
    """Max entrywise deviation of ``coord_matrix @ momentum_matrix.T`` from identity."""
    prod = m.coord_matrix @ m.momentum_matrix.T
    return float(np.max(np.abs(prod - np.eye(m.dim))))
