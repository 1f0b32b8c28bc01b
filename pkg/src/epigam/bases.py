"""Basis expansions and quadratic penalty matrices for penalized regression.

Four families of model terms are supported: cubic (or general-degree)
B-spline bases with difference penalties, piece-wise linear bases built from
truncated lines with fixed knot spacing, low-rank thin-plate bases over 2-D
coordinates, and random-intercept dummy blocks with a ridge penalty.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.interpolate import BSpline


class DomainError(ValueError):
    """An input point lies outside the domain a basis was constructed for."""


class CenteringError(np.linalg.LinAlgError):
    """The sum-to-zero constraint is degenerate for the given basis."""


@dataclass(frozen=True)
class BSplineSpec:
    """B-spline basis with equidistant interior knots and a difference penalty.

    ``num_basis`` functions of degree ``degree`` span ``domain``; the penalty
    is ``D'D`` for the order-``penalty_order`` difference matrix ``D`` on the
    coefficients.  The basis is a partition of unity on the domain.
    """

    degree: int = 3
    num_basis: int = 10
    domain: tuple[float, float] = (0.0, 1.0)
    penalty_order: int = 2

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        if self.num_basis < self.degree + 2:
            raise ValueError(f"num_basis must be >= degree + 2 = {self.degree + 2}")
        lo, hi = self.domain
        if not (np.isfinite(lo) and np.isfinite(hi)) or hi < lo:
            raise ValueError(f"invalid domain {self.domain}")
        if self.penalty_order < 1 or self.penalty_order >= self.num_basis:
            raise ValueError("penalty_order must be in [1, num_basis)")

    @property
    def degenerate(self) -> bool:
        return self.domain[0] == self.domain[1]

    def knots(self) -> np.ndarray:
        lo, hi = self.domain
        n_interior = self.num_basis - self.degree - 1
        interior = np.linspace(lo, hi, n_interior + 2)[1:-1]
        return np.concatenate(
            [np.full(self.degree + 1, lo), interior, np.full(self.degree + 1, hi)]
        )


@dataclass(frozen=True)
class TruncatedLinearSpec:
    """Piece-wise linear basis: columns t and (t - s*l)_+ for l = 1..L.

    Knots sit every ``knot_spacing`` units; L is the largest l with
    ``knot_spacing * l`` strictly inside the domain.  The penalty is the
    identity on the truncated-line coefficients and zero on the slope.
    """

    knot_spacing: int = 28
    domain: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.knot_spacing <= 0:
            raise ValueError("knot_spacing must be positive")
        lo, hi = self.domain
        if hi < lo:
            raise ValueError(f"invalid domain {self.domain}")

    def knots(self) -> np.ndarray:
        hi = self.domain[1]
        n = int(np.floor((hi - 1e-9) / self.knot_spacing))
        return self.knot_spacing * np.arange(1, n + 1, dtype=float)

    @property
    def num_basis(self) -> int:
        return 1 + len(self.knots())


@dataclass(frozen=True)
class ThinPlateSpec:
    """Low-rank thin-plate basis over 2-D coordinates.

    The full basis pairs the affine functions (1, lon, lat) with the radial
    kernel r^2 log r at each distinct center.  The radial part is reduced to
    the ``rank - 3`` leading eigenvectors of the bending-energy matrix
    (restricted to the affine-orthogonal subspace, where it is PSD).
    """

    centers: tuple[tuple[float, float], ...]
    rank: int = 30

    def __post_init__(self):
        if self.rank < 4:
            raise ValueError("rank must be >= 4 (affine null space plus one radial column)")
        if self.distinct_centers().shape[0] < self.rank:
            raise ValueError(
                f"rank {self.rank} exceeds number of distinct centers "
                f"({self.distinct_centers().shape[0]})"
            )

    def distinct_centers(self) -> np.ndarray:
        pts = np.asarray(self.centers, dtype=float).reshape(-1, 2)
        return np.unique(pts, axis=0)


@dataclass(frozen=True)
class RandomInterceptSpec:
    """One dummy column per group level with an identity (ridge) penalty."""

    levels: tuple[str, ...]

    def __post_init__(self):
        if len(self.levels) == 0:
            raise ValueError("levels must be non-empty")
        if len(set(self.levels)) != len(self.levels):
            raise ValueError("levels must be unique")


BasisSpec = BSplineSpec | TruncatedLinearSpec | ThinPlateSpec | RandomInterceptSpec


def _tps_kernel(r: np.ndarray) -> np.ndarray:
    out = np.zeros_like(r)
    pos = r > 0
    out[pos] = r[pos] ** 2 * np.log(r[pos])
    return out


def _tps_decomposition(spec: ThinPlateSpec):
    """Affine block T, null-space projector Z and eigenpairs of Z'EZ."""
    centers = spec.distinct_centers()
    m = centers.shape[0]
    dist = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=2)
    energy = _tps_kernel(dist)
    affine = np.column_stack([np.ones(m), centers[:, 0], centers[:, 1]])
    q, _ = np.linalg.qr(affine, mode="complete")
    z = q[:, 3:]
    constrained = z.T @ energy @ z
    constrained = (constrained + constrained.T) / 2.0
    eigval, eigvec = np.linalg.eigh(constrained)
    order = np.argsort(eigval)[::-1]
    q_keep = spec.rank - 3
    eigval = np.clip(eigval[order][:q_keep], 0.0, None)
    eigvec = eigvec[:, order][:, :q_keep]
    return centers, z, eigval, eigvec


def evaluate_basis(spec: BasisSpec, x) -> np.ndarray:
    """Evaluate a basis at inputs ``x``, returning the n x k design block.

    For B-splines every row sums to one.  Inputs outside the spec domain
    raise :class:`DomainError` naming the offending value.
    """
    if isinstance(spec, BSplineSpec):
        xv = np.asarray(x, dtype=float).ravel()
        lo, hi = spec.domain
        if spec.degenerate:
            if np.any(xv != lo):
                bad = xv[xv != lo][0]
                raise DomainError(f"input {bad} outside degenerate domain [{lo}, {hi}]")
            warnings.warn(
                "degenerate B-spline domain (single point); basis collapses to an "
                "intercept column",
                stacklevel=2,
            )
            return np.ones((xv.size, 1))
        bad = (xv < lo) | (xv > hi)
        if np.any(bad):
            raise DomainError(f"input {xv[bad][0]} outside domain [{lo}, {hi}]")
        return BSpline.design_matrix(xv, spec.knots(), spec.degree, extrapolate=False).toarray()

    if isinstance(spec, TruncatedLinearSpec):
        xv = np.asarray(x, dtype=float).ravel()
        lo, hi = spec.domain
        bad = (xv < lo) | (xv > hi)
        if np.any(bad):
            raise DomainError(f"input {xv[bad][0]} outside domain [{lo}, {hi}]")
        cols = [xv] + [np.clip(xv - knot, 0.0, None) for knot in spec.knots()]
        return np.column_stack(cols)

    if isinstance(spec, ThinPlateSpec):
        pts = np.asarray(x, dtype=float).reshape(-1, 2)
        centers, z, eigval, eigvec = _tps_decomposition(spec)
        dist = np.linalg.norm(pts[:, None, :] - centers[None, :, :], axis=2)
        radial = _tps_kernel(dist) @ z @ eigvec
        return np.column_stack([np.ones(pts.shape[0]), pts[:, 0], pts[:, 1], radial])

    if isinstance(spec, RandomInterceptSpec):
        labels = np.asarray(x, dtype=object).ravel()
        index = {lev: j for j, lev in enumerate(spec.levels)}
        out = np.zeros((labels.size, len(spec.levels)))
        for i, lab in enumerate(labels):
            j = index.get(lab)
            if j is None:
                raise DomainError(f"unknown level {lab!r}")
            out[i, j] = 1.0
        return out

    raise TypeError(f"unsupported basis spec {type(spec)!r}")


def penalty_matrix(spec: BasisSpec) -> np.ndarray:
    """Symmetric PSD penalty matrix matching :func:`evaluate_basis` columns."""
    if isinstance(spec, BSplineSpec):
        if spec.degenerate:
            return np.zeros((1, 1))
        d = np.diff(np.eye(spec.num_basis), n=spec.penalty_order, axis=0)
        return d.T @ d

    if isinstance(spec, TruncatedLinearSpec):
        k = spec.num_basis
        s = np.eye(k)
        s[0, 0] = 0.0
        return s

    if isinstance(spec, ThinPlateSpec):
        _, _, eigval, _ = _tps_decomposition(spec)
        s = np.zeros((spec.rank, spec.rank))
        s[3:, 3:] = np.diag(eigval)
        return s

    if isinstance(spec, RandomInterceptSpec):
        return np.eye(len(spec.levels))

    raise TypeError(f"unsupported basis spec {type(spec)!r}")


class CenteredBasis(NamedTuple):
    basis: np.ndarray
    penalty: np.ndarray
    transform: np.ndarray


def apply_centering_constraint(basis: np.ndarray, penalty: np.ndarray) -> CenteredBasis:
    """Absorb the sum-to-zero constraint, dropping one basis dimension.

    Returns the reduced basis (every column sums to zero), the congruently
    transformed penalty, and the k x (k-1) transform used for both, which a
    caller needs to reproduce the reduction on new evaluation points.
    """
    b = np.asarray(basis, dtype=float)
    s = np.asarray(penalty, dtype=float)
    n, k = b.shape
    if n < k:
        raise ValueError(f"basis needs at least as many rows ({n}) as columns ({k})")
    colsums = b.sum(axis=0)
    scale = max(np.abs(b).sum(axis=0).max(), 1.0)
    if np.linalg.norm(colsums) < 1e-12 * scale:
        raise CenteringError("column sums are already zero; centering constraint is degenerate")
    q, _ = np.linalg.qr(colsums[:, None], mode="complete")
    z = q[:, 1:]
    reduced = b @ z
    reduced_penalty = z.T @ s @ z
    reduced_penalty = (reduced_penalty + reduced_penalty.T) / 2.0
    return CenteredBasis(reduced, reduced_penalty, z)
