"""Model terms, design matrices and penalty blocks.

A :class:`DesignSpec` is an ordered list of terms with their data embedded:
plain linear columns, dummy-coded factors and factor interactions, penalized
smooths over any basis spec, and random-intercept blocks.  ``build_design``
turns a spec into a :class:`PreparedDesign` holding the numeric matrix, the
per-block penalties (rescaled to unit spectral norm so one smoothing grid
serves all blocks), and enough metadata to encode new rows for prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .bases import (
    BasisSpec,
    CenteredBasis,
    DomainError,
    RandomInterceptSpec,
    apply_centering_constraint,
    evaluate_basis,
    penalty_matrix,
)


class RankDeficiencyError(np.linalg.LinAlgError):
    """The penalized system is singular; names the offending column."""


@dataclass
class LinearTerm:
    name: str
    values: np.ndarray


@dataclass
class FactorTerm:
    """Dummy coding of a categorical column.

    ``coding="reference"`` drops the reference level (default: first level);
    ``coding="full"`` keeps one column per level, for designs whose intercept
    is suppressed.
    """

    name: str
    labels: Sequence
    reference: str | None = None
    coding: str = "reference"
    levels: tuple | None = None

    def resolved_levels(self) -> tuple:
        if self.levels is not None:
            return tuple(self.levels)
        seen: dict = {}
        for lab in self.labels:
            seen.setdefault(lab, None)
        return tuple(seen)


@dataclass
class InteractionTerm:
    """Product dummies of the non-reference levels of two factors."""

    left: FactorTerm
    right: FactorTerm


@dataclass
class SmoothTerm:
    """Penalized smooth over a basis spec; optionally a varying coefficient.

    ``by`` multiplies every basis column by a 0/1 indicator.  ``center``
    absorbs the sum-to-zero constraint so the smooth is identifiable next to
    an intercept; varying smooths typically stay uncentered so they carry the
    interaction's level shift.
    """

    name: str
    spec: BasisSpec
    values: np.ndarray
    by: np.ndarray | None = None
    by_name: str | None = None
    center: bool = True


@dataclass
class RandomInterceptTerm:
    name: str
    labels: Sequence
    levels: tuple[str, ...] | None = None


Term = LinearTerm | FactorTerm | InteractionTerm | SmoothTerm | RandomInterceptTerm


@dataclass
class DesignSpec:
    terms: list
    intercept: bool = True
    offset: np.ndarray | None = None
    trials: np.ndarray | None = None


@dataclass
class PenaltyBlock:
    label: str
    start: int
    stop: int
    matrix: np.ndarray  # scaled to unit spectral norm

    @property
    def cols(self) -> slice:
        return slice(self.start, self.stop)


def _factor_columns(levels, reference, coding, labels, term_name):
    labels = np.asarray(labels, dtype=object).ravel()
    if coding == "full":
        kept = list(levels)
    else:
        ref = reference if reference is not None else levels[0]
        if ref not in levels:
            raise ValueError(f"reference level {ref!r} not among levels of {term_name!r}")
        kept = [lev for lev in levels if lev != ref]
    index = {lev: j for j, lev in enumerate(kept)}
    out = np.zeros((labels.size, len(kept)))
    for i, lab in enumerate(labels):
        j = index.get(lab)
        if j is not None:
            out[i, j] = 1.0
        elif lab not in levels:
            raise DomainError(f"unseen level {lab!r} of factor {term_name!r}")
    return out, kept


class _Encoder:
    """Per-term column builder, reusable on new data for prediction."""

    def __init__(self, term, n_rows):
        self.term = term
        self.label = getattr(term, "name", "(Intercept)")
        self.penalized = False
        self.names: list[str] = []
        if isinstance(term, LinearTerm):
            vals = np.asarray(term.values, dtype=float).ravel()
            if vals.size != n_rows:
                raise ValueError(f"term {term.name!r} has {vals.size} rows, expected {n_rows}")
            self.names = [term.name]
            self._train = vals[:, None]
        elif isinstance(term, FactorTerm):
            self.levels = term.resolved_levels()
            self.reference = (
                None if term.coding == "full"
                else (term.reference if term.reference is not None else self.levels[0])
            )
            cols, kept = _factor_columns(self.levels, term.reference, term.coding,
                                         term.labels, term.name)
            self.names = [f"{term.name}[{lev}]" for lev in kept]
            self._train = cols
        elif isinstance(term, InteractionTerm):
            self.label = f"{term.left.name}:{term.right.name}"
            lcols, lkept = _factor_columns(term.left.resolved_levels(), term.left.reference,
                                           "reference", term.left.labels, term.left.name)
            rcols, rkept = _factor_columns(term.right.resolved_levels(), term.right.reference,
                                           "reference", term.right.labels, term.right.name)
            self._lmeta = (term.left.resolved_levels(), term.left.reference, term.left.name)
            self._rmeta = (term.right.resolved_levels(), term.right.reference, term.right.name)
            prod = lcols[:, :, None] * rcols[:, None, :]
            self._train = prod.reshape(n_rows, -1)
            self.names = [
                f"{term.left.name}[{a}]:{term.right.name}[{b}]" for a in lkept for b in rkept
            ]
        elif isinstance(term, SmoothTerm):
            self.penalized = True
            basis = evaluate_basis(term.spec, term.values)
            pen = penalty_matrix(term.spec)
            self.transform = None
            if term.center:
                reduced: CenteredBasis = apply_centering_constraint(basis, pen)
                basis, pen, self.transform = reduced
            if term.by is not None:
                basis = basis * np.asarray(term.by, dtype=float).ravel()[:, None]
            self.penalty = _unit_spectral(pen)
            self.names = [f"{term.name}.{j}" for j in range(basis.shape[1])]
            self._train = basis
        elif isinstance(term, RandomInterceptTerm):
            self.penalized = True
            levels = term.levels
            if levels is None:
                seen: dict = {}
                for lab in term.labels:
                    seen.setdefault(lab, None)
                levels = tuple(seen)
            self.spec = RandomInterceptSpec(levels=tuple(str(v) for v in levels))
            self.levels = levels
            basis = evaluate_basis(self.spec, [str(v) for v in term.labels])
            self.penalty = np.eye(len(levels))
            self.names = [f"{term.name}[RE:{lev}]" for lev in levels]
            self._train = basis
        else:
            raise TypeError(f"unsupported term {type(term)!r}")

    def training_columns(self) -> np.ndarray:
        return self._train

    def encode(self, data: Mapping[str, np.ndarray]) -> np.ndarray:
        term = self.term
        if isinstance(term, LinearTerm):
            return np.asarray(data[term.name], dtype=float).ravel()[:, None]
        if isinstance(term, FactorTerm):
            cols, _ = _factor_columns(self.levels, term.reference, term.coding,
                                      data[term.name], term.name)
            return cols
        if isinstance(term, InteractionTerm):
            llev, lref, lname = self._lmeta
            rlev, rref, rname = self._rmeta
            lcols, _ = _factor_columns(llev, lref, "reference", data[lname], lname)
            rcols, _ = _factor_columns(rlev, rref, "reference", data[rname], rname)
            prod = lcols[:, :, None] * rcols[:, None, :]
            return prod.reshape(lcols.shape[0], -1)
        if isinstance(term, SmoothTerm):
            basis = evaluate_basis(term.spec, data[term.name])
            if self.transform is not None:
                basis = basis @ self.transform
            if term.by is not None:
                key = term.by_name if term.by_name is not None else f"{term.name}__by"
                basis = basis * np.asarray(data[key], dtype=float).ravel()[:, None]
            return basis
        if isinstance(term, RandomInterceptTerm):
            labels = [str(v) for v in np.asarray(data[term.name], dtype=object).ravel()]
            return evaluate_basis(self.spec, labels)
        raise TypeError(f"unsupported term {type(term)!r}")


def _unit_spectral(s: np.ndarray) -> np.ndarray:
    s = (s + s.T) / 2.0
    if s.size == 0:
        return s
    top = np.linalg.eigvalsh(s)[-1] if s.shape[0] > 1 else float(s[0, 0])
    if top > 0:
        return s / top
    return s


@dataclass
class PreparedDesign:
    matrix: np.ndarray
    names: list[str]
    blocks: list[PenaltyBlock]
    offset: np.ndarray
    trials: np.ndarray | None
    intercept: bool
    encoders: list[_Encoder] = field(repr=False, default_factory=list)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def p(self) -> int:
        return self.matrix.shape[1]

    def penalty_total(self, lam: Mapping[str, float]) -> np.ndarray:
        p_total = np.zeros((self.p, self.p))
        for block in self.blocks:
            p_total[block.cols, block.cols] += lam[block.label] * block.matrix
        return p_total

    def encode_rows(self, data: Mapping[str, np.ndarray], n_rows: int | None = None) -> np.ndarray:
        parts = [enc.encode(data) for enc in self.encoders]
        if parts:
            n_new = parts[0].shape[0]
        elif n_rows is not None:
            n_new = n_rows
        else:
            raise ValueError("cannot infer row count; pass n_rows for intercept-only designs")
        if self.intercept:
            parts.insert(0, np.ones((n_new, 1)))
        return np.concatenate(parts, axis=1)


def build_design(spec: DesignSpec, n_rows: int | None = None) -> PreparedDesign:
    """Assemble the design matrix and penalty blocks from a term list."""
    encoders = []
    parts = []
    names: list[str] = []
    n = n_rows
    for term in spec.terms:
        probe = getattr(term, "values", getattr(term, "labels", None))
        if probe is None and isinstance(term, InteractionTerm):
            probe = term.left.labels
        if probe is not None and n is None:
            n = np.asarray(probe, dtype=object).ravel().size if np.ndim(probe) <= 1 else np.asarray(probe).shape[0]
    if n is None:
        raise ValueError("cannot infer row count from an empty term list")
    if spec.intercept:
        parts.append(np.ones((n, 1)))
        names.append("(Intercept)")
    blocks: list[PenaltyBlock] = []
    for term in spec.terms:
        enc = _Encoder(term, n)
        cols = enc.training_columns()
        start = sum(p.shape[1] for p in parts)
        parts.append(cols)
        names.extend(enc.names)
        if enc.penalized:
            blocks.append(PenaltyBlock(enc.label, start, start + cols.shape[1], enc.penalty))
        encoders.append(enc)
    matrix = np.concatenate(parts, axis=1) if parts else np.empty((n, 0))
    if matrix.shape[1] == 0:
        raise ValueError("empty design: no intercept and no terms")
    offset = np.zeros(n) if spec.offset is None else np.asarray(spec.offset, dtype=float).ravel()
    if offset.size != n:
        raise ValueError(f"offset has {offset.size} rows, expected {n}")
    trials = None
    if spec.trials is not None:
        trials = np.asarray(spec.trials, dtype=float).ravel()
        if trials.size != n:
            raise ValueError(f"trials has {trials.size} rows, expected {n}")
    return PreparedDesign(matrix, names, blocks, offset, trials, spec.intercept, encoders)


def diagnose_singular(design: PreparedDesign, a_matrix: np.ndarray) -> RankDeficiencyError:
    """Build the error naming the columns aligned with the null direction."""
    eigval, eigvec = np.linalg.eigh((a_matrix + a_matrix.T) / 2.0)
    null_vec = np.abs(eigvec[:, 0])
    involved = np.flatnonzero(null_vec > 0.5 * null_vec.max())

    def describe(j):
        name = design.names[j] if j < len(design.names) else f"column {j}"
        block = next((b.label for b in design.blocks if b.start <= j < b.stop), "unpenalized")
        return f"{name!r} (block {block!r})"

    listed = ", ".join(describe(int(j)) for j in involved[:6])
    return RankDeficiencyError(
        f"singular penalized system: rank deficiency involving {listed}; "
        f"smallest eigenvalue {eigval[0]:.3e}"
    )
