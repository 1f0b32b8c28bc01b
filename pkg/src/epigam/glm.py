"""Penalized iteratively reweighted least squares for exponential families.

Supports gaussian/identity, poisson/log, binomial/logit and negative
binomial/log responses with offsets, any number of quadratic penalty blocks,
GCV smoothing-parameter selection, profile estimation of the negative
binomial dispersion, and model-based plus cluster-robust sandwich
covariances.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import linalg as sla
from scipy import optimize, special

from .design import DesignSpec, PreparedDesign, build_design, diagnose_singular

THETA_CAP = 1e7
_ETA_CLIP = 30.0

_CANONICAL_LINKS = {
    "gaussian": "identity",
    "poisson": "log",
    "binomial": "logit",
    "negative_binomial": "log",
}


class GlmNumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class Family:
    """Response family with its canonical link.

    Negative binomial variance is mu + mu^2/theta; the reported dispersion
    follows the sigma^2 = 1/theta convention.  ``nb_theta=None`` requests
    profile estimation; ``math.inf`` marks the Poisson limit.
    """

    kind: str
    link: str
    nb_theta: float | None = None

    def __post_init__(self):
        if self.kind not in _CANONICAL_LINKS:
            raise ValueError(f"unknown family {self.kind!r}")
        expected = _CANONICAL_LINKS[self.kind]
        if self.link != expected:
            raise ValueError(f"family {self.kind!r} requires link {expected!r}, got {self.link!r}")
        if self.kind == "negative_binomial" and self.nb_theta is not None and self.nb_theta <= 0:
            raise ValueError("nb_theta must be positive")

    @classmethod
    def gaussian(cls):
        return cls("gaussian", "identity")

    @classmethod
    def poisson(cls):
        return cls("poisson", "log")

    @classmethod
    def binomial(cls):
        return cls("binomial", "logit")

    @classmethod
    def negative_binomial(cls, theta: float | None = None):
        return cls("negative_binomial", "log", theta)


def _require_theta(family: Family) -> float:
    if family.nb_theta is None:
        raise ValueError("negative binomial fit requires nb_theta; use fit_negative_binomial")
    return family.nb_theta


def _mu_from_eta(family: Family, eta: np.ndarray, trials) -> np.ndarray:
    if family.link == "identity":
        return np.asarray(eta, dtype=float).copy()
    if family.link == "log":
        return np.exp(np.clip(eta, -700.0, 80.0))
    p = 1.0 / (1.0 + np.exp(-np.clip(eta, -_ETA_CLIP, _ETA_CLIP)))
    return trials * p


def _eta_from_mu(family: Family, mu: np.ndarray, trials) -> np.ndarray:
    if family.link == "identity":
        return mu.copy()
    if family.link == "log":
        return np.log(np.clip(mu, 1e-300, None))
    p = np.clip(mu / trials, 1e-12, 1.0 - 1e-12)
    return np.log(p / (1.0 - p))


def _dmu_deta(family: Family, mu: np.ndarray, trials) -> np.ndarray:
    if family.link == "identity":
        return np.ones_like(mu)
    if family.link == "log":
        return mu
    p = mu / trials
    return trials * p * (1.0 - p)


def _variance(family: Family, mu: np.ndarray, trials) -> np.ndarray:
    if family.kind == "gaussian":
        return np.ones_like(mu)
    if family.kind == "poisson":
        return mu
    if family.kind == "binomial":
        p = mu / trials
        return trials * p * (1.0 - p)
    theta = _require_theta(family)
    if math.isinf(theta):
        return mu
    return mu + mu * mu / theta


def _irls_weights(family: Family, mu: np.ndarray, trials) -> np.ndarray:
    if family.kind == "gaussian":
        return np.ones_like(mu)
    if family.kind == "poisson":
        return mu
    if family.kind == "binomial":
        p = np.clip(mu / trials, 1e-10, 1.0 - 1e-10)
        return trials * p * (1.0 - p)
    theta = _require_theta(family)
    if math.isinf(theta):
        return mu
    return mu / (1.0 + mu / theta)


def deviance(family: Family, y: np.ndarray, mu: np.ndarray, trials=None) -> float:
    if family.kind == "gaussian":
        return float(np.sum((y - mu) ** 2))
    if family.kind == "poisson":
        return float(2.0 * np.sum(special.xlogy(y, y / np.clip(mu, 1e-300, None)) - (y - mu)))
    if family.kind == "binomial":
        mu = np.clip(mu, 1e-10, trials - 1e-10)
        return float(
            2.0 * np.sum(
                special.xlogy(y, y / mu) + special.xlogy(trials - y, (trials - y) / (trials - mu))
            )
        )
    theta = _require_theta(family)
    if math.isinf(theta):
        return deviance(Family.poisson(), y, mu)
    return float(
        2.0 * np.sum(
            special.xlogy(y, y / np.clip(mu, 1e-300, None))
            - (y + theta) * np.log((y + theta) / (mu + theta))
        )
    )


def log_likelihood(family: Family, y: np.ndarray, mu: np.ndarray, trials=None,
                   dispersion: float = 1.0) -> float:
    """Exact log likelihood, constants included."""
    if family.kind == "gaussian":
        return float(-0.5 * np.sum((y - mu) ** 2 / dispersion + np.log(2 * np.pi * dispersion)))
    if family.kind == "poisson":
        return float(np.sum(special.xlogy(y, mu) - mu - special.gammaln(y + 1)))
    if family.kind == "binomial":
        p = np.clip(mu / trials, 1e-300, 1.0 - 1e-16)
        return float(
            np.sum(
                special.gammaln(trials + 1) - special.gammaln(y + 1)
                - special.gammaln(trials - y + 1)
                + special.xlogy(y, p) + special.xlogy(trials - y, 1.0 - p)
            )
        )
    theta = _require_theta(family)
    if math.isinf(theta):
        return log_likelihood(Family.poisson(), y, mu)
    return float(nb_log_likelihood(y, mu, theta))


def nb_log_likelihood(y: np.ndarray, mu: np.ndarray, theta: float) -> float:
    mu = np.clip(mu, 1e-300, None)
    return float(
        np.sum(
            special.gammaln(y + theta) - special.gammaln(theta) - special.gammaln(y + 1)
            + theta * np.log(theta / (theta + mu)) + special.xlogy(y, mu / (theta + mu))
        )
    )


def score_residual(family: Family, y: np.ndarray, mu: np.ndarray, trials=None) -> np.ndarray:
    """Per-observation d(loglik)/d(eta); X' r is the score w.r.t. beta."""
    if family.kind in ("gaussian", "poisson", "binomial"):
        return y - mu
    theta = _require_theta(family)
    if math.isinf(theta):
        return y - mu
    return (y - mu) / (1.0 + mu / theta)


@dataclass
class FitResult:
    """Penalized GLM fit: estimates, smoothing state and covariances."""

    names: list[str]
    beta: np.ndarray
    lam: dict[str, float]
    edf: dict[str, float]
    edf_total: float
    deviance: float
    dispersion: float
    cov_model: np.ndarray
    cov_sandwich: np.ndarray
    converged: bool
    iterations: int
    family: Family
    design: PreparedDesign = field(repr=False)
    y: np.ndarray = field(repr=False, default=None)
    eta: np.ndarray = field(repr=False, default=None)
    mu: np.ndarray = field(repr=False, default=None)
    diagnostics: dict = field(default_factory=dict)

    def coef(self, name: str) -> float:
        return float(self.beta[self.names.index(name)])

    def to_json(self) -> str:
        payload = {
            "coefficients": {n: float(b) for n, b in zip(self.names, self.beta)},
            "lambda": {k: float(v) for k, v in self.lam.items()},
            "edf": {k: float(v) for k, v in self.edf.items()},
            "edf_total": float(self.edf_total),
            "deviance": float(self.deviance),
            "dispersion": float(self.dispersion),
            "family": {"kind": self.family.kind, "link": self.family.link,
                       "nb_theta": self.family.nb_theta},
            "cov_model": self.cov_model.ravel().tolist(),
            "cov_sandwich": self.cov_sandwich.ravel().tolist(),
            "p": len(self.names),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "diagnostics": {k: v for k, v in self.diagnostics.items()
                            if isinstance(v, (str, int, float, bool))},
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def summary_from_json(cls, text: str) -> dict:
        """Parse the serialized document (matrices restored to 2-D)."""
        doc = json.loads(text)
        p = doc["p"]
        doc["cov_model"] = np.asarray(doc["cov_model"]).reshape(p, p)
        doc["cov_sandwich"] = np.asarray(doc["cov_sandwich"]).reshape(p, p)
        return doc


def _initial_mu(family: Family, y: np.ndarray, trials) -> np.ndarray:
    if family.kind == "gaussian":
        return y.astype(float).copy()
    if family.kind == "binomial":
        return trials * (y + 0.5) / (trials + 1.0)
    return y + 0.5


def _solve_penalized(design: PreparedDesign, a: np.ndarray, rhs: np.ndarray):
    try:
        c, low = sla.cho_factor(a)
    except np.linalg.LinAlgError:
        raise diagnose_singular(design, a) from None
    pivots = np.diag(c) ** 2
    if pivots.min() < 1e-10 * max(np.diag(a).max(), 1e-300):
        raise diagnose_singular(design, a)
    return sla.cho_solve((c, low), rhs), (c, low)


def _pirls_core(design: PreparedDesign, y: np.ndarray, family: Family,
                lam: dict[str, float], beta0: np.ndarray | None = None,
                tol: float = 1e-8, max_iter: int = 200):
    x = design.matrix
    offset = design.offset
    trials = design.trials
    p_total = design.penalty_total(lam)

    if beta0 is None:
        mu = _initial_mu(family, y, trials)
        eta = _eta_from_mu(family, mu, trials)
        beta = None
    else:
        beta = beta0.copy()
        eta = x @ beta + offset
        mu = _mu_from_eta(family, eta, trials)

    def penalized_dev(b, m):
        return deviance(family, y, m, trials) + float(b @ p_total @ b) if b is not None else np.inf

    pdev = penalized_dev(beta, mu)
    converged = False
    it = 0
    chol = None
    for it in range(1, max_iter + 1):
        w = _irls_weights(family, mu, trials)
        dmu = _dmu_deta(family, mu, trials)
        z = (eta - offset) + (y - mu) / np.where(dmu == 0, 1e-10, dmu)
        xw = x * w[:, None]
        a = x.T @ xw + p_total
        rhs = xw.T @ z
        beta_new, chol = _solve_penalized(design, a, rhs)

        step = 1.0
        for _ in range(30):
            cand = beta_new if beta is None or step == 1.0 else beta + step * (beta_new - beta)
            eta_c = x @ cand + offset
            mu_c = _mu_from_eta(family, eta_c, trials)
            pdev_c = deviance(family, y, mu_c, trials) + float(cand @ p_total @ cand)
            if np.isfinite(pdev_c) and (pdev_c <= pdev + 1e-12 * (abs(pdev) + 1.0) or beta is None):
                break
            step /= 2.0
        beta, eta, mu = cand, eta_c, mu_c
        if np.isfinite(pdev) and abs(pdev - pdev_c) < tol * (abs(pdev_c) + 0.1):
            pdev = pdev_c
            converged = True
            break
        pdev = pdev_c

    w = _irls_weights(family, mu, trials)
    return beta, eta, mu, w, pdev, it, converged, chol, p_total


def _edf_pieces(design: PreparedDesign, w: np.ndarray, chol, p_total):
    x = design.matrix
    xtwx = x.T @ (x * w[:, None])
    m = sla.cho_solve(chol, xtwx)
    diag = np.diag(m)
    edf = {}
    for block in design.blocks:
        edf[block.label] = float(diag[block.cols].sum())
    return edf, float(diag.sum()), xtwx


def fit_pirls(design: DesignSpec | PreparedDesign, y, family: Family,
              lam: float | Mapping[str, float] | str = 0.0,
              groups=None, tol: float = 1e-8, max_iter: int = 200,
              beta0: np.ndarray | None = None) -> FitResult:
    """Fit a penalized GLM; ``lam="select"`` runs the GCV grid search.

    ``groups`` labels independent units (e.g. districts) for the sandwich
    covariance; without them every row is its own unit.
    """
    prepared = design if isinstance(design, PreparedDesign) else build_design(design)
    y = np.asarray(y, dtype=float).ravel()
    if y.size != prepared.n:
        raise ValueError(f"response has {y.size} rows, design has {prepared.n}")
    _validate_response(family, y, prepared.trials)

    if isinstance(lam, str):
        if lam != "select":
            raise ValueError(f"lam must be numeric, a mapping, or 'select'; got {lam!r}")
        lam_map = select_lambda_gcv(prepared, y, family, tol=tol)
    elif isinstance(lam, Mapping):
        lam_map = {b.label: float(lam[b.label]) for b in prepared.blocks}
    else:
        lam_map = {b.label: float(lam) for b in prepared.blocks}

    beta, eta, mu, w, pdev, it, converged, chol, p_total = _pirls_core(
        prepared, y, family, lam_map, tol=tol, max_iter=max_iter, beta0=beta0
    )
    edf, edf_total, xtwx = _edf_pieces(prepared, w, chol, p_total)
    dev = deviance(family, y, mu, prepared.trials)
    n = prepared.n

    if family.kind == "gaussian":
        dispersion = dev / max(n - edf_total, 1.0)
    elif family.kind == "negative_binomial":
        theta = _require_theta(family)
        dispersion = 0.0 if math.isinf(theta) else 1.0 / theta
    else:
        dispersion = 1.0

    scale = dispersion if family.kind == "gaussian" else 1.0
    a_inv = sla.cho_solve(chol, np.eye(prepared.p))
    cov_model = (a_inv + a_inv.T) / 2.0 * scale
    resid = score_residual(family, y, mu, prepared.trials)
    cov_sandwich = _sandwich_from_scores(prepared.matrix, resid, groups, a_inv)

    fit = FitResult(
        names=list(prepared.names), beta=beta, lam=lam_map, edf=edf, edf_total=edf_total,
        deviance=dev, dispersion=dispersion, cov_model=cov_model, cov_sandwich=cov_sandwich,
        converged=converged, iterations=it, family=family, design=prepared,
        y=y, eta=eta, mu=mu,
        diagnostics={"penalized_deviance": pdev, "groups": groups},
    )
    return fit


def _validate_response(family: Family, y: np.ndarray, trials):
    if family.kind in ("poisson", "negative_binomial") and np.any(y < 0):
        raise ValueError("counts must be non-negative")
    if family.kind == "binomial":
        if trials is None:
            raise ValueError("binomial family requires trials in the design")
        if np.any(y < 0) or np.any(y > trials):
            raise ValueError("binomial response must satisfy 0 <= y <= trials")


def _sandwich_from_scores(x: np.ndarray, resid: np.ndarray, groups, a_inv: np.ndarray):
    scores = x * resid[:, None]
    if groups is None:
        grouped = scores
    else:
        codes, _ = _group_codes(groups)
        grouped = np.zeros((codes.max() + 1, x.shape[1]))
        np.add.at(grouped, codes, scores)
    b = grouped.T @ grouped
    v = a_inv @ b @ a_inv
    return (v + v.T) / 2.0


def _group_codes(groups):
    labels = np.asarray(groups, dtype=object).ravel()
    uniq: dict = {}
    for lab in labels:
        uniq.setdefault(lab, len(uniq))
    return np.array([uniq[lab] for lab in labels]), list(uniq)


def sandwich_covariance(fit: FitResult, groups) -> np.ndarray:
    """Recompute A^-1 B A^-1 for a new grouping of independent units."""
    prepared = fit.design
    p_total = prepared.penalty_total(fit.lam)
    w = _irls_weights(fit.family, fit.mu, prepared.trials)
    a = prepared.matrix.T @ (prepared.matrix * w[:, None]) + p_total
    c, low = sla.cho_factor(a)
    a_inv = sla.cho_solve((c, low), np.eye(prepared.p))
    resid = score_residual(fit.family, fit.y, fit.mu, prepared.trials)
    return _sandwich_from_scores(prepared.matrix, resid, groups, a_inv)


def predict(fit: FitResult, newdata: Mapping[str, np.ndarray] | None = None,
            kind: str = "link", offset=None, n_rows: int | None = None) -> np.ndarray:
    """Linear predictor or response-scale prediction, offsets included."""
    if kind not in ("link", "response"):
        raise ValueError("kind must be 'link' or 'response'")
    if newdata is None:
        eta = fit.eta.copy()
        trials = fit.design.trials
    else:
        x_new = fit.design.encode_rows(newdata, n_rows=n_rows)
        eta = x_new @ fit.beta
        off = np.zeros(x_new.shape[0]) if offset is None else np.asarray(offset, dtype=float).ravel()
        eta = eta + off
        trials = newdata.get("__trials__")
        if trials is None and fit.family.kind == "binomial":
            trials = np.ones(x_new.shape[0])
    if kind == "link":
        return eta
    return _mu_from_eta(fit.family, eta, trials)


def penalized_log_likelihood(design: PreparedDesign, y, family: Family,
                             lam: Mapping[str, float], beta: np.ndarray) -> float:
    eta = design.matrix @ beta + design.offset
    mu = _mu_from_eta(family, eta, design.trials)
    pen = design.penalty_total(lam)
    return log_likelihood(family, y, mu, design.trials) - 0.5 * float(beta @ pen @ beta)


def penalized_score(design: PreparedDesign, y, family: Family,
                    lam: Mapping[str, float], beta: np.ndarray) -> np.ndarray:
    eta = design.matrix @ beta + design.offset
    mu = _mu_from_eta(family, eta, design.trials)
    resid = score_residual(family, y, mu, design.trials)
    pen = design.penalty_total(lam)
    return design.matrix.T @ resid - pen @ beta


_GCV_EXPONENTS = np.arange(-4.0, 4.0 + 1e-9, 1.0)


def select_lambda_gcv(design: PreparedDesign, y, family: Family,
                      tol: float = 1e-8) -> dict[str, float]:
    """Coordinate-wise GCV grid search over the penalty blocks.

    One pass over the decade grid 1e-4..1e4 per block, then one refinement
    pass at half-decade spacing around each block's winner.  Ties break to
    the smallest lambda.  GCV(lambda) = n * D / (n - edf_total)^2.
    """
    if not design.blocks:
        return {}
    y = np.asarray(y, dtype=float).ravel()
    current = {b.label: 1.0 for b in design.blocks}
    pilot_beta, *_ = _pirls_core(design, y, family, current, tol=tol)

    def gcv_at(lam_map):
        # pure in lam_map (fixed pilot start), so grid points are exchangeable
        _, _, mu, w, _, _, _, chol, p_total = _pirls_core(
            design, y, family, lam_map, beta0=pilot_beta, tol=tol
        )
        _, edf_total, _ = _edf_pieces(design, w, chol, p_total)
        dev = deviance(family, y, mu, design.trials)
        n = design.n
        denom = max(n - edf_total, 1e-8)
        return n * dev / denom**2

    for exponents in (_GCV_EXPONENTS, None):
        for block in design.blocks:
            if exponents is None:
                center = math.log10(current[block.label])
                grid = [center - 0.5, center, center + 0.5]
            else:
                grid = list(exponents)
            best_lam, best_gcv = None, np.inf
            for e in sorted(grid):
                lam_try = dict(current)
                lam_try[block.label] = 10.0**e
                g = gcv_at(lam_try)
                if best_lam is None or g < best_gcv - 1e-12 * (abs(best_gcv) + 1.0):
                    best_lam, best_gcv = 10.0**e, g
            current[block.label] = best_lam
    return current


def estimate_nb_theta(y, mu) -> tuple[float, bool]:
    """Profile-likelihood theta given fitted means (or a pilot FitResult).

    Returns (theta, poisson_like); theta is capped at 1e7 when the data show
    no overdispersion.
    """
    if isinstance(mu, FitResult):
        mu = mu.mu
    y = np.asarray(y, dtype=float).ravel()
    mu = np.asarray(mu, dtype=float).ravel()

    def neg_ll(log_theta):
        return -nb_log_likelihood(y, mu, math.exp(log_theta))

    lo, hi = math.log(1e-4), math.log(THETA_CAP)
    res = optimize.minimize_scalar(neg_ll, bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-8})
    theta = math.exp(res.x)
    poisson_like = theta >= THETA_CAP * 0.9
    if poisson_like:
        theta = THETA_CAP
    return theta, poisson_like


def fit_negative_binomial(design: DesignSpec | PreparedDesign, y,
                          lam: float | Mapping[str, float] | str = 0.0,
                          groups=None, tol: float = 1e-8,
                          max_rounds: int = 25) -> FitResult:
    """NB fit with theta estimated by alternating profile steps.

    Smoothing parameters are selected (when requested) in the first round
    and held fixed afterwards; theta and beta then alternate to joint
    convergence.
    """
    prepared = design if isinstance(design, PreparedDesign) else build_design(design)
    y = np.asarray(y, dtype=float).ravel()

    pilot = fit_pirls(prepared, y, Family.poisson(), lam=lam, groups=groups, tol=tol)
    lam_fixed = pilot.lam
    mu = pilot.mu
    excess = float(np.sum((y - mu) ** 2 - mu))
    theta = float(np.sum(mu**2) / excess) if excess > 0 else THETA_CAP
    theta = float(np.clip(theta, 1e-3, THETA_CAP))

    fit = pilot
    poisson_like = theta >= THETA_CAP * 0.9
    beta_warm = pilot.beta
    for _ in range(max_rounds):
        theta_new, poisson_like = estimate_nb_theta(y, mu)
        fam = Family.negative_binomial(math.inf if poisson_like else theta_new)
        fit = fit_pirls(prepared, y, fam, lam=lam_fixed, groups=groups, tol=tol,
                        beta0=beta_warm)
        mu = fit.mu
        beta_warm = fit.beta
        if abs(math.log(theta_new) - math.log(theta)) < 1e-4:
            theta = theta_new
            break
        theta = theta_new

    fit.diagnostics["nb_theta"] = theta
    fit.diagnostics["poisson_like"] = bool(poisson_like)
    fit.dispersion = 0.0 if poisson_like else 1.0 / theta
    return fit
