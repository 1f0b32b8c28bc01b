"""Multinomial logistic regression with a reference category.

The K-1 non-reference logits share one design but carry distinct
coefficients and penalties; fitting is penalized Newton on the full
multinomial likelihood.  Includes the robust sandwich covariance over
independent units and the logarithmic score of predicted occupancies.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import linalg as sla
from scipy import special

from .design import PreparedDesign, diagnose_singular

_SEPARATION_ETA = 30.0


@dataclass
class MultinomialData:
    """Counts (n x K), trials (row sums) and the shared per-logit design."""

    counts: np.ndarray
    design: PreparedDesign
    reference: int
    categories: tuple[str, ...] | None = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=float)
        if self.counts.ndim != 2:
            raise ValueError("counts must be a 2-D array")
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")
        if not (0 <= self.reference < self.counts.shape[1]):
            raise ValueError(f"reference {self.reference} out of range")
        if self.counts.shape[0] != self.design.n:
            raise ValueError("counts and design row counts differ")
        if self.categories is None:
            self.categories = tuple(f"cat{j}" for j in range(self.counts.shape[1]))

    @property
    def trials(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def n_categories(self) -> int:
        return self.counts.shape[1]

    @property
    def free_categories(self) -> list[int]:
        return [j for j in range(self.n_categories) if j != self.reference]


@dataclass
class MultinomialFit:
    data: MultinomialData = field(repr=False)
    beta: np.ndarray
    probs: np.ndarray
    lam: dict[str, float]
    edf: dict[str, float]
    edf_total: float
    deviance: float
    cov_model: np.ndarray
    cov_sandwich: np.ndarray
    converged: bool
    iterations: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def coef_names(self) -> list[str]:
        names = []
        for j in self.data.free_categories:
            cat = self.data.categories[j]
            names.extend(f"{cat}|{n}" for n in self.data.design.names)
        return names

    def coef(self, name: str) -> float:
        return float(self.beta[self.coef_names.index(name)])

    def beta_per_logit(self) -> dict[str, np.ndarray]:
        p = self.data.design.p
        out = {}
        for i, j in enumerate(self.data.free_categories):
            out[self.data.categories[j]] = self.beta[i * p:(i + 1) * p]
        return out

    def to_json(self) -> str:
        """Serialize estimates in the GLM document shape, coefficients
        namespaced per logit ("category|column")."""
        import json

        names = self.coef_names
        payload = {
            "coefficients": {n: float(b) for n, b in zip(names, self.beta)},
            "lambda": {k: float(v) for k, v in self.lam.items()},
            "edf": {k: float(v) for k, v in self.edf.items()},
            "edf_total": float(self.edf_total),
            "deviance": float(self.deviance),
            "dispersion": 1.0,
            "family": {"kind": "multinomial", "link": "logit",
                       "reference": self.data.categories[self.data.reference]},
            "cov_model": self.cov_model.ravel().tolist(),
            "cov_sandwich": self.cov_sandwich.ravel().tolist(),
            "p": len(names),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "diagnostics": {k: v for k, v in self.diagnostics.items()
                            if isinstance(v, (str, int, float, bool))},
        }
        return json.dumps(payload, sort_keys=True)


def _probs_from_beta(data: MultinomialData, beta: np.ndarray, x: np.ndarray | None = None):
    x = data.design.matrix if x is None else x
    n = x.shape[0]
    p = data.design.p
    eta = np.zeros((n, data.n_categories))
    for i, j in enumerate(data.free_categories):
        eta[:, j] = x @ beta[i * p:(i + 1) * p]
    eta_shift = eta - eta.max(axis=1, keepdims=True)
    exped = np.exp(eta_shift)
    probs = exped / exped.sum(axis=1, keepdims=True)
    return probs, eta


def _stacked_penalty(data: MultinomialData, lam: Mapping[str, float]) -> np.ndarray:
    p = data.design.p
    n_free = len(data.free_categories)
    total = np.zeros((n_free * p, n_free * p))
    for i, j in enumerate(data.free_categories):
        cat = data.categories[j]
        for block in data.design.blocks:
            label = f"{cat}|{block.label}"
            sl = slice(i * p + block.start, i * p + block.stop)
            total[sl, sl] += lam[label] * block.matrix
    return total


def block_labels(data: MultinomialData) -> list[str]:
    return [
        f"{data.categories[j]}|{b.label}"
        for j in data.free_categories
        for b in data.design.blocks
    ]


def _loglik(data: MultinomialData, probs: np.ndarray) -> float:
    return float(np.sum(special.xlogy(data.counts, np.clip(probs, 1e-300, None))))


def _saturated_loglik(data: MultinomialData) -> float:
    n_i = data.trials
    with np.errstate(invalid="ignore", divide="ignore"):
        phat = np.where(n_i[:, None] > 0, data.counts / np.where(n_i == 0, 1, n_i)[:, None], 0.0)
    return float(np.sum(special.xlogy(data.counts, np.clip(phat, 1e-300, None))))


def _score_hessian(data: MultinomialData, probs: np.ndarray):
    x = data.design.matrix
    n_i = data.trials
    p = data.design.p
    free = data.free_categories
    n_free = len(free)
    score = np.empty(n_free * p)
    hess = np.empty((n_free * p, n_free * p))
    for i, j in enumerate(free):
        resid = data.counts[:, j] - n_i * probs[:, j]
        score[i * p:(i + 1) * p] = x.T @ resid
        for l, jl in enumerate(free):
            if l < i:
                continue
            wjl = n_i * probs[:, j] * ((1.0 if j == jl else 0.0) - probs[:, jl])
            blockm = x.T @ (x * wjl[:, None])
            hess[i * p:(i + 1) * p, l * p:(l + 1) * p] = blockm
            hess[l * p:(l + 1) * p, i * p:(i + 1) * p] = blockm.T
    return score, hess


def fit_multinomial(data: MultinomialData,
                    lam: float | Mapping[str, float] | str = 0.0,
                    groups=None, tol: float = 1e-10,
                    max_iter: int = 100) -> MultinomialFit:
    """Penalized Newton fit of the multinomial likelihood.

    Fitted probabilities come from the softmax over the K-1 linear
    predictors with zero at the reference category.  Complete separation
    (any |eta| beyond 30) marks the fit non-converged with a diagnostic
    instead of raising.
    """
    labels = block_labels(data)
    if isinstance(lam, str):
        if lam != "select":
            raise ValueError(f"lam must be numeric, a mapping, or 'select'; got {lam!r}")
        lam_map = _select_lambda_multinomial(data, tol)
    elif isinstance(lam, Mapping):
        lam_map = {lab: float(lam[lab]) for lab in labels}
    else:
        lam_map = {lab: float(lam) for lab in labels}

    if np.any(data.counts.sum(axis=0) == 0):
        warnings.warn("a category has zero total count; its logit is unidentified", stacklevel=2)

    beta, probs, pnll, it, converged, chol = _newton_core(data, lam_map, tol, max_iter)
    separated = bool(np.any(np.abs(_probs_from_beta(data, beta)[1]) > _SEPARATION_ETA))
    if separated:
        converged = False

    pen_total = _stacked_penalty(data, lam_map)
    _, hess0 = _score_hessian(data, probs)
    a = hess0 + pen_total
    a_inv = sla.cho_solve(chol, np.eye(a.shape[0]))
    cov_model = (a_inv + a_inv.T) / 2.0
    cov_sandwich = multinomial_sandwich_raw(data, probs, groups, a_inv)

    m = a_inv @ hess0
    diag = np.diag(m)
    p = data.design.p
    edf = {}
    for i, j in enumerate(data.free_categories):
        cat = data.categories[j]
        for block in data.design.blocks:
            lab = f"{cat}|{block.label}"
            edf[lab] = float(diag[i * p + block.start:i * p + block.stop].sum())
    dev = 2.0 * (_saturated_loglik(data) - _loglik(data, probs))

    return MultinomialFit(
        data=data, beta=beta, probs=probs, lam=lam_map, edf=edf,
        edf_total=float(diag.sum()), deviance=dev, cov_model=cov_model,
        cov_sandwich=cov_sandwich, converged=converged, iterations=it,
        diagnostics={"separation": separated, "penalized_negloglik": pnll},
    )


def _newton_core(data: MultinomialData, lam_map, tol, max_iter, beta0=None):
    p = data.design.p
    n_free = len(data.free_categories)
    pen_total = _stacked_penalty(data, lam_map)
    beta = np.zeros(n_free * p) if beta0 is None else beta0.copy()
    if beta0 is None and data.design.intercept:
        # start intercepts at pooled log odds vs the reference
        totals = data.counts.sum(axis=0) + 0.5
        ref_total = totals[data.reference]
        for i, j in enumerate(data.free_categories):
            beta[i * p] = math.log(totals[j] / ref_total)

    probs, _ = _probs_from_beta(data, beta)
    pnll = -_loglik(data, probs) + 0.5 * float(beta @ pen_total @ beta)
    converged = False
    chol = None
    it = 0
    for it in range(1, max_iter + 1):
        score, hess = _score_hessian(data, probs)
        score_pen = score - pen_total @ beta
        a = hess + pen_total
        try:
            chol = sla.cho_factor(a)
        except np.linalg.LinAlgError:
            raise diagnose_singular(data.design, _fold_block_diag(a, n_free, p)) from None
        if (np.diag(chol[0]) ** 2).min() < 1e-10 * max(np.diag(a).max(), 1e-300):
            raise diagnose_singular(data.design, _fold_block_diag(a, n_free, p))
        direction = sla.cho_solve(chol, score_pen)
        step = 1.0
        for _ in range(40):
            cand = beta + step * direction
            probs_c, _ = _probs_from_beta(data, cand)
            pnll_c = -_loglik(data, probs_c) + 0.5 * float(cand @ pen_total @ cand)
            if np.isfinite(pnll_c) and pnll_c <= pnll + 1e-12 * (abs(pnll) + 1.0):
                break
            step /= 2.0
        beta, probs = cand, probs_c
        if abs(pnll - pnll_c) < tol * (abs(pnll_c) + 0.1):
            pnll = pnll_c
            converged = True
            break
        pnll = pnll_c
    return beta, probs, pnll, it, converged, chol


def _fold_block_diag(a: np.ndarray, n_free: int, p: int) -> np.ndarray:
    # map the stacked system onto one logit's columns for diagnosis
    folded = np.zeros((p, p))
    for i in range(n_free):
        folded += a[i * p:(i + 1) * p, i * p:(i + 1) * p]
    return folded


def _select_lambda_multinomial(data: MultinomialData, tol: float) -> dict[str, float]:
    """Coordinate-wise GCV over the per-logit penalty blocks."""
    labels = block_labels(data)
    if not labels:
        return {}
    current = {lab: 1.0 for lab in labels}
    exponents = np.arange(-4.0, 4.0 + 1e-9, 1.0)
    n = data.design.n

    def gcv_at(lam_map):
        beta, probs, _, _, _, chol = _newton_core(data, lam_map, tol, 100)
        _, hess0 = _score_hessian(data, probs)
        edf_total = float(np.trace(sla.cho_solve(chol, hess0)))
        dev = 2.0 * (_saturated_loglik(data) - _loglik(data, probs))
        denom = max(n - edf_total, 1e-8)
        return n * dev / denom**2

    for grid_pass in (list(exponents), None):
        for lab in labels:
            if grid_pass is None:
                center = math.log10(current[lab])
                grid = [center - 0.5, center, center + 0.5]
            else:
                grid = grid_pass
            best_lam, best_gcv = None, np.inf
            for e in sorted(grid):
                lam_try = dict(current)
                lam_try[lab] = 10.0**e
                g = gcv_at(lam_try)
                if best_lam is None or g < best_gcv - 1e-12 * (abs(best_gcv) + 1.0):
                    best_lam, best_gcv = 10.0**e, g
            current[lab] = best_lam
    return current


def multinomial_sandwich_raw(data: MultinomialData, probs: np.ndarray, groups,
                             a_inv: np.ndarray) -> np.ndarray:
    x = data.design.matrix
    n_i = data.trials
    p = data.design.p
    scores = np.concatenate(
        [x * (data.counts[:, j] - n_i * probs[:, j])[:, None] for j in data.free_categories],
        axis=1,
    )
    if groups is None:
        grouped = scores
    else:
        labels = np.asarray(groups, dtype=object).ravel()
        uniq: dict = {}
        for lab in labels:
            uniq.setdefault(lab, len(uniq))
        codes = np.array([uniq[lab] for lab in labels])
        grouped = np.zeros((len(uniq), scores.shape[1]))
        np.add.at(grouped, codes, scores)
    b = grouped.T @ grouped
    v = a_inv @ b @ a_inv
    return (v + v.T) / 2.0


def multinomial_sandwich(fit: MultinomialFit, groups) -> np.ndarray:
    """A^-1 B A^-1 with per-unit score outer products, units from ``groups``."""
    pen_total = _stacked_penalty(fit.data, fit.lam)
    _, hess0 = _score_hessian(fit.data, fit.probs)
    a = hess0 + pen_total
    chol = sla.cho_factor(a)
    a_inv = sla.cho_solve(chol, np.eye(a.shape[0]))
    return multinomial_sandwich_raw(fit.data, fit.probs, groups, a_inv)


def predict_probs(fit: MultinomialFit, newdata: Mapping[str, np.ndarray],
                  n_rows: int | None = None) -> np.ndarray:
    x_new = fit.data.design.encode_rows(newdata, n_rows=n_rows)
    probs, _ = _probs_from_beta(fit.data, fit.beta, x=x_new)
    return probs


def multinomial_score(data_or_probs, beta: np.ndarray | None = None,
                      counts: np.ndarray | None = None) -> np.ndarray:
    """Unpenalized score of the multinomial log likelihood (for gradient checks)."""
    data = data_or_probs
    probs, _ = _probs_from_beta(data, beta)
    score, _ = _score_hessian(data, probs)
    return score


def multinomial_log_likelihood(data: MultinomialData, beta: np.ndarray) -> float:
    probs, _ = _probs_from_beta(data, beta)
    return _loglik(data, probs)


def log_score(probs: np.ndarray, counts: np.ndarray, trials: np.ndarray | None = None) -> np.ndarray:
    """Negative log multinomial pmf per row, coefficient included; lower is better.

    Rows where a zero predicted probability meets a positive count score
    +inf (with a warning).
    """
    probs = np.asarray(probs, dtype=float)
    counts = np.asarray(counts, dtype=float)
    n_i = counts.sum(axis=1) if trials is None else np.asarray(trials, dtype=float)
    if not np.allclose(counts.sum(axis=1), n_i):
        raise ValueError("trials must equal the row sums of counts")
    coef = special.gammaln(n_i + 1) - special.gammaln(counts + 1).sum(axis=1)
    impossible = (probs <= 0) & (counts > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        kernel = special.xlogy(counts, probs).sum(axis=1)
    scores = -(coef + kernel)
    if np.any(impossible):
        warnings.warn("impossible event under predicted probabilities; score is +inf",
                      stacklevel=2)
        scores = np.where(impossible.any(axis=1), np.inf, scores)
    return scores


def permutation_test(scores_full, scores_alt, n_perm: int = 9999,
                     seed: int = 0) -> dict:
    """Paired sign-flip permutation test on weekly score differences.

    The statistic is mean(d) with d = alt - full.  When 2^len(d) fits in
    the permutation budget the null is enumerated exhaustively; otherwise
    n_perm random sign flips plus the observed statistic form the null.
    Two-sided p; all-zero d returns p = 1 flagged degenerate.
    """
    d = np.asarray(scores_alt, dtype=float) - np.asarray(scores_full, dtype=float)
    if d.size < 2:
        raise ValueError("need at least two paired scores")
    stat = float(d.mean())
    if np.all(d == 0):
        return {"p_value": 1.0, "statistic": 0.0, "degenerate": True, "exhaustive": True}
    n = d.size
    tol = 1e-12 * (abs(stat) + 1.0)
    if 2**n <= n_perm + 1:
        signs = ((np.arange(2**n)[:, None] >> np.arange(n)) & 1) * 2 - 1
        null = (signs * d).mean(axis=1)
        p = float(np.mean(np.abs(null) >= abs(stat) - tol))
        return {"p_value": p, "statistic": stat, "degenerate": False, "exhaustive": True}
    from .rng import substream

    rng = substream(seed, "permutation-test")
    signs = rng.integers(0, 2, size=(n_perm, n)) * 2 - 1
    null = (signs * d).mean(axis=1)
    exceed = int(np.sum(np.abs(null) >= abs(stat) - tol))
    p = (1 + exceed) / (n_perm + 1)
    return {"p_value": float(p), "statistic": stat, "degenerate": False, "exhaustive": False}
