"""First-stage measurement models and factor-score predictors.

Measurement parameters are estimated one latent variable at a time: a
linear-normal one-factor model for continuous indicators, a unidimensional
2PL model for binary items.  The score predictors take the measurement
parameters as plain arrays so they can be evaluated at fixed (not refitted)
values inside the bias-correction loop.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_expit, logsumexp

from .exceptions import BoundaryError, DataError, NumericalError, UnderidentifiedError

VAR_FLOOR = 1e-8
LOGIT_BOUND = 30.0


@dataclass(frozen=True)
class OneFactorLinearFit:
    loadings: np.ndarray
    uniquenesses: np.ndarray
    factor_variance: float
    loglik: float
    converged: bool
    heywood: bool = False
    n_iter: int = 0

    def as_vector(self, include_factor_variance=True):
        parts = [self.loadings, self.uniquenesses]
        if include_factor_variance:
            parts.append([self.factor_variance])
        return np.concatenate(parts)


@dataclass(frozen=True)
class TwoPLFit:
    intercepts: np.ndarray
    slopes: np.ndarray
    loglik: float
    converged: bool
    n_cycles: int = 0
    loglik_history: tuple = ()

    def as_vector(self):
        return np.concatenate([self.intercepts, self.slopes])


@dataclass(frozen=True)
class Quadrature:
    """Equally spaced grid with standard-normal weights summing to one."""

    n_points: int = 61
    lower: float = -6.0
    upper: float = 6.0
    nodes: np.ndarray = field(init=False, repr=False)
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        nodes = np.linspace(self.lower, self.upper, self.n_points)
        w = np.exp(-0.5 * nodes**2)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", w / w.sum())


DEFAULT_QUADRATURE = Quadrature()


@dataclass(frozen=True)
class FactorScores:
    values: np.ndarray
    score_type: str


# -- linear one-factor model ------------------------------------------------

def sample_covariance(Y):
    """Covariance with divisor n (maximum-likelihood convention)."""
    Yc = Y - Y.mean(axis=0)
    return Yc.T @ Yc / Y.shape[0]


def implied_covariance(loadings, uniquenesses, factor_variance):
    lam = np.asarray(loadings, float)
    return factor_variance * np.outer(lam, lam) + np.diag(uniquenesses)


def _unpack(x, p):
    lam = np.concatenate([[1.0], x[: p - 1]])
    return lam, x[p - 1 : 2 * p - 1], x[2 * p - 1]


def f_ml(x, S, logdet_S):
    """ML discrepancy ``log|Sigma| + tr(S Sigma^-1) - log|S| - p``.

    ``x`` holds the free loadings (first loading fixed at 1), the
    uniquenesses and the factor variance.
    """
    p = S.shape[0]
    lam, psi, phi = _unpack(x, p)
    Sigma = phi * np.outer(lam, lam) + np.diag(psi)
    sign, logdet = np.linalg.slogdet(Sigma)
    if sign <= 0:
        return np.inf
    return logdet + np.trace(np.linalg.solve(Sigma, S)) - logdet_S - p


def f_ml_grad(x, S, logdet_S=None):
    p = S.shape[0]
    lam, psi, phi = _unpack(x, p)
    Sigma = phi * np.outer(lam, lam) + np.diag(psi)
    Si = np.linalg.inv(Sigma)
    G = Si - Si @ S @ Si
    Glam = G @ lam
    return np.concatenate([2.0 * phi * Glam[1:], np.diag(G), [lam @ Glam]])


def _projected_grad_norm(x, g, p):
    pg = g.copy()
    # variance parameters sitting at the floor with a gradient pushing them down
    at_floor = np.zeros_like(x, dtype=bool)
    at_floor[p - 1 :] = x[p - 1 :] <= VAR_FLOOR * (1 + 1e-9)
    pg[at_floor & (g > 0)] = 0.0
    return np.max(np.abs(pg))


def _fisher_scoring(x, S, logdet_S, tol, max_iter):
    p = S.shape[0]
    k = x.size
    f = f_ml(x, S, logdet_S)
    dS = np.zeros((k, p, p))
    for it in range(1, max_iter + 1):
        lam, psi, phi = _unpack(x, p)
        Sigma = phi * np.outer(lam, lam) + np.diag(psi)
        Si = np.linalg.inv(Sigma)
        G = Si - Si @ S @ Si
        Glam = G @ lam
        g = np.concatenate([2.0 * phi * Glam[1:], np.diag(G), [lam @ Glam]])
        if _projected_grad_norm(x, g, p) < tol:
            return x, f, True, it
        # derivatives of Sigma with respect to each free parameter
        dS[:] = 0.0
        for j in range(1, p):
            col = np.zeros(p)
            col[j] = 1.0
            dS[j - 1] = phi * (np.outer(col, lam) + np.outer(lam, col))
        for j in range(p):
            dS[p - 1 + j, j, j] = 1.0
        dS[2 * p - 1] = np.outer(lam, lam)
        A = np.einsum("aij,jk->aik", dS, Si)
        H = np.einsum("aij,bji->ab", A, A)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            return x, f, False, it
        t = 1.0
        while True:
            x_new = x - t * step
            x_new[p - 1 :] = np.maximum(x_new[p - 1 :], VAR_FLOOR)
            f_new = f_ml(x_new, S, logdet_S)
            if f_new <= f + 1e-14 or t < 1e-8:
                break
            t *= 0.5
        if t < 1e-8 and f_new > f + 1e-14:
            return x, f, False, it
        x, f = x_new, f_new
    return x, f, False, max_iter


def _quasi_newton(x0, S, logdet_S, tol):
    p = S.shape[0]
    bounds = [(None, None)] * (p - 1) + [(VAR_FLOOR, None)] * (p + 1)
    res = minimize(
        f_ml,
        x0,
        args=(S, logdet_S),
        jac=f_ml_grad,
        method="L-BFGS-B",
        bounds=bounds,
        options={"gtol": tol * 1e-2, "ftol": 1e-15, "maxiter": 5000},
    )
    g = f_ml_grad(res.x, S)
    return res.x, res.fun, _projected_grad_norm(res.x, g, p) < tol


def fit_onefactor_linear(Y_block, tol=1e-6, max_iter=200) -> OneFactorLinearFit:
    """Maximum-likelihood one-factor model, first loading fixed at one.

    Minimises the ML discrepancy by Fisher scoring with step halving; if that
    stalls, falls back to bounded quasi-Newton (L-BFGS-B) from where it
    stopped.  ``converged`` is set when the projected gradient is below
    ``tol``.
    """
    Y = np.asarray(Y_block, dtype=float)
    n, p = Y.shape
    if p < 3:
        raise UnderidentifiedError(
            f"one-factor model needs at least 3 indicators, got {p}"
        )
    S = sample_covariance(Y)
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise DataError("sample covariance matrix is not positive definite") from exc
    logdet_S = np.linalg.slogdet(S)[1]
    x0 = np.concatenate([np.ones(p - 1), 0.5 * np.diag(S), [0.5 * S[0, 0]]])
    x, f, converged, n_iter = _fisher_scoring(x0, S, logdet_S, tol, max_iter)
    if not converged:
        x, f, converged = _quasi_newton(x, S, logdet_S, tol)
    lam, psi, phi = _unpack(x, p)
    heywood = bool(np.any(psi <= VAR_FLOOR * (1 + 1e-9)))
    if heywood:
        warnings.warn("uniqueness estimate hit the lower bound (Heywood case)")
    loglik = -0.5 * n * (f + logdet_S + p + p * np.log(2 * np.pi))
    return OneFactorLinearFit(
        loadings=lam.copy(),
        uniquenesses=psi.copy(),
        factor_variance=float(phi),
        loglik=float(loglik),
        converged=bool(converged),
        heywood=heywood,
        n_iter=n_iter,
    )


def onefactor_loglik(Y_block, loadings, uniquenesses, factor_variance):
    Y = np.asarray(Y_block, dtype=float)
    n, p = Y.shape
    S = sample_covariance(Y)
    Sigma = implied_covariance(loadings, uniquenesses, factor_variance)
    sign, logdet = np.linalg.slogdet(Sigma)
    if sign <= 0:
        return -np.inf
    return -0.5 * n * (logdet + np.trace(np.linalg.solve(Sigma, S)) + p * np.log(2 * np.pi))


# -- linear scores ----------------------------------------------------------

def bartlett_weights(loadings, uniquenesses):
    """Weights ``w`` with ``w' lambda = 1`` minimising error variance."""
    lam = np.asarray(loadings, float)
    a = lam / np.asarray(uniquenesses, float)
    c = lam @ a
    if not c > 0 or not np.isfinite(c):
        raise NumericalError("lambda' Psi^-1 lambda is singular", {"c": c})
    return a / c


def score_mean(Y_block):
    return np.asarray(Y_block, float).mean(axis=1)


def score_bartlett(Y_block, loadings, uniquenesses):
    Y = np.asarray(Y_block, float)
    return (Y - Y.mean(axis=0)) @ bartlett_weights(loadings, uniquenesses)


def score_error_variance(loadings, uniquenesses):
    """Error variance ``(lambda' Psi^-1 lambda)^-1`` of Bartlett scores."""
    lam = np.asarray(loadings, float)
    return 1.0 / (lam @ (lam / np.asarray(uniquenesses, float)))


def score_regression(Y_block, loadings, uniquenesses, factor_variance):
    """``phi lambda' Sigma^-1 (y - mu)``, computed as a shrunken Bartlett score."""
    err = score_error_variance(loadings, uniquenesses)
    shrink = factor_variance / (factor_variance + err)
    return shrink * score_bartlett(Y_block, loadings, uniquenesses)


def factor_variance_given(Y_block, loadings, uniquenesses):
    """ML estimate of the factor variance with loadings and uniquenesses held fixed.

    Setting the derivative of the ML discrepancy in the factor variance to
    zero gives ``Var(Bartlett score) - (lambda' Psi^-1 lambda)^-1`` in closed
    form; at a full ML solution it reproduces the fitted factor variance.
    """
    sB = score_bartlett(Y_block, loadings, uniquenesses)
    return max(float(sB @ sB / sB.size) - score_error_variance(loadings, uniquenesses), VAR_FLOOR)


def mean_score_reliability(loadings, uniquenesses, factor_variance):
    lam = np.asarray(loadings, float)
    true_var = factor_variance * lam.sum() ** 2
    return true_var / (true_var + np.sum(uniquenesses))


def bartlett_reliability(loadings, uniquenesses, factor_variance):
    err = score_error_variance(loadings, uniquenesses)
    return factor_variance / (factor_variance + err)


# the regression score is a rescaled Bartlett score: same squared correlation with the LV
regression_reliability = bartlett_reliability


# -- 2PL model ---------------------------------------------------------------

def _check_binary(Y):
    if not np.isin(Y, (0.0, 1.0)).all():
        raise DataError("2PL items must be coded 0/1")
    means = Y.mean(axis=0)
    for j, m in enumerate(means):
        if m == 0.0 or m == 1.0:
            raise BoundaryError(f"item {j} shows a single response category")


def _pattern_loglik(Yp, alpha, gamma, nodes):
    lin = alpha[:, None] + gamma[:, None] * nodes[None, :]
    return Yp @ log_expit(lin) + (1.0 - Yp) @ log_expit(-lin)


def _m_step(alpha, gamma, r, nk, nodes, max_newton=50):
    """Per-item weighted logistic regressions on the grid, solved by Newton."""
    X1 = nodes

    def objective(a, g):
        lin = a[:, None] + g[:, None] * X1[None, :]
        return np.sum(r * log_expit(lin) + (nk[None, :] - r) * log_expit(-lin), axis=1)

    obj = objective(alpha, gamma)
    for _ in range(max_newton):
        lin = alpha[:, None] + gamma[:, None] * X1[None, :]
        P = expit(lin)
        resid = r - nk[None, :] * P
        ga = resid.sum(axis=1)
        gg = resid @ X1
        W = nk[None, :] * P * (1.0 - P)
        haa = W.sum(axis=1)
        hag = W @ X1
        hgg = W @ (X1 * X1)
        det = haa * hgg - hag * hag
        det = np.where(det > 1e-300, det, 1e-300)
        da = (hgg * ga - hag * gg) / det
        dg = (haa * gg - hag * ga) / det
        t = np.ones_like(alpha)
        for _ in range(30):
            a_new = np.clip(alpha + t * da, -LOGIT_BOUND, LOGIT_BOUND)
            g_new = np.clip(gamma + t * dg, -LOGIT_BOUND, LOGIT_BOUND)
            new = objective(a_new, g_new)
            bad = new < obj - 1e-12 * np.abs(obj)
            if not bad.any():
                break
            t = np.where(bad, t * 0.5, t)
        step = np.maximum(np.abs(a_new - alpha), np.abs(g_new - gamma))
        alpha, gamma, obj = a_new, g_new, np.maximum(new, obj)
        if step.max() < 1e-10:
            break
    return alpha, gamma


def fit_2pl(Y_block, quad: Quadrature = DEFAULT_QUADRATURE, tol=1e-5, max_cycles=500) -> TwoPLFit:
    """Marginal ML for a unidimensional 2PL model (LV ~ N(0, 1)) by EM.

    The E-step computes posterior weights on the quadrature grid for each
    distinct response pattern; the M-step solves one weighted logistic
    regression per item.  Stops when the largest parameter change drops
    below ``tol`` or after ``max_cycles`` cycles.
    """
    Y = np.asarray(Y_block, dtype=float)
    _check_binary(Y)
    Yp, counts = np.unique(Y, axis=0, return_counts=True)
    counts = counts.astype(float)
    nodes, logw = quad.nodes, np.log(quad.weights)
    pbar = np.clip(Y.mean(axis=0), 1e-3, 1 - 1e-3)
    alpha = np.log(pbar / (1 - pbar)) * 1.7
    gamma = np.ones(Y.shape[1])
    history = []
    converged = False
    cycles = 0
    for cycles in range(1, max_cycles + 1):
        L = _pattern_loglik(Yp, alpha, gamma, nodes) + logw[None, :]
        marg = logsumexp(L, axis=1)
        history.append(float(counts @ marg))
        post = np.exp(L - marg[:, None]) * counts[:, None]
        nk = post.sum(axis=0)
        r = Yp.T @ post
        a_new, g_new = _m_step(alpha, gamma, r, nk, nodes)
        change = max(np.max(np.abs(a_new - alpha)), np.max(np.abs(g_new - gamma)))
        alpha, gamma = a_new, g_new
        if change < tol:
            converged = True
            break
    L = _pattern_loglik(Yp, alpha, gamma, nodes) + logw[None, :]
    loglik = float(counts @ logsumexp(L, axis=1))
    history.append(loglik)
    return TwoPLFit(
        intercepts=alpha,
        slopes=gamma,
        loglik=loglik,
        converged=converged,
        n_cycles=cycles,
        loglik_history=tuple(history),
    )


def twopl_loglik(Y_block, intercepts, slopes, quad: Quadrature = DEFAULT_QUADRATURE):
    Y = np.asarray(Y_block, float)
    L = _pattern_loglik(Y, np.asarray(intercepts, float), np.asarray(slopes, float), quad.nodes)
    return float(logsumexp(L + np.log(quad.weights)[None, :], axis=1).sum())


def score_eap(Y_block, intercepts, slopes, quad: Quadrature = DEFAULT_QUADRATURE):
    """Posterior mean of the LV under a N(0, 1) prior, evaluated on the grid."""
    Y = np.asarray(Y_block, float)
    L = _pattern_loglik(Y, np.asarray(intercepts, float), np.asarray(slopes, float), quad.nodes)
    L += np.log(quad.weights)[None, :]
    L -= L.max(axis=1, keepdims=True)
    post = np.exp(L)
    return (post @ quad.nodes) / post.sum(axis=1)
