"""Second-stage estimation: regressions and correlations on factor scores.

``initial_estimator`` is the naive factor-score-regression estimator
``phi_hat(y; nu)``.  It scores every block from the measurement parameters it
is given (no refitting), so it can be evaluated cheaply at perturbed or fixed
nuisance values.  Its output order is: score correlations (row-major lower
triangle), regression slopes, then the residual variance when estimated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import measurement as ms
from .dga import STUDY_P, Dataset
from .exceptions import DataError, NumericalError, StructuralError

SCORE_TYPES = {"M": "mean", "B": "bartlett", "R": "regression", "E": "eap"}
VALID_SCORES = {1: ("MM", "BB", "RR", "BR"), 2: ("MM", "BB", "RR"), 3: ("EAP",)}
DEFAULT_SCORES = {1: "BB", 2: "BB", 3: "EAP"}


@dataclass(frozen=True)
class MeasurementBlock:
    """Item columns of one LV and where its parameters sit in ``nu``."""

    items: tuple
    nu_start: int
    kind: str  # "linear" or "2pl"
    has_factor_variance: bool = False

    @property
    def n_params(self):
        p = len(self.items)
        if self.kind == "2pl":
            return 2 * p
        return 2 * p + int(self.has_factor_variance)


def _linear_blocks(n_lv, p_each=5):
    blocks, start = [], 0
    for b in range(n_lv):
        predictor = b < n_lv - 1
        blk = MeasurementBlock(tuple(range(b * p_each, (b + 1) * p_each)), start, "linear", predictor)
        blocks.append(blk)
        start += blk.n_params
    return tuple(blocks)


STUDY_BLOCKS = {
    1: _linear_blocks(2),
    2: _linear_blocks(3),
    3: tuple(MeasurementBlock(tuple(range(8 * b, 8 * b + 8)), 16 * b, "2pl") for b in range(5)),
}


@dataclass(frozen=True)
class StructuralSpec:
    """What the second stage computes for one study.

    ``block_scores`` holds one score type per LV (outcome last); ``terms``
    are regressor descriptors: ``(i,)`` for LV ``i`` or ``(i, j)`` for the
    product of two score columns.  ``association`` says whether the
    ``correlation_targets`` are filled with sample correlations or sample
    covariances (divisor n - 1) of the score columns.
    """

    study: int
    score_choice: str
    block_scores: tuple
    terms: tuple
    outcome: int
    correlation_targets: tuple = ()
    estimate_error_variance: bool = True
    association: str = "correlation"

    @property
    def q1(self):
        return len(self.correlation_targets) + len(self.terms) + int(self.estimate_error_variance)

    @property
    def blocks(self):
        return STUDY_BLOCKS[self.study]


@dataclass(frozen=True)
class InitialEstimate:
    phi_hat: np.ndarray
    residual_variance: Optional[float] = None


def make_spec(study, score_choice=None) -> StructuralSpec:
    """Build the second-stage specification for ``study``.

    For two-letter score codes the first letter applies to the outcome LV and
    the second to the predictor LVs (``BR`` = Bartlett outcome, regression
    predictor).
    """
    if score_choice is None:
        score_choice = DEFAULT_SCORES[study]
    score_choice = score_choice.upper()
    if study not in VALID_SCORES:
        raise StructuralError(f"unknown study {study}")
    if score_choice not in VALID_SCORES[study]:
        raise StructuralError(
            f"score choice {score_choice!r} not available for study {study}; "
            f"use one of {', '.join(VALID_SCORES[study])}"
        )
    if study == 1:
        out, pred = SCORE_TYPES[score_choice[0]], SCORE_TYPES[score_choice[1]]
        return StructuralSpec(1, score_choice, (pred, out), ((0,),), 1)
    if study == 2:
        out, pred = SCORE_TYPES[score_choice[0]], SCORE_TYPES[score_choice[1]]
        return StructuralSpec(
            2,
            score_choice,
            (pred, pred, out),
            ((0,), (1,), (0, 1)),
            2,
            ((1, 0),),
            association="covariance",
        )
    targets = tuple((i, j) for i in range(1, 4) for j in range(i))
    return StructuralSpec(
        3,
        score_choice,
        ("eap",) * 5,
        ((0,), (1,), (2,), (3,)),
        4,
        targets,
        estimate_error_variance=False,
    )


def ols_fit(X, y):
    """Least-squares coefficients and ``RSS / n``.

    ``X`` must already contain the intercept column.
    """
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < X.shape[1]:
        raise NumericalError(
            "design matrix is rank deficient", {"rank": int(rank), "columns": X.shape[1]}
        )
    resid = y - X @ coef
    return coef, float(resid @ resid / y.size)


def regress_scores(scores, spec: StructuralSpec) -> InitialEstimate:
    """Second stage from an ``n x d`` matrix of scores (or true LVs)."""
    S = np.asarray(scores, float)
    n = S.shape[0]
    cols = [np.ones(n)]
    for term in spec.terms:
        col = S[:, term[0]].copy()
        for idx in term[1:]:
            col = col * S[:, idx]
        cols.append(col)
    coef, err_var = ols_fit(np.column_stack(cols), S[:, spec.outcome])
    corrs = []
    if spec.correlation_targets:
        if spec.association == "covariance":
            R = np.cov(S, rowvar=False)
        else:
            R = np.corrcoef(S, rowvar=False)
        corrs = [R[i, j] for i, j in spec.correlation_targets]
    parts = [np.asarray(corrs, float), coef[1:]]
    if spec.estimate_error_variance:
        parts.append([err_var])
    return InitialEstimate(np.concatenate(parts), err_var)


def block_scores(Y, nu, spec: StructuralSpec, quad=ms.DEFAULT_QUADRATURE):
    """Score every LV from the fixed measurement parameters ``nu``."""
    Y = np.asarray(Y.values if isinstance(Y, Dataset) else Y, float)
    nu = np.asarray(nu, float)
    out = np.empty((Y.shape[0], len(spec.blocks)))
    for b, (blk, stype) in enumerate(zip(spec.blocks, spec.block_scores)):
        Yb = Y[:, blk.items[0] : blk.items[-1] + 1]
        p = len(blk.items)
        theta_b = nu[blk.nu_start : blk.nu_start + blk.n_params]
        if blk.kind == "2pl":
            out[:, b] = ms.score_eap(Yb, theta_b[:p], theta_b[p:], quad)
            continue
        lam, psi = theta_b[:p], theta_b[p : 2 * p]
        if stype == "mean":
            out[:, b] = ms.score_mean(Yb)
        elif stype == "bartlett":
            out[:, b] = ms.score_bartlett(Yb, lam, psi)
        elif stype == "regression":
            if blk.has_factor_variance:
                phi = theta_b[2 * p]
            else:
                # outcome LV variance is not a model parameter; profile it out
                phi = ms.factor_variance_given(Yb, lam, psi)
            out[:, b] = ms.score_regression(Yb, lam, psi, phi)
        else:
            raise StructuralError(f"score type {stype!r} invalid for linear blocks")
    return out


def initial_estimator(Y, nu, spec: StructuralSpec) -> InitialEstimate:
    """Naive factor-score-regression estimate ``phi_hat(Y; nu)``."""
    return regress_scores(block_scores(Y, nu, spec), spec)


def nuisance_layout_size(study):
    return sum(b.n_params for b in STUDY_BLOCKS[study])


def nuisance_estimator(Y, spec: StructuralSpec, quad=ms.DEFAULT_QUADRATURE):
    """Fit every measurement block separately and concatenate the estimates."""
    Y = np.asarray(Y.values if isinstance(Y, Dataset) else Y, float)
    if Y.ndim != 2 or Y.shape[1] != STUDY_P[spec.study]:
        raise DataError(f"study {spec.study} expects {STUDY_P[spec.study]} columns")
    parts = []
    for blk in spec.blocks:
        Yb = Y[:, blk.items[0] : blk.items[-1] + 1]
        if blk.kind == "2pl":
            parts.append(ms.fit_2pl(Yb, quad).as_vector())
        else:
            fit = ms.fit_onefactor_linear(Yb)
            parts.append(fit.as_vector(include_factor_variance=blk.has_factor_variance))
    return np.concatenate(parts)
