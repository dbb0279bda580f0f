"""Data-generating algorithms for the three latent regression models.

Each generator is a pure map ``g(U, theta)`` from a matrix of primitive
random variates and a parameter vector (canonical order, see
:data:`STUDY_NAMES`) to a dataset.  Keeping ``U`` explicit is what makes
common random numbers possible in the covariance approximation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logit

from .exceptions import DataError, DomainError
from .params import ParameterPartition, ParameterVector, corr_from_lower, equicorrelation

NORMAL = "std_normal"
UNIFORM = "uniform01"

# stream tags used as the third element of hierarchical stream keys
STREAM_DATA = 0
STREAM_RM = 1
STREAM_ACM = 2
STREAM_SIGN = 3
STREAM_BOOT = 4


@dataclass(frozen=True)
class RandomComponentLayout:
    """Marginal distribution and role of every random-component column."""

    columns: tuple

    @property
    def m(self):
        return len(self.columns)

    @property
    def normal_cols(self):
        return [j for j, (marg, _) in enumerate(self.columns) if marg == NORMAL]

    @property
    def uniform_cols(self):
        return [j for j, (marg, _) in enumerate(self.columns) if marg == UNIFORM]


@dataclass(frozen=True)
class RandomComponents:
    values: np.ndarray
    layout: RandomComponentLayout
    seed_tag: int

    @property
    def n(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class Dataset:
    values: np.ndarray
    kind: str
    study: int

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def p(self):
        return self.values.shape[1]

    @property
    def names(self):
        return [f"y{j + 1}" for j in range(self.p)]


def _layout(spec):
    cols = []
    for marg, role, count in spec:
        cols.extend((marg, f"{role}{k + 1}") for k in range(count))
    return RandomComponentLayout(tuple(cols))


STUDY_LAYOUTS = {
    1: _layout([(NORMAL, "latent", 2), (NORMAL, "unique", 10)]),
    2: _layout([(NORMAL, "latent", 3), (NORMAL, "unique", 15)]),
    3: _layout([(NORMAL, "latent", 5), (UNIFORM, "response", 40)]),
}
STUDY_P = {1: 10, 2: 15, 3: 40}


def _stream_key(stream):
    if isinstance(stream, (int, np.integer)):
        return (int(stream),)
    return tuple(int(s) for s in stream)


def rng_for(seed, stream):
    """Philox generator keyed by ``(seed, stream)``.

    Philox is counter based, so every (seed, stream) pair addresses its own
    independent sequence and results do not depend on scheduling order.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_stream_key(stream))
    return np.random.Generator(np.random.Philox(ss)), ss


def draw_components(n, layout: RandomComponentLayout, seed, stream=0) -> RandomComponents:
    """Draw an ``n x m`` matrix of primitive variates for ``layout``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    gen, ss = rng_for(seed, stream)
    values = np.empty((n, layout.m))
    ncols = layout.normal_cols
    ucols = layout.uniform_cols
    if ncols:
        values[:, ncols] = gen.standard_normal((n, len(ncols)))
    if ucols:
        # 53-bit grid shifted by half a step: strictly inside (0, 1)
        raw = gen.integers(0, 2**53, size=(n, len(ucols)), dtype=np.int64)
        values[:, ucols] = (raw + 0.5) / 2.0**53
    seed_tag = int(ss.generate_state(1, dtype=np.uint64)[0])
    return RandomComponents(values, layout, seed_tag)


def _values(theta):
    if isinstance(theta, ParameterVector):
        return theta.values
    return np.asarray(theta, dtype=float)


def _check_layout(U, study):
    if U.values.shape[1] != STUDY_LAYOUTS[study].m:
        raise DomainError(
            f"study {study} expects {STUDY_LAYOUTS[study].m} random columns, "
            f"got {U.values.shape[1]}"
        )


def _sqrt_var(x, name):
    if not x >= 0:
        raise DomainError(f"{name} must be non-negative, got {x}")
    return np.sqrt(x)


def _linear_items(eta, lam, sig2, Ue):
    if np.any(~(sig2 >= 0)):
        raise DomainError("unique variances must be non-negative")
    return eta[:, None] * lam[None, :] + Ue * np.sqrt(sig2)[None, :]


# -- parameter naming -------------------------------------------------------

def _linear_block_names(items, factor_var=None):
    names = [f"lambda{j}" for j in items] + [f"sigma2_{j}" for j in items]
    if factor_var:
        names.append(factor_var)
    return names


STUDY_NAMES = {
    1: (
        _linear_block_names(range(1, 6), "phi")
        + _linear_block_names(range(6, 11))
        + ["beta", "psi"]
    ),
    2: (
        _linear_block_names(range(1, 6), "phi11")
        + _linear_block_names(range(6, 11), "phi22")
        + _linear_block_names(range(11, 16))
        + ["phi21", "beta1", "beta2", "beta3", "psi"]
    ),
    3: (
        [
            name
            for b in range(5)
            for name in (
                [f"alpha{8 * b + k + 1}" for k in range(8)]
                + [f"gamma{8 * b + k + 1}" for k in range(8)]
            )
        ]
        + ["phi21", "phi31", "phi32", "phi41", "phi42", "phi43"]
        + ["beta1", "beta2", "beta3", "beta4"]
    ),
}

STUDY_PARTITIONS = {
    1: ParameterPartition(
        range(21), range(21, 23), (tuple(range(0, 11)), tuple(range(11, 21)))
    ),
    2: ParameterPartition(
        range(32),
        range(32, 37),
        (tuple(range(0, 11)), tuple(range(11, 22)), tuple(range(22, 32))),
    ),
    3: ParameterPartition(
        range(80), range(80, 90), tuple(tuple(range(16 * b, 16 * b + 16)) for b in range(5))
    ),
}


def communality_to_unique(rho2):
    """Unique variance giving communality ``rho2`` when loading and LV variance are 1."""
    rho2 = np.asarray(rho2, dtype=float)
    return (1.0 - rho2) / rho2


STUDY1_COMMUNALITIES = (0.7, 0.6, 0.5, 0.4, 0.3)
STUDY3_SLOPES = (1.0, 1.25, 1.5, 1.75, 1.0, 1.25, 1.5, 1.75)
STUDY3_DIFFICULTIES = tuple(np.arange(-1.75, 1.76, 0.5).round(2))


def study_truth(study) -> ParameterVector:
    """True parameter values of a study in canonical order."""
    if study == 1:
        lam = [1.0] * 5
        sig2 = communality_to_unique(STUDY1_COMMUNALITIES).tolist()
        values = lam + sig2 + [1.0] + lam + sig2 + [0.6, 0.64]
    elif study == 2:
        lam = [1.0, 0.8, 0.8, 0.8, 0.8]
        sig2 = [0.44, 0.66, 0.88, 1.1, 1.32]
        values = lam + sig2 + [1.0] + lam + sig2 + [1.0] + lam + sig2
        values += [0.3, 0.4, 0.4, 0.2, 0.54]
    elif study == 3:
        gamma = np.array(STUDY3_SLOPES)
        alpha = -gamma * np.array(STUDY3_DIFFICULTIES)
        values = []
        for _ in range(5):
            values += alpha.tolist() + gamma.tolist()
        values += [0.3] * 6 + [0.1, 0.2, 0.3, 0.4]
    else:
        raise ValueError(f"unknown study {study}")
    return ParameterVector(values, STUDY_NAMES[study])


def study3_psi(theta):
    """Residual variance implied by standardising the outcome LV."""
    theta = _values(theta)
    Phi = corr_from_lower(theta[80:86], 4)
    beta = theta[86:90]
    return 1.0 - beta @ Phi @ beta


# -- generators -------------------------------------------------------------

def dga_study1(U: RandomComponents, theta, return_latent=False):
    """Simple latent regression, five continuous indicators per LV."""
    _check_layout(U, 1)
    t = _values(theta)
    u = U.values
    eta1 = _sqrt_var(t[10], "phi") * u[:, 0]
    eta2 = t[21] * eta1 + _sqrt_var(t[22], "psi") * u[:, 1]
    Y = np.empty((u.shape[0], 10))
    Y[:, :5] = _linear_items(eta1, t[0:5], t[5:10], u[:, 2:7])
    Y[:, 5:] = _linear_items(eta2, t[11:16], t[16:21], u[:, 7:12])
    data = Dataset(Y, "continuous", 1)
    if return_latent:
        return data, np.column_stack([eta1, eta2])
    return data


def dga_study2(U: RandomComponents, theta, return_latent=False):
    """Latent moderation: the outcome depends on a product of two LVs."""
    _check_layout(U, 2)
    t = _values(theta)
    u = U.values
    phi11, phi22, phi21 = t[10], t[21], t[32]
    if not (phi11 > 0 and phi22 > 0):
        raise DomainError("predictor and moderator variances must be positive")
    resid = phi22 * phi11 - phi21 * phi21
    if not resid >= 0:
        raise DomainError(f"latent covariance matrix not PSD (phi21={phi21})")
    # explicit 2x2 lower Cholesky factor of [[phi11, phi21], [phi21, phi22]]
    s1 = np.sqrt(phi11)
    eta1 = s1 * u[:, 0]
    eta2 = (phi21 / s1) * u[:, 0] + np.sqrt(resid / phi11) * u[:, 1]
    b1, b2, b3 = t[33:36]
    eta3 = b1 * eta1 + b2 * eta2 + b3 * eta1 * eta2 + _sqrt_var(t[36], "psi") * u[:, 2]
    Y = np.empty((u.shape[0], 15))
    Y[:, 0:5] = _linear_items(eta1, t[0:5], t[5:10], u[:, 3:8])
    Y[:, 5:10] = _linear_items(eta2, t[11:16], t[16:21], u[:, 8:13])
    Y[:, 10:15] = _linear_items(eta3, t[22:27], t[27:32], u[:, 13:18])
    data = Dataset(Y, "continuous", 2)
    if return_latent:
        return data, np.column_stack([eta1, eta2, eta3])
    return data


def dga_study3(U: RandomComponents, theta, return_latent=False):
    """Multiple latent regression measured by 2PL items, eight per LV."""
    _check_layout(U, 3)
    t = _values(theta)
    u = U.values
    Phi = corr_from_lower(t[80:86], 4)
    try:
        L = np.linalg.cholesky(Phi)
    except np.linalg.LinAlgError as exc:
        raise DomainError("predictor correlation matrix is not positive definite") from exc
    beta = t[86:90]
    psi = 1.0 - beta @ Phi @ beta
    eta = np.empty((u.shape[0], 5))
    eta[:, :4] = u[:, :4] @ L.T
    eta[:, 4] = eta[:, :4] @ beta + _sqrt_var(psi, "psi") * u[:, 4]
    alpha = t[:80].reshape(5, 16)[:, :8]
    gamma = t[:80].reshape(5, 16)[:, 8:]
    # item j of block b: Y = 1{logit(U_{j+5}) <= alpha_j + gamma_j eta_b}
    lin = alpha[None, :, :] + gamma[None, :, :] * eta[:, :, None]
    Y = (logit(u[:, 5:]) <= lin.reshape(u.shape[0], 40)).astype(float)
    data = Dataset(Y, "binary", 3)
    if return_latent:
        return data, eta
    return data


DGAS = {1: dga_study1, 2: dga_study2, 3: dga_study3}


# -- IO ---------------------------------------------------------------------

def write_dataset_csv(data: Dataset, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(data.names)
        if data.kind == "binary":
            for row in data.values.astype(int):
                writer.writerow(row.tolist())
        else:
            for row in data.values:
                writer.writerow([repr(float(v)) for v in row])


def read_dataset_csv(path, study, kind=None) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path} is empty")
    try:
        values = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric entry ({exc})") from exc
    if values.ndim != 2 or values.shape[1] != STUDY_P[study]:
        raise DataError(
            f"study {study} expects {STUDY_P[study]} columns, found "
            f"{values.shape[1] if values.ndim == 2 else 0}"
        )
    if kind is None:
        kind = "binary" if study == 3 else "continuous"
    if kind == "binary" and not np.isin(values, (0.0, 1.0)).all():
        raise DataError("binary dataset contains values other than 0/1")
    return Dataset(values, kind, study)
