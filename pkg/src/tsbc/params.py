"""Parameter vectors, nuisance/focal partitions and feasibility projections.

The projections are applied to the focal vector after every stochastic
approximation update so that the data-generating algorithm is always called
with valid parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .exceptions import NumericalError, StructuralError

DEFAULT_FLOOR = 1e-6


@dataclass(frozen=True)
class ParameterVector:
    """Named real parameter vector."""

    values: np.ndarray
    names: tuple

    def __post_init__(self):
        values = np.array(self.values, dtype=float).ravel()
        names = tuple(str(n) for n in self.names)
        if values.size != len(names):
            raise StructuralError(
                f"{values.size} values but {len(names)} names"
            )
        if not np.all(np.isfinite(values)):
            raise StructuralError("parameter values must be finite")
        if len(set(names)) != len(names):
            raise StructuralError("parameter names must be unique")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", names)

    def __len__(self):
        return self.values.size

    def __getitem__(self, name):
        return float(self.values[self.names.index(name)])

    def as_dict(self):
        return dict(zip(self.names, self.values.tolist()))

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        return ParameterVector(self.values[idx], [self.names[i] for i in idx])


@dataclass(frozen=True)
class ParameterPartition:
    """Index sets splitting a parameter vector into nuisance and focal parts.

    ``measurement_blocks`` groups the nuisance indices by latent variable; it
    defaults to a single block holding all of them.
    """

    nuisance_idx: tuple
    focal_idx: tuple
    measurement_blocks: tuple = ()

    def __post_init__(self):
        nu = tuple(int(i) for i in self.nuisance_idx)
        phi = tuple(int(i) for i in self.focal_idx)
        blocks = tuple(tuple(int(i) for i in b) for b in self.measurement_blocks)
        if not blocks and nu:
            blocks = (nu,)
        if set(nu) & set(phi):
            raise StructuralError("nuisance and focal index sets overlap")
        q = len(nu) + len(phi)
        if sorted(nu + phi) != list(range(q)):
            raise StructuralError("nuisance and focal indices must cover 0..q-1")
        flat = [i for b in blocks for i in b]
        if sorted(flat) != sorted(nu):
            raise StructuralError("measurement blocks must partition the nuisance indices")
        object.__setattr__(self, "nuisance_idx", nu)
        object.__setattr__(self, "focal_idx", phi)
        object.__setattr__(self, "measurement_blocks", blocks)

    @property
    def q(self):
        return len(self.nuisance_idx) + len(self.focal_idx)

    @property
    def q0(self):
        return len(self.nuisance_idx)

    @property
    def q1(self):
        return len(self.focal_idx)


def split(theta, part: ParameterPartition):
    """Return ``(nu, phi)`` selected from ``theta`` by the partition."""
    values = theta.values if isinstance(theta, ParameterVector) else np.asarray(theta, float)
    if values.size != part.q:
        raise StructuralError(
            f"partition covers {part.q} parameters, theta has {values.size}"
        )
    return values[list(part.nuisance_idx)], values[list(part.focal_idx)]


def combine(nu, phi, part: ParameterPartition):
    """Inverse of :func:`split`."""
    nu = np.asarray(nu, dtype=float).ravel()
    phi = np.asarray(phi, dtype=float).ravel()
    if nu.size != part.q0 or phi.size != part.q1:
        raise StructuralError("nu/phi lengths do not match the partition")
    theta = np.empty(part.q)
    theta[list(part.nuisance_idx)] = nu
    theta[list(part.focal_idx)] = phi
    return theta


@dataclass(frozen=True)
class FeasibilitySpec:
    """Constraints on the focal vector.

    Parameters
    ----------
    box_bounds : dict
        ``{index: (lower, upper)}``; either end may be ``None``.
    corr_block : sequence of int, optional
        Focal indices holding the strict lower triangle (row-major) of a
        ``d x d`` correlation matrix.
    slope_block : sequence of int, optional
        Focal indices of slopes ``beta`` constrained by
        ``1 - beta' Phi beta >= floor`` with ``Phi`` built from ``corr_block``.
    floor : float
        Eigenvalue floor and minimum residual variance.
    """

    box_bounds: dict = field(default_factory=dict)
    corr_block: Optional[tuple] = None
    slope_block: Optional[tuple] = None
    floor: float = DEFAULT_FLOOR

    def __post_init__(self):
        if not self.floor > 0:
            raise StructuralError("floor must be positive")
        if self.slope_block is not None and self.corr_block is None:
            raise StructuralError("slope_block requires corr_block")
        for i, (lo, hi) in self.box_bounds.items():
            if lo is not None and hi is not None and lo > hi:
                raise StructuralError(f"bounds for index {i} are not ordered")
        if self.corr_block is not None:
            m = len(self.corr_block)
            d = int(round((1 + np.sqrt(1 + 8 * m)) / 2))
            if d * (d - 1) // 2 != m:
                raise StructuralError("corr_block length is not a triangular number")
            object.__setattr__(self, "corr_block", tuple(int(i) for i in self.corr_block))
        if self.slope_block is not None:
            object.__setattr__(self, "slope_block", tuple(int(i) for i in self.slope_block))

    @property
    def corr_dim(self):
        if self.corr_block is None:
            return 0
        return int(round((1 + np.sqrt(1 + 8 * len(self.corr_block))) / 2))


def corr_from_lower(values, d):
    """Build a ``d x d`` correlation matrix from its row-major strict lower triangle."""
    Phi = np.eye(d)
    rows, cols = np.tril_indices(d, -1)
    Phi[rows, cols] = values
    Phi[cols, rows] = values
    return Phi


def lower_from_corr(Phi):
    rows, cols = np.tril_indices(Phi.shape[0], -1)
    return Phi[rows, cols].copy()


def project_box(phi, spec: FeasibilitySpec):
    """Clamp each bounded coordinate into its interval."""
    out = np.array(phi, dtype=float)
    for i, (lo, hi) in spec.box_bounds.items():
        if lo is not None and out[i] < lo:
            out[i] = lo
        if hi is not None and out[i] > hi:
            out[i] = hi
    return out


def _min_eig(A):
    return np.linalg.eigvalsh(A)[0]


def project_corr_psd(Phi, floor=DEFAULT_FLOOR, max_iter=100):
    """Truncate eigenvalues at ``floor`` and rescale to unit diagonal.

    Rescaling can push the smallest eigenvalue slightly under the floor, so
    the two steps are repeated until the result is feasible. A correlation
    matrix that is already feasible is returned unchanged.
    """
    A = np.array(Phi, dtype=float)
    A = (A + A.T) / 2
    tol = floor * 1e-9
    for _ in range(max_iter):
        if np.allclose(np.diag(A), 1.0, rtol=0, atol=1e-14) and _min_eig(A) >= floor - tol:
            np.fill_diagonal(A, 1.0)
            return A
        w, V = np.linalg.eigh(A)
        A = (V * np.maximum(w, floor)) @ V.T
        d = np.sqrt(np.diag(A))
        A = A / np.outer(d, d)
        A = (A + A.T) / 2
        np.fill_diagonal(A, 1.0)
    raise NumericalError(
        "eigenvalue truncation did not reach the floor",
        {"min_eig": _min_eig(A), "floor": floor},
    )


def project_slopes_qp(beta, Phi, floor=DEFAULT_FLOOR, tol=1e-10, max_iter=500):
    """Nearest ``beta`` (Euclidean) with ``1 - beta' Phi beta >= floor``.

    The minimiser has the form ``(I + lam Phi)^-1 beta``; the multiplier is
    found by bisection on the active constraint.
    """
    beta = np.array(beta, dtype=float)
    bound = 1.0 - floor
    if beta @ Phi @ beta <= bound:
        return beta
    w, V = np.linalg.eigh(Phi)
    if w[0] <= 0:
        raise NumericalError("Phi must be positive definite", {"min_eig": w[0]})
    c = V.T @ beta

    def quad(lam):
        return np.sum(w * (c / (1.0 + lam * w)) ** 2)

    lo, hi = 0.0, 1.0
    grow = 0
    while quad(hi) > bound:
        lo, hi = hi, hi * 2.0
        grow += 1
        if grow > 200:
            raise NumericalError(
                "could not bracket the Lagrange multiplier",
                {"beta": beta.tolist(), "quad_at_hi": quad(hi)},
            )
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if quad(mid) > bound:
            lo = mid
        else:
            hi = mid
        if bound - quad(hi) < tol:
            break
    # hi stays on the feasible side
    return V @ (c / (1.0 + hi * w))


def project(phi, spec: FeasibilitySpec):
    """Box clamp, then correlation truncation, then the slope QP."""
    out = project_box(phi, spec)
    if spec.corr_block is not None:
        d = spec.corr_dim
        idx = list(spec.corr_block)
        Phi = project_corr_psd(corr_from_lower(out[idx], d), spec.floor)
        out[idx] = lower_from_corr(Phi)
        if spec.slope_block is not None:
            sidx = list(spec.slope_block)
            out[sidx] = project_slopes_qp(out[sidx], Phi, spec.floor)
    return out


def is_feasible(phi, spec: FeasibilitySpec):
    phi = np.asarray(phi, dtype=float)
    for i, (lo, hi) in spec.box_bounds.items():
        if (lo is not None and phi[i] < lo) or (hi is not None and phi[i] > hi):
            return False
    if spec.corr_block is not None:
        Phi = corr_from_lower(phi[list(spec.corr_block)], spec.corr_dim)
        if _min_eig(Phi) < spec.floor * (1 - 1e-9):
            return False
        if spec.slope_block is not None:
            b = phi[list(spec.slope_block)]
            if 1.0 - b @ Phi @ b < spec.floor - 1e-12:
                return False
    return True


def equicorrelation(d, rho):
    Phi = np.full((d, d), float(rho))
    np.fill_diagonal(Phi, 1.0)
    return Phi
