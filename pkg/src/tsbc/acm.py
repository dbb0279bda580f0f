"""Sandwich covariance of the bias-corrected estimator by Monte Carlo.

Replication ``m`` draws one set of random components ``U^(m)`` which is
reused for the parametric-bootstrap refit and for both sides of every
simultaneous-perturbation difference (common random numbers).  All
covariances stay on the finite-sample scale: the bootstrap covariance of the
first-stage estimates already approximates ``Omega / n``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dga import STREAM_ACM, STREAM_SIGN, rng_for
from .exceptions import InferenceError, NumericalError, StructuralError, TSBCError

MAX_SKIP_FRACTION = 0.05


@dataclass(frozen=True)
class ACMConfig:
    M: int = 1000
    delta: float = 1e-6
    blocks: Optional[tuple] = None
    seed: int = 0

    def __post_init__(self):
        if self.M < 2:
            raise StructuralError("M must be at least 2")
        if not self.delta > 0:
            raise StructuralError("delta must be positive")
        if self.blocks is not None:
            object.__setattr__(self, "blocks", tuple(tuple(int(i) for i in b) for b in self.blocks))

    def block_list(self, q):
        if self.blocks is None:
            return (tuple(range(q)),)
        flat = sorted(i for b in self.blocks for i in b)
        if flat != list(range(q)):
            raise StructuralError(f"blocks must partition 0..{q - 1}")
        return self.blocks


def equal_blocks(q, n_blocks):
    """Chop ``0..q-1`` into ``n_blocks`` consecutive blocks of equal size."""
    if q % n_blocks:
        raise StructuralError(f"{q} parameters cannot form {n_blocks} equal blocks")
    size = q // n_blocks
    return tuple(tuple(range(b * size, (b + 1) * size)) for b in range(n_blocks))


@dataclass
class ACMResult:
    omega_hat: np.ndarray
    jacobian: np.ndarray
    delta_mat: np.ndarray
    sandwich: np.ndarray
    ses: np.ndarray
    flags: dict = field(default_factory=dict)

    def to_json(self, names=None):
        def mat(a):
            a = np.atleast_2d(a)
            return {"rows": a.shape[0], "cols": a.shape[1], "data": a.ravel().tolist()}

        out = {
            "omega_hat": mat(self.omega_hat),
            "jacobian": mat(self.jacobian),
            "delta_mat": mat(self.delta_mat),
            "sandwich": mat(self.sandwich),
            "ses": self.ses.tolist(),
            "flags": self.flags,
        }
        if names is not None:
            out["focal_names"] = list(names)
        return json.dumps(out)

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)

        def mat(d):
            return np.array(d["data"], float).reshape(d["rows"], d["cols"])

        return cls(
            mat(raw["omega_hat"]),
            mat(raw["jacobian"]),
            mat(raw["delta_mat"]),
            mat(raw["sandwich"]),
            np.array(raw["ses"], float),
            raw.get("flags", {}),
        )


def _check_skips(skipped, M, what):
    if skipped > MAX_SKIP_FRACTION * M:
        raise NumericalError(
            f"{skipped} of {M} {what} replications failed (limit {MAX_SKIP_FRACTION:.0%})",
            {"skipped": skipped, "M": M},
        )
    if skipped:
        warnings.warn(f"{skipped} of {M} {what} replications failed and were skipped")


def _draw(model, cfg, stream, m):
    return model.draw(cfg.seed, (*stream, STREAM_ACM, m))


def bootstrap_omega(theta, cfg: ACMConfig, model, stream=()):
    """Monte Carlo covariance (divisor M - 1) of full first+second stage refits."""
    theta = np.asarray(theta, float)
    reps = []
    skipped = 0
    for m in range(cfg.M):
        try:
            data = model.generate(_draw(model, cfg, stream, m), theta)
            est = np.asarray(model.estimate_full(data), float)
        except (TSBCError, np.linalg.LinAlgError, FloatingPointError):
            skipped += 1
            continue
        if not np.all(np.isfinite(est)):
            skipped += 1
            continue
        reps.append(est)
    _check_skips(skipped, cfg.M, "bootstrap")
    reps = np.array(reps)
    omega = np.atleast_2d(np.cov(reps, rowvar=False, ddof=1))
    return (omega + omega.T) / 2, skipped


def rademacher(seed, stream, size):
    gen, _ = rng_for(seed, stream)
    return np.where(gen.integers(0, 2, size=size) == 1, 1.0, -1.0)


def _feasible_delta(theta, cfg, model, blocks, stream):
    """Halve delta until a sample of perturbed points is valid for the DGA."""
    check = getattr(model, "theta_feasible", None)
    delta = cfg.delta
    if check is None:
        return delta
    for _ in range(40):
        ok = True
        for m in range(min(cfg.M, 20)):
            for b, blk in enumerate(blocks):
                E = np.zeros_like(theta)
                E[list(blk)] = rademacher(cfg.seed, (*stream, STREAM_SIGN, m, b), len(blk))
                if not (check(theta + delta * E) and check(theta - delta * E)):
                    ok = False
                    break
            if not ok:
                break
        if ok:
            if delta != cfg.delta:
                warnings.warn(f"perturbation constant shrunk to {delta:g} to stay feasible")
            return delta
        delta /= 2
    raise NumericalError("no feasible perturbation constant found", {"theta": theta.tolist()})


def sp_jacobian(theta, cfg: ACMConfig, model, stream=()):
    """Simultaneous-perturbation estimate of ``d h / d theta`` (``q1 x q``).

    For each block and replication a Rademacher direction ``E`` over the
    block's coordinates is drawn; both ``phi_hat`` evaluations use the same
    ``U^(m)`` and the perturbed nuisance values ``nu +- delta E_nu``.
    """
    theta = np.asarray(theta, float)
    part = model.partition
    q = theta.size
    nu_idx = list(part.nuisance_idx)
    blocks = cfg.block_list(q)
    delta = _feasible_delta(theta, cfg, model, blocks, stream)
    J = None
    counts = np.zeros(len(blocks))
    skipped = 0
    for m in range(cfg.M):
        U = _draw(model, cfg, stream, m)
        for b, blk in enumerate(blocks):
            idx = list(blk)
            e = rademacher(cfg.seed, (*stream, STREAM_SIGN, m, b), len(idx))
            E = np.zeros(q)
            E[idx] = e
            try:
                tp = theta + delta * E
                tm = theta - delta * E
                fp = np.asarray(model.estimate_focal(model.generate(U, tp), tp[nu_idx]), float)
                fm = np.asarray(model.estimate_focal(model.generate(U, tm), tm[nu_idx]), float)
            except (TSBCError, np.linalg.LinAlgError, FloatingPointError):
                skipped += 1
                continue
            if J is None:
                J = np.zeros((fp.size, q))
            J[:, idx] += np.outer((fp - fm) / (2.0 * delta), 1.0 / e)
            counts[b] += 1
    _check_skips(skipped, cfg.M * len(blocks), "perturbation")
    if J is None:
        raise NumericalError("every perturbation replication failed")
    for b, blk in enumerate(blocks):
        J[:, list(blk)] /= counts[b]
    return J


def delta_matrix(jacobian, partition, max_cond=1e12):
    """``[-(d_phi h)^-1 d_nu h : (d_phi h)^-1]`` laid out in ``theta`` order."""
    J = np.atleast_2d(np.asarray(jacobian, float))
    nu_idx = list(partition.nuisance_idx)
    phi_idx = list(partition.focal_idx)
    J_phi = J[:, phi_idx]
    cond = np.linalg.cond(J_phi)
    if not np.isfinite(cond) or cond > max_cond:
        raise InferenceError(
            "Jacobian with respect to the focal parameters is singular; "
            "increase M or the perturbation constant",
            {"condition_number": float(cond)},
        )
    inv = np.linalg.inv(J_phi)
    D = np.zeros_like(J)
    D[:, phi_idx] = inv
    if nu_idx:
        D[:, nu_idx] = -inv @ J[:, nu_idx]
    return D


def sandwich(delta_mat, omega_hat):
    """``Delta Omega Delta'`` and the square roots of its diagonal."""
    D = np.atleast_2d(np.asarray(delta_mat, float))
    O = np.atleast_2d(np.asarray(omega_hat, float))
    if D.shape[1] != O.shape[0]:
        raise StructuralError(f"shapes {D.shape} and {O.shape} are not conformable")
    V = D @ O @ D.T
    V = (V + V.T) / 2
    diag = np.diag(V)
    if np.any(diag < 0):
        raise NumericalError("sandwich covariance has a negative diagonal", {"diag": diag.tolist()})
    return V, np.sqrt(diag)


def compute_acm(theta, cfg: ACMConfig, model, stream=()) -> ACMResult:
    """Bootstrap covariance, SP Jacobian and sandwich at ``theta``.

    ``theta`` should be the bias-corrected plug-in ``(nu_hat, phi_bc)``.
    """
    omega, skipped = bootstrap_omega(theta, cfg, model, stream)
    J = sp_jacobian(theta, cfg, model, stream)
    D = delta_matrix(J, model.partition)
    V, ses = sandwich(D, omega)
    return ACMResult(omega, J, D, V, ses, {"bootstrap_skipped": skipped})
