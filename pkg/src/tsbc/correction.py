"""Robbins-Monro bias correction of a two-stage estimator.

Solves ``h(phi; nu) = phi_hat(y; nu)`` for ``phi`` where
``h(phi; nu) = E phi_hat(Y; nu)`` under data generated at ``(nu, phi)``.
Each iteration simulates one (or a few) datasets at the current iterate and
moves against the difference between their estimate and the observed one.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dga import STREAM_RM
from .exceptions import DivergenceError, DomainError, StructuralError
from .params import FeasibilitySpec, combine, project

DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class RMConfig:
    K: int = 1000
    a: float = 3.0
    b: float = 0.6
    mc_per_iter: int = 1
    feasibility: FeasibilitySpec = field(default_factory=FeasibilitySpec)
    phi0: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.a > 0:
            raise StructuralError("learning-rate multiplier a must be positive")
        if not 0.5 < self.b <= 1.0:
            raise StructuralError("decay exponent b must lie in (0.5, 1]")
        if self.K < 2:
            raise StructuralError("K must be at least 2")
        if self.mc_per_iter < 1:
            raise StructuralError("mc_per_iter must be at least 1")


@dataclass
class RMTrace:
    iterates: np.ndarray
    gammas: np.ndarray
    phi_bc: np.ndarray
    projections: int = 0
    names: Optional[list] = None

    @property
    def K(self):
        return self.iterates.shape[0]


def learning_rate(k, a, b):
    """``a * k**(-b)``."""
    if k < 1:
        raise ValueError("iteration index starts at 1")
    return a * float(k) ** (-b)


def weighted_tail_average(trace: RMTrace):
    """Learning-rate weighted mean of the second half of the iterates."""
    K = trace.iterates.shape[0]
    if K < 2:
        raise StructuralError("need at least two iterates")
    start = K // 2
    w = trace.gammas[start:]
    return (w[:, None] * trace.iterates[start:]).sum(axis=0) / w.sum()


def _estimate_h(model, theta, nu, seed, stream, k, reps):
    total = None
    for j in range(reps):
        U = model.draw(seed, (*stream, STREAM_RM, k, j))
        est = np.asarray(model.estimate_focal(model.generate(U, theta), nu), float)
        total = est if total is None else total + est
    return total / reps


def robbins_monro(phi_target, nu, cfg: RMConfig, model, seed, stream=(), names=None) -> RMTrace:
    """Run ``cfg.K`` projected Robbins-Monro iterations.

    Iteration ``k`` simulates data at ``(nu, phi^(k-1))`` from stream
    ``(*stream, STREAM_RM, k, j)``, so the whole trace is a deterministic
    function of ``seed`` and ``stream``.  The start defaults to the projected
    target.
    """
    target = np.asarray(getattr(phi_target, "phi_hat", phi_target), dtype=float)
    nu = np.asarray(nu, dtype=float)
    part = model.partition
    phi0 = target if cfg.phi0 is None else np.asarray(cfg.phi0, dtype=float)
    phi = project(phi0, cfg.feasibility)
    iterates = np.empty((cfg.K, target.size))
    gammas = np.empty(cfg.K)
    n_proj = 0

    def partial(k):
        it = iterates[: k - 1].copy()
        g = gammas[: k - 1].copy()
        return RMTrace(it, g, it[-1] if len(it) else phi, n_proj, names)

    for k in range(1, cfg.K + 1):
        gamma = learning_rate(k, cfg.a, cfg.b)
        theta = combine(nu, phi, part)
        try:
            h_k = _estimate_h(model, theta, nu, seed, stream, k, cfg.mc_per_iter)
        except DomainError as exc:
            raise DivergenceError(
                f"data generation failed at iteration {k}: {exc}", partial(k), {"phi": phi.tolist()}
            ) from exc
        step = phi - gamma * (h_k - target)
        phi = project(step, cfg.feasibility)
        if not np.array_equal(phi, step):
            n_proj += 1
        if not np.all(np.isfinite(phi)) or np.max(np.abs(phi)) > DIVERGENCE_LIMIT:
            raise DivergenceError(
                f"iterate left the sane region at iteration {k}", partial(k), {"phi": phi.tolist()}
            )
        iterates[k - 1] = phi
        gammas[k - 1] = gamma
    trace = RMTrace(iterates, gammas, np.empty(0), n_proj, names)
    trace.phi_bc = weighted_tail_average(trace)
    return trace


def write_trace_csv(trace: RMTrace, path):
    names = trace.names or [f"phi{j + 1}" for j in range(trace.iterates.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["k", "gamma", *names])
        for k in range(trace.K):
            writer.writerow(
                [k + 1, repr(float(trace.gammas[k]))] + [repr(float(v)) for v in trace.iterates[k]]
            )
