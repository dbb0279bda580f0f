"""Bundles of (DGA, nuisance estimator, focal estimator) for the three studies.

The bias-correction and covariance routines only need an object exposing
``draw``, ``generate``, ``estimate_nuisance``, ``estimate_focal`` plus a
``partition`` and ``feasibility``; :class:`StudyModel` provides them for the
built-in studies and tests supply small stubs with the same attributes.
"""

from __future__ import annotations

import numpy as np

from . import dga
from .params import DEFAULT_FLOOR, FeasibilitySpec, ParameterPartition, combine, corr_from_lower, split
from .structural import initial_estimator, make_spec, nuisance_estimator

FOCAL_FEASIBILITY = {
    1: FeasibilitySpec(box_bounds={1: (DEFAULT_FLOOR, None)}),
    2: FeasibilitySpec(
        box_bounds={0: (-1 + DEFAULT_FLOOR, 1 - DEFAULT_FLOOR), 4: (DEFAULT_FLOOR, None)}
    ),
    3: FeasibilitySpec(corr_block=tuple(range(6)), slope_block=tuple(range(6, 10))),
}


class StudyModel:
    """Two-stage factor score regression for one of the built-in studies."""

    def __init__(self, study, n, score_choice=None):
        self.study = int(study)
        self.n = int(n)
        self.spec = make_spec(self.study, score_choice)
        self.layout = dga.STUDY_LAYOUTS[self.study]
        self.partition: ParameterPartition = dga.STUDY_PARTITIONS[self.study]
        self.feasibility: FeasibilitySpec = FOCAL_FEASIBILITY[self.study]
        self.names = list(dga.STUDY_NAMES[self.study])
        self._generate = dga.DGAS[self.study]

    def __repr__(self):
        return f"StudyModel(study={self.study}, n={self.n}, scores={self.spec.score_choice!r})"

    @property
    def focal_names(self):
        return [self.names[i] for i in self.partition.focal_idx]

    @property
    def nuisance_names(self):
        return [self.names[i] for i in self.partition.nuisance_idx]

    def truth(self):
        return dga.study_truth(self.study)

    def draw(self, seed, stream):
        return dga.draw_components(self.n, self.layout, seed, stream)

    def generate(self, U, theta):
        return self._generate(U, theta)

    def estimate_nuisance(self, data):
        return nuisance_estimator(data, self.spec)

    def estimate_focal(self, data, nu):
        return initial_estimator(data, nu, self.spec).phi_hat

    def estimate_full(self, data):
        """``(nu_hat, phi_hat(y; nu_hat))`` in canonical order."""
        nu = self.estimate_nuisance(data)
        return combine(nu, self.estimate_focal(data, nu), self.partition)

    def theta_feasible(self, theta):
        """Whether the DGA is defined at ``theta``."""
        t = np.asarray(theta, float)
        nu, phi = split(t, self.partition)
        if self.study in (1, 2):
            blocks = self.spec.blocks
            for blk in blocks:
                p = len(blk.items)
                vals = nu[blk.nu_start : blk.nu_start + blk.n_params]
                if np.any(vals[p : 2 * p] < 0):
                    return False
                if blk.has_factor_variance and vals[2 * p] <= 0:
                    return False
            if self.study == 1:
                return phi[1] >= 0
            return phi[4] >= 0 and t[10] * t[21] - phi[0] ** 2 >= 0
        Phi = corr_from_lower(phi[:6], 4)
        if np.linalg.eigvalsh(Phi)[0] <= 0:
            return False
        return 1.0 - phi[6:] @ Phi @ phi[6:] >= 0
