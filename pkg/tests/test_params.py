import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tsbc.dga import STUDY_PARTITIONS, study_truth
from tsbc.exceptions import StructuralError
from tsbc.params import (
    FeasibilitySpec,
    ParameterPartition,
    ParameterVector,
    combine,
    corr_from_lower,
    equicorrelation,
    is_feasible,
    lower_from_corr,
    project,
    project_box,
    project_corr_psd,
    project_slopes_qp,
    split,
)

FLOOR = 1e-6
finite = st.floats(-3, 3, allow_nan=False)


class TestParameterVector:
    def test_rejects_nonfinite(self):
        with pytest.raises(StructuralError):
            ParameterVector([1.0, np.nan], ["a", "b"])

    def test_rejects_duplicate_names(self):
        with pytest.raises(StructuralError):
            ParameterVector([1.0, 2.0], ["a", "a"])

    def test_lookup_by_name(self):
        pv = ParameterVector([1.0, 2.5], ["a", "b"])
        assert pv["b"] == 2.5
        assert pv.as_dict() == {"a": 1.0, "b": 2.5}


class TestPartition:
    def test_overlap_rejected(self):
        with pytest.raises(StructuralError):
            ParameterPartition((0, 1), (1, 2))

    def test_gap_rejected(self):
        with pytest.raises(StructuralError):
            ParameterPartition((0,), (2,))

    def test_blocks_must_cover_nuisance(self):
        with pytest.raises(StructuralError):
            ParameterPartition((0, 1, 2), (3,), ((0, 1),))

    def test_split_examples(self):
        nu, phi = split(np.array([1.0, 2.0, 3.0]), ParameterPartition((0, 1), (2,)))
        assert nu.tolist() == [1.0, 2.0] and phi.tolist() == [3.0]
        nu, phi = split(np.array([5.0]), ParameterPartition((), (0,)))
        assert nu.size == 0 and phi.tolist() == [5.0]

    def test_study1_sizes(self):
        part = STUDY_PARTITIONS[1]
        nu, phi = split(study_truth(1), part)
        assert (part.q0, part.q1) == (21, 2)
        assert phi.tolist() == [0.6, 0.64]

    def test_split_wrong_length(self):
        with pytest.raises(StructuralError):
            split(np.ones(4), ParameterPartition((0, 1), (2,)))

    @given(st.integers(1, 12), st.data())
    def test_split_combine_bijection(self, q, data):
        perm = data.draw(st.permutations(range(q)))
        q0 = data.draw(st.integers(0, q - 1))
        part = ParameterPartition(perm[:q0], perm[q0:])
        theta = data.draw(arrays(float, q, elements=finite))
        nu, phi = split(theta, part)
        assert np.array_equal(combine(nu, phi, part), theta)


class TestBox:
    def test_examples(self):
        spec = FeasibilitySpec(box_bounds={0: (FLOOR, None)})
        assert project_box([0.5], spec).tolist() == [0.5]
        assert project_box([-0.2], spec).tolist() == [FLOOR]
        spec2 = FeasibilitySpec(box_bounds={0: (-1 + FLOOR, 1 - FLOOR)})
        assert project_box([1.3], spec2).tolist() == [1 - FLOOR]

    def test_unbounded_coordinates_untouched(self):
        spec = FeasibilitySpec(box_bounds={1: (0.0, 1.0)})
        assert project_box([-7.0, 3.0], spec).tolist() == [-7.0, 1.0]

    def test_misordered_bounds(self):
        with pytest.raises(StructuralError):
            FeasibilitySpec(box_bounds={0: (1.0, 0.0)})

    @given(arrays(float, 3, elements=st.floats(-5, 5)))
    def test_idempotent(self, phi):
        spec = FeasibilitySpec(box_bounds={0: (FLOOR, None), 2: (-1, 1)})
        once = project_box(phi, spec)
        assert np.array_equal(project_box(once, spec), once)


class TestCorrProjection:
    def test_identity_and_equicorrelation_unchanged(self):
        assert np.array_equal(project_corr_psd(np.eye(4)), np.eye(4))
        E = equicorrelation(4, 0.3)
        assert np.allclose(np.linalg.eigvalsh(E), [0.7, 0.7, 0.7, 1.9])
        assert np.allclose(project_corr_psd(E), E, atol=1e-15)

    def test_two_by_two(self):
        out = project_corr_psd(np.array([[1.0, 1.2], [1.2, 1.0]]), FLOOR)
        # eigenvalues of a 2x2 correlation matrix are 1 +- r, so the floor forces r = 1 - floor
        assert out[0, 1] == pytest.approx(1 - FLOOR, abs=1e-9)
        assert np.linalg.eigvalsh(out)[0] >= FLOOR * (1 - 1e-9)

    @settings(max_examples=60, deadline=None)
    @given(arrays(float, 6, elements=st.floats(-1.5, 1.5)))
    def test_output_valid_and_idempotent(self, low):
        out = project_corr_psd(corr_from_lower(low, 4), FLOOR)
        assert np.allclose(np.diag(out), 1.0)
        assert np.allclose(out, out.T)
        assert np.linalg.eigvalsh(out)[0] > 0
        again = project_corr_psd(out, FLOOR)
        assert np.allclose(again, out, rtol=1e-12, atol=1e-12)

    def test_lower_roundtrip(self):
        low = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
        assert np.array_equal(lower_from_corr(corr_from_lower(low, 4)), low)


class TestSlopeProjection:
    def test_feasible_unchanged(self):
        beta = np.array([0.1, 0.2, 0.3, 0.4])
        Phi = equicorrelation(4, 0.3)
        assert beta @ Phi @ beta == pytest.approx(0.51)
        assert np.array_equal(project_slopes_qp(beta, Phi), beta)

    def test_scaling_onto_sphere(self):
        out = project_slopes_qp(np.array([2.0, 0, 0, 0]), np.eye(4), FLOOR)
        assert out == pytest.approx([np.sqrt(1 - FLOOR), 0, 0, 0], abs=1e-9)

    def test_zero(self):
        assert np.array_equal(project_slopes_qp(np.zeros(4), np.eye(4)), np.zeros(4))

    def test_is_nearest_point(self):
        # the KKT condition: beta - out is parallel to Phi @ out
        Phi = equicorrelation(3, 0.4)
        beta = np.array([1.5, -0.2, 0.9])
        out = project_slopes_qp(beta, Phi, FLOOR)
        g = Phi @ out
        resid = beta - out
        assert np.allclose(resid / np.linalg.norm(resid), g / np.linalg.norm(g), atol=1e-6)

    @settings(max_examples=60, deadline=None)
    @given(arrays(float, 4, elements=st.floats(-4, 4)), st.floats(-0.2, 0.7))
    def test_constraint_and_idempotence(self, beta, rho):
        Phi = equicorrelation(4, rho)
        out = project_slopes_qp(beta, Phi, FLOOR)
        assert 1 - out @ Phi @ out >= FLOOR - 1e-12
        assert np.allclose(project_slopes_qp(out, Phi, FLOOR), out, rtol=1e-12, atol=1e-12)


class TestComposite:
    spec = FeasibilitySpec(corr_block=tuple(range(6)), slope_block=tuple(range(6, 10)))

    def test_truth_is_fixed_point(self):
        phi = np.array([0.3] * 6 + [0.1, 0.2, 0.3, 0.4])
        assert is_feasible(phi, self.spec)
        assert np.allclose(project(phi, self.spec), phi, atol=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(arrays(float, 10, elements=st.floats(-1.5, 1.5)))
    def test_output_feasible_and_idempotent(self, phi):
        once = project(phi, self.spec)
        assert is_feasible(once, self.spec)
        assert np.allclose(project(once, self.spec), once, rtol=1e-12, atol=1e-12)

    def test_slope_requires_corr(self):
        with pytest.raises(StructuralError):
            FeasibilitySpec(slope_block=(0,))
