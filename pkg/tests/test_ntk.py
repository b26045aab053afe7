import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ntk_selective._validation import NotPositiveDefiniteError, flatten_augmented
from ntk_selective.ntk import (
    NTKTransformer,
    NtkReport,
    complexity_S,
    d_diagnostic,
    ntk_cross,
    ntk_matrix,
    relu_expectation,
    step_expectation,
)

from conftest import mc_ntk, unit_rows


class TestClosedForms:
    def test_single_point_depth2(self):
        rep = ntk_matrix(np.array([[0.6, 0.8]]), depth=2)
        assert abs(rep.H[0, 0] - 1.5) < 1e-12

    def test_orthogonal_pair_depth2(self):
        rep = ntk_matrix(np.eye(2), depth=2)
        assert abs(rep.H[0, 1] - 1.0 / math.pi) < 1e-12

    @pytest.mark.parametrize("depth", [2, 3, 4, 6])
    def test_diagonal_is_half_depth_plus_one(self, depth, rng):
        rep = ntk_matrix(unit_rows(rng, 5, 3), depth)
        np.testing.assert_allclose(np.diag(rep.H), (depth + 1) / 2, rtol=0, atol=1e-12)

    def test_identical_points_share_value(self, rng):
        x = unit_rows(rng, 1, 4)
        rep = ntk_matrix(np.vstack([x, x]), depth=3)
        assert rep.H[0, 1] == rep.H[0, 0]

    def test_antipodal_points_finite(self):
        rep = ntk_matrix(np.array([[1.0, 0.0], [-1.0, 0.0]]), depth=3, compute_lambda0=False)
        assert np.all(np.isfinite(rep.H))

    def test_expectation_endpoints(self):
        # rho = 1: E[relu(u)^2] = 1/2, P(u >= 0) = 1/2
        assert relu_expectation(1.0) == pytest.approx(1.0)
        assert step_expectation(1.0) == pytest.approx(1.0)
        assert relu_expectation(-1.0) == pytest.approx(0.0, abs=1e-15)
        assert step_expectation(-1.0) == pytest.approx(0.0, abs=1e-15)
        assert relu_expectation(0.0) == pytest.approx(1.0 / math.pi)
        assert step_expectation(0.0) == pytest.approx(0.5)

    def test_rejects_non_unit_points(self):
        with pytest.raises(ValueError, match="unit"):
            ntk_matrix(np.array([[1.0, 1.0]]), depth=2)

    def test_rejects_shallow_depth(self):
        with pytest.raises(ValueError):
            ntk_matrix(np.eye(2), depth=1)


class TestMonteCarloOracle:
    @pytest.mark.parametrize("n,depth,seed", [(4, 2, 0), (6, 3, 1)])
    def test_entries_within_four_se(self, n, depth, seed):
        X = unit_rows(np.random.default_rng(seed), n, 3)
        H = ntk_matrix(X, depth).H
        est, se = mc_ntk(X, depth, n_batches=10, batch=20_000, seed=seed)
        z = np.abs(H - est) / np.maximum(se, 1e-15)
        assert np.all(z < 4.0), z.max()


class TestReportQuantities:
    def test_matrix_is_symmetric_psd(self, rng):
        rep = ntk_matrix(unit_rows(rng, 12, 4), depth=3)
        np.testing.assert_array_equal(rep.H, rep.H.T)
        assert rep.lambda0 > 0

    def test_log_det_matches_dense(self, rng):
        rep = ntk_matrix(unit_rows(rng, 10, 3), depth=2)
        sign, ld = np.linalg.slogdet(np.eye(10) + rep.H)
        assert sign > 0
        assert rep.L_H == pytest.approx(ld, rel=1e-12)
        cheap = ntk_matrix(unit_rows(np.random.default_rng(12345), 10, 3), depth=2, compute_lambda0=False)
        assert cheap.lambda0 is None
        assert cheap.L_H == pytest.approx(ld, rel=1e-10)

    def test_cross_kernel_matches_matrix(self, rng):
        X = unit_rows(rng, 5, 3)
        np.testing.assert_allclose(ntk_cross(X, X, 3), ntk_matrix(X, 3).H, atol=1e-14)

    def test_report_to_dict(self):
        d = ntk_matrix(np.eye(3), depth=2).to_dict()
        assert set(d) == {"lambda0", "L_H", "depth", "size"}
        assert d["size"] == 3


class TestComplexity:
    def test_identity_case(self):
        rep = NtkReport(H=np.eye(2), lambda0=1.0, L_H=2 * math.log(2), depth=2)
        assert complexity_S([0.5, 0.5], rep).S == pytest.approx(math.sqrt(0.5))

    def test_zero_vector(self, rng):
        rep = ntk_matrix(unit_rows(rng, 4, 3), 2)
        assert complexity_S(np.zeros(4), rep).S == 0.0

    def test_matches_dense_solve_on_linear_h(self, rng):
        X = unit_rows(rng, 6, 3)
        theta = np.array([1.0, 0.0, 0.0])
        h_plus = 0.5 * (1 + X @ theta)
        h = np.concatenate([h_plus, 1 - h_plus])
        rep = ntk_matrix(flatten_augmented(X), 2)
        oracle = math.sqrt(h @ np.linalg.inv(rep.H) @ h)
        assert complexity_S(h, rep).S == pytest.approx(oracle, rel=1e-8)

    def test_permutation_invariance(self, rng):
        X = unit_rows(rng, 7, 3)
        h = rng.random(7)
        perm = rng.permutation(7)
        a = complexity_S(h, ntk_matrix(X, 2)).S
        b = complexity_S(h[perm], ntk_matrix(X[perm], 2)).S
        assert a == pytest.approx(b, rel=1e-10)

    def test_singular_kernel_refused(self):
        X = np.array([[1.0, 0.0], [1.0, 0.0]])
        with pytest.raises(NotPositiveDefiniteError):
            complexity_S([0.5, 0.5], ntk_matrix(X, 2))

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            complexity_S([1.0], ntk_matrix(np.eye(2), 2))


class TestDDiagnostic:
    def test_degenerate_kernel(self):
        assert d_diagnostic(0.0, math.exp(-2), 0.0, 1) == pytest.approx(5.0625)

    def test_reference_value(self):
        # 2 (1 + 17/16 + 2 ln 10 + 1), evaluated with mpmath to 30 digits
        assert d_diagnostic(1.0, 0.1, 1.0, 1) == pytest.approx(15.335340371976183, rel=1e-13)

    def test_accepts_report(self):
        rep = ntk_matrix(np.eye(2), 2)
        assert d_diagnostic(1.0, 0.1, rep, 3) == d_diagnostic(1.0, 0.1, rep.L_H, 3)

    @given(st.floats(0, 10), st.floats(0.01, 5))
    def test_increasing_in_S(self, S, bump):
        assert d_diagnostic(S + bump, 0.1, 2.0, 4) > d_diagnostic(S, 0.1, 2.0, 4)

    @pytest.mark.parametrize("args", [(-1.0, 0.1, 1.0, 1), (1.0, 1.5, 1.0, 1), (1.0, 0.1, 1.0, 0)])
    def test_preconditions(self, args):
        with pytest.raises(ValueError):
            d_diagnostic(*args)


class TestTransformer:
    def test_fit_transform_shape(self, rng):
        X = unit_rows(rng, 6, 3)
        K = NTKTransformer(depth=3).fit_transform(X)
        assert K.shape == (6, 6)
        np.testing.assert_allclose(K, ntk_matrix(X, 3).H, atol=1e-14)

    def test_get_params_roundtrip(self):
        t = NTKTransformer(depth=4)
        assert t.get_params() == {"depth": 4}
        assert t.set_params(depth=2).depth == 2

    def test_transform_before_fit(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            NTKTransformer().transform(np.eye(2))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.integers(0, 10_000))
def test_symmetric_and_bounded(depth, seed):
    X = unit_rows(np.random.default_rng(seed), 5, 3)
    H = ntk_matrix(X, depth, compute_lambda0=False).H
    np.testing.assert_array_equal(H, H.T)
    # Cauchy-Schwarz for a PSD kernel with constant diagonal
    assert np.all(np.abs(H) <= (depth + 1) / 2 + 1e-12)
