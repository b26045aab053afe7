"""Infinite-width NTK of a bias-free fully connected ReLU network.

The depth-n recursion starts from the Gram matrix of unit-norm inputs and
evaluates the two bivariate Gaussian expectations at every level through the
arc-cosine identities

    2 E[relu(u) relu(v)]  = (s_u s_v / pi) (sqrt(1 - rho^2) + rho (pi - arccos rho))
    2 E[1{u>=0} 1{v>=0}] = 1 - arccos(rho) / pi

For unit-norm inputs every diagonal covariance entry stays equal to 1, so the
correlation at each level is the covariance entry itself.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import (
    NotPositiveDefiniteError,
    check_positive_int,
    check_probability,
    check_unit_norm,
)

LAMBDA0_FLOOR = 1e-10


@dataclass(frozen=True)
class NtkReport:
    H: np.ndarray
    lambda0: float | None
    L_H: float
    depth: int

    def to_dict(self) -> dict:
        return {"lambda0": self.lambda0, "L_H": self.L_H, "depth": self.depth,
                "size": int(self.H.shape[0])}


@dataclass(frozen=True)
class ComplexityReport:
    h_vector: np.ndarray
    S: float


def _clip_corr(rho: np.ndarray) -> np.ndarray:
    # exact +-1 keeps arccos finite and the diagonal exact
    return np.clip(rho, -1.0, 1.0)


def relu_expectation(rho):
    """2 E[relu(u) relu(v)] for unit-variance (u, v) with correlation ``rho``."""
    rho = _clip_corr(np.asarray(rho, dtype=float))
    return (np.sqrt(1.0 - rho * rho) + rho * (np.pi - np.arccos(rho))) / np.pi


def step_expectation(rho):
    """2 E[1{u>=0} 1{v>=0}] for unit-variance (u, v) with correlation ``rho``."""
    rho = _clip_corr(np.asarray(rho, dtype=float))
    return 1.0 - np.arccos(rho) / np.pi


def ntk_from_gram(gram: np.ndarray, depth: int) -> np.ndarray:
    """Run the depth-``depth`` recursion on a matrix of inner products.

    Correlations are formed as Sigma_ij / sqrt(Sigma_ii Sigma_jj), so the
    diagonal correlation is exactly 1 even when the squared norms carry
    round-off; arccos has a square-root singularity there.
    """
    depth = check_positive_int(depth, "depth", minimum=2)
    sigma = np.asarray(gram, dtype=float)
    h_tilde = sigma.copy()
    for _ in range(depth - 1):
        diag = np.sqrt(np.diag(sigma))
        scale = np.outer(diag, diag)
        rho = _clip_corr(sigma / scale)
        sigma_next = scale * relu_expectation(rho)
        h_tilde = h_tilde * step_expectation(rho) + sigma_next
        sigma = sigma_next
    return 0.5 * (h_tilde + sigma)


def _ntk_cross_gram(X: np.ndarray, Y: np.ndarray, depth: int) -> np.ndarray:
    """Cross-kernel recursion for rectangular blocks, using the row and column variances."""
    depth = check_positive_int(depth, "depth", minimum=2)
    sigma = X @ Y.T
    sx = np.einsum("ij,ij->i", X, X)
    sy = np.einsum("ij,ij->i", Y, Y)
    h_tilde = sigma.copy()
    # variances are level-invariant because relu_expectation(1) = 1
    scale = np.sqrt(np.outer(sx, sy))
    for _ in range(depth - 1):
        rho = _clip_corr(sigma / scale)
        sigma_next = scale * relu_expectation(rho)
        h_tilde = h_tilde * step_expectation(rho) + sigma_next
        sigma = sigma_next
    return 0.5 * (h_tilde + sigma)


def ntk_cross(X, Y, depth: int) -> np.ndarray:
    """NTK values between two unit-norm point sets, shape ``(len(X), len(Y))``."""
    X = check_unit_norm(X, name="X")
    Y = check_unit_norm(Y, name="Y")
    if X.shape[1] != Y.shape[1]:
        raise ValueError("point sets must share a dimension")
    return _ntk_cross_gram(X, Y, depth)


def ntk_matrix(points, depth: int, compute_lambda0: bool = True) -> NtkReport:
    """Depth-n NTK matrix over ``points`` with its smallest eigenvalue and log det(I + H).

    ``compute_lambda0=False`` skips the full eigensolve and takes log det(I + H)
    from a Cholesky factor, which is much cheaper for a few thousand points.
    """
    X = check_unit_norm(points, name="points")
    gram = X @ X.T
    H = ntk_from_gram(gram, depth)
    H = 0.5 * (H + H.T)
    if compute_lambda0:
        eig = scipy.linalg.eigvalsh(H)
        lambda0 = float(eig[0])
        L_H = float(np.sum(np.log1p(eig)))
    else:
        lambda0 = None
        L_H = logdet_identity_plus(H)
    return NtkReport(H=H, lambda0=lambda0, L_H=L_H, depth=depth)


def logdet_identity_plus(H: np.ndarray) -> float:
    c = scipy.linalg.cholesky(np.eye(H.shape[0]) + H, lower=True)
    return float(2.0 * np.sum(np.log(np.diag(c))))


def complexity_S(h_vector, report: NtkReport) -> ComplexityReport:
    """sqrt(h^T H^-1 h) through a Cholesky solve; refuses a singular H."""
    h = np.asarray(h_vector, dtype=float).ravel()
    H = report.H
    if h.shape[0] != H.shape[0]:
        raise ValueError(f"h_vector has length {h.shape[0]}, H is {H.shape[0]}x{H.shape[0]}")
    if report.lambda0 is not None and report.lambda0 <= LAMBDA0_FLOOR:
        raise NotPositiveDefiniteError(
            f"smallest NTK eigenvalue {report.lambda0:.3e} <= {LAMBDA0_FLOOR:g}; "
            "H is not positive definite on this point set"
        )
    try:
        factor = scipy.linalg.cho_factor(H, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"Cholesky factorization of H failed: {exc}") from exc
    quad = float(h @ scipy.linalg.cho_solve(factor, h))
    if quad < 0:
        raise NotPositiveDefiniteError("negative quadratic form; H is indefinite")
    return ComplexityReport(h_vector=h, S=math.sqrt(quad))


def d_diagnostic(S: float, delta: float, report: NtkReport | float, M: int) -> float:
    """(L_H + 1)(L_H + 17/16 + 2 log(M / delta) + S^2).

    ``report`` may be an :class:`NtkReport` or the value of L_H directly.
    """
    if S < 0:
        raise ValueError("S must be >= 0")
    check_probability(delta, "delta")
    M = check_positive_int(M, "M")
    L_H = report.L_H if isinstance(report, NtkReport) else float(report)
    return (L_H + 1.0) * (L_H + 17.0 / 16.0 + 2.0 * math.log(M / delta) + S * S)


class NTKTransformer(TransformerMixin, BaseEstimator):
    """Map points to their NTK values against the fitted reference set.

    ``transform(Y)`` returns the ``(len(Y), len(X_fit))`` cross-kernel, so the
    output plugs straight into ``kernel="precomputed"`` estimators.
    """

    def __init__(self, depth: int = 2):
        self.depth = depth

    def fit(self, X, y=None):
        check_positive_int(self.depth, "depth", minimum=2)
        self.X_fit_ = check_unit_norm(X)
        self.n_features_in_ = self.X_fit_.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "X_fit_")
        return ntk_cross(X, self.X_fit_, self.depth)
