import numpy as np
import pytest


def unit_rows(rng, n, d):
    X = rng.standard_normal((n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def mc_ntk(X, depth, n_batches=20, batch=50_000, seed=0):
    """Monte-Carlo NTK: every level's Gaussian expectations are sampled, not evaluated.

    Returns (estimate, standard error) per entry, with batch means carrying the
    propagated error of earlier levels.
    """
    rng = np.random.default_rng(seed)
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    iu = np.triu_indices(n)
    ests = []
    for _ in range(n_batches):
        sigma = X @ X.T
        h_tilde = sigma.copy()
        for _ in range(depth - 1):
            z1 = rng.standard_normal(batch)
            z2 = rng.standard_normal(batch)
            new_sigma = np.empty_like(sigma)
            dot = np.empty_like(sigma)
            for i, j in zip(*iu):
                sii, sjj, sij = sigma[i, i], sigma[j, j], sigma[i, j]
                rho = np.clip(sij / np.sqrt(sii * sjj), -1.0, 1.0)
                u = np.sqrt(sii) * z1
                v = np.sqrt(sjj) * (rho * z1 + np.sqrt(1.0 - rho * rho) * z2)
                e_relu = 2.0 * np.mean(np.maximum(u, 0) * np.maximum(v, 0))
                e_step = 2.0 * np.mean((u >= 0) & (v >= 0))
                new_sigma[i, j] = new_sigma[j, i] = e_relu
                dot[i, j] = dot[j, i] = e_step
            h_tilde = h_tilde * dot + new_sigma
            sigma = new_sigma
        ests.append(0.5 * (h_tilde + sigma))
    ests = np.array(ests)
    return ests.mean(axis=0), ests.std(axis=0, ddof=1) / np.sqrt(n_batches)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
