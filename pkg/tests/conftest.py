"""Independent reference implementations used across the test suite.

Everything here is written from the textbook definitions with dense
matrices or brute force, never by calling into the package's closed forms.
"""

import numpy as np
import pytest


def dense_rank_one(n, lt, ln):
    d = len(n)
    return lt * np.eye(d) + (ln - lt) * np.outer(n, n)


def dense_penalty(u, lam):
    return np.eye(len(u)) + lam * np.outer(u, u)


def dense_composite(w, n_tilde, lt, ln):
    root = np.diag(np.sqrt(w))
    return root @ dense_rank_one(n_tilde, lt, ln) @ root


def random_unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def fd_gradient(f, x):
    """Central differences with step 1e-5 (1 + ||x||)."""
    x = np.asarray(x, dtype=float)
    h = 1e-5 * (1.0 + np.linalg.norm(x))
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def gmm_log_density(x, t, weights, means, variances, alpha, sigma, mask=None):
    """Noised mixture log density evaluated component by component with scipy-free math."""
    x = np.asarray(x, dtype=float)
    terms = []
    for k, (w, mu, var) in enumerate(zip(weights, means, variances)):
        if mask is not None and not mask[k]:
            continue
        v = alpha**2 * np.broadcast_to(np.asarray(var, dtype=float), x.shape) + sigma**2
        r = x - alpha * np.asarray(mu)
        terms.append(np.log(w) - 0.5 * np.sum(r * r / v + np.log(2 * np.pi * v)))
    terms = np.array(terms)
    m = terms.max()
    total = m + np.log(np.exp(terms - m).sum())
    if mask is not None:
        total -= np.log(np.sum(np.asarray(weights)[np.asarray(mask)]))
    return total


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
