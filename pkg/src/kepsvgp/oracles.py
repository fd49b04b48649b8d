"""Independent reference computations used by the self-test and the test suite.

Everything here goes through dense linear algebra or scipy rather than the
structured code paths it is compared against.
"""
from __future__ import annotations

import numpy as np
from scipy import stats

from . import numerics as nx


def random_cosine_kernel(N, d_k, rng):
    """``K = phi_q phi_k^T`` with unit-norm random feature rows."""
    Q = rng.standard_normal((N, d_k))
    K = rng.standard_normal((N, d_k))
    Q /= np.linalg.norm(Q, axis=1, keepdims=True)
    K /= np.linalg.norm(K, axis=1, keepdims=True)
    return Q, K, Q @ K.T


def random_variational(s, rng, scale=0.5):
    """Random mean ``s x s`` and per-dimension lower Cholesky factors ``s x s x s``."""
    m = scale * rng.standard_normal((s, s))
    L = np.tril(scale * rng.standard_normal((s, s, s)), -1)
    idx = np.arange(s)
    L[:, idx, idx] = np.exp(0.3 * rng.standard_normal((s, s)))
    return m, L


def gaussian_kl(m, S, P):
    """KL(N(m, S) || N(0, P)) via Cholesky solves and log-determinants."""
    k = len(m)
    Lp = nx.cholesky(P)
    A = np.linalg.solve(Lp, S)
    trace = np.trace(np.linalg.solve(Lp.T, A))
    z = np.linalg.solve(Lp, m)
    _, logdet_s = np.linalg.slogdet(S)
    logdet_p = 2.0 * np.log(np.diag(Lp)).sum()
    return 0.5 * (trace + z @ z - k + logdet_p - logdet_s)


def dense_kl(m_u, L_uu, lam):
    """Sum over output dimensions of the dense Gaussian KL against ``N(0, diag(lam)^2)``."""
    P = np.diag(np.asarray(lam, dtype=float) ** 2)
    return sum(gaussian_kl(m_u[:, d], L_uu[d] @ L_uu[d].T, P) for d in range(m_u.shape[1]))


def monte_carlo_kl(m_u, L_uu, lam, n, rng):
    """Sample estimate of the summed KL using scipy densities; returns ``(estimate, std_error)``."""
    lam = np.asarray(lam, dtype=float)
    s = m_u.shape[1]
    total, var = 0.0, 0.0
    prior = stats.multivariate_normal(np.zeros(len(lam)), np.diag(lam**2))
    for d in range(s):
        S = L_uu[d] @ L_uu[d].T
        q = stats.multivariate_normal(m_u[:, d], S)
        x = m_u[:, d] + rng.standard_normal((n, len(lam))) @ L_uu[d].T
        ratio = q.logpdf(x) - prior.logpdf(x)
        total += ratio.mean()
        var += ratio.var() / n
    return total, float(np.sqrt(var))


def truncation_gap(K_sym, s):
    """``sum_{i > s} eig_i^2`` of a symmetric PSD kernel."""
    eig = np.sort(np.linalg.eigvalsh(K_sym))[::-1]
    return float(np.sum(eig[s:] ** 2))


def pair_moments_dense(E_X, R_X, lam, m_u, L_uu):
    """Means ``N x s`` and covariances ``s x N x N`` of both branches by explicit products."""
    inv = np.diag(1.0 / np.asarray(lam, dtype=float))
    out = []
    for P in (E_X, R_X):
        A = P @ inv
        out.append((A @ m_u, np.stack([A @ L_uu[d] @ L_uu[d].T @ A.T for d in range(len(L_uu))])))
    return out
