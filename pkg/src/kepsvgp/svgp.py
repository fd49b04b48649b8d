"""Gaussian-process posteriors: exact and sparse oracles, kernel-eigen features,
the adjoint pair posterior used inside attention, sampling, merging and the KL term.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numerics as nx
from .errors import EigenMismatch, FixedLengthViolation, ShapeMismatch, SingularSystem


# dense oracles --------------------------------------------------------------------
def _solve(A, B):
    try:
        out = np.linalg.solve(A, B)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from None
    if not np.all(np.isfinite(out)):
        raise SingularSystem("solution is not finite")
    return out


def exact_gp_posterior(K_XX, K_sX, K_ss, y, noise_var):
    """Posterior predictive of a GP regression with Gaussian noise ``noise_var``."""
    K_XX, K_sX, K_ss = (np.asarray(a, dtype=float) for a in (K_XX, K_sX, K_ss))
    y = np.asarray(y, dtype=float)
    A = K_XX + noise_var * np.eye(len(K_XX))
    if np.linalg.cond(A) > 1e14:
        raise SingularSystem("K_XX + noise I is numerically singular")
    mean = K_sX @ _solve(A, y)
    cov = K_ss - K_sX @ _solve(A, K_sX.T)
    return mean, cov


def svgp_posterior(K_XZ, K_ZZ, K_XX, m, S):
    """q(f) for inducing points with q(u) = N(m, S)."""
    K_XZ, K_ZZ, K_XX, S = (np.asarray(a, dtype=float) for a in (K_XZ, K_ZZ, K_XX, S))
    m = np.asarray(m, dtype=float)
    A = _solve(K_ZZ, K_XZ.T).T  # K_XZ K_ZZ^-1
    return A @ m, K_XX - A @ (K_ZZ - S) @ A.T


def kernel_eigen_posterior(K_XX, H, lam, m, S, truncated=False, tol=1e-6):
    """SVGP posterior whose inducing features are the top-s eigenvectors ``H`` of ``K_XX``.

    With ``truncated=True`` the residual spectrum is dropped, giving
    ``N(H m, H S H^T)``.
    """
    K_XX, H, S = (np.asarray(a, dtype=float) for a in (K_XX, H, S))
    lam = np.asarray(lam, dtype=float)
    m = np.asarray(m, dtype=float)
    resid = np.linalg.norm(K_XX @ H - H * lam)
    if resid > tol * max(1.0, np.linalg.norm(K_XX)):
        raise EigenMismatch(f"K H != H Lambda (residual {resid:.3g})")
    if truncated:
        return H @ m, H @ S @ H.T
    K_XU = H * lam  # H Lambda
    inv = 1.0 / lam
    mean = (K_XU * inv) @ m
    middle = inv[:, None] * (np.diag(lam) - S) * inv[None, :]
    return mean, K_XX - K_XU @ middle @ K_XU.T


# variational parameters -----------------------------------------------------------
@dataclass
class VariationalParams:
    """Shared inducing distribution of one head.

    ``m_u`` is ``s x s`` with column ``d`` the mean for output dimension
    ``d``.  ``L_raw`` is ``s x s x s`` with slice ``L_raw[d]`` holding the
    Cholesky factor of ``S_uu[d]``: strictly-lower entries as-is and the
    diagonal in log space, so the factor is always valid.
    """

    m_u: nx.Tensor
    L_raw: nx.Tensor

    def __post_init__(self):
        self.m_u, self.L_raw = nx._t(self.m_u), nx._t(self.L_raw)
        s = self.m_u.shape[0]
        if self.m_u.shape != (s, s) or self.L_raw.shape != (s, s, s):
            raise ShapeMismatch(f"m_u {self.m_u.shape} / L_raw {self.L_raw.shape} are not s x s / s x s x s")

    @property
    def s(self):
        return self.m_u.shape[0]

    @classmethod
    def prior(cls, s, dtype=nx.DEFAULT_DTYPE):
        """m_u = 0 and every L_uu[d] = I."""
        return cls(np.zeros((s, s), dtype=dtype), np.zeros((s, s, s), dtype=dtype))

    @classmethod
    def from_cholesky(cls, m_u, L_uu):
        L_uu = np.array(L_uu, dtype=float)
        if L_uu.ndim == 2:
            L_uu = L_uu[None]
        diag = np.diagonal(L_uu, axis1=-2, axis2=-1)
        if np.any(diag <= 0) or np.any(np.triu(L_uu, 1)):
            raise ValueError("L_uu slices must be lower triangular with a positive diagonal")
        raw = np.tril(L_uu, -1)
        i = np.arange(L_uu.shape[-1])
        raw[:, i, i] = np.log(diag)
        return cls(np.asarray(m_u, dtype=float), raw)

    @property
    def L_uu(self):
        s = self.s
        lower = np.tril(np.ones((s, s), dtype=self.L_raw.dtype), -1)
        eye = np.eye(s, dtype=self.L_raw.dtype)
        return self.L_raw * lower + nx.exp(self.L_raw * eye) * eye

    @property
    def log_diag(self):
        """log of the factor diagonals, ``s x s`` (row d = slice d)."""
        i = np.arange(self.s)
        return self.L_raw[:, i, i]

    def S_uu(self):
        L = np.asarray(self.L_uu)
        return L @ np.swapaxes(L, -1, -2)


# pair posterior ----------------------------------------------------------------------
@dataclass
class PairPosterior:
    """Means ``(..., N, s)`` and per-dimension factors ``(..., s, N, s)`` of both branches."""

    mean_e: nx.Tensor
    mean_r: nx.Tensor
    chol_e: nx.Tensor
    chol_r: nx.Tensor

    def covariances(self):
        """Dense covariances ``(..., s, N, N)`` of both branches."""
        Le, Lr = np.asarray(self.chol_e), np.asarray(self.chol_r)
        return Le @ np.swapaxes(Le, -1, -2), Lr @ np.swapaxes(Lr, -1, -2)


def pair_posterior(E_X, R_X, lam, v: VariationalParams) -> PairPosterior:
    """Truncated posteriors of the two SVGPs sharing q(u).

    ``m_e[:, d] = E_X L^-1 m_u[:, d]`` and ``chol_e[d] = E_X L^-1 L_uu[d]``,
    likewise for the r-branch with ``R_X``.  Lambda is diagonal, so only its
    elementwise reciprocal is needed.
    """
    E_X, R_X, lam = nx._t(E_X), nx._t(R_X), nx._t(lam)
    s = v.s
    if E_X.shape[-1] != s or R_X.shape != E_X.shape or lam.shape != (s,):
        raise ShapeMismatch(f"E_X {E_X.shape}, R_X {R_X.shape}, lam {lam.shape} for s={s}")
    A_e = E_X / lam
    A_r = R_X / lam
    L = v.L_uu
    return PairPosterior(
        A_e @ v.m_u,
        A_r @ v.m_u,
        nx.expand_dims(A_e, -3) @ L,
        nx.expand_dims(A_r, -3) @ L,
    )


def sample_pair(pp: PairPosterior, eps=None):
    """Reparameterized draws ``F = m + L eps`` for both branches with the same ``eps``.

    ``eps`` has shape ``(..., s, s)``: ``eps[..., d, :]`` drives output
    dimension ``d``.  ``None`` returns the means.
    """
    if eps is None:
        return pp.mean_e, pp.mean_r
    eps = np.asarray(eps)
    s = pp.mean_e.shape[-1]
    if eps.shape[-2:] != (s, s):
        raise ShapeMismatch(f"eps trailing shape {eps.shape[-2:]} != ({s}, {s})")
    e = eps[..., :, None, :]
    noise_e = (pp.chol_e * e).sum(axis=-1).swapaxes(-1, -2)
    noise_r = (pp.chol_r * e).sum(axis=-1).swapaxes(-1, -2)
    return pp.mean_e + noise_e, pp.mean_r + noise_r


# merging -----------------------------------------------------------------------------
@dataclass
class MergeWeights:
    scheme: str  # addition | concatenation | concatenation-lowrank
    W_add: Optional[nx.Tensor] = None  # s x d_v
    W_cat1: Optional[nx.Tensor] = None  # N x 2N
    W_cat2: Optional[nx.Tensor] = None  # s x d_v
    A: Optional[nx.Tensor] = None  # N x s_c
    B: Optional[nx.Tensor] = None  # 2N x s_c

    _FIELDS = {
        "addition": ("W_add",),
        "concatenation": ("W_cat1", "W_cat2"),
        "concatenation-lowrank": ("A", "B", "W_cat2"),
    }

    def __post_init__(self):
        if self.scheme not in self._FIELDS:
            raise ValueError(f"unknown merge scheme {self.scheme!r}")
        wanted = self._FIELDS[self.scheme]
        for name in ("W_add", "W_cat1", "W_cat2", "A", "B"):
            value = getattr(self, name)
            if (value is None) == (name in wanted):
                raise ValueError(f"scheme {self.scheme!r} requires exactly {wanted}")
            if value is not None:
                setattr(self, name, nx._t(value))

    @property
    def seq_len(self):
        if self.scheme == "concatenation":
            return self.W_cat1.shape[0]
        if self.scheme == "concatenation-lowrank":
            return self.A.shape[0]
        return None


def merge(F_e, F_r, w: MergeWeights):
    F_e, F_r = nx._t(F_e), nx._t(F_r)
    if w.scheme == "addition":
        return (F_e + F_r) @ w.W_add
    N = F_e.shape[-2]
    if N != w.seq_len:
        raise FixedLengthViolation(f"concatenation merge configured for N={w.seq_len}, got N={N}")
    F_cat = nx.concat([F_e, F_r], axis=-2)  # stacked along the sequence axis: 2N x s
    if w.scheme == "concatenation":
        return w.W_cat1 @ F_cat @ w.W_cat2
    # A (B^T F) keeps the cost linear in N
    return w.A @ (w.B.T @ F_cat) @ w.W_cat2


# KL ------------------------------------------------------------------------------------
def kl_term(v: VariationalParams, lam):
    """sum_d KL(N(m_u[:, d], S_uu[d]) || N(0, Lambda^2)) in closed form."""
    lam = nx._t(lam)
    s = v.s
    # Work with L_uu[d] / lambda row-wise and the diagonal as a log-ratio, so
    # q equal to the prior gives ratios of exactly 1 and a KL of exactly 0.
    log_lam = nx.log(lam)
    lower = np.tril(np.ones((s, s), dtype=v.L_raw.dtype), -1)
    eye = np.eye(s, dtype=v.L_raw.dtype)
    delta = (v.L_raw * eye).sum(axis=-1) - log_lam.reshape(1, s)
    off = v.L_raw * lower / lam.reshape(1, s, 1)
    trace = (off * off).sum() + nx.exp(2.0 * delta).sum()
    mahal = ((v.m_u / lam.reshape(s, 1)) ** 2).sum()
    return 0.5 * (trace + mahal - 2.0 * delta.sum() - s * s)
