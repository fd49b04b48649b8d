"""Primal KSVD projections of the attention kernel and their dual/SVD oracles."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ShapeMismatch, ZeroMatrix
from .kernels import FeaturePair

LAMBDA_FLOOR = 1e-6


def lambdas(theta, floor=None):
    """Singular-value parameters ``max(exp(theta), floor)``."""
    if floor is None:
        floor = LAMBDA_FLOOR
    return nx.clamp_min(nx.exp(theta), floor)


@dataclass
class KsvdParams:
    W_e: nx.Tensor  # d_k x s
    W_r: nx.Tensor  # d_k x s
    theta: nx.Tensor  # s

    def __post_init__(self):
        self.W_e, self.W_r, self.theta = (nx._t(a) for a in (self.W_e, self.W_r, self.theta))
        if self.W_e.shape != self.W_r.shape or self.W_e.shape[1:] != self.theta.shape:
            raise ShapeMismatch(f"W_e {self.W_e.shape}, W_r {self.W_r.shape}, theta {self.theta.shape}")

    @property
    def s(self):
        return self.theta.shape[0]

    @property
    def lam(self):
        return lambdas(self.theta)

    @classmethod
    def init(cls, d_k, s, rng):
        bound = 1.0 / np.sqrt(d_k)
        return cls(
            rng.uniform(-bound, bound, (d_k, s)),
            rng.uniform(-bound, bound, (d_k, s)),
            np.zeros(s),
        )


@dataclass
class DualFactors:
    """Left/right singular vectors ``H_e``, ``H_r`` (``N x s``) and values ``lam``."""

    H_e: np.ndarray
    H_r: np.ndarray
    lam: np.ndarray

    @classmethod
    def from_svd(cls, K_att, s):
        U, S, V = nx.svd(K_att)
        return cls(U[:, :s], V[:, :s], S[:s])


def projections(fp: FeaturePair, p: KsvdParams):
    """Primal scores ``E_X = phi_q W_e`` and ``R_X = phi_k W_r``."""
    if fp.phi_q.shape[-1] != p.W_e.shape[0]:
        raise ShapeMismatch(f"features of width {fp.phi_q.shape[-1]} vs W_e {p.W_e.shape}")
    return fp.phi_q @ p.W_e, fp.phi_k @ p.W_r


def dual_projections(K_att, df: DualFactors):
    """Dual scores ``E = K H_r`` and ``R = K^T H_e``."""
    K = np.asarray(K_att)
    if K.shape[1] != df.H_r.shape[0] or K.shape[0] != df.H_e.shape[0]:
        raise ShapeMismatch(f"kernel {K.shape} vs factors {df.H_e.shape}, {df.H_r.shape}")
    return K @ df.H_r, K.T @ df.H_e


def kkt_weights(fp: FeaturePair, df: DualFactors):
    """Primal weights at a stationary point: ``W_e = phi_k^T H_r``, ``W_r = phi_q^T H_e``."""
    return np.asarray(fp.phi_k).T @ df.H_r, np.asarray(fp.phi_q).T @ df.H_e


def ksvd_objective(E_X, R_X, p: KsvdParams):
    """J = -1/2 sum e^T L^-1 e - 1/2 sum r^T L^-1 r + Tr(W_e^T W_r), per sequence.

    Leading batch axes of ``E_X``/``R_X`` are kept; the sum runs over tokens.
    """
    E_X, R_X = nx._t(E_X), nx._t(R_X)
    inv = 1.0 / p.lam
    var_e = (E_X * E_X * inv).sum(axis=(-2, -1))
    var_r = (R_X * R_X * inv).sum(axis=(-2, -1))
    coupling = (p.W_e * p.W_r).sum()
    return -0.5 * var_e - 0.5 * var_r + coupling


def ksvd_loss(E_X, R_X, p: KsvdParams):
    """Squared KSVD objective; with a batch axis the mean of the per-sequence squares."""
    J = ksvd_objective(E_X, R_X, p)
    return (J * J).mean() if J.ndim else J * J


@dataclass
class EigenResiduals:
    shifted_e: float  # ||K H_r - H_e L||
    shifted_r: float  # ||K^T H_e - H_r L||
    symmetric_e: float  # ||K K^T H_e - H_e L^2||
    symmetric_r: float  # ||K^T K H_r - H_r L^2||

    def max(self):
        return max(self.shifted_e, self.shifted_r, self.symmetric_e, self.symmetric_r)


def verify_eigenproblems(K_att, df: DualFactors) -> EigenResiduals:
    K = np.asarray(K_att)
    E, R = dual_projections(K, df)
    lam = np.asarray(df.lam)
    fro = np.linalg.norm
    return EigenResiduals(
        fro(E - df.H_e * lam),
        fro(R - df.H_r * lam),
        fro(K @ (K.T @ df.H_e) - df.H_e * lam**2),
        fro(K.T @ (K @ df.H_r) - df.H_r * lam**2),
    )


def spectrum(K_att):
    """Normalized cumulative singular values ``c_k``."""
    _, S, _ = nx.svd(K_att)
    total = S.sum()
    if total <= 0:
        raise ZeroMatrix("all singular values are zero")
    c = np.cumsum(S) / total
    c[-1] = 1.0
    return c
