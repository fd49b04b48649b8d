"""Attention kernels: cosine query/key feature maps and the softmax baseline."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numerics as nx
from .errors import ShapeMismatch

EPS_NORM = 1e-8


@dataclass
class ProjectionWeights:
    """Query, key and value maps stored as ``d_k x d``, ``d_k x d``, ``d_v x d``.

    KEP heads never read values, so ``W_v`` may be left out for them.
    """

    W_q: nx.Tensor
    W_k: nx.Tensor
    W_v: Optional[nx.Tensor] = None

    def __post_init__(self):
        self.W_q, self.W_k = nx._t(self.W_q), nx._t(self.W_k)
        if self.W_q.shape != self.W_k.shape:
            raise ShapeMismatch(f"W_q {self.W_q.shape} and W_k {self.W_k.shape} must match (d_q = d_k)")
        if self.W_v is not None:
            self.W_v = nx._t(self.W_v)
            if self.W_v.shape[1] != self.W_q.shape[1]:
                raise ShapeMismatch("W_v must act on the same input width as W_q")

    @property
    def d_k(self):
        return self.W_q.shape[0]

    @property
    def d_v(self):
        return self.W_v.shape[0]


@dataclass
class FeaturePair:
    """Row-normalized query features ``phi_q`` and key features ``phi_k`` (``... x N x d_k``)."""

    phi_q: nx.Tensor
    phi_k: nx.Tensor


def feature_maps(X, w: ProjectionWeights, eps_norm=EPS_NORM, mask=None) -> FeaturePair:
    """Cosine feature maps ``W x / max(||W x||, eps_norm)`` for queries and keys.

    ``X`` has shape ``(..., N, d)``.  An optional boolean ``mask`` of shape
    ``(..., N)`` zeroes the features of padded positions, which removes their
    rows and columns from the kernel.
    """
    X = nx._t(X)
    if X.shape[-1] != w.W_q.shape[1]:
        raise ShapeMismatch(f"tokens of width {X.shape[-1]} do not fit W_q {w.W_q.shape}")
    phi_q = nx.l2_normalize(X @ w.W_q.T, eps_norm)
    phi_k = nx.l2_normalize(X @ w.W_k.T, eps_norm)
    if mask is not None:
        keep = np.asarray(mask, dtype=phi_q.dtype)[..., None]
        phi_q = phi_q * keep
        phi_k = phi_k * keep
    return FeaturePair(phi_q, phi_k)


def attention_kernel(fp: FeaturePair):
    """Asymmetric kernel matrix ``K[i, j] = <phi_q(x_i), phi_k(x_j)>``."""
    if fp.phi_q.shape != fp.phi_k.shape:
        raise ShapeMismatch(f"query features {fp.phi_q.shape} vs key features {fp.phi_k.shape}")
    return fp.phi_q @ fp.phi_k.T


def softmax_attention(Q, K):
    """Row-stochastic ``softmax(Q K^T / sqrt(d_k))``."""
    Q, K = nx._t(Q), nx._t(K)
    d_k = Q.shape[-1]
    if d_k <= 0:
        raise ShapeMismatch("d_k must be positive")
    return nx.softmax((Q @ K.T) / np.sqrt(d_k), axis=-1)
