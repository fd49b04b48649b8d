"""Transformer classifier with optional KEP-SVGP attention layers.

Parameters live in one flat, ordered ``dict[str, Tensor]``; the layer
dataclasses below are views over that dict so optimizers and checkpoints only
ever deal with names and arrays.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import numerics as nx
from .errors import FixedLengthViolation, InvalidConfig, ShapeMismatch, VocabularyOverflow
from .kernels import ProjectionWeights, feature_maps, softmax_attention
from .ksvd import KsvdParams, ksvd_loss, projections
from .svgp import MergeWeights, VariationalParams, kl_term, merge, pair_posterior, sample_pair

MERGE_SCHEMES = ("addition", "concatenation", "concatenation-lowrank")


@dataclass
class TransformerConfig:
    vocab_size: int
    seq_len: int
    n_classes: int
    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 2
    d_k: int = 16
    d_v: Optional[int] = None  # defaults to d_model // n_heads
    d_ff: Optional[int] = None  # defaults to 2 * d_model
    rank: int = 10
    merge: str = "addition"
    lowrank_rank: Optional[int] = None  # s_c of A B^T, defaults to rank
    kep_layers: Optional[list] = None  # 1-based; None -> [n_layers]
    precision: str = "double"

    def __post_init__(self):
        if self.d_v is None:
            self.d_v = self.d_model // self.n_heads
        if self.d_ff is None:
            self.d_ff = 2 * self.d_model
        if self.lowrank_rank is None:
            self.lowrank_rank = self.rank
        if self.kep_layers is None:
            self.kep_layers = [self.n_layers]
        self.kep_layers = sorted(set(int(k) for k in self.kep_layers))
        self.validate()

    def validate(self):
        if self.d_model != self.n_heads * self.d_v:
            raise InvalidConfig(f"d_model={self.d_model} must equal n_heads*d_v={self.n_heads * self.d_v}")
        if not set(self.kep_layers) <= set(range(1, self.n_layers + 1)):
            raise InvalidConfig(f"kep_layers {self.kep_layers} not within 1..{self.n_layers}")
        if self.merge not in MERGE_SCHEMES:
            raise InvalidConfig(f"merge must be one of {MERGE_SCHEMES}, got {self.merge!r}")
        if self.kep_layers and (self.rank > self.d_k or self.rank > self.seq_len):
            raise InvalidConfig(f"rank s={self.rank} must not exceed d_k={self.d_k} or seq_len={self.seq_len}")
        if self.precision not in ("double", "single"):
            raise InvalidConfig(f"precision must be 'double' or 'single', got {self.precision!r}")
        for name in ("vocab_size", "seq_len", "n_classes", "n_layers", "d_model", "n_heads", "d_k", "rank"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be positive")

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32

    def is_kep(self, layer):
        return layer in self.kep_layers

    def to_dict(self):
        return asdict(self)


# parameter views -------------------------------------------------------------------
@dataclass
class HeadParams:
    proj: ProjectionWeights
    ksvd: Optional[KsvdParams] = None
    variational: Optional[VariationalParams] = None
    merge: Optional[MergeWeights] = None


@dataclass
class AttentionLayerParams:
    heads: list
    W_out: nx.Tensor  # (n_heads * d_v) x d_model
    kep: bool = False

    @classmethod
    def from_flat(cls, params, layer, cfg: TransformerConfig):
        pre = f"layer{layer}.attn"
        kep = cfg.is_kep(layer)
        heads = []
        for h in range(cfg.n_heads):
            hp = f"{pre}.head{h}"
            if not kep:
                heads.append(HeadParams(ProjectionWeights(params[f"{hp}.W_q"], params[f"{hp}.W_k"], params[f"{hp}.W_v"])))
                continue
            if cfg.merge == "addition":
                mw = MergeWeights("addition", W_add=params[f"{hp}.W_add"])
            elif cfg.merge == "concatenation":
                mw = MergeWeights("concatenation", W_cat1=params[f"{hp}.W_cat1"], W_cat2=params[f"{hp}.W_cat2"])
            else:
                mw = MergeWeights(
                    "concatenation-lowrank", A=params[f"{hp}.A"], B=params[f"{hp}.B"], W_cat2=params[f"{hp}.W_cat2"]
                )
            heads.append(
                HeadParams(
                    ProjectionWeights(params[f"{hp}.W_q"], params[f"{hp}.W_k"]),
                    KsvdParams(params[f"{hp}.W_e"], params[f"{hp}.W_r"], params[f"{hp}.theta"]),
                    VariationalParams(params[f"{hp}.m_u"], params[f"{hp}.L_raw"]),
                    mw,
                )
            )
        return cls(heads, params[f"{pre}.W_out"], kep)


def init_params(cfg: TransformerConfig, seed=0):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) projections; KEP heads start at the prior."""
    rng = nx.make_rng(seed)
    dt = cfg.dtype
    params = {}

    def uni(name, shape, fan_in):
        b = 1.0 / np.sqrt(fan_in)
        params[name] = nx.Tensor(rng.uniform(-b, b, shape).astype(dt), requires_grad=True, name=name)

    def const(name, value):
        params[name] = nx.Tensor(np.array(value, dtype=dt), requires_grad=True, name=name)

    d, s, N = cfg.d_model, cfg.rank, cfg.seq_len
    uni("embed", (cfg.vocab_size, d), cfg.vocab_size)  # a projection of one-hot tokens
    for layer in range(1, cfg.n_layers + 1):
        pre = f"layer{layer}"
        const(f"{pre}.ln1.g", np.ones(d))
        const(f"{pre}.ln1.b", np.zeros(d))
        for h in range(cfg.n_heads):
            hp = f"{pre}.attn.head{h}"
            uni(f"{hp}.W_q", (cfg.d_k, d), d)
            uni(f"{hp}.W_k", (cfg.d_k, d), d)
            if not cfg.is_kep(layer):
                uni(f"{hp}.W_v", (cfg.d_v, d), d)
                continue
            uni(f"{hp}.W_e", (cfg.d_k, s), cfg.d_k)
            uni(f"{hp}.W_r", (cfg.d_k, s), cfg.d_k)
            const(f"{hp}.theta", np.zeros(s))
            const(f"{hp}.m_u", np.zeros((s, s)))
            const(f"{hp}.L_raw", np.zeros((s, s, s)))
            if cfg.merge == "addition":
                uni(f"{hp}.W_add", (s, cfg.d_v), s)
            elif cfg.merge == "concatenation":
                uni(f"{hp}.W_cat1", (N, 2 * N), 2 * N)
                uni(f"{hp}.W_cat2", (s, cfg.d_v), s)
            else:
                uni(f"{hp}.A", (N, cfg.lowrank_rank), cfg.lowrank_rank)
                uni(f"{hp}.B", (2 * N, cfg.lowrank_rank), 2 * N)
                uni(f"{hp}.W_cat2", (s, cfg.d_v), s)
        uni(f"{pre}.attn.W_out", (cfg.n_heads * cfg.d_v, d), cfg.n_heads * cfg.d_v)
        const(f"{pre}.ln2.g", np.ones(d))
        const(f"{pre}.ln2.b", np.zeros(d))
        uni(f"{pre}.ff.W1", (d, cfg.d_ff), d)
        const(f"{pre}.ff.b1", np.zeros(cfg.d_ff))
        uni(f"{pre}.ff.W2", (cfg.d_ff, d), cfg.d_ff)
        const(f"{pre}.ff.b2", np.zeros(d))
    uni("cls.W", (d, cfg.n_classes), d)
    const("cls.b", np.zeros(cfg.n_classes))
    return params


# attention layers ---------------------------------------------------------------------
def kep_attention_forward(X, layer: AttentionLayerParams, rng=None, mode="mean", mask=None):
    """KEP-SVGP attention over ``X`` of shape ``(B, N, d_model)``.

    Per head: cosine features, primal KSVD projections, the shared-q(u)
    pair posterior, one reparameterized draw (the mean when
    ``mode == "mean"``) and the merge projection.  Returns the output, the
    summed KL of all heads and the summed KSVD loss of all heads.
    """
    X = nx._t(X)
    if mode not in ("mean", "sample"):
        raise ValueError(f"mode must be 'mean' or 'sample', got {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sample mode needs an rng")
    outs, kl, ksvd = [], 0.0, 0.0
    for head in layer.heads:
        if head.merge.scheme != "addition" and X.shape[-2] != head.merge.seq_len:
            raise FixedLengthViolation(f"sequence length {X.shape[-2]} != configured {head.merge.seq_len}")
        if mask is not None and head.merge.scheme != "addition":
            raise ValueError("padding masks are only supported with the addition merge")
        fp = feature_maps(X, head.proj, mask=mask)
        E_X, R_X = projections(fp, head.ksvd)
        lam = head.ksvd.lam
        pp = pair_posterior(E_X, R_X, lam, head.variational)
        eps = None
        if mode == "sample":
            s = head.ksvd.s
            eps = nx.sample_standard_normal(X.shape[:-2] + (s, s), rng, dtype=X.dtype)
        F_e, F_r = sample_pair(pp, eps)
        outs.append(merge(F_e, F_r, head.merge))
        kl = kl + kl_term(head.variational, lam)
        ksvd = ksvd + ksvd_loss(E_X, R_X, head.ksvd)
    O = nx.concat(outs, axis=-1) @ layer.W_out
    return O, kl, ksvd


def softmax_attention_forward(X, layer: AttentionLayerParams):
    X = nx._t(X)
    outs = []
    for head in layer.heads:
        w = head.proj
        A = softmax_attention(X @ w.W_q.T, X @ w.W_k.T)
        outs.append(A @ (X @ w.W_v.T))
    return nx.concat(outs, axis=-1) @ layer.W_out


def attention_matrices(X, layer: AttentionLayerParams):
    """Per-head attention kernel matrices ``(n_heads, ..., N, N)`` for spectrum analysis."""
    mats = []
    for head in layer.heads:
        w = head.proj
        if layer.kep:
            fp = feature_maps(X, w)
            mats.append(np.asarray(fp.phi_q @ fp.phi_k.T))
        else:
            mats.append(np.asarray(softmax_attention(X @ w.W_q.T, X @ w.W_k.T)))
    return np.stack(mats)


# full network ----------------------------------------------------------------------------
def layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / nx.sqrt(var + eps) * g + b


def sinusoidal_positions(n, d, dtype=np.float64):
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)


@dataclass
class ForwardRecord:
    logits: nx.Tensor  # batch x classes
    kl_sum: object = 0.0
    ksvd_sum: object = 0.0


class Transformer:
    """Pre-norm encoder, mean pooling and a linear classifier."""

    def __init__(self, config: TransformerConfig, params=None, seed=0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    @property
    def has_kep(self):
        return bool(self.config.kep_layers)

    def layer(self, index):
        return AttentionLayerParams.from_flat(self.params, index, self.config)

    def embed(self, tokens):
        cfg = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.size and (tokens.max() >= cfg.vocab_size or tokens.min() < 0):
            raise VocabularyOverflow(f"token id {tokens.max()} outside vocabulary of {cfg.vocab_size}")
        if tokens.shape[1] > cfg.seq_len:
            raise ShapeMismatch(f"sequence length {tokens.shape[1]} exceeds max {cfg.seq_len}")
        pos = sinusoidal_positions(tokens.shape[1], cfg.d_model, cfg.dtype)
        return nx.take_rows(self.params["embed"], tokens) + pos

    def hidden_states(self, tokens, rng=None, mode="mean", mask=None):
        """Run the blocks; returns ``(x, kl, ksvd, attention_inputs)`` with one normalized input per layer."""
        p = self.params
        x = self.embed(tokens)
        kl, ksvd = 0.0, 0.0
        states = []
        for layer in range(1, self.config.n_layers + 1):
            pre = f"layer{layer}"
            h = layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
            states.append(h)
            attn = self.layer(layer)
            if attn.kep:
                a, kl_l, ksvd_l = kep_attention_forward(h, attn, rng, mode, mask)
                kl, ksvd = kl + kl_l, ksvd + ksvd_l
            else:
                a = softmax_attention_forward(h, attn)
            x = x + a
            h = layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
            h = nx.gelu(h @ p[f"{pre}.ff.W1"] + p[f"{pre}.ff.b1"])
            x = x + (h @ p[f"{pre}.ff.W2"] + p[f"{pre}.ff.b2"])
        return x, kl, ksvd, states

    def forward(self, tokens, rng=None, mode="mean", mask=None) -> ForwardRecord:
        x, kl, ksvd, _ = self.hidden_states(tokens, rng, mode, mask)
        if mask is None:
            pooled = x.mean(axis=-2)
        else:
            keep = np.asarray(mask, dtype=x.dtype)[..., None]
            pooled = (x * keep).sum(axis=-2) / np.maximum(keep.sum(axis=-2), 1.0)
        logits = pooled @ self.params["cls.W"] + self.params["cls.b"]
        return ForwardRecord(logits, nx._t(kl), nx._t(ksvd))


def transformer_forward(tokens, model: Transformer, rng=None, mode="mean", mask=None) -> ForwardRecord:
    return model.forward(tokens, rng, mode, mask)


def _softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_mc(model: Transformer, tokens, T=10, seed=0, batch_size=256):
    """Average of ``T`` softmaxed stochastic forwards.

    Returns ``(mean_probs, per_sample_probs)`` with shapes ``(n, C)`` and
    ``(T, n, C)``.  Models without KEP layers are deterministic, so every
    sample equals the plain forward.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    tokens = np.asarray(tokens)
    rng = nx.make_rng(seed)
    mode = "sample" if model.has_kep else "mean"
    samples = []
    for _ in range(T):
        chunks = []
        for start in range(0, len(tokens), batch_size):
            rec = model.forward(tokens[start : start + batch_size], rng, mode)
            chunks.append(_softmax_np(np.asarray(rec.logits, dtype=np.float64)))
        samples.append(np.concatenate(chunks))
    per_sample = np.stack(samples)
    return per_sample.mean(axis=0), per_sample
