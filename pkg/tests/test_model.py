import numpy as np
import pytest

from kepsvgp import numerics as nx
from kepsvgp.errors import FixedLengthViolation, InvalidConfig, ShapeMismatch, VocabularyOverflow
from kepsvgp.model import (
    AttentionLayerParams,
    Transformer,
    TransformerConfig,
    init_params,
    kep_attention_forward,
    layer_norm,
    predict_mc,
    sinusoidal_positions,
    softmax_attention_forward,
)
from kepsvgp.selftest import full_objective, perturbed_model


def _cfg(**kw):
    base = dict(vocab_size=6, seq_len=5, n_classes=3, n_layers=2, d_model=8, n_heads=2, d_k=4, rank=2)
    base.update(kw)
    return TransformerConfig(**base)


def _tokens(rng, n=3, N=5, vocab=6):
    return rng.integers(0, vocab, (n, N))


def test_config_defaults_and_validation():
    cfg = _cfg()
    assert cfg.kep_layers == [2] and cfg.d_v == 4 and cfg.d_ff == 16 and cfg.lowrank_rank == 2
    with pytest.raises(InvalidConfig):
        _cfg(kep_layers=[3])
    with pytest.raises(InvalidConfig):
        _cfg(merge="product")
    with pytest.raises(InvalidConfig):
        _cfg(rank=5)  # exceeds d_k
    with pytest.raises(InvalidConfig):
        _cfg(d_v=3)


def test_kep_heads_have_no_value_projection():
    params = init_params(_cfg(kep_layers=[1, 2]))
    assert not any(k.endswith("W_v") for k in params)
    assert "layer1.attn.head0.W_add" in params and "layer2.attn.head1.L_raw" in params


def test_kep_forward_mean_mode_is_zero_at_prior_and_deterministic(rng):
    cfg = _cfg()
    layer = AttentionLayerParams.from_flat(init_params(cfg), 2, cfg)
    X = rng.standard_normal((2, 5, 8))
    O1, kl, ksvd = kep_attention_forward(X, layer)
    O2, _, _ = kep_attention_forward(X, layer)
    np.testing.assert_array_equal(O1.data, 0.0)
    np.testing.assert_array_equal(O1.data, O2.data)
    assert float(nx._t(kl).data) == 0.0 and float(nx._t(ksvd).data) > 0


def test_kep_forward_sample_mode_is_seeded(rng):
    cfg = _cfg()
    model = perturbed_model(cfg, 0)
    layer = model.layer(2)
    X = rng.standard_normal((2, 5, 8))
    a = kep_attention_forward(X, layer, nx.make_rng(9), "sample")[0].data
    b = kep_attention_forward(X, layer, nx.make_rng(9), "sample")[0].data
    c = kep_attention_forward(X, layer, nx.make_rng(10), "sample")[0].data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    with pytest.raises(ValueError):
        kep_attention_forward(X, layer, None, "sample")


def test_kep_concatenation_requires_fixed_length(rng):
    cfg = _cfg(merge="concatenation")
    model = Transformer(cfg)
    with pytest.raises(FixedLengthViolation):
        model.forward(_tokens(rng, N=4))
    with pytest.raises(ShapeMismatch):
        model.forward(_tokens(rng, N=6))
    with pytest.raises(ValueError):
        model.forward(_tokens(rng), mask=np.ones((3, 5), bool))


def test_addition_mask_matches_truncated_sequence(rng):
    cfg = _cfg(kep_layers=[1, 2])
    model = perturbed_model(cfg, 1)
    tok = _tokens(rng, n=1)
    mask = np.array([[1, 1, 1, 0, 0]], bool)
    padded = model.forward(tok, mask=mask).logits.data
    short = model.forward(tok[:, :3]).logits.data
    np.testing.assert_allclose(padded, short, atol=1e-12)


def test_softmax_forward_examples(rng):
    cfg = _cfg(kep_layers=[])
    params = init_params(cfg)
    layer = AttentionLayerParams.from_flat(params, 1, cfg)
    X = rng.standard_normal((5, 8))
    for h in layer.heads:
        h.proj.W_v = nx.Tensor(np.zeros_like(h.proj.W_v.data))
    np.testing.assert_array_equal(softmax_attention_forward(X, layer).data, 0.0)

    layer = AttentionLayerParams.from_flat(params, 1, cfg)
    x1 = X[:1]
    want = np.concatenate([x1 @ h.proj.W_v.data.T for h in layer.heads], axis=1) @ layer.W_out.data
    np.testing.assert_allclose(softmax_attention_forward(x1, layer).data, want, atol=1e-14)

    for h in layer.heads:
        h.proj.W_q = nx.Tensor(np.zeros_like(h.proj.W_q.data))
    O = np.concatenate([np.tile((X @ h.proj.W_v.data.T).mean(axis=0), (5, 1)) for h in layer.heads], axis=1)
    np.testing.assert_allclose(softmax_attention_forward(X, layer).data, O @ layer.W_out.data, atol=1e-13)


def test_baseline_model_is_plain_transformer(rng):
    cfg = _cfg(kep_layers=[])
    model = Transformer(cfg, seed=3)
    tok = _tokens(rng)
    rec = model.forward(tok)
    assert float(rec.kl_sum.data) == 0.0 and float(rec.ksvd_sum.data) == 0.0
    p = {k: v.data for k, v in model.params.items()}
    x = p["embed"][tok] + sinusoidal_positions(5, 8)
    for l in (1, 2):
        h = layer_norm(nx.Tensor(x), p[f"layer{l}.ln1.g"], p[f"layer{l}.ln1.b"]).data
        x = x + softmax_attention_forward(h, model.layer(l)).data
        h = layer_norm(nx.Tensor(x), p[f"layer{l}.ln2.g"], p[f"layer{l}.ln2.b"]).data
        h = nx.gelu(h @ p[f"layer{l}.ff.W1"] + p[f"layer{l}.ff.b1"]).data
        x = x + h @ p[f"layer{l}.ff.W2"] + p[f"layer{l}.ff.b2"]
    logits = x.mean(axis=1) @ p["cls.W"] + p["cls.b"]
    np.testing.assert_array_equal(rec.logits.data, logits)


def test_logit_shape_and_vocab_overflow(rng):
    model = Transformer(_cfg())
    assert model.forward(_tokens(rng, n=7)).logits.shape == (7, 3)
    with pytest.raises(VocabularyOverflow):
        model.forward(np.full((1, 5), 6))


def test_sinusoidal_positions():
    P = sinusoidal_positions(4, 6)
    np.testing.assert_allclose(P[0], [0, 1, 0, 1, 0, 1])
    np.testing.assert_allclose(P[2, 0], np.sin(2.0))


@pytest.mark.parametrize("merge,kep", [("addition", [2]), ("concatenation", [1, 2]), ("concatenation-lowrank", [1])])
def test_full_model_gradient_check(merge, kep):
    cfg = TransformerConfig(vocab_size=5, seq_len=6, n_classes=3, n_layers=2, d_model=4, n_heads=2, d_k=3,
                            rank=2, merge=merge, lowrank_rank=2, kep_layers=kep)
    model = perturbed_model(cfg, 4)
    rng = np.random.default_rng(0)
    tokens, labels = rng.integers(0, 5, (2, 6)), rng.integers(0, 3, 2)
    rep = nx.grad_check(full_objective(model, tokens, labels), model.params)
    assert set(rep.errors) == set(model.params)
    assert rep.passed(1e-4), rep.worst()


def test_predict_mc_contract(rng):
    base = Transformer(_cfg(kep_layers=[]))
    tok = _tokens(rng, n=4)
    probs, per = predict_mc(base, tok, T=1)
    logits = base.forward(tok).logits.data
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    np.testing.assert_allclose(probs, e / e.sum(axis=1, keepdims=True), atol=1e-15)
    kep = perturbed_model(_cfg(), 2)
    probs, per = predict_mc(kep, tok, T=5, seed=1)
    assert per.shape == (5, 4, 3)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((probs >= 0) & (probs <= 1))
    np.testing.assert_array_equal(probs, predict_mc(kep, tok, T=5, seed=1)[0])
    with pytest.raises(ValueError):
        predict_mc(kep, tok, T=0)


def test_predict_mc_variance_shrinks_like_one_over_T(rng):
    model = perturbed_model(_cfg(), 3, scale=0.8)
    tok = _tokens(rng, n=2)
    var = {}
    for T in (1, 10):
        draws = np.stack([predict_mc(model, tok, T, seed)[0] for seed in range(60)])
        var[T] = draws.var(axis=0).mean()
    slope = np.log(var[10] / var[1]) / np.log(10)
    assert -1.4 < slope < -0.6
