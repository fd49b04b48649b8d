"""Oracle suites run by ``kepsvgp selftest``.

Each suite is a function that raises ``AssertionError`` describing the first
failed comparison.  Sizes are kept small so the whole run takes seconds.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import ksvd as K
from . import metrics as M
from . import numerics as nx
from . import oracles
from .kernels import FeaturePair
from .model import Transformer, TransformerConfig
from .svgp import VariationalParams, kernel_eigen_posterior, kl_term, pair_posterior, sample_pair
from .training import elbo_loss, total_loss


def _check(ok, message):
    if not ok:
        raise AssertionError(message)


def _ksvd_instance(N, s, rng, d_k=None):
    """Random cosine kernel, its top-s SVD factors and the matching primal quantities."""
    Q, Kf, Kmat = oracles.random_cosine_kernel(N, d_k or N, rng)
    fp = FeaturePair(nx.Tensor(Q), nx.Tensor(Kf))
    df = K.DualFactors.from_svd(Kmat, s)
    W_e, W_r = K.kkt_weights(fp, df)
    params = K.KsvdParams(W_e, W_r, np.log(df.lam))
    E_X, R_X = K.projections(fp, params)
    return Kmat, df, params, np.asarray(E_X), np.asarray(R_X)


def suite_svd_residuals(seed=0):
    rng = nx.make_rng(seed)
    for s in (2, 4, 8):
        Kmat, df, *_ = _ksvd_instance(16, s, rng)
        res = K.verify_eigenproblems(Kmat, df)
        bound = 1e-8 * np.linalg.norm(Kmat)
        _check(res.max() <= bound, f"eigen residual {res.max():.3g} > {bound:.3g} (s={s})")


def suite_ksvd_stationarity(seed=1):
    rng = nx.make_rng(seed)
    for s in (2, 4, 8):
        _, _, params, E_X, R_X = _ksvd_instance(16, s, rng)
        loss = float(np.asarray(K.ksvd_loss(E_X, R_X, params).data))
        _check(loss <= 1e-12, f"KSVD loss at the KKT point is {loss:.3g} (s={s})")


def suite_kl_oracles(seed=2, mc_samples=200_000):
    rng = nx.make_rng(seed)
    for s in (1, 3, 5):
        m, L = oracles.random_variational(s, rng)
        theta = 0.3 * rng.standard_normal(s)
        lam = np.exp(theta)
        v = VariationalParams.from_cholesky(m, L)
        kl = float(np.asarray(kl_term(v, K.lambdas(nx.Tensor(theta))).data))
        dense = oracles.dense_kl(m, L, lam)
        _check(abs(kl - dense) <= 1e-10 * max(1.0, abs(dense)), f"closed-form KL {kl} vs dense {dense} (s={s})")
        est, se = oracles.monte_carlo_kl(m, L, lam, mc_samples, rng)
        _check(abs(kl - est) <= max(5 * se, 0.02 * abs(kl)), f"closed-form KL {kl} vs Monte-Carlo {est} +- {se}")
    # prior matches itself exactly
    prior = VariationalParams.prior(4)
    _check(float(np.asarray(kl_term(prior, np.ones(4)).data)) == 0.0, "KL of the prior against itself is not 0")
    # a collapsed singular value must stay finite thanks to the floor
    theta = np.array([-400.0, 0.0])
    m, L = oracles.random_variational(2, rng)
    lam = K.lambdas(nx.Tensor(theta))
    kl = float(np.asarray(kl_term(VariationalParams.from_cholesky(m, L), lam).data))
    _check(np.isfinite(kl), f"KL with theta=-400 is {kl}; the singular-value floor is not applied")
    floored = oracles.dense_kl(m, L, np.maximum(np.exp(theta), 1e-6))
    _check(abs(kl - floored) <= 1e-8 * abs(floored), f"floored KL {kl} vs dense {floored}")


def suite_posterior_equivalence(seed=3):
    rng = nx.make_rng(seed)
    N, s = 12, 3
    Kmat, df, params, E_X, R_X = _ksvd_instance(N, s, rng)
    m, L = oracles.random_variational(s, rng)
    pp = pair_posterior(E_X, R_X, df.lam, VariationalParams.from_cholesky(m, L))
    cov_e, cov_r = pp.covariances()
    for name, Ksym, H, mean, cov in (
        ("e", Kmat @ Kmat.T, df.H_e, np.asarray(pp.mean_e), cov_e),
        ("r", Kmat.T @ Kmat, df.H_r, np.asarray(pp.mean_r), cov_r),
    ):
        for d in range(s):
            S = L[d] @ L[d].T
            mu, C = kernel_eigen_posterior(Ksym, H, df.lam**2, m[:, d], S, truncated=True)
            _check(np.max(np.abs(mean[:, d] - mu)) <= 1e-8, f"branch {name} mean differs (d={d})")
            _check(np.max(np.abs(cov[d] - C)) <= 1e-8, f"branch {name} covariance differs (d={d})")
            _, full = kernel_eigen_posterior(Ksym, H, df.lam**2, m[:, d], S)
            gap = np.linalg.norm(full - C) ** 2
            want = oracles.truncation_gap(Ksym, s)
            _check(abs(gap - want) <= 1e-8 * max(1.0, want), f"truncation gap {gap} vs {want}")


def suite_sampling_moments(seed=4, n=40_000):
    rng = nx.make_rng(seed)
    N, s = 6, 2
    E_X, R_X = rng.standard_normal((N, s)), rng.standard_normal((N, s))
    lam = np.exp(0.2 * rng.standard_normal(s))
    m, L = oracles.random_variational(s, rng)
    pp = pair_posterior(E_X, R_X, lam, VariationalParams.from_cholesky(m, L))
    eps = rng.standard_normal((n, s, s))
    draws = sample_pair(pp, eps)
    (me, ce), (mr, cr) = oracles.pair_moments_dense(E_X, R_X, lam, m, L)
    for F, mean, cov in ((draws[0], me, ce), (draws[1], mr, cr)):
        F = np.asarray(F)
        se = np.sqrt(np.einsum("dii->id", cov) / n)
        _check(np.all(np.abs(F.mean(axis=0) - mean) <= 4 * se + 1e-12), "sample mean outside 4 standard errors")
        for d in range(s):
            emp = np.cov(F[:, :, d], rowvar=False)
            var = np.diag(cov[d])
            se_cov = np.sqrt((cov[d] ** 2 + np.outer(var, var)) / n)
            _check(np.all(np.abs(emp - cov[d]) <= 4 * se_cov + 1e-12), f"sample covariance outside 4 standard errors (d={d})")


def full_objective(model, tokens, labels, eta=10.0, noise_seed=0, n_train=None):
    """Total training loss with the reparameterization noise frozen by ``noise_seed``."""

    def objective(_params=None):
        rec = model.forward(tokens, nx.make_rng(noise_seed), "sample" if model.has_kep else "mean")
        elbo = elbo_loss([rec], labels, n_train or len(labels), len(labels))
        return total_loss(elbo, rec.ksvd_sum, eta)

    return objective


def perturbed_model(cfg, seed, scale=0.3):
    """A model moved away from its (symmetric) initialization so gradients are generic."""
    model = Transformer(cfg, seed=seed)
    rng = nx.make_rng(seed + 1)
    for p in model.params.values():
        p.data = p.data + scale * rng.standard_normal(p.data.shape)
    return model


def suite_gradient_checks(seed=5):
    rng = nx.make_rng(seed)
    x = nx.Tensor(rng.standard_normal((3, 4)))
    y = nx.Tensor(rng.standard_normal((4, 3)))
    primitives = {
        "matmul": lambda p: (p["x"] @ p["y"]).sum(),
        "softmax": lambda p: (nx.softmax(p["x"]) * p["x"]).sum(),
        "l2_normalize": lambda p: (nx.l2_normalize(p["x"]) * p["y"].T).sum(),
        "gelu": lambda p: nx.gelu(p["x"]).sum(),
    }
    for name, f in primitives.items():
        rep = nx.grad_check(f, {"x": x, "y": y})
        _check(rep.passed(1e-6), f"primitive {name}: gradient error {rep.max_error:.3g}")
    for merge_scheme in ("addition", "concatenation-lowrank"):
        cfg = TransformerConfig(
            vocab_size=5, seq_len=4, n_classes=3, n_layers=2, d_model=4, n_heads=2, d_k=3, rank=2,
            merge=merge_scheme, lowrank_rank=2, kep_layers=[2],
        )
        model = perturbed_model(cfg, seed)
        tokens = rng.integers(0, 5, (2, 4))
        labels = rng.integers(0, 3, 2)
        rep = nx.grad_check(full_objective(model, tokens, labels), model.params)
        name, err = rep.worst()
        _check(rep.passed(1e-4), f"total loss ({merge_scheme}): {name} gradient error {err:.3g}")


def suite_metric_examples():
    conf = np.array([0.9, 0.8, 0.6, 0.55])
    ece = M.expected_calibration_error(conf, np.array([1, 0, 1, 0]), n_bins=2)
    _check(abs(ece - 0.2125) <= 1e-15, f"ece {ece!r}")
    _check(round(M.aurc([0.9, 0.8, 0.7], [1, 0, 1]), 5) == 0.27778, "aurc")
    _check(M.fpr_at_tpr(np.array([0.9, 0.8]), np.array([0.85, 0.5])) == 0.5, "fpr95")
    _, nll, _, _ = M.classification_metrics(M.PredictionDump([[0.5, 0.5]], [0]))
    _check(nll == np.log(2.0), f"nll {nll!r}")
    _check(M.ood_metrics([0.9, 0.4], [0.6])[0] == 0.5, "ood auroc")


SUITES = {
    "svd_residuals": suite_svd_residuals,
    "ksvd_stationarity": suite_ksvd_stationarity,
    "kl_oracles": suite_kl_oracles,
    "posterior_equivalence": suite_posterior_equivalence,
    "sampling_moments": suite_sampling_moments,
    "gradient_checks": suite_gradient_checks,
    "metric_examples": suite_metric_examples,
}


@dataclass
class SuiteResult:
    name: str
    passed: bool
    seconds: float
    message: str = ""


def run_all(suites=None):
    results = []
    for name, fn in (suites or SUITES).items():
        start = time.perf_counter()
        try:
            fn()
            ok, msg = True, ""
        except AssertionError as exc:
            ok, msg = False, str(exc)
        except Exception as exc:  # a crash inside a suite is a failure of that suite
            ok, msg = False, f"{type(exc).__name__}: {exc}"
        results.append(SuiteResult(name, ok, time.perf_counter() - start, msg))
    return results
