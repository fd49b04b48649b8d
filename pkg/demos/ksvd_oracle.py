"""Walk through the KSVD view of one attention matrix.

Builds a random asymmetric cosine kernel, takes its top-s singular triplets,
plugs them into the primal weights and checks that the KSVD objective and
the two eigenproblem residuals vanish.  Then perturbs the weights to show
the objective is not trivially zero.

    python3 demos/ksvd_oracle.py
"""
import numpy as np

from kepsvgp import ksvd as K
from kepsvgp import numerics as nx
from kepsvgp import oracles
from kepsvgp.kernels import FeaturePair

rng = nx.make_rng(0)
N, d_k, s = 32, 16, 4

# %% An asymmetric kernel: queries and keys go through different projections
Q, Kf, Kmat = oracles.random_cosine_kernel(N, d_k, rng)
print(f"K_att is {Kmat.shape}, asymmetry ||K - K^T||_F = {np.linalg.norm(Kmat - Kmat.T):.3f}")

# %% Top-s singular triplets give the dual factors
df = K.DualFactors.from_svd(Kmat, s)
print("singular values:", np.round(df.lam, 4))
res = K.verify_eigenproblems(Kmat, df)
print(f"eigenproblem residuals / ||K||_F: {res.max() / np.linalg.norm(Kmat):.2e}")

# %% Primal weights from the stationarity conditions make the objective zero
fp = FeaturePair(nx.Tensor(Q), nx.Tensor(Kf))
W_e, W_r = K.kkt_weights(fp, df)
params = K.KsvdParams(W_e, W_r, np.log(df.lam))
E, R = K.projections(fp, params)
print(f"KSVD objective at the stationary point: {float(K.ksvd_loss(E, R, params).data):.2e}")

# %% Any perturbation moves it away from zero
noisy = K.KsvdParams(W_e + 0.05 * rng.standard_normal(W_e.shape), W_r, np.log(df.lam))
E, R = K.projections(fp, noisy)
print(f"after perturbing W_e:                  {float(K.ksvd_loss(E, R, noisy).data):.2e}")

# %% How much of the kernel the rank-s truncation keeps
c = np.cumsum(np.linalg.svd(Kmat, compute_uv=False))
print("normalized cumulative spectrum:", np.round(c / c[-1], 3)[: 2 * s])
