"""Train a small KEP-SVGP classifier and look at its uncertainty.

Uses the synthetic majority task: the label is the class whose token block
dominates the sequence.  Trains the baseline and the KEP-SVGP variant with
the same seed, then compares calibration on clean data, under token
corruption, and against sequences from an unseen vocabulary.  Takes about a
minute on one CPU.

    python3 demos/uncertainty_quickstart.py
"""
import numpy as np

from kepsvgp import metrics as M
from kepsvgp.data import CorruptionSpec, corrupt, gen_majority, gen_ood
from kepsvgp.model import Transformer, TransformerConfig, predict_mc
from kepsvgp.training import TrainConfig, train

V, C, N = 8, 4, 16
train_set, val_set, test_set = gen_majority(1800, N, V, C, seed=0).split(1000, 300, 500)
tc = TrainConfig(epochs=8, lr=3e-3, seed=0, mc_eval_samples=4)

models = {}
for name, kep_layers in (("baseline", []), ("kep-svgp", None)):
    cfg = TransformerConfig(vocab_size=2 * V, seq_len=N, n_classes=C, kep_layers=kep_layers)
    result = train(Transformer(cfg, seed=0), train_set, val_set, tc)
    models[name] = result.model
    print(f"{name:9s} best epoch {result.best_epoch}, final train loss {result.history[-1].train_loss:.4f}")

# %% Clean test split
print("\nclean test split")
for name, model in models.items():
    probs, _ = predict_mc(model, test_set.sequences, T=10, seed=0)
    rep = M.evaluate_predictions(M.PredictionDump(probs, test_set.labels))
    print(f"  {name:9s} acc {rep.acc:.3f}  nll {rep.nll:.4f}  ece {rep.ece:.4f}  aurc {rep.aurc:.5f}")

# %% Token corruption of increasing severity
print("\naccuracy / mean confidence under corruption (severity 1..5)")
for name, model in models.items():
    cells = []
    for sev in range(1, 6):
        shifted = corrupt(test_set, CorruptionSpec(sev), seed=sev)
        probs, _ = predict_mc(model, shifted.sequences, T=10, seed=0)
        dump = M.PredictionDump(probs, shifted.labels)
        cells.append(f"{dump.correct.mean():.2f}/{dump.confidence.mean():.2f}")
    print(f"  {name:9s} " + "  ".join(cells))

# %% Out-of-distribution sequences drawn from tokens never seen in training
ood = gen_ood(len(test_set), N, seed=1, id_vocab=V)
print("\nmax-probability OOD detection")
for name, model in models.items():
    conf_id = predict_mc(model, test_set.sequences, T=10, seed=0)[0].max(axis=1)
    conf_ood = predict_mc(model, ood.sequences, T=10, seed=0)[0].max(axis=1)
    auroc, aupr = M.ood_metrics(conf_id, conf_ood)
    print(f"  {name:9s} auroc {auroc:.3f}  aupr {aupr:.3f}  mean conf id {np.mean(conf_id):.3f} / ood {np.mean(conf_ood):.3f}")
