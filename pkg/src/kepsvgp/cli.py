"""Command-line entry points: train, eval, ood, bench, spectrum and selftest.

Exit codes: 0 ok, 1 selftest failure, 2 config error, 3 training divergence,
4 artifact mismatch.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data as D
from . import ksvd
from . import metrics as M
from . import numerics as nx
from .config import RunConfig, canonical_json, config_hash
from .errors import (
    CheckpointMismatch,
    FixedLengthViolation,
    InvalidConfig,
    NonFiniteLoss,
    ParseError,
    ShapeMismatch,
    VocabularyOverflow,
)
from .model import (
    AttentionLayerParams,
    Transformer,
    TransformerConfig,
    attention_matrices,
    init_params,
    kep_attention_forward,
    predict_mc,
    softmax_attention_forward,
)
from .training import train

log = logging.getLogger("kepsvgp")

EXIT_OK, EXIT_SELFTEST, EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISMATCH = 0, 1, 2, 3, 4
CORRUPTION_SEED_STRIDE = 101
OOD_SEED_OFFSET = 7919


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


# data ------------------------------------------------------------------------------
def build_splits(cfg: RunConfig):
    """``(train, val, test)`` regenerated from the data section."""
    dc = cfg.data
    total = dc.n_train + dc.n_val + dc.n_test
    if dc.task == "majority":
        full = D.gen_majority(total, dc.seq_len, dc.vocab, dc.classes, dc.seed, dc.boost)
    else:
        full = D.load_csv(dc.path, vocab_size=dc.vocab, n_classes=dc.classes)
        if full.seq_len != dc.seq_len:
            raise InvalidConfig(f"{dc.path} has sequence length {full.seq_len}, config says {dc.seq_len}")
    return full.split(dc.n_train, dc.n_val, dc.n_test)


def _fmt(x):
    return repr(float(x))


def write_csv(path, header, rows):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_dump(path, dump: M.PredictionDump):
    C = dump.probs.shape[1]
    header = ["index", "true_label", "pred_label", "confidence"] + [f"p{c}" for c in range(C)]
    rows = (
        [i, int(y), int(p), float(c)] + [float(v) for v in probs]
        for i, (y, p, c, probs) in enumerate(zip(dump.labels, dump.preds, dump.confidence, dump.probs))
    )
    write_csv(path, header, rows)


def _json_value(v):
    return None if v is None or not np.isfinite(v) else float(v)


def report_json(rep: M.MetricsReport, metadata):
    """Flat object: the nine raw metrics plus ``metadata`` (which carries the scaled rendering)."""
    out = {k: _json_value(v) for k, v in rep.values().items()}
    meta = dict(metadata)
    meta["table1_scaled"] = {k: _json_value(v) for k, v in rep.table1().items()}
    meta["conventions"] = "raw values; table1_scaled uses percentages, AURC x 1e3, NLL x 10"
    out["metadata"] = meta
    return out


# checkpoints -------------------------------------------------------------------------
def load_models(paths):
    if not paths:
        raise CliError(EXIT_CONFIG, "--checkpoint is required")
    loaded = [ckpt.load(p) for p in paths]
    data_cfgs = {canonical_json(rc.to_dict()["data"]) for _, rc, _ in loaded}
    if len(data_cfgs) > 1:
        raise CheckpointMismatch("ensemble members were trained on different data configurations")
    return [m for m, _, _ in loaded], loaded[0][1], [man["config_hash"] for _, _, man in loaded]


def ensemble_probs(models, tokens, T, seed):
    """Probability average over ensemble members, each with ``T`` MC samples."""
    probs = [predict_mc(m, tokens, T, seed + 1000 * i)[0] for i, m in enumerate(models)]
    return np.mean(probs, axis=0)


# commands ----------------------------------------------------------------------------
def cmd_train(args):
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    out = Path(args.out or cfg.paths.checkpoint_dir)
    tr, va, _ = build_splits(cfg)
    model = Transformer(cfg.transformer_config(), seed=cfg.train.seed)
    result = train(model, tr, va, cfg.train)
    ckpt.save(out, model, cfg, result.rng_state, {"best_epoch": result.best_epoch})
    rows = result.rows()
    write_csv(out / "train_log.csv", list(rows[0]), [list(r.values()) for r in rows])
    print(f"checkpoint written to {out} (best epoch {result.best_epoch}, val acc {max(r['val_acc'] for r in rows):.4f})")
    return EXIT_OK


def _metadata(cfg, hashes, T, seed, dataset, **extra):
    meta = {
        "seed": seed,
        "T": T,
        "dataset": dataset,
        "config_hash": hashes[0] if len(hashes) == 1 else config_hash(hashes),
        "checkpoint_hashes": hashes,
        "ensemble_size": len(hashes),
        "ece_bins": cfg.eval.ece_bins,
    }
    meta.update(extra)
    return meta


def evaluate_set(models, dataset, T, seed, cfg):
    probs = ensemble_probs(models, dataset.sequences, T, seed)
    dump = M.PredictionDump(probs, dataset.labels)
    return dump, M.evaluate_predictions(dump, cfg.eval.ece_bins)


def cmd_eval(args):
    models, cfg, hashes = load_models(args.checkpoint)
    T = args.mc_samples or cfg.eval.mc_samples
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out or cfg.paths.report_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, _, test = build_splits(cfg)
    dataset_id = f"{cfg.data.task}:seed={cfg.data.seed}:test"
    if args.mode in ("clean", "dump-only"):
        dump, rep = evaluate_set(models, test, T, seed, cfg)
        write_dump(out / "dump.csv", dump)
        if args.mode == "clean":
            write_json(out / "report.json", report_json(rep, _metadata(cfg, hashes, T, seed, dataset_id, mode="clean")))
            write_csv(out / "bins.csv", ["bin_lower", "bin_upper", "count", "accuracy", "confidence"],
                      M.bin_table(dump.confidence, dump.correct, cfg.eval.ece_bins))
            print(json.dumps({k: _json_value(v) for k, v in rep.values().items()}))
        return EXIT_OK
    severities = [args.severity] if args.severity is not None else cfg.eval.severities
    summary = []
    for sev in severities:
        shifted = D.corrupt(test, D.CorruptionSpec(sev), cfg.data.seed + CORRUPTION_SEED_STRIDE * sev)
        dump, rep = evaluate_set(models, shifted, T, seed, cfg)
        write_dump(out / f"dump_severity{sev}.csv", dump)
        meta = _metadata(cfg, hashes, T, seed, f"{dataset_id}:severity={sev}", mode="shift", severity=sev)
        write_json(out / f"report_severity{sev}.json", report_json(rep, meta))
        summary.append([sev] + [rep.values()[k] for k in M.METRIC_KEYS])
        print(f"severity {sev}: acc {rep.acc:.4f} nll {rep.nll:.4f} ece {rep.ece:.4f}")
    write_csv(out / "shift_summary.csv", ["severity", *M.METRIC_KEYS],
              [[r[0]] + ["" if v is None else float(v) for v in r[1:]] for r in summary])
    return EXIT_OK


def cmd_ood(args):
    models, cfg, hashes = load_models(args.checkpoint)
    T = args.mc_samples or cfg.eval.mc_samples
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out or cfg.paths.report_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.id_csv:
        id_set = D.load_csv(args.id_csv, vocab_size=cfg.data.vocab, n_classes=cfg.data.classes)
    else:
        id_set = build_splits(cfg)[2]
    if args.ood_csv:
        ood_set = D.load_csv(args.ood_csv, vocab_size=models[0].config.vocab_size, n_classes=cfg.data.classes)
    else:
        n = cfg.data.n_ood or cfg.data.n_test
        ood_set = D.gen_ood(n, cfg.data.seq_len, cfg.data.seed + OOD_SEED_OFFSET, cfg.data.vocab)
    dump, rep = evaluate_set(models, id_set, T, seed, cfg)
    ood_conf = ensemble_probs(models, ood_set.sequences, T, seed).max(axis=1)
    id_conf = dump.confidence
    rep.auroc, rep.aupr = M.ood_metrics(id_conf, ood_conf)
    rep.fpr95 = M.fpr_at_tpr(id_conf, ood_conf)
    meta = _metadata(
        cfg, hashes, T, seed, "ood", mode="ood",
        id_dataset=str(args.id_csv or f"{cfg.data.task}:seed={cfg.data.seed}:test"),
        ood_dataset=str(args.ood_csv or f"disjoint-vocabulary:seed={cfg.data.seed + OOD_SEED_OFFSET}"),
        detection_keys=["auroc", "aupr", "fpr95"],
    )
    write_json(out / "ood_report.json", report_json(rep, meta))
    edges = np.linspace(0.0, 1.0, cfg.eval.hist_bins + 1)
    h_id, _ = np.histogram(id_conf, edges)
    h_ood, _ = np.histogram(ood_conf, edges)
    write_csv(out / "ood_hist.csv", ["bin_lower", "bin_upper", "id_count", "ood_count"],
              [[float(a), float(b), int(c), int(d)] for a, b, c, d in zip(edges[:-1], edges[1:], h_id, h_ood)])
    print(f"ood auroc {rep.auroc:.4f} aupr {rep.aupr:.4f}")
    return EXIT_OK


def bench_layer(mechanism, N, bc, rng):
    """A single attention layer and a random input of length ``N``."""
    merge = "concatenation" if mechanism == "kep-concatenation" else "addition"
    cfg = TransformerConfig(
        vocab_size=2, seq_len=N, n_classes=2, n_layers=1, d_model=bc.d_model, n_heads=bc.n_heads,
        d_k=bc.d_k, rank=bc.rank, merge=merge, kep_layers=[] if mechanism == "softmax" else [1],
    )
    params = init_params(cfg, int(rng.integers(2**31)))
    X = nx.Tensor(rng.standard_normal((1, N, bc.d_model)))
    return AttentionLayerParams.from_flat(params, 1, cfg), X


def run_bench(bc, lengths=None, repetitions=None):
    """Median forward time per (mechanism, N) and the log-log slope per mechanism."""
    lengths = lengths or bc.lengths
    repetitions = repetitions or bc.repetitions
    rng = nx.make_rng(bc.seed)
    rows, slopes = [], {}
    for mech in bc.mechanisms:
        medians = []
        for N in lengths:
            layer, X = bench_layer(mech, N, bc, rng)
            forward = (lambda: softmax_attention_forward(X, layer)) if mech == "softmax" else (
                lambda: kep_attention_forward(X, layer))
            forward()  # warm-up
            times = []
            for _ in range(repetitions):
                start = time.perf_counter()
                forward()
                times.append(time.perf_counter() - start)
            med = float(np.median(times))
            medians.append(med)
            rows.append([mech, N, med, float(min(times)), float(max(times)), repetitions])
        slopes[mech] = float(np.polyfit(np.log(lengths), np.log(medians), 1)[0])
    return rows, slopes


def cmd_bench(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    bc = cfg.bench
    if args.seed is not None:
        bc.seed = args.seed
    lengths = [int(n) for n in args.lengths.split(",")] if args.lengths else None
    if lengths is not None and len(lengths) < 4:
        raise InvalidConfig("--lengths needs at least 4 values")
    rows, slopes = run_bench(bc, lengths, args.repetitions)
    out = Path(args.out or cfg.paths.report_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "bench.csv", ["mechanism", "N", "median_s", "min_s", "max_s", "repetitions"], rows)
    write_json(out / "bench_slopes.json", slopes)
    for mech, slope in slopes.items():
        print(f"{mech}: log-log slope {slope:.3f}")
    return EXIT_OK


def spectrum_rows(model: Transformer, tokens, layers):
    """``(layer, k, c_k)`` averaged over heads and sequences."""
    _, _, _, states = model.hidden_states(tokens)
    rows = []
    for layer in layers:
        mats = attention_matrices(states[layer - 1], model.layer(layer))
        mats = mats.reshape(-1, *mats.shape[-2:])
        c = np.mean([ksvd.spectrum(K) for K in mats], axis=0)
        rows.extend([layer, k + 1, float(v)] for k, v in enumerate(c))
    return rows


def cmd_spectrum(args):
    models, cfg, _ = load_models(args.checkpoint[:1])
    model = models[0]
    L = model.config.n_layers
    if args.layer is not None and not 1 <= args.layer <= L:
        raise CheckpointMismatch(f"layer {args.layer} outside 1..{L}")
    layers = [args.layer] if args.layer is not None else list(range(1, L + 1))
    _, _, test = build_splits(cfg)
    tokens = test.sequences[: cfg.eval.spectrum_sequences]
    out = Path(args.out or cfg.paths.report_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "spectrum.csv", ["layer", "k", "c_k"], spectrum_rows(model, tokens, layers))
    print(f"spectrum written to {out / 'spectrum.csv'}")
    return EXIT_OK


def cmd_selftest(args):
    from .selftest import run_all

    results = run_all()
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:<24s} {r.seconds:7.3f}s {r.message}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    if failed:
        print(f"first failure: {failed[0].name}: {failed[0].message}", file=sys.stderr)
        return EXIT_SELFTEST
    return EXIT_OK


# parser ------------------------------------------------------------------------------
def build_parser():
    p = argparse.ArgumentParser(prog="kepsvgp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False, config=False):
        if config:
            sp.add_argument("--config", required=sp.prog.endswith("train"), help="RunConfig JSON")
        if checkpoint:
            sp.add_argument("--checkpoint", action="append", default=[], help="checkpoint directory (repeat to ensemble)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("train", help="train a model and write its checkpoint")
    common(sp, config=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate on clean or shifted test data")
    common(sp, checkpoint=True)
    sp.add_argument("--mode", choices=["clean", "shift", "dump-only"], default="clean")
    sp.add_argument("--mc-samples", type=int)
    sp.add_argument("--severity", type=int, choices=range(1, 6))
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ood", help="OOD detection against disjoint-vocabulary sequences")
    common(sp, checkpoint=True)
    sp.add_argument("--mc-samples", type=int)
    sp.add_argument("--id-csv")
    sp.add_argument("--ood-csv")
    sp.set_defaults(func=cmd_ood)

    sp = sub.add_parser("bench", help="time attention forwards against sequence length")
    common(sp, config=True)
    sp.add_argument("--lengths", help="comma-separated sequence lengths")
    sp.add_argument("--repetitions", type=int)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("spectrum", help="normalized cumulative singular values of attention matrices")
    common(sp, checkpoint=True)
    sp.add_argument("--layer", type=int)
    sp.set_defaults(func=cmd_spectrum)

    sp = sub.add_parser("selftest", help="run the oracle suites")
    sp.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (InvalidConfig, ParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLoss as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CheckpointMismatch, VocabularyOverflow, FixedLengthViolation, ShapeMismatch) as exc:
        print(f"artifact mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
