"""Synthetic token tasks, token-flip corruption, OOD sequences and CSV ingestion."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import InvalidConfig, ParseError, RaggedRows

OOD_LABEL = -1
FLIP_PER_SEVERITY = 0.06


@dataclass(frozen=True)
class Dataset:
    sequences: np.ndarray  # n x N int64
    labels: np.ndarray  # n
    task: str = "custom"
    vocab_size: int = 0
    n_classes: int = 0
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        seqs = np.asarray(self.sequences, dtype=np.int64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if seqs.ndim != 2 or len(seqs) != len(labels):
            raise InvalidConfig(f"sequences {seqs.shape} / labels {labels.shape} are inconsistent")
        object.__setattr__(self, "sequences", seqs)
        object.__setattr__(self, "labels", labels)
        if seqs.size and (seqs.min() < 0 or seqs.max() >= self.vocab_size):
            raise InvalidConfig(f"token ids must lie in 0..{self.vocab_size - 1}")
        valid = labels[labels != OOD_LABEL]
        if valid.size and (valid.min() < 0 or valid.max() >= self.n_classes):
            raise InvalidConfig(f"labels must lie in 0..{self.n_classes - 1}")

    def __len__(self):
        return len(self.labels)

    @property
    def seq_len(self):
        return self.sequences.shape[1]

    def subset(self, idx):
        return replace(self, sequences=self.sequences[idx], labels=self.labels[idx])

    def split(self, *sizes):
        """Consecutive slices of the given sizes."""
        if sum(sizes) > len(self):
            raise InvalidConfig(f"split sizes {sizes} exceed {len(self)} examples")
        out, start = [], 0
        for n in sizes:
            out.append(self.subset(slice(start, start + n)))
            start += n
        return out


def class_of_token(tokens, vocab, classes):
    """Designated class of each token: contiguous blocks of the vocabulary."""
    return (np.asarray(tokens) * classes) // vocab


def majority_labels(sequences, vocab, classes):
    owners = class_of_token(sequences, vocab, classes)
    counts = np.stack([(owners == c).sum(axis=1) for c in range(classes)], axis=1)
    return counts.argmax(axis=1)  # first maximum -> lowest class id on ties


def gen_majority(n, N, vocab, classes, seed, boost=0.35):
    """Sequences whose label is the class owning the most tokens.

    Each sequence picks a target class; every position draws from that
    class's token block with probability ``boost`` and uniformly otherwise.
    The label is recomputed from the counts, so it is an exact function of
    the sequence.
    """
    if classes < 1 or classes > vocab or N < 1 or n < 0 or not 0 <= boost <= 1:
        raise InvalidConfig(f"invalid majority task n={n} N={N} vocab={vocab} classes={classes}")
    rng = nx.make_rng(seed)
    target = rng.integers(0, classes, n)
    uniform = rng.integers(0, vocab, (n, N))
    lo = -(-target * vocab // classes)  # ceil(c * vocab / classes)
    hi = -(-(target + 1) * vocab // classes)
    owned = lo[:, None] + (rng.random((n, N)) * (hi - lo)[:, None]).astype(np.int64)
    pick = rng.random((n, N)) < boost
    seqs = np.where(pick, owned, uniform)
    return Dataset(seqs, majority_labels(seqs, vocab, classes), "majority", vocab, classes, seed)


@dataclass(frozen=True)
class CorruptionSpec:
    severity: int

    def __post_init__(self):
        if self.severity not in range(6):
            raise InvalidConfig(f"severity must be in 0..5, got {self.severity}")

    @property
    def flip_prob(self):
        return self.severity * FLIP_PER_SEVERITY


def corrupt(d: Dataset, spec: CorruptionSpec, seed):
    """Replace each token by a uniform random token with probability ``spec.flip_prob``."""
    if spec.severity == 0:
        return d
    rng = nx.make_rng(seed)
    flip = rng.random(d.sequences.shape) < spec.flip_prob
    noise = rng.integers(0, d.vocab_size, d.sequences.shape)
    meta = dict(d.meta, severity=spec.severity)
    return replace(d, sequences=np.where(flip, noise, d.sequences), meta=meta)


def gen_ood(n, N, seed, id_vocab):
    """Sequences over the disjoint token range ``[id_vocab, 2 * id_vocab)``."""
    rng = nx.make_rng(seed)
    seqs = rng.integers(id_vocab, 2 * id_vocab, (n, N))
    return Dataset(seqs, np.full(n, OOD_LABEL), "ood", 2 * id_vocab, 0, seed)


def save_csv(d: Dataset, path):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"t{i}" for i in range(d.seq_len)])
        for label, row in zip(d.labels, d.sequences):
            w.writerow([int(label)] + [int(t) for t in row])


def load_csv(path, vocab_size=None, n_classes=None):
    """Read ``label,t0,...,t{N-1}`` rows.

    Vocabulary and class counts default to ``max + 1`` of what the file holds.
    """
    path = Path(path)
    with path.open(encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(1, "empty file")
    header = rows[0]
    expected = ["label"] + [f"t{i}" for i in range(len(header) - 1)]
    if header != expected or len(header) < 2:
        raise ParseError(1, f"header must be label,t0,...; got {','.join(header)}")
    labels, seqs = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise RaggedRows(lineno, f"expected {len(header)} columns, found {len(row)}")
        try:
            values = [int(v) for v in row]
        except ValueError as exc:
            raise ParseError(lineno, str(exc)) from None
        labels.append(values[0])
        seqs.append(values[1:])
    seqs = np.array(seqs, dtype=np.int64).reshape(len(seqs), len(header) - 1)
    labels = np.array(labels, dtype=np.int64)
    vocab = vocab_size if vocab_size is not None else int(seqs.max()) + 1 if seqs.size else 1
    classes = n_classes if n_classes is not None else int(labels.max()) + 1 if labels.size else 1
    return Dataset(seqs, labels, path.stem, vocab, classes)
