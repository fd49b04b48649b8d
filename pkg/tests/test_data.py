import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kepsvgp import data as D
from kepsvgp.errors import InvalidConfig, ParseError, RaggedRows


def test_all_class_zero_tokens_label_zero():
    assert D.majority_labels(np.zeros((1, 7), int), 8, 4)[0] == 0


def test_ties_go_to_lowest_class():
    # tokens 2,3 -> class 1 and 0,1 -> class 0 with vocab 8, classes 4
    assert D.majority_labels(np.array([[2, 0, 3, 1]]), 8, 4)[0] == 0


def test_generation_is_deterministic():
    a, b = D.gen_majority(50, 16, 8, 4, 3), D.gen_majority(50, 16, 8, 4, 3)
    np.testing.assert_array_equal(a.sequences, b.sequences)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.sequences, D.gen_majority(50, 16, 8, 4, 4).sequences)


def test_labels_are_exact_function_of_sequence():
    d = D.gen_majority(500, 16, 8, 4, 0)
    np.testing.assert_array_equal(d.labels, D.majority_labels(d.sequences, 8, 4))
    assert d.sequences.min() >= 0 and d.sequences.max() < 8


def test_label_distribution_near_uniform():
    d = D.gen_majority(10_000, 16, 8, 4, 1)
    counts = np.bincount(d.labels, minlength=4)
    sigma = np.sqrt(10_000 * 0.25 * 0.75)
    assert np.all(np.abs(counts - 2500) <= 3 * sigma)


def test_invalid_majority_config():
    with pytest.raises(InvalidConfig):
        D.gen_majority(10, 5, 3, 4, 0)


def test_corruption_severity_zero_is_identity():
    d = D.gen_majority(20, 8, 8, 4, 0)
    assert D.corrupt(d, D.CorruptionSpec(0), 1) is d
    with pytest.raises(InvalidConfig):
        D.CorruptionSpec(6)
    assert D.CorruptionSpec(5).flip_prob == pytest.approx(0.30)


def test_corruption_flip_rate_and_hamming():
    d = D.gen_majority(10_000, 16, 8, 4, 0)
    c = D.corrupt(d, D.CorruptionSpec(5), 9)
    np.testing.assert_array_equal(c.labels, d.labels)
    assert c.sequences.shape == d.sequences.shape
    n = d.sequences.size
    # a flip can redraw the same token; the replaced fraction is rho, the changed fraction rho * (1 - 1/V)
    changed = (c.sequences != d.sequences).mean()
    expected = 0.30 * (1 - 1 / 8)
    assert abs(changed - expected) <= 3 * np.sqrt(expected * (1 - expected) / n)
    np.testing.assert_array_equal(c.sequences, D.corrupt(d, D.CorruptionSpec(5), 9).sequences)


def test_flip_rate_of_mask_within_three_sigma():
    rng_seed = 4
    d = D.Dataset(np.zeros((10_000, 16), int), np.zeros(10_000, int), vocab_size=10**9, n_classes=1)
    c = D.corrupt(d, D.CorruptionSpec(5), rng_seed)
    rate = (c.sequences != 0).mean()  # collisions with token 0 are negligible for this vocabulary
    assert abs(rate - 0.30) <= 3 * np.sqrt(0.3 * 0.7 / c.sequences.size)


def test_ood_range_and_determinism():
    o = D.gen_ood(100, 16, 0, 8)
    assert o.sequences.min() >= 8 and o.sequences.max() < 16
    assert np.all(o.labels == D.OOD_LABEL)
    np.testing.assert_array_equal(o.sequences, D.gen_ood(100, 16, 0, 8).sequences)


def test_dataset_validation():
    with pytest.raises(InvalidConfig):
        D.Dataset(np.array([[0, 9]]), np.array([0]), vocab_size=8, n_classes=2)
    with pytest.raises(InvalidConfig):
        D.Dataset(np.array([[0, 1]]), np.array([3]), vocab_size=8, n_classes=2)
    d = D.gen_majority(10, 4, 8, 4, 0)
    a, b = d.split(6, 4)
    assert len(a) == 6 and len(b) == 4
    with pytest.raises(InvalidConfig):
        d.split(8, 8)


def test_csv_roundtrip_and_errors(tmp_path):
    d = D.gen_majority(30, 5, 8, 4, 2)
    p = tmp_path / "d.csv"
    D.save_csv(d, p)
    text = p.read_bytes()
    assert b"\r" not in text and text.startswith(b"label,t0,t1,t2,t3,t4\n")
    back = D.load_csv(p, vocab_size=8, n_classes=4)
    np.testing.assert_array_equal(back.sequences, d.sequences)
    np.testing.assert_array_equal(back.labels, d.labels)

    two = tmp_path / "two.csv"
    two.write_text("label,t0,t1\n0,1,2\n1,3,0\n")
    loaded = D.load_csv(two)
    assert len(loaded) == 2 and loaded.vocab_size == 4 and loaded.seq_len == 2

    bad = tmp_path / "bad.csv"
    bad.write_text("label,t0,t1\n0,1,2\n1,3\n")
    with pytest.raises(RaggedRows) as info:
        D.load_csv(bad)
    assert info.value.line == 3
    bad.write_text("label,t0,t1\n0,x,2\n")
    with pytest.raises(ParseError) as info:
        D.load_csv(bad)
    assert info.value.line == 2
    bad.write_text("lbl,a\n")
    with pytest.raises(ParseError):
        D.load_csv(bad)


@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_corrupt_preserves_labels_and_shape(seed, severity):
    d = D.gen_majority(20, 6, 8, 4, 0)
    c = D.corrupt(d, D.CorruptionSpec(severity), seed)
    assert c.sequences.shape == d.sequences.shape
    np.testing.assert_array_equal(c.labels, d.labels)
    assert c.sequences.max() < 8
