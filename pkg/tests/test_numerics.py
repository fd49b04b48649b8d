import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kepsvgp import numerics as nx
from kepsvgp.errors import ConvergenceFailure, NonFiniteObjective, NotPositiveDefinite, ShapeMismatch


def _check(f, **arrays_):
    params = {k: nx.Tensor(v) for k, v in arrays_.items()}
    rep = nx.grad_check(f, params)
    assert rep.passed(1e-6), rep.errors


PRIMITIVES = {
    "add_broadcast": (lambda p: ((p["a"] + p["b"][0]) * p["a"]).sum(), ("a", "b")),
    "sub": (lambda p: ((p["a"] - p["c"]) ** 2).sum(), ("a", "c")),
    "mul": (lambda p: (p["a"] * p["c"]).sum(), ("a", "c")),
    "div": (lambda p: (p["a"] / (p["c"] * p["c"] + 1.0)).sum(), ("a", "c")),
    "neg": (lambda p: (-p["a"] * p["c"]).sum(), ("a", "c")),
    "power": (lambda p: nx.power(p["c"] * p["c"] + 0.5, 1.5).sum(), ("c",)),
    "exp": (lambda p: nx.exp(p["a"]).sum(), ("a",)),
    "log": (lambda p: nx.log(p["c"] * p["c"] + 1.0).sum(), ("c",)),
    "sqrt": (lambda p: nx.sqrt(p["c"] * p["c"] + 1.0).sum(), ("c",)),
    "tanh": (lambda p: nx.tanh(p["a"]).sum(), ("a",)),
    "clamp_min": (lambda p: (nx.clamp_min(p["a"], 0.05) * p["c"]).sum(), ("a", "c")),
    "gelu": (lambda p: nx.gelu(p["a"]).sum(), ("a",)),
    "sum_axis": (lambda p: (p["a"].sum(axis=0) ** 2).sum(), ("a",)),
    "mean_axis": (lambda p: (p["a"].mean(axis=1, keepdims=True) * p["a"]).sum(), ("a",)),
    "reshape": (lambda p: (p["a"].reshape(4, 3) @ p["m"][:3]).sum(), ("a", "m")),
    "transpose": (lambda p: (p["a"].T @ p["c"]).sum(), ("a", "c")),
    "swapaxes": (lambda p: (nx.swapaxes(p["t"], 0, 2) ** 2).sum(), ("t",)),
    "expand_dims": (lambda p: (nx.expand_dims(p["a"], 0) * p["t"][:1]).sum(), ("a", "t")),
    "getitem": (lambda p: (p["a"][1:, ::2] ** 2).sum(), ("a",)),
    "take_rows": (lambda p: (nx.take_rows(p["a"], np.array([[0, 2], [2, 1]])) ** 2).sum(), ("a",)),
    "concat": (lambda p: (nx.concat([p["a"], p["c"]], axis=1) ** 2).sum(), ("a", "c")),
    "stack": (lambda p: (nx.stack([p["a"], p["c"]], axis=1) ** 2 * np.arange(6.0).reshape(3, 2, 1)).sum(), ("a", "c")),
    "matmul": (lambda p: (p["a"] @ p["m"]).sum(), ("a", "m")),
    "matmul_batched": (lambda p: (p["t"] @ p["m"]).sum(), ("t", "m")),
    "softmax": (lambda p: (nx.softmax(p["a"]) * p["c"]).sum(), ("a", "c")),
    "log_softmax": (lambda p: (nx.log_softmax(p["a"], axis=0) * p["c"]).sum(), ("a", "c")),
    "l2_normalize": (lambda p: (nx.l2_normalize(p["a"]) * p["c"]).sum(), ("a", "c")),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(7)
    data = {
        "a": rng.standard_normal((3, 4)),
        "b": rng.standard_normal((1, 4)),
        "c": rng.standard_normal((3, 4)),
        "m": rng.standard_normal((4, 2)),
        "t": rng.standard_normal((2, 3, 4)),
    }
    f, names = PRIMITIVES[name]
    _check(f, **{k: data[k] for k in names})


def test_tape_zero_gradient_for_unused_source():
    a, b = nx.Tensor([1.0, 2.0], requires_grad=True), nx.Tensor([3.0], requires_grad=True)
    with nx.GradTape() as tape:
        loss = (a * a).sum()
    ga, gb = tape.gradient(loss, [a, b])
    np.testing.assert_array_equal(ga, [2.0, 4.0])
    np.testing.assert_array_equal(gb, [0.0])


def test_no_recording_without_tape_or_grad():
    a = nx.Tensor([1.0], requires_grad=True)
    b = nx.Tensor([2.0])
    with nx.GradTape() as tape:
        _ = b * b
    assert len(tape) == 0
    _ = a * a  # no active tape: nothing to record
    assert len(tape) == 0


def test_ndarray_operands_defer_to_tensor():
    a = nx.Tensor(np.ones((2, 2)), requires_grad=True)
    with nx.GradTape() as tape:
        y = (np.full((2, 2), 3.0) * a).sum()
    assert isinstance(y, nx.Tensor)
    np.testing.assert_array_equal(tape.gradient(y, [a])[0], np.full((2, 2), 3.0))


def test_tapes_are_per_thread():
    a = nx.Tensor([2.0], requires_grad=True)
    counts = []

    def worker():
        with nx.GradTape() as t:
            _ = a * a
        counts.append(len(t))

    with nx.GradTape() as outer:
        th = threading.Thread(target=worker)
        th.start()
        th.join()
    assert counts == [1] and len(outer) == 0


def test_matmul_shape_errors():
    with pytest.raises(ShapeMismatch):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeMismatch):
        nx.matmul(np.ones(3), np.ones((3, 2)))


def test_l2_normalize_small_vector_uses_eps():
    y = nx.l2_normalize(nx.Tensor([[1e-10, 0.0]]), eps=1e-8)
    np.testing.assert_allclose(y.data, [[1e-2, 0.0]])


@given(arrays(np.float64, (5, 3), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    y = nx.softmax(nx.Tensor(x)).data
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(y >= 0)


@given(arrays(np.float64, (4, 3), elements=st.floats(-5, 5)).filter(lambda x: np.all(np.linalg.norm(x, axis=1) > 1e-3)))
def test_l2_normalize_unit_rows(x):
    np.testing.assert_allclose(np.linalg.norm(nx.l2_normalize(nx.Tensor(x)).data, axis=1), 1.0, atol=1e-12)


def test_cholesky_oracle_and_errors(rng):
    A = rng.standard_normal((4, 4))
    S = A @ A.T + 4 * np.eye(4)
    L = nx.cholesky(S)
    np.testing.assert_allclose(L @ L.T, S, atol=1e-12)
    with pytest.raises(NotPositiveDefinite):
        nx.cholesky(-S)
    with pytest.raises(NotPositiveDefinite):
        nx.cholesky(A + 10 * np.triu(np.ones((4, 4)), 1))
    with pytest.raises(ShapeMismatch):
        nx.cholesky(np.ones((2, 3)))


def test_svd_reconstructs_and_sorts(rng):
    A = rng.standard_normal((6, 4))
    U, S, V = nx.svd(A)
    np.testing.assert_allclose(U @ np.diag(S) @ V.T, A, atol=1e-12)
    assert np.all(np.diff(S) <= 0)
    with pytest.raises(ValueError):
        nx.svd(np.array([[np.nan]]))


def test_svd_convergence_failure_is_mapped(monkeypatch):
    def boom(*a, **k):
        raise np.linalg.LinAlgError("SVD did not converge")

    monkeypatch.setattr(np.linalg, "svd", boom)
    with pytest.raises(ConvergenceFailure):
        nx.svd(np.eye(2))


def test_rng_reproducible_and_restorable():
    a = nx.make_rng(5)
    first = a.standard_normal(3)
    state = nx.rng_state(a)
    nxt = a.standard_normal(4)
    b = nx.rng_from_state(state)
    np.testing.assert_array_equal(b.standard_normal(4), nxt)
    np.testing.assert_array_equal(nx.make_rng(5).standard_normal(3), first)
    assert isinstance(a.bit_generator, np.random.Philox)


def test_sample_standard_normal_dtype():
    x = nx.sample_standard_normal((10, 2), nx.make_rng(0), dtype=np.float32)
    assert x.dtype == np.float32 and x.shape == (10, 2)


def test_grad_check_detects_wrong_gradient():
    def wrong(p):
        x = p["x"]
        return nx._make(x.data**2, (x,), lambda g: (g * 3.0 * x.data,)).sum()

    rep = nx.grad_check(wrong, {"x": nx.Tensor([1.0, 2.0])})
    assert not rep.passed(1e-3)
    assert rep.worst()[0] == "x"


@pytest.mark.filterwarnings("ignore:invalid value encountered in log:RuntimeWarning")
def test_grad_check_non_finite_objective():
    with pytest.raises(NonFiniteObjective):
        nx.grad_check(lambda p: nx.log(p["x"] - 5.0).sum(), {"x": nx.Tensor([1.0])})
