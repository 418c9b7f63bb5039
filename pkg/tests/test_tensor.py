"""Tensor engine: op semantics, tape backward, gradient checks, SGD."""

import numpy as np
import pytest

from funcorr import tensor as T
from funcorr.errors import ContractError, NumericError, ShapeError


def test_relu_definition():
    out = T.relu(T.Tensor([-1.0, 0.0, 2.0]))
    assert np.allclose(out.data, [0.0, 0.0, 2.0])


@pytest.mark.parametrize("c", [-3.0, 0.0, 5.5])
def test_softmax_equal_logits(c):
    out = T.softmax(T.Tensor([c, c, c]), axis=0)
    assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-7)


def test_conv2d_identity_kernel():
    rng = T.make_rng(0)
    x = T.Tensor(rng.standard_normal((1, 1, 5, 5)).astype(np.float32))
    k = T.Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
    out = T.conv2d(x, k, stride=1, padding=0)
    assert np.array_equal(out.data, x.data)


def test_conv2d_shape_mismatch_names_both_shapes():
    x = T.Tensor(np.zeros((1, 3, 4, 4)))
    w = T.Tensor(np.zeros((2, 4, 3, 3)))
    with pytest.raises(ShapeError) as exc:
        T.conv2d(x, w)
    assert "(1, 3, 4, 4)" in str(exc.value) and "(2, 4, 3, 3)" in str(exc.value)


def test_nonfinite_output_names_op():
    big = T.Tensor(np.array([1e30], dtype=np.float32))
    with np.errstate(over="ignore"), pytest.raises(NumericError, match="mul"):
        T.mul(big, big)


def test_backward_square_sum():
    x = T.Tensor([1.0, -2.0, 3.0])
    with T.Tape() as tape:
        xid = tape.watch(x)
        loss = T.reduce_sum(T.mul(x, x))
        grads = tape.backward(loss)
    assert np.allclose(grads[xid].data, [2.0, -4.0, 6.0])


def test_backward_relu_subgradient():
    x = T.Tensor([-1.0, 2.0])
    with T.Tape() as tape:
        xid = tape.watch(x)
        loss = T.reduce_sum(T.relu(x))
        grads = tape.backward(loss)
    assert np.allclose(grads[xid].data, [0.0, 1.0])


def test_backward_requires_scalar_and_tape():
    x = T.Tensor([1.0, 2.0])
    with T.Tape() as tape:
        xid = tape.watch(x)
        y = T.mul(x, x)
        with pytest.raises(ContractError, match="scalar"):
            tape.backward(y)
    with T.Tape() as tape:
        loss = T.reduce_sum(T.mul(x, x))  # x not watched -> detached
        with pytest.raises(ContractError, match="not attached"):
            tape.backward(loss)
    assert xid == 0


def test_tape_consumed_after_backward():
    x = T.Tensor([1.0])
    with T.Tape() as tape:
        tape.watch(x)
        loss = T.reduce_sum(x)
        tape.backward(loss)
        with pytest.raises(ContractError, match="consumed"):
            T.relu(x)


def test_tape_backward_visits_shared_node_once():
    # y used twice: gradient accumulates, does not double-run the node
    x = T.Tensor([2.0])
    with T.Tape() as tape:
        xid = tape.watch(x)
        y = T.mul(x, x)
        loss = T.reduce_sum(T.add(y, y))
        grads = tape.backward(loss)
    assert np.allclose(grads[xid].data, [8.0])


GRADCHECK_CASES = [
    ("matmul", [(2, 3), (3, 2)]),
    ("conv2d", [(1, 2, 4, 4), (3, 2, 3, 3)]),
    ("add", [(3, 4), (3, 4)]),
    ("mul", [(3, 4), (3, 4)]),
    ("scale", [(5,)]),
    ("sum", [(3, 4)]),
    ("mean", [(3, 4)]),
    ("relu", [(4, 4)]),
    ("batchnorm2d", [(4, 3, 2, 2)]),
    ("softmax", [(5,)]),
    ("logsumexp", [(6,)]),
    ("l2normalize", [(3, 4)]),
    ("index_spatial", [(3, 4, 4)]),
    ("reshape", [(3, 4)]),
    ("stack", [(2, 3), (2, 3)]),
    ("take_row", [(4, 3)]),
]


@pytest.mark.parametrize("kind,shapes", GRADCHECK_CASES, ids=[k for k, _ in GRADCHECK_CASES])
def test_grad_check_catalog(kind, shapes):
    for seed in (1, 7):
        report = T.grad_check(kind, shapes, seed=seed)
        assert report.passed, f"{kind} seed {seed}: max rel err {report.max_rel_error:.3e}"


def test_grad_check_examples_from_contract():
    assert T.grad_check("matmul", [(2, 3), (3, 2)], seed=7).passed
    assert T.grad_check("softmax", [(5,)], seed=1).passed
    assert T.grad_check("conv2d", [(1, 2, 4, 4), (3, 2, 3, 3)], seed=3).passed


def test_grad_check_rejects_large_shapes():
    with pytest.raises(ContractError, match="512"):
        T.grad_check("relu", [(1024,)], seed=0)


def test_softmax_simplex_property():
    rng = T.make_rng(42)
    for _ in range(50):
        x = T.Tensor(rng.standard_normal((4, 7)) * 10)
        y = T.softmax(x, axis=1)
        assert (y.data >= 0).all()
        assert np.allclose(y.data.sum(axis=1), 1.0, atol=1e-6)


def test_logsumexp_matches_naive_and_is_stable():
    rng = T.make_rng(3)
    for _ in range(25):
        x = rng.uniform(-20, 20, size=9)
        out = T.logsumexp(T.Tensor(x, dtype=np.float64)).item()
        assert abs(out - np.log(np.exp(x).sum())) < 1e-6
    huge = T.logsumexp(T.Tensor(np.array([1e4, 1e4 - 5.0]))).item()
    assert np.isfinite(huge)


def test_batchnorm_train_moments():
    rng = T.make_rng(11)
    x = T.Tensor(rng.standard_normal((8, 5, 6, 6)) * 3 + 1.5)
    state = T.BatchNormState(5)
    y = T.batchnorm2d(x, T.Tensor(np.ones(5)), T.Tensor(np.zeros(5)), state)
    m = y.data.mean(axis=(0, 2, 3))
    v = y.data.var(axis=(0, 2, 3))
    assert np.abs(m).max() < 1e-4
    assert np.abs(v - 1).max() < 1e-3


def test_batchnorm_eval_uses_running_stats():
    state = T.BatchNormState(2)
    state.mean[:] = [1.0, -1.0]
    state.var[:] = [4.0, 0.25]
    x = T.Tensor(np.ones((1, 2, 1, 1), dtype=np.float32))
    y = T.batchnorm2d(x, T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), state, mode="eval")
    assert np.allclose(y.data.reshape(2), [0.0, 2.0 / np.sqrt(0.25 + 1e-5)], atol=1e-4)


class TestSgd:
    def _store(self, w):
        store = T.ParameterStore()
        store.add("w", np.array(w, dtype=np.float32))
        return store

    def test_plain_gradient_step(self):
        store = self._store([1.0])
        T.sgd_step(store, {"w": T.Tensor([0.5])}, lr=0.1, momentum=0.0, weight_decay=0.0)
        assert np.allclose(store["w"].data, [0.95])

    def test_momentum_recurrence_two_steps(self):
        store = self._store([0.0])
        for _ in range(2):
            T.sgd_step(store, {"w": T.Tensor([1.0])}, lr=1.0, momentum=0.9, weight_decay=0.0)
        assert np.allclose(store["w"].data, [-2.9])

    def test_decay_only_step(self):
        store = self._store([2.0])
        T.sgd_step(store, {"w": T.Tensor([0.0])}, lr=0.1, momentum=0.0, weight_decay=0.5)
        assert np.allclose(store["w"].data, [1.9])

    def test_zero_lr_bit_identical(self):
        store = self._store([1.25, -3.5])
        before = store.snapshot()
        mom_before = store._params["w"].momentum.copy()
        T.sgd_step(store, {"w": T.Tensor([1.0, 1.0])}, lr=0.0, momentum=0.9, weight_decay=0.1)
        assert np.array_equal(store["w"].data, before["w"])
        assert np.array_equal(store._params["w"].momentum, mom_before)

    def test_missing_gradient_raises(self):
        store = self._store([1.0])
        with pytest.raises(ContractError, match="missing gradient"):
            T.sgd_step(store, {}, lr=0.1)

    def test_frozen_untouched(self):
        store = T.ParameterStore()
        store.add("frozen", np.array([5.0], dtype=np.float32), trainable=False)
        before = store.snapshot()
        T.sgd_step(store, {}, lr=0.1, momentum=0.9)
        assert np.array_equal(store["frozen"].data, before["frozen"])


def test_op_apply_dispatch_matches_direct_calls():
    rng = T.make_rng(5)
    a = T.Tensor(rng.standard_normal((2, 3)).astype(np.float32))
    b = T.Tensor(rng.standard_normal((3, 2)).astype(np.float32))
    assert np.array_equal(T.op_apply("matmul", [a, b]).data, T.matmul(a, b).data)
    assert np.array_equal(
        T.op_apply("scale", [a], {"factor": 2.0}).data, T.scale(a, 2.0).data
    )
    with pytest.raises(ContractError, match="unknown op"):
        T.op_apply("fft", [a])


def test_make_rng_deterministic_and_splittable():
    a = T.make_rng(7).standard_normal(4)
    b = T.make_rng(7).standard_normal(4)
    c = T.make_rng(7, 1).standard_normal(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
