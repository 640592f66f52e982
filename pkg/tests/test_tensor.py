"""Engine tests: op forwards against numpy, backward against analytic and
finite-difference gradients, and the gradient-check oracle itself."""

import zlib

import numpy as np
import numpy.testing as npt
import pytest

from k3m.nn.gradcheck import NondeterministicForwardError, grad_check
from k3m.nn.params import ParamStore
from k3m.nn import tensor as T


def make_store(arrays, dtype=np.float64):
    store = ParamStore(dtype=dtype)
    for name, arr in arrays.items():
        store.create(name, arr)
    return store


class TestForward:
    def test_arithmetic_matches_numpy(self):
        rng = np.random.default_rng(0)
        a = T.Tensor(rng.standard_normal((3, 4)))
        b = T.Tensor(rng.standard_normal((3, 4)))
        npt.assert_allclose((a + b).data, a.data + b.data)
        npt.assert_allclose((a - b).data, a.data - b.data)
        npt.assert_allclose((a * b).data, a.data * b.data)
        npt.assert_allclose((a / (b + 10.0)).data, a.data / (b.data + 10.0))
        npt.assert_allclose((-a).data, -a.data)
        npt.assert_allclose((a ** 2.0).data, a.data ** 2.0)

    def test_matmul_and_shapes(self):
        rng = np.random.default_rng(1)
        a = T.Tensor(rng.standard_normal((3, 4)))
        b = T.Tensor(rng.standard_normal((4, 5)))
        npt.assert_allclose((a @ b).data, a.data @ b.data)
        batched = T.Tensor(rng.standard_normal((2, 3, 4)))
        other = T.Tensor(rng.standard_normal((2, 4, 6)))
        npt.assert_allclose(T.matmul(batched, other).data, batched.data @ other.data)

    def test_matmul_shape_mismatch_raises(self):
        a = T.Tensor(np.zeros((3, 4)))
        b = T.Tensor(np.zeros((5, 6)))
        with pytest.raises(ValueError):
            T.matmul(a, b)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        x = T.Tensor(rng.standard_normal((4, 7)) * 30)
        s = T.softmax(x, axis=-1)
        npt.assert_allclose(s.data.sum(axis=-1), 1.0, atol=1e-12)
        assert np.isfinite(s.data).all()

    def test_dtype_mismatch_rejected(self):
        a = T.Tensor(np.zeros(3, dtype=np.float32))
        b = T.Tensor(np.zeros(3, dtype=np.float64))
        with pytest.raises(ValueError):
            T.add(a, b)

    def test_float32_stays_float32(self):
        a = T.Tensor(np.ones((2, 2), dtype=np.float32))
        out = T.gelu(T.sigmoid(a * 2.0 + 1.0))
        assert out.dtype == np.float32

    def test_gather_rows_out_of_range(self):
        a = T.Tensor(np.zeros((3, 2)))
        with pytest.raises(IndexError):
            T.gather_rows(a, np.array([3]))


class TestBackward:
    def test_linear_case_exact_outer_product(self):
        # loss = sum(W @ x) has dL/dW = ones @ x^T exactly.
        rng = np.random.default_rng(3)
        store = make_store({"W": rng.standard_normal((4, 3))})
        x = T.constant(rng.standard_normal((3, 2)))
        loss = T.tsum(T.matmul(store.get("W"), x))
        T.backward(loss)
        expected = np.ones((4, 2)) @ x.data.T
        npt.assert_array_equal(store.grad("W"), expected)

    def test_unused_parameter_gets_exactly_zero(self):
        store = make_store({"used": np.ones((2, 2)), "unused": np.ones((2, 2))})
        loss = T.tsum(store.get("used") * 3.0)
        T.backward(loss)
        npt.assert_array_equal(store.grad("unused"), np.zeros((2, 2)))
        npt.assert_array_equal(store.grad("used"), np.full((2, 2), 3.0))

    def test_gradients_accumulate_across_calls(self):
        store = make_store({"w": np.ones(4)})
        for _ in range(3):
            T.backward(T.tsum(store.get("w") * 2.0))
        npt.assert_array_equal(store.grad("w"), np.full(4, 6.0))
        store.zero_grad()
        npt.assert_array_equal(store.grad("w"), np.zeros(4))

    def test_backward_rejects_non_scalar(self):
        store = make_store({"w": np.ones((2, 2))})
        with pytest.raises(ValueError):
            T.backward(store.get("w") * 1.0)

    def test_broadcast_bias_gradient_sums_rows(self):
        store = make_store({"b": np.zeros(3)})
        x = T.constant(np.ones((5, 3)))
        loss = T.tsum(x + store.get("b"))
        T.backward(loss)
        npt.assert_array_equal(store.grad("b"), np.full(3, 5.0))

    def test_gather_rows_duplicates_accumulate(self):
        store = make_store({"e": np.ones((4, 2))})
        rows = T.gather_rows(store.get("e"), np.array([1, 1, 3]))
        T.backward(T.tsum(rows))
        expected = np.zeros((4, 2))
        expected[1] = 2.0
        expected[3] = 1.0
        npt.assert_array_equal(store.grad("e"), expected)

    def test_deep_chain_does_not_hit_recursion_limit(self):
        store = make_store({"w": np.ones(1)})
        t = store.get("w")
        for _ in range(5000):
            t = t + 1.0
        T.backward(T.tsum(t))
        npt.assert_array_equal(store.grad("w"), np.ones(1))


OPS = [
    ("add", lambda a, b: a + b),
    ("sub", lambda a, b: a - b),
    ("mul", lambda a, b: a * b),
    ("div", lambda a, b: a / (b + 4.0)),
    ("matmul", lambda a, b: T.matmul(a, T.transpose(b, (1, 0)))),
    ("softmax", lambda a, b: T.softmax(a, axis=-1) * b),
    ("exp", lambda a, b: T.texp(a) + b),
    ("log", lambda a, b: T.tlog(a * a + 1.0) * b),
    ("abs", lambda a, b: T.tabs(a) * b),
    ("relu", lambda a, b: T.relu(a) * b),
    ("leaky_relu", lambda a, b: T.leaky_relu(a, 0.2) * b),
    ("elu", lambda a, b: T.elu(a) * b),
    ("gelu", lambda a, b: T.gelu(a) * b),
    ("sigmoid", lambda a, b: T.sigmoid(a) * b),
    ("power", lambda a, b: (a * a + 1.0) ** -0.5 * b),
    ("mean", lambda a, b: T.tmean(a * b, axis=0, keepdims=True)),
    ("concat", lambda a, b: T.concat([a, b], axis=1)),
    ("transpose", lambda a, b: T.transpose(a, (1, 0)) * T.transpose(b, (1, 0))),
    ("reshape", lambda a, b: T.reshape(a, (1, a.data.size)) * T.reshape(b, (1, b.data.size))),
    ("gather", lambda a, b: T.gather_rows(a, np.array([0, 2, 2])) * 2.0),
]


@pytest.mark.parametrize("name,fn", OPS, ids=[name for name, _ in OPS])
def test_every_op_matches_finite_differences(name, fn):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    store = make_store(
        {"a": rng.standard_normal((3, 4)) + 0.1, "b": rng.standard_normal((3, 4))}
    )

    def forward():
        return T.tsum(fn(store.get("a"), store.get("b")) ** 2.0)

    err = grad_check(forward, store, eps=1e-4, n_samples=24, seed=0)
    assert err < 1e-5, f"{name}: max relative error {err}"


class TestGradCheck:
    def test_quadratic_loss_is_essentially_exact(self):
        store = make_store({"W": np.random.default_rng(5).standard_normal((4, 4))})

        def forward():
            w = store.get("W")
            return T.tsum(w * w)

        assert grad_check(forward, store, eps=1e-4, n_samples=16, seed=0) < 1e-9

    def test_detects_nondeterministic_forward(self):
        store = make_store({"w": np.ones(2)})
        counter = {"n": 0}

        def forward():
            counter["n"] += 1
            return T.tsum(store.get("w") * float(counter["n"]))

        with pytest.raises(NondeterministicForwardError):
            grad_check(forward, store)

    def test_rejects_non_scalar_forward(self):
        store = make_store({"w": np.ones(2)})
        with pytest.raises(ValueError):
            grad_check(lambda: store.get("w") * 1.0, store)
