"""Tensor op semantics and gradient correctness for the autodiff core."""

import numpy as np
import pytest

from admatch import autodiff as ad
from admatch.autodiff import (
    DegenerateVectorError,
    DeterminismError,
    ParamStore,
    ShapeError,
    Tape,
    Tensor,
    grad_check,
)


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop matrix product, independent of numpy's matmul."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        m = np.array([[2.0, 3.0], [5.0, 7.0]])
        out = ad.matmul(Tensor(np.eye(2)), Tensor(m))
        np.testing.assert_array_equal(out.data, m)

    def test_small_product(self):
        out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(5, 3))
        out = ad.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, matmul_oracle(a, b), atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestActivations:
    def test_sigmoid_zero(self):
        assert ad.sigmoid(Tensor(0.0)).item() == 0.5

    def test_sigmoid_six(self):
        # 1 / (1 + e^-6), evaluated directly
        assert ad.sigmoid(Tensor(6.0)).item() == pytest.approx(
            0.9975273768433653, abs=1e-12
        )

    def test_sigmoid_no_overflow(self):
        out = ad.sigmoid(Tensor([-1000.0, 1000.0]))
        assert np.isfinite(out.data).all()

    def test_relu(self):
        out = ad.relu(Tensor([-1.0, 0.0, 2.5]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.5])

    def test_tanh(self):
        np.testing.assert_allclose(
            ad.tanh(Tensor([0.0, 1.0])).data, [0.0, np.tanh(1.0)], atol=1e-15
        )

    def test_softmax_constant_rows(self):
        out = ad.softmax(Tensor([[3.0, 3.0, 3.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(7)
        x = rng.normal(scale=5.0, size=(20, 9))
        out = ad.softmax(Tensor(x))
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)
        assert (out.data >= 0).all()

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(5, 6))
        base = ad.softmax(Tensor(x)).data
        shifted = ad.softmax(Tensor(x + 123.456)).data
        np.testing.assert_allclose(shifted, base, atol=1e-9)

    def test_softmax_extreme_logits_finite(self):
        out = ad.softmax(Tensor([[1e3, -1e3, 0.0]]))
        assert np.isfinite(out.data).all()


class TestCosine:
    def test_self_cosine_is_one(self):
        v = Tensor([1.0, 2.0, -3.0])
        assert ad.cosine(v, v).item() == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert ad.cosine(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0

    def test_45_degrees(self):
        got = ad.cosine(Tensor([1.0, 1.0]), Tensor([1.0, 0.0])).item()
        assert got == pytest.approx(0.7071067811865476, abs=1e-9)

    def test_scale_invariance(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            u = rng.normal(size=6)
            v = rng.normal(size=6)
            a, b = rng.uniform(0.01, 100.0, size=2)
            base = ad.cosine(Tensor(u), Tensor(v)).item()
            scaled = ad.cosine(Tensor(a * u), Tensor(b * v)).item()
            assert scaled == pytest.approx(base, abs=1e-9)

    def test_zero_vector_raises(self):
        with pytest.raises(DegenerateVectorError):
            ad.cosine(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))

    def test_range(self):
        rng = np.random.default_rng(12)
        u = Tensor(rng.normal(size=(40, 5)))
        v = Tensor(rng.normal(size=(40, 5)))
        c = ad.cosine_rows(u, v).data
        assert (c >= -1.0 - 1e-12).all() and (c <= 1.0 + 1e-12).all()


class TestBackwardBasics:
    def test_sum_of_squares_gradient(self):
        store = ParamStore()
        store.add("x", [1.0, 2.0, 3.0])

        def f(s):
            x = s["x"]
            return ad.sum_all(ad.mul(x, x))

        err = grad_check(f, store, epsilon=1e-5)
        assert err < 1e-8
        store.zero_grads()
        with Tape() as tape:
            tape.backward(f(store))
        np.testing.assert_allclose(store["x"].grad, [2.0, 4.0, 6.0], atol=1e-12)

    def test_constant_function_zero_error(self):
        store = ParamStore()
        store.add("x", [1.0, -2.0])

        def f(s):
            return Tensor(4.0, requires_grad=True) * 1.0

        assert grad_check(f, store) == 0.0

    def test_nondeterministic_f_detected(self):
        store = ParamStore()
        store.add("x", [1.0])
        calls = []

        def f(s):
            calls.append(1)
            return ad.sum_all(s["x"]) * float(len(calls))

        with pytest.raises(DeterminismError):
            grad_check(f, store)

    def test_epsilon_out_of_range(self):
        store = ParamStore()
        store.add("x", [1.0])
        with pytest.raises(ValueError):
            grad_check(lambda s: ad.sum_all(s["x"]), store, epsilon=1e-2)

    def test_tape_spent_after_backward(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = ad.sum_all(x)
            tape.backward(y)
            with pytest.raises(RuntimeError):
                tape.backward(y)

    def test_backward_needs_scalar_root(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = ad.mul(x, x)
            with pytest.raises(ShapeError):
                tape.backward(y)

    def test_no_tape_means_no_grads(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = ad.sum_all(ad.mul(x, x))
        assert y.item() == 5.0
        assert x.grad is None


def _op_cases():
    rng = np.random.default_rng(42)

    def case(name, builder):
        return pytest.param(builder, id=name)

    yield case("matmul", lambda s: ad.sum_all(ad.matmul(s["a"], s["b"])))
    yield case("add_broadcast", lambda s: ad.sum_all(ad.tanh(ad.add(s["a"], s["row"]))))
    yield case("sub", lambda s: ad.sum_all(ad.sigmoid(ad.sub(s["a"], s["a2"]))))
    yield case("mul_broadcast", lambda s: ad.sum_all(ad.mul(s["a"], s["col"])))
    yield case("neg", lambda s: ad.sum_all(ad.neg(ad.tanh(s["a"]))))
    yield case("sigmoid", lambda s: ad.sum_all(ad.sigmoid(s["a"])))
    yield case("tanh", lambda s: ad.sum_all(ad.tanh(s["a"])))
    yield case("relu", lambda s: ad.sum_all(ad.relu(s["a"])))
    yield case("softmax", lambda s: ad.sum_all(ad.mul(ad.softmax(s["a"]), s["a2"])))
    yield case("log", lambda s: ad.sum_all(ad.log(ad.add(ad.sigmoid(s["a"]), 0.5))))
    yield case("clip", lambda s: ad.sum_all(ad.clip(s["a"], -0.4, 0.4)))
    yield case("mean_all", lambda s: ad.mean_all(ad.mul(s["a"], s["a"])))
    yield case(
        "concat_take",
        lambda s: ad.sum_all(
            ad.mul(
                ad.take_cols(ad.concat_cols([s["a"], s["a2"]]), 2, 6),
                ad.concat_cols([s["a"], s["a2"]]).data[:, 2:6] * 0 + 1.5,
            )
        ),
    )
    yield case("reshape", lambda s: ad.sum_all(ad.reshape(ad.tanh(s["a"]), (1, -1))))
    yield case(
        "gather_rows",
        lambda s: ad.sum_all(ad.tanh(ad.gather_rows(s["table"], [0, 2, 2, 1]))),
    )
    yield case(
        "gather_sum",
        lambda s: ad.sum_all(
            ad.tanh(ad.gather_sum(s["table"], [[0, 1], [], [2, 2, 1]]))
        ),
    )
    yield case(
        "cosine_rows",
        lambda s: ad.sum_all(ad.cosine_rows(s["a"], s["a2"])),
    )


@pytest.mark.parametrize("builder", list(_op_cases()))
def test_every_op_passes_grad_check(builder):
    rng = np.random.default_rng(1234)
    store = ParamStore()
    store.add("a", rng.normal(scale=0.7, size=(3, 4)))
    store.add("a2", rng.normal(scale=0.7, size=(3, 4)))
    store.add("b", rng.normal(scale=0.7, size=(4, 2)))
    store.add("row", rng.normal(scale=0.7, size=4))
    store.add("col", rng.normal(scale=0.7, size=(3, 1)))
    store.add("table", rng.normal(scale=0.7, size=(4, 3)))
    assert grad_check(builder, store, epsilon=1e-5) < 1e-4


class TestParamStore:
    def test_grad_shape_matches_value(self):
        store = ParamStore()
        t = store.add("w", np.ones((3, 2)))
        assert t.grad is not None and t.grad.shape == (3, 2)

    def test_duplicate_name(self):
        store = ParamStore()
        store.add("w", [1.0])
        with pytest.raises(ValueError):
            store.add("w", [2.0])

    def test_frozen_rows_zeroed_on_add(self):
        store = ParamStore()
        t = store.add("emb", np.ones((4, 3)), frozen_rows=(0,))
        np.testing.assert_array_equal(t.data[0], [0.0, 0.0, 0.0])
        np.testing.assert_array_equal(t.data[1], [1.0, 1.0, 1.0])

    def test_non_trainable_grads_stay_zero(self):
        store = ParamStore()
        store.add("w", [1.0, 2.0])
        frozen = store.add("c", [3.0, 4.0], trainable=False)
        store.zero_grads()
        with Tape() as tape:
            out = ad.sum_all(ad.mul(store["w"], store["c"]))
            tape.backward(out)
        np.testing.assert_array_equal(frozen.grad, [0.0, 0.0])
        np.testing.assert_array_equal(store["w"].grad, [3.0, 4.0])

    def test_load_arrays_in_place(self):
        store = ParamStore()
        t = store.add("w", np.zeros((2, 2)))
        store.load_arrays({"w": np.ones((2, 2))})
        assert store["w"] is t
        np.testing.assert_array_equal(t.data, np.ones((2, 2)))

    def test_load_arrays_rejects_mismatch(self):
        store = ParamStore()
        store.add("w", np.zeros(2))
        with pytest.raises(ValueError):
            store.load_arrays({"v": np.zeros(2)})


class TestGatherOps:
    def test_gather_sum_empty_list_is_zero_row(self):
        table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        out = ad.gather_sum(table, [[], [1, 2]])
        np.testing.assert_array_equal(out.data[0], [0.0, 0.0, 0.0])
        np.testing.assert_array_equal(out.data[1], table.data[1] + table.data[2])

    def test_gather_rows_out_of_range(self):
        table = Tensor(np.zeros((3, 2)), requires_grad=True)
        with pytest.raises(IndexError):
            ad.gather_rows(table, [0, 3])
        with pytest.raises(IndexError):
            ad.gather_sum(table, [[-1]])

    def test_repeated_ids_accumulate(self):
        store = ParamStore()
        store.add("table", np.ones((3, 2)))
        store.zero_grads()
        with Tape() as tape:
            out = ad.sum_all(ad.gather_rows(store["table"], [1, 1, 1]))
            tape.backward(out)
        np.testing.assert_array_equal(store["table"].grad[1], [3.0, 3.0])
        np.testing.assert_array_equal(store["table"].grad[0], [0.0, 0.0])
