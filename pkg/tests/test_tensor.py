import numpy as np
import pytest

from avflow import tensor as T
from avflow.tensor import (
    NonFiniteError,
    ParamStore,
    ShapeError,
    Tensor,
    grad_check,
)


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Naive triple-loop matrix product."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += float(a[i, l]) * float(b[l, j])
    return out


def attention_oracle(q, k, v, mask=None):
    """Explicit-loop scaled dot-product attention reference."""
    nq, d = q.shape
    nk = k.shape[0]
    out = np.zeros((nq, v.shape[1]), dtype=np.float64)
    for i in range(nq):
        logits = []
        cols = []
        for j in range(nk):
            if mask is None or mask[i, j]:
                logits.append(float(q[i] @ k[j]) / np.sqrt(d))
                cols.append(j)
        if not cols:
            continue
        logits = np.array(logits)
        w = np.exp(logits - logits.max())
        w /= w.sum()
        for wj, j in zip(w, cols):
            out[i] += wj * v[j]
    return out


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 3)).astype(np.float32)
        out = T.matmul(Tensor(a), Tensor(np.eye(3, dtype=np.float32)))
        np.testing.assert_array_equal(out.data, a)

    def test_explicit_2x2(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_allclose(T.matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])

    def test_annihilator(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((2, 4)).astype(np.float32)
        out = T.matmul(Tensor(a), Tensor(np.zeros((4, 3), dtype=np.float32)))
        np.testing.assert_array_equal(out.data, np.zeros((2, 3), dtype=np.float32))

    def test_against_triple_loop_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            m, k, n = rng.integers(1, 5, 3)
            a = rng.standard_normal((m, k))
            b = rng.standard_normal((k, n))
            got = T.matmul(Tensor(a), Tensor(b)).data
            np.testing.assert_allclose(got, matmul_oracle(a, b), rtol=1e-5, atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_backward_formulas(self):
        rng = np.random.default_rng(3)
        a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        out = T.matmul(a, b)
        g = rng.standard_normal((2, 2)).astype(np.float32)
        out.backward(g)
        np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-5)
        np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-5)


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(Tensor([0.0, 0.0]), axis=-1)
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_shift_invariance(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal(6).astype(np.float32)
        a = T.softmax(Tensor(x), axis=-1).data
        b = T.softmax(Tensor(x + 3.7), axis=-1).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_direct_evaluation(self):
        # direct exp/sum oracle in float64: exp([1,2,3]) / sum
        e = np.exp(np.array([1.0, 2.0, 3.0]))
        expected = e / e.sum()
        np.testing.assert_allclose(expected, [0.09003057, 0.24472847, 0.66524096], atol=5e-9)
        out = T.softmax(Tensor([1.0, 2.0, 3.0]), axis=-1)
        np.testing.assert_allclose(out.data, expected, atol=1e-6)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            x = rng.standard_normal((3, 7)).astype(np.float32) * 5
            out = T.softmax(Tensor(x), axis=-1)
            np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(3), atol=1e-6)


class TestLayerNorm:
    def test_constant_vector(self):
        out = T.layer_norm(Tensor([4.0, 4.0, 4.0]), axis=-1)
        np.testing.assert_allclose(out.data, np.zeros(3), atol=1e-6)

    def test_already_normalized_eps_zero(self):
        out = T.layer_norm(Tensor([1.0, -1.0]), axis=-1, eps=0.0)
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-6)

    def test_hand_evaluation(self):
        # (x - mean) / sqrt(var + eps) with mean 3, var 1
        expected = np.array([-1.0, 1.0]) / np.sqrt(1.0 + 1e-5)
        np.testing.assert_allclose(expected, [-0.99999500, 0.99999500], atol=1e-7)
        out = T.layer_norm(Tensor([2.0, 4.0]), axis=-1, eps=1e-5)
        np.testing.assert_allclose(out.data, expected, atol=1e-6)

    def test_other_axis(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((4, 3)).astype(np.float32)
        out = T.layer_norm(Tensor(x), axis=0).data
        np.testing.assert_allclose(out.mean(axis=0), np.zeros(3), atol=1e-6)


class TestAttentionCore:
    def test_single_key_returns_value(self):
        rng = np.random.default_rng(7)
        q = rng.standard_normal((3, 4)).astype(np.float32)
        k = rng.standard_normal((1, 4)).astype(np.float32)
        v = rng.standard_normal((1, 4)).astype(np.float32)
        out = T.attention_core(Tensor(q), Tensor(k), Tensor(v))
        np.testing.assert_allclose(out.data, np.repeat(v, 3, axis=0), atol=1e-6)

    def test_identical_keys_average_values(self):
        rng = np.random.default_rng(8)
        key = rng.standard_normal(4).astype(np.float32)
        k = np.stack([key, key])
        v = rng.standard_normal((2, 4)).astype(np.float32)
        q = rng.standard_normal((2, 4)).astype(np.float32)
        out = T.attention_core(Tensor(q), Tensor(k), Tensor(v))
        np.testing.assert_allclose(out.data, np.tile(v.mean(axis=0), (2, 1)), atol=1e-6)

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            q = rng.standard_normal((3, 3))
            k = rng.standard_normal((3, 3))
            v = rng.standard_normal((3, 3))
            got = T.attention_core(Tensor(q), Tensor(k), Tensor(v)).data
            np.testing.assert_allclose(got, attention_oracle(q, k, v), rtol=1e-5, atol=1e-6)

    def test_masked_against_oracle(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            q = rng.standard_normal((4, 3))
            k = rng.standard_normal((5, 3))
            v = rng.standard_normal((5, 3))
            mask = rng.random((4, 5)) > 0.4
            got = T.attention_core(Tensor(q), Tensor(k), Tensor(v), mask=mask).data
            np.testing.assert_allclose(
                got, attention_oracle(q, k, v, mask), rtol=1e-5, atol=1e-6
            )

    def test_fully_blocked_row_outputs_zero(self):
        rng = np.random.default_rng(11)
        q = rng.standard_normal((2, 3)).astype(np.float32)
        k = rng.standard_normal((3, 3)).astype(np.float32)
        v = rng.standard_normal((3, 3)).astype(np.float32)
        mask = np.ones((2, 3), dtype=bool)
        mask[1] = False
        out = T.attention_core(Tensor(q), Tensor(k), Tensor(v), mask=mask)
        np.testing.assert_array_equal(out.data[1], np.zeros(3, dtype=np.float32))

    def test_mask_shape_mismatch(self):
        q = Tensor(np.ones((2, 3)))
        k = Tensor(np.ones((3, 3)))
        with pytest.raises(ShapeError):
            T.attention_core(q, k, k, mask=np.ones((3, 2), dtype=bool))


class TestGradCheck:
    def test_quadratic_is_exact(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal(5)
        report = grad_check(lambda t: T.sum_(T.mul(t, t)), [x], tol=1e-6)
        assert report.passed, report.max_rel_err

    def test_softmax_mse_composite(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal(4)
        target = rng.standard_normal(4)

        def f(t):
            d = T.sub(T.softmax(t, axis=-1), Tensor(target))
            return T.mean(T.mul(d, d))

        assert grad_check(f, [x], tol=1e-4).passed

    def test_matmul_chain(self):
        rng = np.random.default_rng(14)
        a = rng.standard_normal((2, 2))
        b = rng.standard_normal((2, 2))

        def f(ta, tb):
            prod = T.matmul(ta, tb)
            return T.sum_(T.mul(prod, prod))

        assert grad_check(f, [a, b], tol=1e-4).passed

    def test_nonfinite_reports_failure(self):
        def f(t):
            return T.sum_(T.mul(T.scale(t, 1e200), T.scale(t, 1e200)))

        with np.errstate(over="ignore"):
            report = grad_check(f, [np.ones(3) * 10.0], tol=1e-4)
        assert not report.passed
        assert report.failure is not None


def _loss_of(op):
    """Wrap an op result into a scalar for gradient checks."""

    def f(*tensors):
        out = op(*tensors)
        return T.mean(T.mul(out, out))

    return f


OP_CASES = [
    ("add", lambda a, b: T.add(a, b), [(3, 4), (3, 4)]),
    ("add_broadcast", lambda a, b: T.add(a, b), [(3, 4), (4,)]),
    ("sub", lambda a, b: T.sub(a, b), [(2, 3), (2, 3)]),
    ("mul", lambda a, b: T.mul(a, b), [(2, 3), (2, 3)]),
    ("mul_broadcast", lambda a, b: T.mul(a, b), [(2, 3, 4), (2, 1, 4)]),
    ("scale", lambda a: T.scale(a, -1.7), [(3, 2)]),
    ("matmul", lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)]),
    ("matmul_batched", lambda a, b: T.matmul(a, b), [(2, 3, 4), (4, 2)]),
    ("reshape", lambda a: T.reshape(a, (2, 6)), [(3, 4)]),
    ("transpose", lambda a: T.transpose(a, (1, 0, 2)), [(2, 3, 4)]),
    ("concat", lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    ("slice", lambda a: T.slice_axis(a, 1, 1, 3), [(2, 4)]),
    ("sum", lambda a: T.sum_(a, axis=1), [(3, 4)]),
    ("mean_all", lambda a: T.mean(a), [(3, 4)]),
    ("gelu", lambda a: T.gelu(a), [(3, 4)]),
    ("layer_norm", lambda a: T.layer_norm(a, axis=-1), [(3, 5)]),
    ("softmax", lambda a: T.softmax(a, axis=-1), [(3, 5)]),
    ("attention", lambda q, k, v: T.attention_core(q, k, v), [(3, 4), (5, 4), (5, 4)]),
]


@pytest.mark.parametrize("name,op,shapes", OP_CASES, ids=[c[0] for c in OP_CASES])
def test_grad_check_every_op(name, op, shapes):
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(10):
        inputs = [rng.standard_normal(s) for s in shapes]
        report = grad_check(_loss_of(op), inputs, tol=1e-4)
        assert report.passed, f"{name}: max rel err {report.max_rel_err}"


def test_grad_check_masked_softmax():
    rng = np.random.default_rng(42)
    mask = rng.random((3, 5)) > 0.3
    mask[1] = False  # one fully-blocked row

    def op(a):
        return T.masked_softmax(a, mask, axis=-1)

    for _ in range(10):
        x = rng.standard_normal((3, 5))
        assert grad_check(_loss_of(op), [x], tol=1e-4).passed


def test_grad_check_rope_rotate():
    rng = np.random.default_rng(43)
    angles = rng.standard_normal((4, 3))
    cos, sin = np.cos(angles), np.sin(angles)

    def op(a):
        return T.rope_rotate(a, cos, sin)

    for _ in range(10):
        x = rng.standard_normal((4, 6))
        assert grad_check(_loss_of(op), [x], tol=1e-4).passed


class TestEngine:
    def test_determinism(self):
        rng = np.random.default_rng(15)
        x = rng.standard_normal((4, 4)).astype(np.float32)
        w = rng.standard_normal((4, 4)).astype(np.float32)

        def run():
            out = T.softmax(T.matmul(Tensor(x), Tensor(w)), axis=-1)
            return T.layer_norm(out, axis=-1).data

        a, b = run(), run()
        assert np.array_equal(a, b)

    def test_backward_linearity(self):
        rng = np.random.default_rng(16)
        xval = rng.standard_normal((3, 3))

        def losses(x):
            l1 = T.mean(T.mul(x, x))
            l2 = T.sum_(T.gelu(x))
            return l1, l2

        x = Tensor(xval, requires_grad=True)
        l1, l2 = losses(x)
        T.add(l1, l2).backward()
        combined = x.grad.copy()

        x2 = Tensor(xval, requires_grad=True)
        l1, l2 = losses(x2)
        l1.backward()
        l2.backward()
        np.testing.assert_allclose(x2.grad, combined, rtol=1e-6)

    def test_nonfinite_input_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([np.inf, 1.0])

    def test_nonfinite_op_output_rejected(self):
        x = Tensor(np.full(4, 1e30, dtype=np.float32))
        with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
            T.mul(x, x)

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ShapeError):
            T.scale(x, 2.0).backward()

    def test_grad_accumulates(self):
        x = Tensor(np.ones(3), requires_grad=True)
        T.sum_(x).backward()
        T.sum_(x).backward()
        np.testing.assert_array_equal(x.grad, 2 * np.ones(3))


class TestParamStore:
    def test_order_and_uniqueness(self):
        store = ParamStore()
        store.add("b", np.zeros(2))
        store.add("a", np.ones(2))
        assert store.names() == ["b", "a"]
        with pytest.raises(ValueError):
            store.add("a", np.zeros(2))

    def test_freeze_flags(self):
        store = ParamStore()
        store.add("x", np.zeros(2))
        store.add("y", np.zeros(2))
        store.set_trainable({"y"})
        assert store.trainable_names() == ["y"]
        assert not store["x"].requires_grad
        assert store["y"].requires_grad

    def test_unknown_name_rejected(self):
        store = ParamStore()
        store.add("x", np.zeros(2))
        with pytest.raises(KeyError):
            store.set_trainable({"nope"})
