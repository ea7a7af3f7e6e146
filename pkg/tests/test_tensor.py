"""Tensor op semantics and reverse-mode gradient correctness."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmxc.tensor import (
    DegenerateInputError,
    DimensionError,
    Tensor,
    adaptive_max_pool,
    add,
    add_n,
    affine,
    check_gradient,
    concat,
    dot,
    finite_differences,
    gather_rows,
    l2_normalize,
    matmul,
    mean_rows,
    mul,
    relu,
    reshape,
    row,
    row_softmax,
    stack_rows,
    sum_rows,
    transpose,
    tsum,
)

import oracles


class TestMatmul:
    def test_identity(self):
        m = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = matmul(Tensor(np.eye(2)), m)
        np.testing.assert_array_equal(out.data, m.data)

    def test_zero(self):
        m = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = matmul(m, Tensor(np.zeros((2, 2))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 2)))

    def test_known_product(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        expected = oracles.matmul([[1.0, 2.0], [3.0, 4.0]], [[5.0], [6.0]])
        np.testing.assert_array_equal(out.data, expected)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_vector_matrix_variants(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal(3)
        m = rng.standard_normal((3, 4))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(m)).data, a @ m)
        np.testing.assert_allclose(matmul(Tensor(m.T), Tensor(a)).data, m.T @ a)


class TestL2Normalize:
    def test_three_four_five(self):
        out = l2_normalize(Tensor([3.0, 4.0]))
        np.testing.assert_allclose(out.data, [0.6, 0.8])

    def test_idempotent_on_unit(self):
        u = np.array([1.0, 0.0, 0.0])
        np.testing.assert_allclose(l2_normalize(Tensor(u)).data, u)

    def test_axis_case(self):
        v = np.zeros(5)
        v[0] = 2.0
        out = l2_normalize(Tensor(v))
        expected = np.zeros(5)
        expected[0] = 1.0
        np.testing.assert_array_equal(out.data, expected)

    def test_degenerate(self):
        with pytest.raises(DegenerateInputError):
            l2_normalize(Tensor(np.zeros(4)))

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
    def test_unit_norm_output(self, values):
        v = np.asarray(values)
        if np.linalg.norm(v) <= 1e-6:
            return
        out = l2_normalize(Tensor(v))
        assert abs(np.linalg.norm(out.data) - 1.0) <= 1e-12


class TestRowSoftmax:
    def test_equal_values_uniform(self):
        out = row_softmax(Tensor([[2.0, 2.0, 2.0]]), 1.0)
        np.testing.assert_allclose(out.data, [[1 / 3] * 3])

    def test_single_column(self):
        out = row_softmax(Tensor([[5.0], [-3.0]]), 1.0)
        np.testing.assert_array_equal(out.data, [[1.0], [1.0]])

    def test_quarter_three_quarters(self):
        out = row_softmax(Tensor([[0.0, np.log(3.0)]]), 1.0)
        np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-15)

    @given(
        st.lists(
            st.lists(st.floats(-30, 30), min_size=2, max_size=5),
            min_size=1,
            max_size=4,
        ).filter(lambda rows: len({len(r) for r in rows}) == 1),
        st.floats(0.1, 3.0),
    )
    @settings(max_examples=50)
    def test_rows_sum_to_one(self, rows, scale):
        out = row_softmax(Tensor(rows), scale)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)

    @given(st.lists(st.floats(-20, 20), min_size=2, max_size=6), st.floats(-5, 5))
    @settings(max_examples=50)
    def test_shift_invariance(self, values, shift):
        base = row_softmax(Tensor([values]), 1.0).data
        shifted = row_softmax(Tensor([[v + shift for v in values]]), 1.0).data
        np.testing.assert_allclose(base, shifted, atol=1e-12)


class TestAdaptiveMaxPool:
    def test_identity_when_sizes_match(self):
        v = np.array([4.0, -1.0, 2.5])
        np.testing.assert_array_equal(adaptive_max_pool(Tensor(v), 3).data, v)

    def test_two_segments(self):
        out = adaptive_max_pool(Tensor([1.0, 5.0, 2.0, 7.0]), 2)
        np.testing.assert_array_equal(out.data, oracles.max_pool([1.0, 5.0, 2.0, 7.0], 2))

    def test_constant_vector(self):
        out = adaptive_max_pool(Tensor(np.full(6, 1.5)), 4)
        np.testing.assert_array_equal(out.data, np.full(4, 1.5))

    def test_matches_oracle_on_uneven_segments(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            n = int(rng.integers(3, 12))
            d_out = int(rng.integers(1, n + 1))
            v = rng.standard_normal(n)
            out = adaptive_max_pool(Tensor(v), d_out)
            np.testing.assert_array_equal(out.data, oracles.max_pool(list(v), d_out))

    def test_rejects_expansion(self):
        with pytest.raises(DimensionError):
            adaptive_max_pool(Tensor(np.ones(3)), 4)


class TestCheckGradient:
    def test_quadratic(self):
        x = Tensor.leaf(np.array([1.0, -2.0, 3.0]))
        report = check_gradient(lambda: dot(x, x), {"x": x})
        assert report.passed
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_constant_function(self):
        x = Tensor.leaf(np.array([1.0, 2.0]))
        report = check_gradient(lambda: tsum(mul(x, affine(x, 0.0, 0.0))), {"x": x})
        assert report.passed

    def test_reports_bad_gradient(self):
        # A wrong vjp must be flagged. Build one deliberately.
        x = Tensor.leaf(np.array([1.0, 2.0]))

        def broken():
            t = Tensor(x.data * 3.0, (x,), lambda g: (g,))  # claims d/dx = 1
            return tsum(t)

        report = check_gradient(broken, {"x": x})
        assert not report.passed


def _gradcheck(f, params, tol=1e-4):
    report = check_gradient(f, params, tol=tol)
    assert report.passed, str(report)


class TestBackwardAgainstFiniteDifferences:
    def test_matmul_chain(self):
        rng = np.random.default_rng(2)
        a = Tensor.leaf(rng.standard_normal((3, 4)))
        b = Tensor.leaf(rng.standard_normal((4, 2)))
        _gradcheck(lambda: tsum(matmul(a, b)), {"a": a, "b": b})

    def test_vector_matmul(self):
        rng = np.random.default_rng(3)
        v = Tensor.leaf(rng.standard_normal(4))
        m = Tensor.leaf(rng.standard_normal((4, 3)))
        _gradcheck(lambda: tsum(matmul(v, m)), {"v": v, "m": m})

    def test_softmax(self):
        rng = np.random.default_rng(4)
        m = Tensor.leaf(rng.standard_normal((3, 5)))
        w = Tensor.leaf(rng.standard_normal((3, 5)))
        _gradcheck(lambda: tsum(mul(row_softmax(m, 0.7), w)), {"m": m})

    def test_normalize(self):
        rng = np.random.default_rng(5)
        v = Tensor.leaf(rng.standard_normal(6) + 2.0)
        w = Tensor.leaf(rng.standard_normal(6))
        _gradcheck(lambda: dot(l2_normalize(v), w), {"v": v})

    def test_maxpool(self):
        rng = np.random.default_rng(6)
        # Keep segment maxima well separated so finite differences are clean.
        v = Tensor.leaf(np.sort(rng.standard_normal(9)) * 3.0)
        w = Tensor.leaf(rng.standard_normal(4))
        _gradcheck(lambda: dot(adaptive_max_pool(v, 4), w), {"v": v})

    def test_gather_with_duplicates(self):
        rng = np.random.default_rng(7)
        table = Tensor.leaf(rng.standard_normal((5, 3)))
        w = Tensor.leaf(rng.standard_normal((4, 3)))
        _gradcheck(
            lambda: tsum(mul(gather_rows(table, [1, 1, 3, 0]), w)), {"table": table}
        )

    def test_stack_concat_reshape_row(self):
        rng = np.random.default_rng(8)
        a = Tensor.leaf(rng.standard_normal(3))
        b = Tensor.leaf(rng.standard_normal(3))
        m = Tensor.leaf(rng.standard_normal((2, 3)))

        def f():
            stacked = stack_rows([a, b])
            c = concat(row(stacked, 0), row(m, 1))
            return tsum(mul(reshape(c, (2, 3)), m))

        _gradcheck(f, {"a": a, "b": b, "m": m})

    def test_relu_mul_affine(self):
        rng = np.random.default_rng(9)
        x = Tensor.leaf(rng.standard_normal(8) + 0.5)
        y = Tensor.leaf(rng.standard_normal(8))
        _gradcheck(lambda: tsum(mul(relu(affine(x, 2.0, -0.3)), y)), {"x": x, "y": y})

    def test_sum_mean_rows(self):
        rng = np.random.default_rng(10)
        m = Tensor.leaf(rng.standard_normal((4, 3)))
        w = Tensor.leaf(rng.standard_normal(3))
        _gradcheck(lambda: dot(sum_rows(m), w), {"m": m})
        _gradcheck(lambda: dot(mean_rows(m), w), {"m": m})

    def test_transpose_add_n(self):
        rng = np.random.default_rng(11)
        m = Tensor.leaf(rng.standard_normal((3, 4)))
        terms = [tsum(transpose(m)), tsum(m), tsum(affine(m, -2.0))]
        total = add_n(terms)
        total.backward()
        np.testing.assert_allclose(m.grad, np.zeros_like(m.data), atol=1e-15)

    def test_shared_subgraph_accumulates(self):
        x = Tensor.leaf(np.array([2.0]))
        y = mul(x, x)  # x^2; dy/dx = 2x = 4
        z = add(y, x)  # z = x^2 + x; dz/dx = 5
        z.backward(np.ones(1))
        np.testing.assert_allclose(x.grad, [5.0])

    def test_finite_differences_helper(self):
        x = Tensor.leaf(np.array([1.0, 2.0]))
        g = finite_differences(lambda: dot(x, x), x)
        np.testing.assert_allclose(g, 2 * x.data, atol=1e-6)


class TestValidation:
    def test_leaf_rejects_nan(self):
        with pytest.raises(ValueError):
            Tensor.leaf(np.array([1.0, np.nan]))

    def test_backward_requires_scalar(self):
        m = Tensor(np.ones((2, 2)))
        with pytest.raises(DimensionError):
            add(m, m).backward()

    def test_mul_shape_mismatch(self):
        with pytest.raises(DimensionError):
            mul(Tensor(np.ones(3)), Tensor(np.ones(4)))
