"""Attention block semantics: residual form, symmetries, gradients."""

import math

import numpy as np
import pytest

from mmxc.attention import AttentionParams, attend, init_identity
from mmxc.tensor import DimensionError, Tensor, check_gradient, dot, tsum

import oracles


def _random_params(rng, d):
    return AttentionParams(
        q=Tensor.leaf(rng.standard_normal((d, d))),
        k=Tensor.leaf(rng.standard_normal((d, d))),
        v=Tensor.leaf(rng.standard_normal((d, d))),
        o=Tensor.leaf(rng.standard_normal((d, d))),
    )


class TestAttend:
    def test_single_pair_identity_params(self):
        d = 4
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, d))
        z = rng.standard_normal((1, d))
        out = attend(Tensor(x), Tensor(z), init_identity(d))
        np.testing.assert_allclose(out.data, x + z, atol=1e-14)

    def test_zero_value_or_output_is_passthrough(self):
        d = 3
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, d))
        z = rng.standard_normal((4, d))
        for name in ("v", "o"):
            p = _random_params(rng, d)
            setattr(p, name, Tensor(np.zeros((d, d))))
            out = attend(Tensor(x), Tensor(z), p)
            np.testing.assert_array_equal(out.data, x)

    def test_two_context_rows_identity_params(self):
        d = 4
        x = np.array([[0.3, -0.7, 0.2, 0.9]])
        z = np.vstack([np.eye(d)[0], np.eye(d)[1]])
        out = attend(Tensor(x), Tensor(z), init_identity(d))
        weights = oracles.softmax_row(
            [oracles.dot(x[0], z[0]), oracles.dot(x[0], z[1])], 1.0 / math.sqrt(d)
        )
        expected = x[0] + weights[0] * z[0] + weights[1] * z[1]
        np.testing.assert_allclose(out.data[0], expected, atol=1e-14)

    def test_matches_oracle_random(self):
        rng = np.random.default_rng(2)
        d = 5
        p = _random_params(rng, d)
        x = rng.standard_normal((3, d))
        z = rng.standard_normal((2, d))
        out = attend(Tensor(x), Tensor(z), p)
        expected = oracles.attend(
            x.tolist(), z.tolist(), p.q.data.tolist(), p.k.data.tolist(),
            p.v.data.tolist(), p.o.data.tolist(),
        )
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            attend(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))), init_identity(3))


class TestInitIdentity:
    def test_all_identity(self):
        p = init_identity(2)
        for t in (p.q, p.k, p.v, p.o):
            np.testing.assert_array_equal(t.data, np.eye(2))

    def test_self_attention_single_row_doubles(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 6))
        out = attend(Tensor(x), Tensor(x), init_identity(6))
        np.testing.assert_allclose(out.data, 2 * x, atol=1e-14)

    def test_spectral_norm_one(self):
        p = init_identity(5)
        for t in (p.q, p.k, p.v, p.o):
            assert np.linalg.norm(t.data, ord=2) == pytest.approx(1.0)


class TestSymmetries:
    def test_row_equivariance_in_x(self):
        rng = np.random.default_rng(4)
        d = 4
        p = _random_params(rng, d)
        x = rng.standard_normal((5, d))
        z = rng.standard_normal((3, d))
        perm = rng.permutation(5)
        base = attend(Tensor(x), Tensor(z), p).data
        permuted = attend(Tensor(x[perm]), Tensor(z), p).data
        np.testing.assert_allclose(permuted, base[perm], atol=1e-12)

    def test_permutation_invariance_in_z(self):
        rng = np.random.default_rng(5)
        d = 4
        p = _random_params(rng, d)
        x = rng.standard_normal((3, d))
        z = rng.standard_normal((6, d))
        perm = rng.permutation(6)
        base = attend(Tensor(x), Tensor(z), p).data
        permuted = attend(Tensor(x), Tensor(z[perm]), p).data
        np.testing.assert_allclose(permuted, base, atol=1e-12)


class TestGradients:
    def test_gradcheck_all_inputs(self):
        from mmxc.tensor import mul

        rng = np.random.default_rng(6)
        d = 4
        p = _random_params(rng, d)
        x = Tensor.leaf(rng.standard_normal((3, d)))
        z = Tensor.leaf(rng.standard_normal((2, d)))
        w = Tensor.leaf(rng.standard_normal((3, d)))
        params = {"x": x, "z": z, **{f"p.{k}": t for k, t in p.tensors().items()}}
        report = check_gradient(lambda: tsum(mul(attend(x, z, p), w)), params)
        assert report.passed, str(report)
