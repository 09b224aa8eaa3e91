import numpy as np
import pytest

from gsntk.linop import (
    DomainShape,
    ShapeError,
    adjoint,
    compose,
    dense_wrap,
    flat_shape,
    identity,
    materialize,
    op_sum,
    partial_average,
    scale,
    shape_of,
    tensor_product,
)

RNG = np.random.default_rng(1234)


def random_pairs(op, n=10, rng=RNG):
    for _ in range(n):
        u = rng.standard_normal(op.domain.shape)
        v = rng.standard_normal(op.codomain.shape)
        yield u, v


def assert_adjoint_consistent(op, rtol=1e-10):
    for u, v in random_pairs(op):
        lhs = float(np.vdot(op.apply(u), v))
        rhs = float(np.vdot(u, op.apply_adjoint(v)))
        scale_ref = max(abs(lhs), abs(rhs), 1e-300)
        assert abs(lhs - rhs) <= rtol * scale_ref


class TestDomainShape:
    def test_dim_is_product_of_extents(self):
        s = shape_of(("batch", 3), ("time", 5), ("feature", 4))
        assert s.dim == 60
        assert s.shape == (3, 5, 4)

    def test_rejects_bad_extent(self):
        with pytest.raises(ShapeError):
            shape_of(("batch", 0))

    def test_rejects_bad_label(self):
        with pytest.raises(ShapeError):
            shape_of(("banana", 3))


class TestIdentity:
    def test_identity_maps_vector_to_itself(self):
        op = identity(flat_shape(3))
        np.testing.assert_array_equal(op.apply(np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0])

    def test_identity_trace(self):
        op = identity(flat_shape(100))
        assert np.trace(materialize(op)) == 100.0

    def test_identity_is_neutral_for_compose(self):
        a = RNG.standard_normal((4, 4))
        opa = dense_wrap(a)
        left = compose(identity(flat_shape(4)), opa)
        np.testing.assert_array_equal(materialize(left), a)


class TestDenseWrap:
    def test_permutation(self):
        op = dense_wrap(np.array([[0.0, 1.0], [1.0, 0.0]]))
        np.testing.assert_array_equal(op.apply(np.array([1.0, 0.0])), [0.0, 1.0])

    def test_gram_is_psd_on_random_probes(self):
        v = RNG.standard_normal((6, 3))
        op = dense_wrap(v @ v.T, psd_hint=True)
        for _ in range(100):
            u = RNG.standard_normal(6)
            assert float(u @ op.apply(u)) >= -1e-10 * float(u @ u)

    def test_materialize_round_trip(self):
        m = RNG.standard_normal((5, 3))
        np.testing.assert_array_equal(materialize(dense_wrap(m)), m)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            dense_wrap(np.array([[np.nan, 0.0], [0.0, 1.0]]))

    def test_adjoint_pairing(self):
        assert_adjoint_consistent(dense_wrap(RNG.standard_normal((7, 4))))


class TestCompose:
    def test_materializes_to_matrix_product(self):
        a, b = RNG.standard_normal((5, 5)), RNG.standard_normal((5, 5))
        got = materialize(compose(dense_wrap(a), dense_wrap(b)))
        np.testing.assert_allclose(got, a @ b, rtol=1e-13, atol=1e-13)

    def test_shape_mismatch_names_both_shapes(self):
        a = dense_wrap(RNG.standard_normal((3, 3)))
        b = dense_wrap(RNG.standard_normal((4, 4)))
        with pytest.raises(ShapeError, match="domain"):
            compose(a, b)

    def test_adjoint_pairing_of_composite(self):
        op = compose(dense_wrap(RNG.standard_normal((4, 6))),
                     dense_wrap(RNG.standard_normal((6, 5))))
        assert_adjoint_consistent(op)


class TestAdjoint:
    def test_materializes_to_transpose(self):
        a = RNG.standard_normal((4, 6))
        np.testing.assert_array_equal(materialize(adjoint(dense_wrap(a))), a.T)

    def test_involution(self):
        a = RNG.standard_normal((4, 6))
        np.testing.assert_array_equal(materialize(adjoint(adjoint(dense_wrap(a)))), a)

    def test_adjoint_of_identity(self):
        op = adjoint(identity(flat_shape(5)))
        np.testing.assert_array_equal(materialize(op), np.eye(5))


class TestTensorProduct:
    def test_scalar_times_identity(self):
        op = tensor_product(dense_wrap(np.array([[2.0]])), identity(flat_shape(3)))
        np.testing.assert_allclose(materialize(op), 2.0 * np.eye(3))

    def test_matches_explicit_kronecker_loop(self):
        a = RNG.standard_normal((3, 3))
        b = RNG.standard_normal((2, 2))
        kron = np.zeros((6, 6))
        for i in range(3):
            for j in range(3):
                for p in range(2):
                    for q in range(2):
                        kron[i * 2 + p, j * 2 + q] = a[i, j] * b[p, q]
        got = materialize(tensor_product(dense_wrap(a), dense_wrap(b)))
        np.testing.assert_allclose(got, kron, rtol=1e-13, atol=1e-13)

    def test_rank_one_factorization_law(self):
        a = RNG.standard_normal((3, 3))
        b = RNG.standard_normal((4, 4))
        u = RNG.standard_normal(3)
        v = RNG.standard_normal(4)
        op = tensor_product(dense_wrap(a), dense_wrap(b))
        got = np.asarray(op.apply(np.outer(u, v)))
        want = np.outer(a @ u, b @ v)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_like_layout_mismatch_raises(self):
        a = dense_wrap(RNG.standard_normal((3, 3)))
        b = dense_wrap(RNG.standard_normal((2, 2)))
        ref = identity(flat_shape(7))
        with pytest.raises(ShapeError):
            tensor_product(a, b, like=ref)

    def test_like_relayout(self):
        a = dense_wrap(RNG.standard_normal((3, 3)))
        b = dense_wrap(RNG.standard_normal((2, 2)))
        ref = identity(shape_of(("batch", 3), ("feature", 2)))
        op = tensor_product(a, b, like=ref)
        assert op.domain == ref.domain
        np.testing.assert_allclose(materialize(op),
                                   materialize(tensor_product(a, b)))

    def test_adjoint_pairing(self):
        op = tensor_product(dense_wrap(RNG.standard_normal((3, 4))),
                            dense_wrap(RNG.standard_normal((2, 5))))
        assert_adjoint_consistent(op)


def random_psd_op(shape: DomainShape, rng=RNG):
    d = shape.dim
    v = rng.standard_normal((d, d))
    return dense_wrap(v @ v.T / d, domain=shape, codomain=shape, psd_hint=True)


class TestPartialAverage:
    def test_kronecker_partial_trace_identity(self):
        a = RNG.standard_normal((3, 3))
        b = RNG.standard_normal((4, 4))
        op = tensor_product(dense_wrap(a, domain=shape_of(("batch", 3)),
                                       codomain=shape_of(("batch", 3))),
                            dense_wrap(b, domain=shape_of(("feature", 4)),
                                       codomain=shape_of(("feature", 4))))
        red = partial_average(op, 1)
        np.testing.assert_allclose(materialize(red), a * np.trace(b) / 4.0,
                                   rtol=1e-12, atol=1e-12)

    def test_identity_reduces_to_identity(self):
        shp = shape_of(("batch", 2), ("time", 3), ("feature", 4))
        red = partial_average(identity(shp), 2)
        np.testing.assert_allclose(materialize(red), np.eye(6), atol=1e-14)

    def test_matches_dense_partial_trace_on_random_psd(self):
        shp = shape_of(("batch", 2), ("time", 3), ("feature", 2))
        op = random_psd_op(shp)
        dense = materialize(op).reshape(2, 3, 2, 2, 3, 2)
        want = np.einsum("atjbsj->atbs", dense).reshape(6, 6) / 2.0
        got = materialize(partial_average(op, 2))
        np.testing.assert_allclose(got, want, rtol=1e-11, atol=1e-12)

    def test_reduction_of_psd_is_psd(self):
        shp = shape_of(("batch", 2), ("time", 2), ("feature", 3))
        red = partial_average(random_psd_op(shp), (0, 2))
        eigs = np.linalg.eigvalsh(materialize(red))
        assert eigs.min() >= -1e-10

    def test_average_over_all_axes_gives_normalized_trace(self):
        shp = shape_of(("batch", 2), ("feature", 3))
        op = random_psd_op(shp)
        red = materialize(partial_average(op, (0, 1)))
        assert red.shape == (1, 1)
        np.testing.assert_allclose(red[0, 0], np.trace(materialize(op)) / 6.0,
                                   rtol=1e-12)

    def test_non_square_rejected(self):
        op = dense_wrap(RNG.standard_normal((4, 6)))
        with pytest.raises(ShapeError):
            partial_average(op, 0)


class TestMaterialize:
    def test_identity(self):
        np.testing.assert_array_equal(materialize(identity(flat_shape(4))), np.eye(4))

    def test_cap_enforced(self):
        op = identity(flat_shape(64))
        with pytest.raises(ShapeError, match="8"):
            materialize(op, cap=8)

    def test_sum_materializes_to_matrix_sum(self):
        a, b = RNG.standard_normal((4, 4)), RNG.standard_normal((4, 4))
        got = materialize(op_sum(dense_wrap(a), dense_wrap(b)))
        np.testing.assert_allclose(got, a + b, rtol=1e-13, atol=1e-14)

    def test_scale(self):
        a = RNG.standard_normal((4, 4))
        np.testing.assert_allclose(materialize(scale(dense_wrap(a), -2.5)), -2.5 * a)
