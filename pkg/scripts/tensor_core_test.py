"""
Tests for the dense tensor kernels.

Usage:
    uv run pytest scripts/tensor_core_test.py
"""
import numpy as np
import pytest

from src.lra_ntd.tensor_core import (
    ShapeError,
    as_tensor,
    elementwise_divide,
    fold,
    frobenius_norm,
    hadamard,
    khatri_rao,
    kronecker,
    kronecker_chain,
    mode_product,
    multi_mode_product,
    nearest_kronecker_factorize,
    project_nonneg,
    unfold,
)


def random_tensor(rng, order, low=2, high=5):
    return rng.standard_normal(tuple(rng.integers(low, high, size=order)))


def test_unfold_matches_fiber_enumeration():
    t = np.arange(1, 9, dtype=float).reshape((2, 2, 2), order="F")
    np.testing.assert_array_equal(unfold(t, 0), [[1, 3, 5, 7], [2, 4, 6, 8]])
    np.testing.assert_array_equal(unfold(t, 1), [[1, 2, 5, 6], [3, 4, 7, 8]])
    np.testing.assert_array_equal(unfold(t, 2), [[1, 2, 3, 4], [5, 6, 7, 8]])


def test_unfold_trivial_cases():
    np.testing.assert_array_equal(unfold(np.zeros((3, 4, 5)), 1), np.zeros((4, 15)))
    m = np.arange(6, dtype=float).reshape(2, 3)
    np.testing.assert_array_equal(unfold(m, 0), m)


def test_fold_inverts_unfold_up_to_order_five():
    rng = np.random.default_rng(0)
    for order in range(1, 6):
        t = random_tensor(rng, order)
        for n in range(order):
            np.testing.assert_array_equal(fold(unfold(t, n), n, t.shape), t)


def test_unfold_rejects_invalid_mode():
    with pytest.raises(ShapeError):
        unfold(np.zeros((2, 3)), 2)
    with pytest.raises(ShapeError):
        fold(np.zeros((2, 5)), 0, (2, 3))


def test_mode_product_is_matrix_product_on_the_unfolding():
    rng = np.random.default_rng(1)
    for order in range(1, 6):
        t = random_tensor(rng, order)
        for n in range(order):
            a = rng.standard_normal((3, t.shape[n]))
            np.testing.assert_allclose(unfold(mode_product(t, a, n), n), a @ unfold(t, n), rtol=1e-10, atol=1e-12)


def test_mode_products_on_distinct_modes_commute():
    rng = np.random.default_rng(2)
    t = random_tensor(rng, 4)
    a = rng.standard_normal((2, t.shape[0]))
    b = rng.standard_normal((3, t.shape[2]))
    np.testing.assert_allclose(
        mode_product(mode_product(t, a, 0), b, 2),
        mode_product(mode_product(t, b, 2), a, 0),
        rtol=1e-10, atol=1e-12,
    )


def test_repeated_mode_product_composes():
    rng = np.random.default_rng(3)
    t = random_tensor(rng, 3)
    a = rng.standard_normal((4, t.shape[1]))
    b = rng.standard_normal((2, 4))
    np.testing.assert_allclose(mode_product(mode_product(t, a, 1), b, 1), mode_product(t, b @ a, 1), rtol=1e-10, atol=1e-12)


def test_tucker_unfolding_uses_inverse_order_kronecker():
    rng = np.random.default_rng(4)
    for order in range(2, 6):
        ranks = tuple(rng.integers(1, 4, size=order))
        core = rng.standard_normal(ranks)
        factors = [rng.standard_normal((int(rng.integers(2, 5)), r)) for r in ranks]
        full = multi_mode_product(core, factors)
        for n in range(order):
            others = [factors[p] for p in reversed(range(order)) if p != n]
            expected = factors[n] @ unfold(core, n) @ kronecker_chain(others).T
            np.testing.assert_allclose(unfold(full, n), expected, rtol=1e-10, atol=1e-10)


def test_multi_mode_product_skips_none_and_transposes():
    rng = np.random.default_rng(5)
    t = rng.standard_normal((3, 4, 5))
    a = rng.standard_normal((3, 2))
    c = rng.standard_normal((5, 2))
    result = multi_mode_product(t, [a, None, c], transpose=True)
    np.testing.assert_allclose(result, mode_product(mode_product(t, a.T, 0), c.T, 2), rtol=1e-12)
    skipped = multi_mode_product(t, [a.T, None, c.T], skip=2)
    np.testing.assert_allclose(skipped, mode_product(t, a.T, 0), rtol=1e-12)
    with pytest.raises(ShapeError):
        multi_mode_product(t, [a])


def test_mode_product_rejects_mismatch():
    with pytest.raises(ShapeError):
        mode_product(np.zeros((2, 3)), np.zeros((4, 4)), 1)


def test_kronecker_and_khatri_rao():
    rng = np.random.default_rng(6)
    a = rng.standard_normal((3, 2))
    b = rng.standard_normal((4, 2))
    np.testing.assert_array_equal(kronecker(a, b), np.kron(a, b))
    kr = khatri_rao(a, b)
    for r in range(2):
        np.testing.assert_allclose(kr[:, r], np.kron(a[:, r], b[:, r]))
    with pytest.raises(ShapeError):
        khatri_rao(a, rng.standard_normal((4, 3)))
    np.testing.assert_array_equal(kronecker_chain([]), np.ones((1, 1)))


def test_elementwise_helpers():
    x = np.array([[-1.0, 2.0], [0.0, -3.0]])
    np.testing.assert_array_equal(project_nonneg(x), [[0.0, 2.0], [0.0, 0.0]])
    assert np.all(np.isfinite(elementwise_divide(x, np.zeros_like(x))))
    np.testing.assert_array_equal(hadamard(x, x), x * x)
    assert frobenius_norm(x) == pytest.approx(np.sqrt(14.0))
    with pytest.raises(ShapeError):
        hadamard(x, np.zeros(3))


def test_as_tensor_validation():
    with pytest.raises(ShapeError):
        as_tensor(np.float64(1.0))
    with pytest.raises(ShapeError):
        as_tensor(np.zeros((2, 0)))
    with pytest.raises(ValueError):
        as_tensor([1.0, np.nan])
    assert as_tensor([[1, 2]]).dtype == np.float64


def test_nearest_kronecker_recovers_exact_product():
    rng = np.random.default_rng(7)
    a1 = rng.random((4, 3))
    a2 = rng.random((5, 2))
    k = np.kron(a1, a2)
    b1, b2 = nearest_kronecker_factorize(k, a1.shape, a2.shape)
    np.testing.assert_allclose(np.kron(b1, b2), k, rtol=1e-9, atol=1e-12)
    assert b1.min() >= 0 and b2.min() >= 0


def test_nearest_kronecker_beats_the_generating_pair_under_noise():
    rng = np.random.default_rng(8)
    a1 = rng.random((3, 2))
    a2 = rng.random((4, 3))
    k = np.kron(a1, a2) + 0.01 * rng.standard_normal((12, 6))
    b1, b2 = nearest_kronecker_factorize(k, a1.shape, a2.shape)
    assert frobenius_norm(k - np.kron(b1, b2)) <= frobenius_norm(k - np.kron(a1, a2)) + 1e-12


def test_nearest_kronecker_rejects_wrong_shape():
    with pytest.raises(ShapeError):
        nearest_kronecker_factorize(np.zeros((6, 6)), (2, 2), (2, 2))
