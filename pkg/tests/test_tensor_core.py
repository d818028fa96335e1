import io
import itertools
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hierspec.tensor_core import (
    SymTensor,
    canonical_indices,
    contract,
    dump_tensor,
    flatten,
    hermite_features,
    hermite_flat,
    index_rank,
    iter_hermite_blocks,
    load_tensor,
    multiplicity,
    sym_dim,
)


def random_tensor(rng, d, k):
    return SymTensor(d, k, rng.standard_normal(sym_dim(d, k)))


def dense_hermite(x, k):
    """Hermite tensor from the Wick expansion, written out per order."""
    d = x.size
    eye = np.eye(d)
    if k == 1:
        return x.copy()
    if k == 2:
        return (np.einsum("i,j->ij", x, x) - eye) / math.sqrt(2.0)
    if k == 3:
        xxx = np.einsum("i,j,k->ijk", x, x, x)
        pairs = (np.einsum("i,jk->ijk", x, eye) + np.einsum("j,ik->ijk", x, eye)
                 + np.einsum("k,ij->ijk", x, eye))
        return (xxx - pairs) / math.sqrt(6.0)
    raise NotImplementedError(k)


# -- sym_dim and multiplicities -------------------------------------------------


@pytest.mark.parametrize("d,k,expected", [(3, 2, 6), (100, 2, 5050), (50, 3, 22100)])
def test_sym_dim_examples(d, k, expected):
    assert sym_dim(d, k) == expected


def test_sym_dim_k3_closed_form():
    for d in (5, 30, 50):
        assert sym_dim(d, 3) == d * (d + 1) * (d + 2) // 6


def test_sym_dim_overflow_is_an_error():
    with pytest.raises(OverflowError):
        sym_dim(10**6, 40)


@pytest.mark.parametrize("d,k", [(0, 2), (3, 0)])
def test_sym_dim_rejects_nonpositive(d, k):
    with pytest.raises(ValueError):
        sym_dim(d, k)


@pytest.mark.parametrize("m,expected", [((1, 1), 1), ((1, 2), 2), ((1, 2, 3), 6), ((2, 2, 5), 3)])
def test_multiplicity_examples(m, expected):
    assert multiplicity(m) == expected


@given(d=st.integers(1, 6), k=st.integers(1, 4))
def test_multiplicities_sum_to_d_power_k(d, k):
    idx = canonical_indices(d, k)
    assert sum(multiplicity(tuple(m)) for m in idx) == d**k


@given(d=st.integers(1, 7), k=st.integers(1, 4))
def test_canonical_order_is_lexicographic(d, k):
    idx = canonical_indices(d, k)
    assert idx.shape == (sym_dim(d, k), k)
    rows = [tuple(r) for r in idx]
    assert rows == sorted(rows)
    assert all(np.all(np.diff(r) >= 0) for r in idx)
    for pos in (0, len(rows) // 2, len(rows) - 1):
        assert index_rank(rows[pos], d) == pos


def test_index_rank_rejects_non_canonical():
    with pytest.raises(ValueError):
        index_rank((2, 1), 3)
    with pytest.raises(ValueError):
        index_rank((0, 3), 3)


# -- SymTensor storage ----------------------------------------------------------


def test_entry_count_checked():
    with pytest.raises(ValueError):
        SymTensor(3, 2, np.zeros(5))


def test_dense_round_trip(rng):
    T = random_tensor(rng, 4, 3)
    dense = T.to_dense()
    for p in itertools.permutations(range(3)):
        np.testing.assert_array_equal(dense, dense.transpose(p))
    np.testing.assert_allclose(SymTensor.from_dense(dense).entries, T.entries, atol=1e-14)
    assert T[(2, 0, 1)] == T[(0, 1, 2)]


def test_frobenius_norm_matches_dense(rng):
    T = random_tensor(rng, 5, 3)
    assert T.frobenius_sq() == pytest.approx(np.sum(T.to_dense() ** 2), rel=1e-13)


# -- flattening ----------------------------------------------------------------


def test_flatten_scaled_identity():
    T = SymTensor(2, 2, [1 / math.sqrt(2), 0.0, 1 / math.sqrt(2)])
    v = flatten(T).values
    np.testing.assert_allclose(v, [1 / math.sqrt(2), 0.0, 1 / math.sqrt(2)])
    assert np.dot(v, v) == pytest.approx(1.0)


def test_flatten_matches_brute_force_d3(rng):
    S, T = random_tensor(rng, 3, 2), random_tensor(rng, 3, 2)
    brute = sum(S.to_dense()[i, j] * T.to_dense()[i, j] for i in range(3) for j in range(3))
    assert abs(flatten(S).dot(flatten(T)) - brute) <= 1e-12


def test_flatten_zero():
    assert not np.any(flatten(SymTensor.zeros(4, 3)).values)


def test_flat_vector_round_trip(rng):
    T = random_tensor(rng, 4, 2)
    np.testing.assert_allclose(flatten(T).to_tensor().entries, T.entries, rtol=1e-15)


@settings(max_examples=60, deadline=None)
@given(d=st.integers(1, 6), k=st.integers(1, 4), seed=st.integers(0, 2**32 - 1))
def test_isometry_property(d, k, seed):
    r = np.random.default_rng(seed)
    S, T = random_tensor(r, d, k), random_tensor(r, d, k)
    brute = float(np.sum(S.to_dense() * T.to_dense()))
    assert abs(flatten(S).dot(flatten(T)) - brute) <= 1e-10 * S.norm() * T.norm()


# -- Hermite features ----------------------------------------------------------


def test_hermite_flat_k2_example():
    v = hermite_flat(np.array([1.0, 0.0]), 2).values
    np.testing.assert_allclose(v, [0.0, 0.0, -1 / math.sqrt(2)], atol=1e-15)


def test_hermite_flat_k1_is_identity(rng):
    x = rng.standard_normal(7)
    np.testing.assert_array_equal(hermite_flat(x, 1).values, x)


def test_hermite_flat_k3_entries_from_he3():
    v = hermite_flat(np.ones(3), 3)
    T = v.to_tensor()  # entry = value / sqrt(mult)
    he3 = 1.0**3 - 3.0
    assert v.values[index_rank((0, 1, 2), 3)] == pytest.approx(1.0)
    assert v.values[index_rank((0, 0, 0), 3)] == pytest.approx(he3 / math.sqrt(6))
    assert T[(0, 1, 2)] == pytest.approx(1.0 / math.sqrt(6))


def test_hermite_flat_rejects_k0_and_nonfinite():
    with pytest.raises(ValueError):
        hermite_flat(np.zeros(3), 0)
    with pytest.raises(ValueError):
        hermite_flat(np.array([0.0, np.nan]), 2)


@settings(max_examples=40, deadline=None)
@given(d=st.integers(1, 5), k=st.integers(1, 3), seed=st.integers(0, 2**32 - 1))
def test_projection_consistency(d, k, seed):
    r = np.random.default_rng(seed)
    T = random_tensor(r, d, k)
    x = r.standard_normal(d)
    direct = float(np.sum(T.to_dense() * dense_hermite(x, k)))
    flat = flatten(T).dot(hermite_flat(x, k))
    assert abs(direct - flat) <= 1e-10 * max(1.0, abs(direct))


def test_blocks_match_whole(rng):
    X = rng.standard_normal((37, 4))
    whole = hermite_features(X, 3)
    np.testing.assert_array_equal(np.vstack(list(iter_hermite_blocks(X, 3, 8))), whole)


def test_orthonormality_d10_k2():
    X = np.random.default_rng(0).standard_normal((100_000, 10))
    Phi = hermite_features(X, 2)
    cov = Phi.T @ Phi / X.shape[0]
    assert np.max(np.abs(cov - np.eye(cov.shape[0]))) <= 0.05


@pytest.mark.parametrize("d,k", [(3, 2), (3, 3), (2, 4)])
def test_orthonormality_exact_by_quadrature(d, k):
    # a 5-point Gauss-Hermite rule per axis integrates every product of two
    # degree-<=k features exactly
    z, w = np.polynomial.hermite_e.hermegauss(5)
    w = w / w.sum()
    grid = np.array(list(itertools.product(z, repeat=d)))
    weights = np.prod(np.array(list(itertools.product(w, repeat=d))), axis=1)
    Phi = hermite_features(grid, k)
    gram = Phi.T @ (weights[:, None] * Phi)
    np.testing.assert_allclose(gram, np.eye(sym_dim(d, k)), atol=1e-12)


def test_norm_concentration_d20():
    X = np.random.default_rng(3).standard_normal((10_000, 20))
    for k in (2, 3):
        sq = np.einsum("ij,ij->i", *(2 * [hermite_features(X, k)]))
        assert sq.mean() / sym_dim(20, k) == pytest.approx(1.0, abs=0.02)


# -- contractions --------------------------------------------------------------


def test_contract_vectors_is_dot(rng):
    a, b = random_tensor(rng, 6, 1), random_tensor(rng, 6, 1)
    assert contract(a, b, 1) == pytest.approx(float(a.entries @ b.entries), rel=1e-14)


def test_contract_matrices_matches_dense_product(rng):
    S, T = random_tensor(rng, 4, 2), random_tensor(rng, 4, 2)
    A, B = S.to_dense(), T.to_dense()
    expected = 0.5 * (A @ B + (A @ B).T)
    np.testing.assert_allclose(contract(S, T, 1).to_dense(), expected, atol=1e-12)


def test_contract_full_order_is_frobenius(rng):
    S, T = random_tensor(rng, 3, 3), random_tensor(rng, 3, 3)
    assert contract(S, T, 3) == pytest.approx(float(np.sum(S.to_dense() * T.to_dense())))


def test_contract_order_3_with_2(rng):
    S, T = random_tensor(rng, 3, 3), random_tensor(rng, 3, 2)
    out = contract(S, T, 1)
    assert out.k == 3
    raw = np.einsum("ija,ka->ijk", S.to_dense(), T.to_dense())
    perms = list(itertools.permutations(range(3)))
    sym = sum(raw.transpose(p) for p in perms) / len(perms)
    np.testing.assert_allclose(out.to_dense(), sym, atol=1e-12)


def test_contract_rejects_bad_order(rng):
    S, T = random_tensor(rng, 3, 2), random_tensor(rng, 3, 2)
    with pytest.raises(ValueError):
        contract(S, T, 3)
    with pytest.raises(ValueError):
        contract(S, T, 0)
    with pytest.raises(ValueError):
        contract(S, random_tensor(rng, 4, 2), 1)


def test_single_contraction_decays_like_one_over_d():
    # Assumption-1 draws, 200 trials per d; d * mean should stay O(1)
    scaled = []
    for d in (8, 16, 32):
        r = np.random.default_rng(d)
        vals = []
        for _ in range(200):
            A = SymTensor(d, 2, r.standard_normal(sym_dim(d, 2)) / d)
            B = SymTensor(d, 2, r.standard_normal(sym_dim(d, 2)) / d)
            vals.append(contract(A, B, 1).frobenius_sq())
        scaled.append(d * np.mean(vals))
    c = scaled[0]
    for s in scaled:
        assert 0.3 * c <= s <= 3 * c


# -- binary dump ---------------------------------------------------------------


def test_tensor_dump_layout_and_round_trip(rng):
    T = random_tensor(rng, 3, 2)
    buf = io.BytesIO()
    dump_tensor(T, buf)
    raw = buf.getvalue()
    assert raw[:4] == b"HSPT"
    version, d, k = struct.unpack("<HII", raw[4:14])
    assert (version, d, k) == (1, 3, 2)
    np.testing.assert_array_equal(np.frombuffer(raw[14:], dtype="<f8"), T.entries)
    buf.seek(0)
    back = load_tensor(buf)
    assert (back.d, back.k) == (3, 2)
    np.testing.assert_array_equal(back.entries, T.entries)


def test_tensor_dump_rejects_garbage():
    with pytest.raises(ValueError):
        load_tensor(io.BytesIO(b"NOPE" + bytes(20)))
