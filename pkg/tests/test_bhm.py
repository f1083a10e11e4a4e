import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sefl import bhm


def lstsq_hankel(block):
    """Least-squares Hankel fit by the normal equations over all g."""
    l = block.shape[0]
    A = np.zeros((l * l, 2 * l - 1))
    for i in range(l):
        for j in range(l):
            A[i * l + j, i + j] = 1.0
    return np.linalg.solve(A.T @ A, A.T @ block.ravel())


def hankel(g, l):
    return np.array([[g[i + j] for j in range(l)] for i in range(l)], dtype=float)


# --- partition -------------------------------------------------------------


def test_partition_exact_tiling():
    m = np.arange(16.0).reshape(4, 4)
    p = bhm.partition(m, 2)
    assert p.blocks.shape == (4, 2, 2) and p.padding == (0, 0)
    assert np.array_equal(p.blocks[1], [[2, 3], [6, 7]])  # row-major over the grid
    assert np.array_equal(bhm.assemble(p.blocks, 4, 4), m)


def test_partition_padding_roundtrip():
    m = np.arange(15.0).reshape(5, 3)
    p = bhm.partition(m, 2)
    assert p.grid == (3, 2) and p.padding == (1, 1)
    assert np.array_equal(bhm.assemble(p.blocks, 5, 3), m)


def test_partition_degenerate():
    p = bhm.partition(np.array([[7.0]]), 4)
    assert p.blocks.shape == (1, 4, 4) and p.blocks[0, 0, 0] == 7.0
    assert p.mask.sum() == 1


def test_partition_rejects_l1():
    with pytest.raises(ValueError):
        bhm.partition(np.eye(2), 1)


# --- projection ------------------------------------------------------------


def test_project_hankel_is_fixed_point():
    g = np.array([1.0, -2.0, 0.5, 4.0, 3.0])
    H = hankel(g, 3)
    np.testing.assert_allclose(bhm.project_block(H), g, rtol=0, atol=1e-15)
    np.testing.assert_allclose(bhm.reconstruct_block(bhm.project_block(H), 3), H, atol=1e-15)


def test_project_2x2_example():
    B = np.array([[1.0, 2.0], [3.0, 4.0]])
    g = bhm.project_block(B)
    assert np.array_equal(g, [1.0, 2.5, 4.0])
    np.testing.assert_allclose(g, lstsq_hankel(B), atol=1e-12)


def test_project_zero_block():
    assert np.array_equal(bhm.project_block(np.zeros((3, 3))), np.zeros(5))


@pytest.mark.parametrize("l", range(2, 9))
def test_projection_matches_normal_equations(l):
    rng = np.random.default_rng(l)
    for _ in range(10):
        B = rng.normal(size=(l, l))
        g = bhm.project_block(B)
        best = lstsq_hankel(B)
        np.testing.assert_allclose(g, best, atol=1e-10)
        # perturbing g never helps
        for _ in range(5):
            other = best + rng.normal(scale=0.1, size=best.shape)
            assert np.linalg.norm(B - hankel(g, l)) <= np.linalg.norm(B - hankel(other, l)) + 1e-12


@settings(max_examples=50, deadline=None)
@given(
    st.integers(2, 6).flatmap(
        lambda l: st.tuples(
            hnp.arrays(float, (l, l), elements=st.floats(-10, 10)),
            hnp.arrays(float, (l, l), elements=st.floats(-10, 10)),
        )
    ),
    st.floats(-3, 3),
    st.floats(-3, 3),
)
def test_projection_linear(blocks, a, b):
    A, B = blocks
    lhs = bhm.project_block(a * A + b * B)
    rhs = a * bhm.project_block(A) + b * bhm.project_block(B)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


# --- reconstruct -----------------------------------------------------------


def test_reconstruct_definition():
    assert np.array_equal(bhm.reconstruct_block([1.0, 2.0, 3.0], 2), [[1, 2], [2, 3]])
    assert np.array_equal(bhm.reconstruct_block(np.zeros(7), 4), np.zeros((4, 4)))


def test_reconstruct_wrong_length():
    with pytest.raises(ValueError):
        bhm.reconstruct_block(np.zeros(4), 2)


def test_project_reconstruct_idempotent_100():
    rng = np.random.default_rng(3)
    for _ in range(100):
        l = int(rng.integers(2, 9))
        g = rng.normal(size=2 * l - 1)
        np.testing.assert_allclose(bhm.project_block(bhm.reconstruct_block(g, l)), g, atol=1e-14)


# --- compress / decompress -------------------------------------------------


@pytest.mark.parametrize("shape,l", [((4, 4), 2), ((5, 3), 2), ((7, 9), 3), ((1, 1), 4), ((6, 10), 4)])
def test_codec_roundtrip_on_image(shape, l):
    rng = np.random.default_rng(0)
    params = bhm.BhmParams(l, 1.0)
    u = bhm.compress(rng.normal(size=shape), params)
    again = bhm.compress(bhm.decompress(u), params)
    np.testing.assert_allclose(again.seq_vectors, u.seq_vectors, atol=1e-12)


@pytest.mark.parametrize("kappa", [0.5, 1.0, 3.0])
def test_compress_idempotent(kappa):
    rng = np.random.default_rng(1)
    params = bhm.BhmParams(3, kappa)
    M = rng.normal(size=(7, 8))
    c1 = bhm.compress(M, params)
    c2 = bhm.compress(bhm.decompress(c1), params)
    np.testing.assert_allclose(c2.seq_vectors, c1.seq_vectors, atol=1e-12)


def test_kappa_scales_sequence_and_inverts():
    M = np.random.default_rng(2).normal(size=(4, 4))
    a = bhm.compress(M, bhm.BhmParams(2, 1.0))
    b = bhm.compress(M, bhm.BhmParams(2, 2.5))
    np.testing.assert_allclose(b.seq_vectors, 2.5 * a.seq_vectors)
    np.testing.assert_allclose(bhm.decompress(b), bhm.decompress(a), atol=1e-14)


def test_stored_ratio_l32():
    params = bhm.BhmParams(32)
    u = bhm.compress(np.zeros((64, 64)), params)
    assert u.stored_count == 4 * 63
    assert params.compression_ratio == pytest.approx(63 / 1024)
    assert 1024 / 63 > 16


@pytest.mark.parametrize("shape,l", [((8, 8), 2), ((12, 6), 3), ((16, 32), 4)])
def test_size_law(shape, l):
    u = bhm.compress(np.ones(shape), bhm.BhmParams(l))
    gr, gc = u.block_grid
    assert u.stored_count == gr * gc * (2 * l - 1)
    assert u.stored_count / (shape[0] * shape[1]) == (2 * l - 1) / l**2


def test_error_sweep_l4_vs_l32():
    M = np.random.default_rng(4).normal(size=(64, 64))
    errs = {l: bhm.approximation_error(M, bhm.BhmParams(l)) for l in (4, 8, 16, 32)}
    assert errs[4] <= errs[32]


def test_decompress_shape_check():
    u = bhm.compress(np.ones((4, 4)), bhm.BhmParams(2))
    with pytest.raises(bhm.ShapeMismatchError):
        bhm.decompress(u, (4, 5))
    with pytest.raises(bhm.ShapeMismatchError):
        bhm.BhmUpdate(4, 4, 2, 1.0, np.zeros((3, 3)))


# --- aggregation -----------------------------------------------------------


def test_add_zero_identity():
    params = bhm.BhmParams(2)
    u = bhm.compress(np.random.default_rng(5).normal(size=(4, 6)), params)
    assert bhm.add_bhm(u, bhm.zeros_like_layout(4, 6, params)) == u


def test_add_matches_dense_sum_20_pairs():
    rng = np.random.default_rng(6)
    for _ in range(20):
        l = int(rng.integers(2, 5))
        shape = tuple(int(x) for x in rng.integers(1, 12, size=2))
        params = bhm.BhmParams(l)
        a = bhm.compress(rng.normal(size=shape), params)
        b = bhm.compress(rng.normal(size=shape), params)
        assert np.array_equal(bhm.decompress(bhm.add_bhm(a, b)), bhm.decompress(a) + bhm.decompress(b))


@pytest.mark.parametrize("kappa", [0.5, 1.0, 2.0, 4.0])
def test_aggregation_homomorphism_exact_power_of_two_kappa(kappa):
    rng = np.random.default_rng(7)
    params = bhm.BhmParams(3, kappa)
    a = bhm.compress(rng.normal(size=(7, 5)), params)
    b = bhm.compress(rng.normal(size=(7, 5)), params)
    assert np.array_equal(bhm.decompress(bhm.add_bhm(a, b)), bhm.decompress(a) + bhm.decompress(b))


def test_add_mismatched_l():
    a = bhm.compress(np.ones((4, 4)), bhm.BhmParams(2))
    b = bhm.compress(np.ones((4, 4)), bhm.BhmParams(4))
    with pytest.raises(bhm.ShapeMismatchError):
        bhm.add_bhm(a, b)


def test_bhm_serialization_roundtrip():
    u = bhm.compress(np.random.default_rng(8).normal(size=(5, 7)), bhm.BhmParams(3, 0.75))
    buf = u.to_bytes()
    assert len(buf) == struct.calcsize("<8sQQIdII") + 8 * u.stored_count
    assert bhm.BhmUpdate.from_bytes(buf) == u
    with pytest.raises(ValueError):
        bhm.BhmUpdate.from_bytes(buf[:-8])


def test_masked_projection_is_least_squares_on_live_cells():
    # padded block: fit only the live entries
    rng = np.random.default_rng(9)
    M = rng.normal(size=(3, 3))
    params = bhm.BhmParams(4)
    g = bhm.compress(M, params).seq_vectors[0]
    A = np.zeros((9, 7))
    for i in range(3):
        for j in range(3):
            A[i * 3 + j, i + j] = 1.0
    best = np.linalg.lstsq(A, M.ravel(), rcond=None)[0]
    np.testing.assert_allclose(g[:5], best[:5], atol=1e-12)
    assert np.all(g[5:] == 0)


# --- CSR pitfall -----------------------------------------------------------

FIG_A = np.array([[1.0, 0, 0, 0], [0, 0, 2, 0], [0, 0, 0, 0], [0, 3, 0, 0]])
FIG_B = np.array([[0, 4.0, 0, 0], [0, 0, 0, 0], [5, 0, 0, 0], [0, 0, 0, 6]])


def test_csr_roundtrip_and_wellformed():
    c = bhm.CsrUpdate.from_dense(FIG_A)
    assert c.nnz == 3 and np.array_equal(c.to_dense(), FIG_A)
    with pytest.raises(ValueError):
        bhm.CsrUpdate(np.ones(2), np.array([0, 9]), np.array([0, 1, 2]), (2, 4))


def test_csr_pitfall_different_patterns():
    rep = bhm.demonstrate_csr_pitfall(bhm.CsrUpdate.from_dense(FIG_A), bhm.CsrUpdate.from_dense(FIG_B))
    assert not rep.patterns_aligned
    assert not rep.blind_matches_truth
    assert not np.array_equal(rep.blind_sum, rep.true_sum)
    assert "NOT" in rep.summary()


def test_csr_pitfall_aligned_patterns_coincide():
    b = FIG_A * 2.0
    rep = bhm.demonstrate_csr_pitfall(bhm.CsrUpdate.from_dense(FIG_A), bhm.CsrUpdate.from_dense(b))
    assert rep.patterns_aligned and rep.blind_matches_truth and rep.coincidence
    assert "coincidence" in rep.summary()


def test_csr_pitfall_bhm_side_dense_oracle():
    rep = bhm.demonstrate_csr_pitfall(bhm.CsrUpdate.from_dense(FIG_A), bhm.CsrUpdate.from_dense(FIG_B))
    # independent oracle: project the dense sum block by block
    params = bhm.BhmParams(2)
    expected = bhm.decompress(bhm.compress(FIG_A + FIG_B, params))
    np.testing.assert_allclose(rep.bhm_sum, expected, atol=1e-12)
    assert rep.bhm_matches_truth


def test_csr_pitfall_unequal_nnz():
    rep = bhm.demonstrate_csr_pitfall(bhm.CsrUpdate.from_dense(FIG_A), bhm.CsrUpdate.from_dense(np.eye(4)))
    assert rep.blind_sum is None and not rep.blind_matches_truth
