import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmblock.tensor import (
    DTEN_MAGIC,
    khatri_rao_block,
    kronecker,
    matrixize,
    mode_product,
    multi_mode_product,
    orthonormality_residual,
    pinv,
    read_dten,
    subspace_angles,
    tensorize,
    thin_svd,
    unvec,
    vec,
    write_dten,
)
from oracles import kron_loop, matrixize_loop, mode_product_loop

shapes = st.lists(st.integers(1, 4), min_size=1, max_size=4).map(tuple)
tensors = shapes.flatmap(lambda s: arrays(np.float64, s, elements=st.floats(-10, 10)))


def small_2x2x2():
    A = np.zeros((2, 2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(2):
                A[i, j, k] = 100 * (i + 1) + 10 * (j + 1) + (k + 1)
    return A


class TestMatrixize:
    def test_worked_example(self):
        A = small_2x2x2()
        expected = np.array([[111, 121, 112, 122], [211, 221, 212, 222]], dtype=float)
        assert np.array_equal(matrixize_loop(A, 0), expected)
        assert np.array_equal(matrixize(A, 0), expected)

    def test_all_modes_match_loop_oracle(self, rng):
        A = rng.standard_normal((3, 4, 2, 2))
        for m in range(A.ndim):
            assert np.array_equal(matrixize(A, m), matrixize_loop(A, m))

    def test_matrix_first_mode_unchanged(self, rng):
        X = rng.standard_normal((3, 5))
        assert np.array_equal(matrixize(X, 0), X)

    def test_inverse_of_worked_example(self):
        A = small_2x2x2()
        assert np.array_equal(tensorize(matrixize(A, 0), 0, A.shape), A)

    def test_row_vector_copy(self):
        M = np.arange(6.0).reshape(1, 6)
        assert np.array_equal(tensorize(M, 0, (1, 6)), M)

    def test_random_roundtrip_mode2(self, rng):
        A = rng.standard_normal((3, 4, 2))
        assert np.array_equal(tensorize(matrixize_loop(A, 2), 2, A.shape), A)

    def test_mode_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            matrixize(np.zeros((2, 3)), 2)
        with pytest.raises(ValueError, match="out of range"):
            matrixize(np.zeros((2, 3)), -1)

    def test_tensorize_dimension_mismatch(self):
        with pytest.raises(ValueError, match="does not match"):
            tensorize(np.zeros((2, 5)), 0, (2, 3))

    @settings(max_examples=60, deadline=None)
    @given(tensors, st.data())
    def test_roundtrip_property(self, A, data):
        m = data.draw(st.integers(0, A.ndim - 1))
        assert np.array_equal(tensorize(matrixize(A, m), m, A.shape), A)


class TestModeProduct:
    def test_identity(self, rng):
        A = rng.standard_normal((3, 4, 2))
        assert np.array_equal(mode_product(A, 1, np.eye(4)), A)

    def test_scaling(self, rng):
        A = rng.standard_normal((3, 4, 2))
        assert np.allclose(mode_product(A, 2, 2 * np.eye(2)), 2 * A, atol=0, rtol=1e-15)

    def test_loop_oracle(self, rng):
        A = rng.standard_normal((3, 4, 2))
        B = rng.standard_normal((5, 4))
        C = mode_product(A, 1, B)
        assert C.shape == (3, 5, 2)
        assert np.max(np.abs(C - mode_product_loop(A, 1, B))) < 1e-12

    def test_inner_mismatch(self, rng):
        with pytest.raises(ValueError, match="cannot multiply"):
            mode_product(np.zeros((3, 4)), 1, np.zeros((2, 3)))

    def test_duality_and_commutation(self, rng):
        A = rng.standard_normal((3, 4, 2))
        B, C = rng.standard_normal((5, 3)), rng.standard_normal((2, 2))
        assert np.max(np.abs(matrixize(mode_product(A, 0, B), 0) - B @ matrixize(A, 0))) < 1e-12
        left = mode_product(mode_product(A, 0, B), 2, C)
        right = mode_product(mode_product(A, 2, C), 0, B)
        assert np.max(np.abs(left - right)) < 1e-12

    def test_multi_mode_skips(self, rng):
        A = rng.standard_normal((3, 4))
        B = rng.standard_normal((2, 4))
        assert np.array_equal(multi_mode_product(A, [None, B]), mode_product(A, 1, B))
        assert np.array_equal(multi_mode_product(A, [np.eye(3), B], skip=1), A)


class TestKronecker:
    def test_identity(self):
        assert np.array_equal(kronecker(np.eye(2), np.eye(3)), np.eye(6))

    def test_worked_example(self):
        assert np.array_equal(kronecker([[1, 2]], [[3], [4]]), np.array([[3.0, 6.0], [4.0, 8.0]]))

    def test_mixed_product(self, rng):
        U, V = rng.standard_normal((3, 2)), rng.standard_normal((4, 3))
        x, y = rng.standard_normal(2), rng.standard_normal(3)
        lhs = kronecker(U, V) @ np.kron(x, y)
        assert np.allclose(lhs, np.kron(U @ x, V @ y), rtol=1e-12, atol=1e-12)

    def test_transpose_and_loop(self, rng):
        U, V = rng.standard_normal((2, 3)), rng.standard_normal((3, 2))
        assert np.array_equal(kronecker(U, V).T, kronecker(U.T, V.T))
        assert np.array_equal(kronecker(U, V), kron_loop(U, V))


class TestKhatriRao:
    def test_single_columns_collapse(self, rng):
        U, V = rng.standard_normal((3, 2)), rng.standard_normal((4, 2))
        out = khatri_rao_block([U[:, [0]], U[:, [1]]], [V[:, [0]], V[:, [1]]])
        expected = np.column_stack([np.kron(U[:, j], V[:, j]) for j in range(2)])
        assert np.array_equal(out, expected)

    def test_scalar_blocks(self):
        out = khatri_rao_block([np.array([[2.0]]), np.array([[3.0]])], [np.array([[5.0]]), np.array([[7.0]])])
        assert np.array_equal(out, np.array([[10.0, 21.0]]))

    def test_width_bookkeeping(self, rng):
        # U blocks 2x1 and V blocks of widths 2 and 3 over 3 rows
        Us = [rng.standard_normal((2, 1)), rng.standard_normal((2, 1))]
        Vs = [rng.standard_normal((3, 2)), rng.standard_normal((3, 3))]
        assert khatri_rao_block(Us, Vs).shape == (6, 5)

    def test_block_count_mismatch(self):
        with pytest.raises(ValueError, match="block count"):
            khatri_rao_block([np.eye(2)], [np.eye(2), np.eye(2)])


class TestVec:
    def test_vector_is_itself(self):
        assert np.array_equal(vec(np.array([1.0, 2.0])), np.array([1.0, 2.0]))

    def test_roundtrip_and_layout(self, rng):
        A = rng.standard_normal((3, 2, 4))
        assert np.array_equal(unvec(vec(A), A.shape), A)
        assert np.array_equal(vec(A), matrixize(A, 0).T.ravel())


class TestSVD:
    def test_diagonal(self):
        U, s, V = thin_svd(np.diag([3.0, 1.0]))
        assert np.allclose(s, [3, 1])
        assert np.allclose(np.abs(U), np.eye(2)) and np.allclose(np.abs(V), np.eye(2))

    def test_rank_one(self, rng):
        x, y = rng.standard_normal(4), rng.standard_normal(3)
        _, s, _ = thin_svd(np.outer(x, y))
        assert abs(s[0] - np.linalg.norm(x) * np.linalg.norm(y)) < 1e-12 * s[0]
        assert np.all(s[1:] < 1e-12 * s[0])

    def test_zero(self):
        _, s, _ = thin_svd(np.zeros((3, 2)))
        assert np.array_equal(s, np.zeros(2))

    def test_reconstruction_and_sign_convention(self, rng):
        M = rng.standard_normal((6, 4))
        U, s, V = thin_svd(M)
        assert np.max(np.abs(U * s @ V.T - M)) < 1e-12 * s[0]
        assert np.all(np.diff(s) <= 0)
        assert orthonormality_residual(U) < 1e-12 and orthonormality_residual(V) < 1e-12
        idx = np.argmax(np.abs(U), axis=0)
        assert np.all(U[idx, np.arange(4)] >= 0)
        U2, _, _ = thin_svd(-M)
        assert np.array_equal(U2, U)

    def test_non_finite(self):
        with pytest.raises(ValueError, match="non-finite"):
            thin_svd(np.array([[np.nan, 1.0]]))


class TestPinv:
    def test_identity_and_singular_diag(self):
        assert np.allclose(pinv(np.eye(3)), np.eye(3))
        assert np.array_equal(pinv(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]))

    def test_full_rank(self, rng):
        M = rng.standard_normal((4, 3))
        assert np.max(np.abs(pinv(M) @ M - np.eye(3))) < 1e-10
        assert np.linalg.norm(M @ pinv(M) @ M - M) < 1e-10 * np.linalg.norm(M)

    def test_matches_numpy(self, rng):
        M = rng.standard_normal((5, 2)) @ rng.standard_normal((2, 4))
        assert np.allclose(pinv(M), np.linalg.pinv(M), atol=1e-10)

    def test_errors(self):
        with pytest.raises(ValueError, match="non-finite"):
            pinv(np.array([[np.inf]]))
        with pytest.raises(ValueError, match="rcond"):
            pinv(np.eye(2), rcond=-1.0)


def test_subspace_angles(rng):
    A = rng.standard_normal((6, 2))
    assert np.max(subspace_angles(A, A @ rng.standard_normal((2, 2)))) < 1e-7
    e = np.eye(4)
    assert np.allclose(subspace_angles(e[:, :1], e[:, 1:2]), [np.pi / 2])


class TestDTEN:
    def test_roundtrip(self, tmp_path, rng):
        A = rng.standard_normal((3, 4, 2))
        write_dten(tmp_path / "a.dten", A)
        assert np.array_equal(read_dten(tmp_path / "a.dten"), A)

    def test_layout(self, tmp_path):
        A = np.arange(6.0).reshape(2, 3)
        write_dten(tmp_path / "a.dten", A)
        raw = (tmp_path / "a.dten").read_bytes()
        assert raw[:5] == DTEN_MAGIC
        assert struct.unpack_from("<3I", raw, 5) == (2, 2, 3)
        data = np.frombuffer(raw, dtype="<f8", offset=17)
        assert np.array_equal(data, [0, 3, 1, 4, 2, 5])

    def test_bad_files(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE!")
        with pytest.raises(ValueError, match="not a DTEN"):
            read_dten(tmp_path / "x")
        (tmp_path / "y").write_bytes(DTEN_MAGIC + struct.pack("<2I", 1, 3) + b"\0" * 8)
        with pytest.raises(ValueError, match="expected 3"):
            read_dten(tmp_path / "y")
