import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mbdl import tensor as tc


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def gauss_jordan_inverse(a):
    n = len(a)
    aug = np.hstack([a.astype(float), np.eye(n)])
    for col in range(n):
        piv = col + np.argmax(np.abs(aug[col:, col]))
        aug[[col, piv]] = aug[[piv, col]]
        aug[col] /= aug[col, col]
        for row in range(n):
            if row != col:
                aug[row] -= aug[row, col] * aug[col]
    return aug[:, n:]


# -- matmul ------------------------------------------------------------------

def test_matmul_identity():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(tc.matmul(np.eye(2), b), b)


def test_matmul_row_by_column():
    np.testing.assert_array_equal(tc.matmul([[1.0, 2.0]], [[3.0], [4.0]]), [[11.0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
    out = tc.matmul(a, b)
    assert out.shape == (5, 3)
    np.testing.assert_allclose(out, naive_matmul(a, b), atol=1e-12, rtol=0)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(tc.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        tc.matmul(np.ones((2, 3)), np.ones((2, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_matmul_associative(m, k, l, n, seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.standard_normal((m, k)), rng.standard_normal((k, l)), rng.standard_normal((l, n))
    left = tc.matmul(tc.matmul(a, b), c)
    right = tc.matmul(a, tc.matmul(b, c))
    assert np.linalg.norm(left - right) <= 1e-9 * max(np.linalg.norm(left), 1e-300)


# -- tensor construction -----------------------------------------------------

def test_tensor_rejects_non_finite():
    with pytest.raises(ValueError):
        tc.tensor([1.0, np.nan])
    with pytest.raises(ValueError):
        tc.tensor([np.inf])


def test_tensor_is_float64_and_readonly():
    t = tc.tensor([[1, 2], [3, 4]])
    assert t.dtype == np.float64
    with pytest.raises(ValueError):
        t[0, 0] = 5.0


# -- solve_spd ----------------------------------------------------------------

def test_solve_spd_identity():
    b = np.array([[1.0, -2.0], [3.0, 0.5], [7.0, 1.0]])
    np.testing.assert_array_equal(tc.solve_spd(np.eye(3), b), b)


def test_solve_spd_diagonal():
    np.testing.assert_allclose(tc.solve_spd([[4.0, 0.0], [0.0, 9.0]], [[8.0], [27.0]]), [[2.0], [3.0]], rtol=0,
                               atol=1e-15)


def test_solve_spd_random_against_gauss_jordan():
    rng = np.random.default_rng(1)
    G = rng.standard_normal((8, 8))
    a = G.T @ G + np.eye(8)
    b = rng.standard_normal((8, 3))
    x = tc.solve_spd(a, b)
    assert np.linalg.norm(a @ x - b) / np.linalg.norm(b) <= 1e-9
    ref = gauss_jordan_inverse(a) @ b
    assert np.linalg.norm(x - ref) / np.linalg.norm(ref) <= 1e-9


def test_solve_spd_rejects_indefinite_and_asymmetric():
    with pytest.raises(tc.NotSPDError):
        tc.solve_spd([[1.0, 0.0], [0.0, -1.0]], [1.0, 1.0])
    with pytest.raises(tc.NotSPDError):
        tc.solve_spd([[1.0, 2.0], [2.0, 4.0]], [1.0, 1.0])
    with pytest.raises(ValueError):
        tc.solve_spd([[2.0, 1.0], [0.0, 2.0]], [1.0, 1.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2**31))
def test_solve_spd_recovers_rhs(n, seed):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((n, n))
    a = G.T @ G + 0.1 * np.eye(n)
    b = rng.standard_normal((n, 2))
    x = tc.solve_spd(a, b)
    assert np.linalg.norm(a @ x - b) <= 1e-9 * np.linalg.norm(b)


def test_spd_factor_is_reusable():
    rng = np.random.default_rng(2)
    G = rng.standard_normal((5, 5))
    a = G @ G.T + np.eye(5)
    f = tc.SPDFactor(a)
    for _ in range(3):
        b = rng.standard_normal(5)
        np.testing.assert_allclose(a @ f.solve(b), b, atol=1e-10)


# -- soft_threshold ------------------------------------------------------------

@pytest.mark.parametrize("x, beta, expected", [(0.0, 0.5, 0.0), (1.2, 0.5, 0.7), (-1.2, 0.5, -0.7), (0.3, 0.5, 0.0)])
def test_soft_threshold_values(x, beta, expected):
    assert tc.soft_threshold(np.array([x]), beta)[0] == pytest.approx(expected, abs=1e-15)


def test_soft_threshold_exact_zero_at_kink():
    out = tc.soft_threshold(np.array([0.5, -0.5]), 0.5)
    assert np.all(out == 0.0)


def test_soft_threshold_rejects_negative_beta():
    with pytest.raises(ValueError):
        tc.soft_threshold(np.ones(3), -0.1)


def test_soft_threshold_preserves_shape():
    x = np.arange(24.0).reshape(2, 3, 4) - 12
    assert tc.soft_threshold(x, 1.0).shape == x.shape


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 16, elements=st.floats(-1e3, 1e3)), arrays(np.float64, 16, elements=st.floats(-1e3, 1e3)),
       st.floats(0, 10))
def test_soft_threshold_is_1_lipschitz(x, y, beta):
    d = np.linalg.norm(tc.soft_threshold(x, beta) - tc.soft_threshold(y, beta))
    assert d <= np.linalg.norm(x - y) * (1 + 1e-12) + 1e-12


# -- file format -----------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.lists(st.integers(0, 4), min_size=0, max_size=3).map(tuple),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_tensor_file_round_trip_bit_exact(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("t") / "a.mbt"
    tc.save_tensor(path, arr)
    back = tc.load_tensor(path)
    assert back.shape == arr.shape
    assert back.tobytes() == np.array(arr, order="C").tobytes()


def test_tensor_file_layout(tmp_path):
    arr = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    path = tmp_path / "x.mbt"
    tc.save_tensor(path, arr)
    raw = path.read_bytes()
    assert raw[:8] == b"MBDLTNSR"
    assert int.from_bytes(raw[8:12], "little") == 2
    assert [int.from_bytes(raw[12 + 8 * i:20 + 8 * i], "little") for i in range(2)] == [2, 3]
    payload = np.frombuffer(raw[28:], dtype="<f8")
    assert len(raw) - 28 == 8 * arr.size
    np.testing.assert_array_equal(payload, arr.ravel())


def test_scalar_tensor_file(tmp_path):
    tc.save_tensor(tmp_path / "s.mbt", np.float64(3.5))
    back = tc.load_tensor(tmp_path / "s.mbt")
    assert back.shape == () and float(back) == 3.5


def test_load_rejects_bad_magic_and_truncation(tmp_path):
    (tmp_path / "bad.mbt").write_bytes(b"NOTMAGIC" + bytes(4))
    with pytest.raises(ValueError):
        tc.load_tensor(tmp_path / "bad.mbt")
    tc.save_tensor(tmp_path / "ok.mbt", np.ones(4))
    raw = (tmp_path / "ok.mbt").read_bytes()
    (tmp_path / "short.mbt").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        tc.load_tensor(tmp_path / "short.mbt")


def test_export_csv_rows_and_precision(tmp_path):
    arr = np.array([[1.0 / 3.0, 2.0], [np.pi, -0.1]])
    tc.export_csv(tmp_path / "a.csv", arr)
    lines = (tmp_path / "a.csv").read_text().strip().splitlines()
    assert len(lines) == 2
    vals = [float(v) for v in lines[0].split(",")]
    assert vals[0] == 1.0 / 3.0
