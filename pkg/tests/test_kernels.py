import numpy as np
import pytest

from barbert import _kernels

needs_numba = pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba unavailable or disabled")


@needs_numba
@pytest.mark.parametrize("seed", range(5))
def test_viterbi_backends_agree(seed):
    rng = np.random.default_rng(seed)
    em = rng.integers(-50, 50, size=(7, 4, 85))
    # plant ties
    em[:, :, 10] = em[:, :, 3]
    for pen in (0, 5, 40):
        assert np.array_equal(
            _kernels.viterbi_batch(em, pen, "numba"), _kernels.viterbi_batch(em, pen, "numpy")
        )


@needs_numba
def test_viterbi_is_optimal_on_small_case():
    em = np.array([[[3, 0], [0, 1], [3, 0]]])
    # switching twice costs 4, staying in state 0 scores 6
    assert _kernels.viterbi_batch(em, 2).tolist() == [[0, 0, 0]]
    assert _kernels.viterbi_batch(em, 0, "numpy").tolist() == [[0, 1, 0]]


@needs_numba
@pytest.mark.parametrize("seed", range(3))
def test_kmeans_assign_backends_agree(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((200, 6))
    C = rng.standard_normal((9, 6))
    C[4] = C[2]  # duplicate center: lowest index wins
    la, da = _kernels.kmeans_assign(X, C, "numba")
    lb, db = _kernels.kmeans_assign(X, C, "numpy")
    assert np.array_equal(la, lb)
    np.testing.assert_allclose(da, db, rtol=1e-12)
    assert not np.any(la == 4)


@needs_numba
def test_beat_chroma_backends_agree():
    rng = np.random.default_rng(0)
    on = rng.integers(0, 192, 30)
    off = on + rng.integers(1, 100, 30)
    pcs = rng.integers(0, 12, 30)
    assert np.array_equal(
        _kernels.beat_chroma(on, off, pcs, 4, 48, "numba"), _kernels.beat_chroma(on, off, pcs, 4, 48, "numpy")
    )


@needs_numba
def test_float_kernels_agree():
    rng = np.random.default_rng(1)
    x = 3 * rng.standard_normal((2, 5, 7))
    a, pa = _kernels.gelu(x, "numba")
    b, pb = _kernels.gelu(x, "numpy")
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(pa, pb, rtol=1e-13, atol=1e-15)
    d = rng.standard_normal(x.shape)
    np.testing.assert_allclose(
        _kernels.gelu_backward(d, x, pa, "numba"), _kernels.gelu_backward(d, x, pb, "numpy"), rtol=1e-12, atol=1e-15
    )
    s = rng.standard_normal((2, 3, 4, 4))
    valid = np.array([[True, True, False, True], [False, False, False, False]])
    pa = _kernels.masked_softmax(s, valid, 0.5, "numba")
    pb = _kernels.masked_softmax(s, valid, 0.5, "numpy")
    np.testing.assert_allclose(pa, pb, rtol=1e-13, atol=1e-16)
    assert np.all(pa[1] == 0) and np.all(pa[0, :, :, 2] == 0)
    dp = rng.standard_normal(s.shape)
    np.testing.assert_allclose(
        _kernels.softmax_backward(pa, dp, 0.5, "numba"), _kernels.softmax_backward(pa, dp, 0.5, "numpy"),
        rtol=1e-12, atol=1e-15,
    )


def test_gelu_values():
    y, phi = _kernels.gelu(np.array([0.0, 1.0, -1.0]), "numpy")
    # Phi(1) = 0.8413447460685429
    np.testing.assert_allclose(y, [0.0, 0.8413447460685429, -0.15865525393145707], rtol=1e-14)
    assert phi[0] == 0.5


def test_softmax_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    s = rng.standard_normal((1, 1, 2, 3))
    valid = np.array([[True, True, True]])
    w = rng.standard_normal(s.shape)
    probs = _kernels.masked_softmax(s, valid, 0.7, "numpy")
    grad = _kernels.softmax_backward(probs, w, 0.7, "numpy")
    h = 1e-6
    for ix in np.ndindex(s.shape):
        sp, sm = s.copy(), s.copy()
        sp[ix] += h
        sm[ix] -= h
        num = (np.sum(w * _kernels.masked_softmax(sp, valid, 0.7)) - np.sum(w * _kernels.masked_softmax(sm, valid, 0.7))) / (2 * h)
        assert abs(num - grad[ix]) < 1e-8


def test_unknown_backend():
    with pytest.raises(ValueError):
        _kernels.viterbi_batch(np.zeros((1, 1, 2)), 0, "cuda")
