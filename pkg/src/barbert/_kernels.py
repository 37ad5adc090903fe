"""Hot inner loops with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and ``BARBERT_NO_NUMBA``
is unset (or "0"). Integer kernels return identical results on both paths;
the float kernels agree to rounding (libm erf/exp versus numpy's). The test
suite runs each kernel through both and ``benchmarks/bench_kernels.py``
times them.
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import erf

_DISABLED = os.environ.get("BARBERT_NO_NUMBA", "0").lower() not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("disabled by BARBERT_NO_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# Viterbi over a batch of short score sequences
# ---------------------------------------------------------------------------


def viterbi_batch_numpy(emissions: np.ndarray, switch_penalty: int) -> np.ndarray:
    """Max-score state paths for ``emissions`` of shape (n, T, S).

    Path score is the sum of per-frame emissions minus ``switch_penalty``
    for every change of state. Ties go to the lowest state index at the
    last frame and the lowest predecessor during backtracking.
    """
    emissions = np.asarray(emissions, dtype=np.int64)
    n, T, S = emissions.shape
    paths = np.zeros((n, T), dtype=np.int64)
    if T == 0 or n == 0:
        return paths
    # trans[k, j]: penalty for moving from k to j
    trans = np.full((S, S), -int(switch_penalty), dtype=np.int64)
    np.fill_diagonal(trans, 0)
    delta = emissions[:, 0, :].copy()
    back = np.zeros((n, T, S), dtype=np.int64)
    for t in range(1, T):
        cand = delta[:, :, None] + trans[None, :, :]  # (n, k, j)
        back[:, t, :] = np.argmax(cand, axis=1)
        delta = np.max(cand, axis=1) + emissions[:, t, :]
    paths[:, T - 1] = np.argmax(delta, axis=1)
    rows = np.arange(n)
    for t in range(T - 1, 0, -1):
        paths[:, t - 1] = back[rows, t, paths[:, t]]
    return paths


def kmeans_assign_numpy(X: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest center (lowest index on ties) and squared distance per row."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    n = X.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    dist = np.zeros(n, dtype=np.float64)
    # difference form (not the norm expansion) so near-ties match the loop kernel
    chunk = max(1, 2_000_000 // max(1, centers.size))
    for start in range(0, n, chunk):
        diff = centers[None, :, :] - X[start : start + chunk, None, :]
        d = np.einsum("nkd,nkd->nk", diff, diff)
        j = np.argmin(d, axis=1)
        labels[start : start + chunk] = j
        dist[start : start + chunk] = d[np.arange(len(j)), j]
    return labels, dist


def beat_chroma_numpy(
    onsets: np.ndarray, offsets: np.ndarray, pcs: np.ndarray, n_frames: int, units: int
) -> np.ndarray:
    """Integer chroma per frame: overlap of each note with each frame.

    ``onsets``/``offsets`` are integer times in ``units`` per frame. Each
    pitch-class cell is clipped to one full frame.
    """
    chroma = np.zeros((n_frames, 12), dtype=np.int64)
    for on, off, pc in zip(onsets, offsets, pcs):
        for f in range(n_frames):
            lo = max(int(on), f * units)
            hi = min(int(off), (f + 1) * units)
            if hi > lo:
                chroma[f, pc] += hi - lo
    return np.minimum(chroma, units)


# ---------------------------------------------------------------------------
# Encoder elementwise ops: fused on the numba path to avoid temporaries
# ---------------------------------------------------------------------------

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu_numpy(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact-erf GELU; also returns the normal CDF for the backward pass."""
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return x * phi, phi


def gelu_backward_numpy(dout: np.ndarray, x: np.ndarray, phi: np.ndarray) -> np.ndarray:
    return dout * (phi + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x))


def masked_softmax_numpy(scores: np.ndarray, valid: np.ndarray, scale: float) -> np.ndarray:
    """Softmax of ``scale * scores`` (B, nh, T, T) over keys where ``valid`` (B, T).

    Rows with no valid key get all-zero probabilities.
    """
    s = np.where(valid[:, None, None, :], scores * scale, -np.inf)
    m = s.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(s - m)
    z = e.sum(axis=-1, keepdims=True)
    return e / np.where(z > 0, z, 1.0)


def softmax_backward_numpy(probs: np.ndarray, dprobs: np.ndarray, scale: float) -> np.ndarray:
    """Gradient w.r.t. the unscaled scores of ``masked_softmax``."""
    return probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * scale


if HAVE_NUMBA:

    @njit(cache=True)
    def _gelu_nb(x):
        out = np.empty_like(x)
        phi = np.empty_like(x)
        xf, of, pf = x.ravel(), out.ravel(), phi.ravel()
        for i in range(xf.size):
            p = 0.5 * (1.0 + math.erf(xf[i] * _INV_SQRT2))
            pf[i] = p
            of[i] = xf[i] * p
        return out, phi

    @njit(cache=True)
    def _gelu_backward_nb(dout, x, phi):
        out = np.empty_like(x)
        df, xf, pf, of = dout.ravel(), x.ravel(), phi.ravel(), out.ravel()
        for i in range(xf.size):
            v = xf[i]
            of[i] = df[i] * (pf[i] + v * _INV_SQRT_2PI * math.exp(-0.5 * v * v))
        return out

    @njit(cache=True)
    def _masked_softmax_nb(scores, valid, scale):
        B, nh, T, K = scores.shape
        out = np.zeros_like(scores)
        for b in range(B):
            for h in range(nh):
                for i in range(T):
                    m = -np.inf
                    for j in range(K):
                        if valid[b, j]:
                            v = scores[b, h, i, j] * scale
                            if v > m:
                                m = v
                    if m == -np.inf:
                        continue
                    z = 0.0
                    for j in range(K):
                        if valid[b, j]:
                            e = math.exp(scores[b, h, i, j] * scale - m)
                            out[b, h, i, j] = e
                            z += e
                    for j in range(K):
                        out[b, h, i, j] /= z
        return out

    @njit(cache=True)
    def _softmax_backward_nb(probs, dprobs, scale):
        B, nh, T, K = probs.shape
        out = np.empty_like(probs)
        for b in range(B):
            for h in range(nh):
                for i in range(T):
                    dot = 0.0
                    for j in range(K):
                        dot += dprobs[b, h, i, j] * probs[b, h, i, j]
                    for j in range(K):
                        out[b, h, i, j] = probs[b, h, i, j] * (dprobs[b, h, i, j] - dot) * scale
        return out


    @njit(cache=True)
    def _viterbi_batch_nb(emissions, switch_penalty):
        n, T, S = emissions.shape
        paths = np.zeros((n, T), dtype=np.int64)
        if T == 0:
            return paths
        back = np.zeros((T, S), dtype=np.int64)
        delta = np.empty(S, dtype=np.int64)
        new = np.empty(S, dtype=np.int64)
        for b in range(n):
            for s in range(S):
                delta[s] = emissions[b, 0, s]
            for t in range(1, T):
                for j in range(S):
                    best = delta[0] - (switch_penalty if j != 0 else 0)
                    arg = 0
                    for k in range(1, S):
                        v = delta[k] - (switch_penalty if j != k else 0)
                        if v > best:
                            best = v
                            arg = k
                    back[t, j] = arg
                    new[j] = best + emissions[b, t, j]
                for j in range(S):
                    delta[j] = new[j]
            arg = 0
            for s in range(1, S):
                if delta[s] > delta[arg]:
                    arg = s
            paths[b, T - 1] = arg
            for t in range(T - 1, 0, -1):
                paths[b, t - 1] = back[t, paths[b, t]]
        return paths

    @njit(cache=True)
    def _kmeans_assign_nb(X, centers):
        n, d = X.shape
        k = centers.shape[0]
        labels = np.zeros(n, dtype=np.int64)
        dist = np.zeros(n, dtype=np.float64)
        for i in range(n):
            best = np.inf
            arg = 0
            for j in range(k):
                acc = 0.0
                for c in range(d):
                    diff = centers[j, c] - X[i, c]
                    acc += diff * diff
                if acc < best:
                    best = acc
                    arg = j
            labels[i] = arg
            dist[i] = best
        return labels, dist

    @njit(cache=True)
    def _beat_chroma_nb(onsets, offsets, pcs, n_frames, units):
        chroma = np.zeros((n_frames, 12), dtype=np.int64)
        for i in range(onsets.shape[0]):
            for f in range(n_frames):
                lo = max(onsets[i], f * units)
                hi = min(offsets[i], (f + 1) * units)
                if hi > lo:
                    chroma[f, pcs[i]] += hi - lo
        for f in range(n_frames):
            for p in range(12):
                if chroma[f, p] > units:
                    chroma[f, p] = units
        return chroma


def viterbi_batch(emissions: np.ndarray, switch_penalty: int, backend: str | None = None) -> np.ndarray:
    emissions = np.ascontiguousarray(emissions, dtype=np.int64)
    if _use_numba(backend):
        return _viterbi_batch_nb(emissions, np.int64(switch_penalty))
    return viterbi_batch_numpy(emissions, switch_penalty)


def kmeans_assign(X: np.ndarray, centers: np.ndarray, backend: str | None = None):
    if _use_numba(backend):
        return _kmeans_assign_nb(
            np.ascontiguousarray(X, dtype=np.float64), np.ascontiguousarray(centers, dtype=np.float64)
        )
    return kmeans_assign_numpy(X, centers)


def beat_chroma(onsets, offsets, pcs, n_frames: int, units: int, backend: str | None = None) -> np.ndarray:
    onsets = np.ascontiguousarray(onsets, dtype=np.int64)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    pcs = np.ascontiguousarray(pcs, dtype=np.int64)
    if _use_numba(backend):
        return _beat_chroma_nb(onsets, offsets, pcs, np.int64(n_frames), np.int64(units))
    return beat_chroma_numpy(onsets, offsets, pcs, n_frames, units)


def gelu(x: np.ndarray, backend: str | None = None):
    if _use_numba(backend):
        return _gelu_nb(np.ascontiguousarray(x, dtype=np.float64))
    return gelu_numpy(x)


def gelu_backward(dout: np.ndarray, x: np.ndarray, phi: np.ndarray, backend: str | None = None) -> np.ndarray:
    if _use_numba(backend):
        c = np.ascontiguousarray
        return _gelu_backward_nb(c(dout, dtype=np.float64), c(x, dtype=np.float64), c(phi, dtype=np.float64))
    return gelu_backward_numpy(dout, x, phi)


def masked_softmax(scores: np.ndarray, valid: np.ndarray, scale: float, backend: str | None = None) -> np.ndarray:
    if _use_numba(backend):
        return _masked_softmax_nb(
            np.ascontiguousarray(scores, dtype=np.float64), np.ascontiguousarray(valid, dtype=np.bool_), float(scale)
        )
    return masked_softmax_numpy(scores, valid, scale)


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray, scale: float, backend: str | None = None) -> np.ndarray:
    if _use_numba(backend):
        c = np.ascontiguousarray
        return _softmax_backward_nb(c(probs, dtype=np.float64), c(dprobs, dtype=np.float64), float(scale))
    return softmax_backward_numpy(probs, dprobs, scale)


def _use_numba(backend: str | None) -> bool:
    if backend is None:
        return HAVE_NUMBA
    if backend == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is unavailable")
        return True
    if backend == "numpy":
        return False
    raise ValueError(f"unknown backend {backend!r}")
