"""MLM cross-entropy, NT-Xent contrastive loss and their combination."""

from __future__ import annotations

import csv
from dataclasses import astuple, dataclass

import numpy as np

from .views import IGNORE

DEFAULT_TAU = 0.1
DEFAULT_ALPHA = 0.1


class NoMaskedPositions(ValueError):
    pass


class DegenerateBatch(ValueError):
    pass


class ZeroNormEmbedding(ValueError):
    pass


@dataclass
class LossReport:
    mlm_loss: float
    ntxent_loss: float
    total: float
    mlm_accuracy: float
    ntxent_accuracy: float


def _log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def mlm_loss_and_grad(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy over selected positions, accuracy, and d loss / d logits."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    sel = targets != IGNORE
    n = int(sel.sum())
    if n == 0:
        raise NoMaskedPositions("no position carries an MLM target")
    chosen = logits[sel]
    tgt = targets[sel]
    logp = _log_softmax(chosen)
    rows = np.arange(n)
    loss = -logp[rows, tgt].mean()
    acc = float((chosen.argmax(axis=-1) == tgt).mean())
    d_chosen = np.exp(logp)
    d_chosen[rows, tgt] -= 1.0
    grad = np.zeros_like(logits)
    grad[sel] = d_chosen / n
    return float(loss), acc, grad


def mlm_loss(logits: np.ndarray, targets: np.ndarray) -> tuple[float, float]:
    loss, acc, _ = mlm_loss_and_grad(logits, targets)
    return loss, acc


def _check_batch(Z):
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] == 0 or Z.shape[0] % 2:
        raise DegenerateBatch(f"need 2N >= 2 embeddings, got shape {Z.shape}")
    norms = np.linalg.norm(Z, axis=1)
    if np.any(norms == 0):
        raise ZeroNormEmbedding("cosine similarity undefined for a zero vector")
    return Z, norms


def nt_xent_and_grad(Z: np.ndarray, tau: float = DEFAULT_TAU):
    """Symmetrized NT-Xent over ``Z`` ordered [a_1..a_N, b_1..b_N].

    Every one of the 2N rows acts as an anchor whose positive is its partner
    in the other half; the denominator runs over the other 2N-1 rows (the
    anchor itself is excluded by index). Accuracy counts anchors whose
    positive attains the maximum similarity among those candidates.
    """
    Z, norms = _check_batch(Z)
    n2 = Z.shape[0]
    N = n2 // 2
    U = Z / norms[:, None]
    S = U @ U.T
    L = S / tau
    np.fill_diagonal(L, -np.inf)
    pos = (np.arange(n2) + N) % n2
    rows = np.arange(n2)
    m = L.max(axis=1, keepdims=True)
    e = np.exp(L - m)
    lse = m[:, 0] + np.log(e.sum(axis=1))
    loss = float(np.mean(lse - L[rows, pos]))

    S_off = S.copy()
    np.fill_diagonal(S_off, -np.inf)
    acc = float(np.mean(S_off[rows, pos] >= S_off.max(axis=1)))

    # d loss / d L, then through S = U U^T and the row normalization
    P = e / e.sum(axis=1, keepdims=True)
    dL = P.copy()
    dL[rows, pos] -= 1.0
    dL /= n2
    dS = dL / tau
    dU = (dS + dS.T) @ U
    dZ = (dU - U * (dU * U).sum(axis=1, keepdims=True)) / norms[:, None]
    return loss, acc, dZ


def nt_xent(Z: np.ndarray, tau: float = DEFAULT_TAU) -> tuple[float, float]:
    loss, acc, _ = nt_xent_and_grad(Z, tau)
    return loss, acc


def total_loss(mlm: float, ntxent: float, alpha: float = DEFAULT_ALPHA) -> float:
    return mlm + alpha * ntxent


LOG_COLUMNS = ["step", "mlm_loss", "ntxent_loss", "total", "mlm_acc", "ntxent_acc"]
LOG_HEADER_NOTE = "# ntxent_acc: top-1 in-batch retrieval of the positive among the other 2N-1 embeddings"


class TrainingLog:
    """Append-only CSV of per-step LossReports."""

    def __init__(self, path):
        self.path = path
        with open(path, "w", newline="") as fh:
            fh.write(LOG_HEADER_NOTE + "\n")
            csv.writer(fh).writerow(LOG_COLUMNS)

    def append(self, step: int, report: LossReport) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([step] + [repr(float(v)) for v in astuple(report)])

