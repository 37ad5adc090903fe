"""Linear probes and song-clustering entropy over frozen bar embeddings.

Scores per metric: C/GP/I are macro-F1 of per-label ridge classifiers, T is
accuracy of a one-vs-rest ridge classifier, MV/MD are mean absolute error
of a ridge regressor in raw units, SC is normalized K-means assignment
entropy within songs. Probe train/test splits are always by song.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import _kernels
from .corpus import label_matrices
from .encoder import ModelConfig, embed_bars
from .labels import BarLabels
from .remi import BarTokens

METRICS = ("C", "GP", "I", "T", "MV", "MD", "SC")
HIGHER_IS_BETTER = {"C": True, "GP": True, "I": True, "T": True, "MV": False, "MD": False, "SC": False}
DEFAULT_LAMBDA = 1.0
DEFAULT_SPLITS = 5
TEST_FRACTION = 0.2
KMEANS_MAX_ITER = 300
KMEANS_TOL = 1e-6
REPORT_NOTE = (
    "# C/GP/I: macro-F1 (labels with >=1 positive test bar); T: accuracy; "
    "MV/MD: mean absolute error (raw units); SC: normalized K-means entropy"
)


class NonFiniteInput(ValueError):
    pass


class KTooLarge(ValueError):
    pass


class MixedConfig(ValueError):
    pass


@dataclass
class ProbeSplit:
    train: np.ndarray
    test: np.ndarray
    lam: float = DEFAULT_LAMBDA


@dataclass
class ProbeReport:
    model: str
    grid: np.ndarray  # (L+1, 7) mean over probe splits
    grid_se: np.ndarray  # standard error over splits
    metrics: tuple[str, ...] = METRICS
    extra: dict = field(default_factory=dict)

    def best(self, metric: str) -> tuple[int, float]:
        col = self.grid[:, self.metrics.index(metric)]
        layer = int(np.argmax(col) if HIGHER_IS_BETTER[metric] else np.argmin(col))
        return layer, float(col[layer])

    @property
    def last_layer(self) -> np.ndarray:
        return self.grid[-1]


# -- ridge ---------------------------------------------------------------------


def ridge_fit(X: np.ndarray, Y: np.ndarray, lam: float = DEFAULT_LAMBDA, fit_bias: bool = True) -> np.ndarray:
    """Closed-form ridge: minimizes ||[X 1] W - Y||^2 + lam * ||W without bias row||^2.

    Returns W of shape (d+1, m) with the bias in the last row, or (d, m)
    when ``fit_bias`` is False.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    squeeze = Y.ndim == 1
    if squeeze:
        Y = Y[:, None]
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise NonFiniteInput("ridge inputs contain NaN or inf")
    if X.shape[0] < 1 or lam <= 0:
        raise ValueError("need n >= 1 and lam > 0")
    Xa = np.hstack([X, np.ones((X.shape[0], 1))]) if fit_bias else X
    A = Xa.T @ Xa
    reg = np.full(Xa.shape[1], lam)
    if fit_bias:
        reg[-1] = 0.0
    A[np.diag_indices_from(A)] += reg
    W = cho_solve(cho_factor(A, lower=True), Xa.T @ Y)
    return W[:, 0] if squeeze else W


def ridge_predict(X: np.ndarray, W: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if W.shape[0] == X.shape[1] + 1:
        return X @ W[:-1] + W[-1]
    return X @ W


# -- splits --------------------------------------------------------------------


def song_split(song_ids, seed: int, test_fraction: float = TEST_FRACTION, lam: float = DEFAULT_LAMBDA) -> ProbeSplit:
    song_ids = np.asarray(song_ids, dtype=object)
    songs = sorted(set(song_ids.tolist()))
    n_test = min(max(1, int(round(test_fraction * len(songs)))), max(len(songs) - 1, 1))
    perm = np.random.default_rng([seed, 0xB0B]).permutation(len(songs))
    test_songs = {songs[i] for i in perm[:n_test]}
    is_test = np.array([s in test_songs for s in song_ids], dtype=bool)
    if len(songs) == 1:
        is_test[:] = False
        rows = np.arange(len(song_ids))
        return ProbeSplit(rows, rows, lam)
    return ProbeSplit(np.flatnonzero(~is_test), np.flatnonzero(is_test), lam)


# -- probes ----------------------------------------------------------------------


def probe_multiclass(emb: np.ndarray, labels: np.ndarray, split: ProbeSplit) -> float:
    labels = np.asarray(labels)
    classes = np.unique(labels[split.train])
    Y = np.where(labels[split.train][:, None] == classes[None, :], 1.0, -1.0)
    W = ridge_fit(emb[split.train], Y, split.lam)
    pred = classes[np.argmax(ridge_predict(emb[split.test], W), axis=1)]
    return float(np.mean(pred == labels[split.test]))


def macro_f1(truth: np.ndarray, pred: np.ndarray) -> float:
    """Mean F1 over columns of ``truth`` that have at least one positive."""
    truth = np.asarray(truth, dtype=bool)
    pred = np.asarray(pred, dtype=bool)
    keep = truth.any(axis=0)
    if not keep.any():
        return 0.0
    tp = (truth & pred).sum(axis=0)[keep]
    fp = (~truth & pred).sum(axis=0)[keep]
    fn = (truth & ~pred).sum(axis=0)[keep]
    return float(np.mean(2 * tp / (2 * tp + fp + fn)))


def probe_multilabel(emb: np.ndarray, labels: np.ndarray, split: ProbeSplit) -> float:
    labels = np.asarray(labels).astype(bool)
    Y = np.where(labels[split.train], 1.0, -1.0)
    W = ridge_fit(emb[split.train], Y, split.lam)
    pred = ridge_predict(emb[split.test], W) > 0
    return macro_f1(labels[split.test], pred)


def probe_regression(emb: np.ndarray, targets: np.ndarray, split: ProbeSplit) -> float:
    targets = np.asarray(targets, dtype=np.float64)
    train = split.train[np.isfinite(targets[split.train])]
    test = split.test[np.isfinite(targets[split.test])]
    if len(train) == 0 or len(test) == 0:
        return float("nan")
    w = ridge_fit(emb[train], targets[train], split.lam)
    return float(np.mean(np.abs(ridge_predict(emb[test], w) - targets[test])))


# -- clustering --------------------------------------------------------------------


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        # every point already coincides with a center: any pick is equivalent
        i = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers[j] = X[i]
        d2 = np.minimum(d2, ((X - centers[j]) ** 2).sum(axis=1))
    return centers


def kmeans(X: np.ndarray, k: int, seed: int = 0, max_iter: int = KMEANS_MAX_ITER, tol: float = KMEANS_TOL):
    """Lloyd iterations from a k-means++ start; returns (labels, centers)."""
    X = np.asarray(X, dtype=np.float64)
    if k > X.shape[0]:
        raise KTooLarge(f"K={k} exceeds {X.shape[0]} rows")
    if k < 1:
        raise ValueError("K must be >= 1")
    centers = kmeans_plusplus(X, k, np.random.default_rng(seed))
    labels, _ = _kernels.kmeans_assign(X, centers)
    for _ in range(max_iter):
        new = centers.copy()
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, X)
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        shift = np.max(np.linalg.norm(new - centers, axis=1))
        centers = new
        labels, _ = _kernels.kmeans_assign(X, centers)
        if shift <= tol:
            break
    return labels, centers


def assignment_entropy(assignments, song_ids, k: int) -> float:
    """Mean over songs with >= 2 bars of the cluster-histogram entropy / ln K."""
    assignments = np.asarray(assignments)
    song_ids = np.asarray(song_ids, dtype=object)
    if k <= 1:
        return 0.0
    values = []
    for song in sorted(set(song_ids.tolist())):
        a = assignments[song_ids == song]
        if len(a) < 2:
            continue
        p = np.bincount(a, minlength=k) / len(a)
        p = p[p > 0]
        values.append(float(-(p * np.log(p)).sum() / np.log(k)))
    return float(np.mean(values)) if values else 0.0


def default_k(song_ids) -> int:
    return min(100, len(set(np.asarray(song_ids, dtype=object).tolist())))


def song_clustering_entropy(emb: np.ndarray, song_ids, k: int | None = None, seed: int = 0) -> float:
    k = default_k(song_ids) if k is None else k
    labels, _ = kmeans(emb, k, seed)
    return assignment_entropy(labels, song_ids, k)


# -- sweeps ----------------------------------------------------------------------------


def probe_layer(emb: np.ndarray, targets: dict, split: ProbeSplit, k: int | None = None, seed: int = 0) -> np.ndarray:
    """All seven scores for one layer's embeddings under one split."""
    return np.array(
        [
            probe_multilabel(emb, targets["C"], split),
            probe_multilabel(emb, targets["GP"], split),
            probe_multilabel(emb, targets["I"], split),
            probe_multiclass(emb, targets["T"], split),
            probe_regression(emb, targets["MV"], split),
            probe_regression(emb, targets["MD"], split),
            song_clustering_entropy(emb, targets["SC"], k, seed),
        ]
    )


def probe_embeddings(
    layer_embs: np.ndarray,
    labels: list[BarLabels],
    model: str = "model",
    lam: float = DEFAULT_LAMBDA,
    n_splits: int = DEFAULT_SPLITS,
    k: int | None = None,
    seed: int = 0,
) -> ProbeReport:
    """Grid of mean scores (and standard errors) over ``n_splits`` seeded song splits."""
    targets = label_matrices(labels)
    song_ids = targets["SC"]
    runs = np.zeros((n_splits, layer_embs.shape[0], len(METRICS)))
    for s in range(n_splits):
        split = song_split(song_ids, seed + s, lam=lam)
        for layer in range(layer_embs.shape[0]):
            runs[s, layer] = probe_layer(layer_embs[layer], targets, split, k, seed + s)
    mean = runs.mean(axis=0)
    se = runs.std(axis=0, ddof=1) / np.sqrt(n_splits) if n_splits > 1 else np.zeros_like(mean)
    return ProbeReport(model, mean, se)


def probe_all_layers(
    params,
    model_cfg: ModelConfig,
    bars: list[BarTokens],
    labels: list[BarLabels],
    model: str = "model",
    **kwargs,
) -> ProbeReport:
    embs = embed_bars(params, [b.ids for b in bars], model_cfg)
    return probe_embeddings(embs, labels, model, **kwargs)


# -- report files -----------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(round(float(x), 10))


def best_per_column(rows: dict[str, np.ndarray]) -> dict[str, str]:
    """Model name with the best value in each metric column."""
    best = {}
    names = list(rows)
    for j, m in enumerate(METRICS):
        vals = np.array([rows[n][j] for n in names], dtype=np.float64)
        if not np.any(np.isfinite(vals)):
            continue
        vals = np.where(np.isfinite(vals), vals, -np.inf if HIGHER_IS_BETTER[m] else np.inf)
        best[m] = names[int(np.argmax(vals) if HIGHER_IS_BETTER[m] else np.argmin(vals))]
    return best


def write_last_layer(path, rows: dict[str, np.ndarray], se: dict[str, np.ndarray] | None = None) -> None:
    best = best_per_column(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["model"]
        for m in METRICS:
            header += [m, f"{m}_se"]
        w.writerow(header + ["best"])
        for name, vals in rows.items():
            errs = se[name] if se is not None and name in se else np.full(len(METRICS), np.nan)
            cells = [name]
            for v, e in zip(vals, errs):
                cells += [_fmt(v), _fmt(e)]
            w.writerow(cells + [";".join(m for m in METRICS if best.get(m) == name)])


def read_last_layer(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    rows, errs = {}, {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows[rec["model"]] = np.array([float(rec[m]) for m in METRICS])
            errs[rec["model"]] = np.array([float(rec[f"{m}_se"]) for m in METRICS])
    return rows, errs


def write_report(out_dir, reports: list[ProbeReport]) -> None:
    """grid.csv, grid_se.csv, summary.csv and last_layer.csv for one or more models."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for fname, attr in (("grid.csv", "grid"), ("grid_se.csv", "grid_se")):
        with open(out / fname, "w", newline="") as fh:
            fh.write(REPORT_NOTE + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "layer", *METRICS])
            for rep in reports:
                for layer, row in enumerate(getattr(rep, attr)):
                    w.writerow([rep.model, layer, *(_fmt(v) for v in row)])
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "metric", "direction", "best_layer", "best_score"])
        for rep in reports:
            for m in METRICS:
                layer, score = rep.best(m)
                w.writerow([rep.model, m, "up" if HIGHER_IS_BETTER[m] else "down", layer, _fmt(score)])
    write_last_layer(
        out / "last_layer.csv",
        {r.model: r.last_layer for r in reports},
        {r.model: r.grid_se[-1] for r in reports},
    )


def read_grid(path) -> dict[str, np.ndarray]:
    grids: dict[str, list] = {}
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    for rec in csv.DictReader(lines):
        grids.setdefault(rec["model"], []).append([float(rec[m]) for m in METRICS])
    return {k: np.array(v) for k, v in grids.items()}


def merge_reports(report_dirs, out_dir) -> str:
    """Merge last-layer rows of several report dirs; returns the rendered text table."""
    rows, errs = {}, {}
    depth = None
    for d in report_dirs:
        d = Path(d)
        for name, grid in read_grid(d / "grid.csv").items():
            if depth is None:
                depth = grid.shape[0]
            elif grid.shape[0] != depth:
                raise MixedConfig(f"{d}: {grid.shape[0]} layers, earlier reports have {depth}")
        r, e = read_last_layer(d / "last_layer.csv")
        for name in r:
            key = name
            while key in rows:
                key = f"{key}@{d.name}"
            rows[key], errs[key] = r[name], e[name]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_last_layer(out / "comparison.csv", rows, errs)
    text = render_table(rows, errs)
    (out / "comparison.txt").write_text(text)
    return text


def render_table(rows: dict[str, np.ndarray], errs: dict[str, np.ndarray] | None = None) -> str:
    best = best_per_column(rows)
    header = ["Model"] + [f"{m} ({'↑' if HIGHER_IS_BETTER[m] else '↓'})" for m in METRICS]
    lines = []
    for name, vals in rows.items():
        cells = [name]
        for j, m in enumerate(METRICS):
            cell = f"{vals[j]:.3f}"
            if errs is not None and name in errs and np.isfinite(errs[name][j]):
                cell += f" ({errs[name][j]:.3e})"
            if best.get(m) == name:
                cell = "*" + cell
            cells.append(cell)
        lines.append(cells)
    widths = [max(len(r[i]) for r in [header] + lines) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths))  # noqa: E731
    return "\n".join([fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in lines]) + "\n"
