"""Joint MLM + NT-Xent training for the four model variants, and checkpoints.

Every random draw in a step comes from a generator seeded by
``(seed, step, stream)``, so batches can be built on worker threads in any
order and a run is reproducible from its configs alone.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .encoder import (
    ModelConfig,
    backward,
    forward,
    init_params,
    pack_batch,
    param_shapes,
    pool,
    pool_backward,
    project,
    project_backward,
)
from .objectives import (
    DEFAULT_ALPHA,
    DEFAULT_TAU,
    LossReport,
    TrainingLog,
    mlm_loss_and_grad,
    nt_xent_and_grad,
)
from .remi import BarTokens
from .views import IGNORE, PairBatch, SingletonSong, dropout_twin, index_by_song, mlm_mask, pitch_velocity_shift, sample_neighbor

log = logging.getLogger(__name__)

VARIANTS = ("bert", "aug", "neighbor", "dropout")
VARIANT_NAMES = {"bert": "BERT", "aug": "BERT-aug", "neighbor": "BERT-neighbor", "dropout": "BERT-dropout", "random": "random-init"}

# per-step generator streams
_ANCHORS, _MASK, _PARTNER, _DROP_A, _DROP_B = range(5)
# sequences per forward pass inside a step; see length_groups
MICRO_BATCH = 4


class NonFiniteLoss(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "bert"
    alpha: float = DEFAULT_ALPHA
    tau: float = DEFAULT_TAU
    batch_size: int = 16
    steps: int = 1000
    learning_rate: float = 1e-4
    warmup_fraction: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0  # global L2 norm; 0 disables
    seed: int = 0
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant != "bert" and (self.alpha < 0 or self.tau <= 0):
            raise ValueError("contrastive variants need alpha >= 0 and tau > 0")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in [0, 1)")

    @property
    def contrastive(self) -> bool:
        return self.variant != "bert"


def step_rng(seed: int, step: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, stream])


def split_by_song(bars: list[BarTokens], fraction: float, seed: int) -> tuple[list[BarTokens], list[BarTokens]]:
    """Hold out roughly ``fraction`` of songs (never of bars) for validation."""
    songs = sorted({b.song_id for b in bars})
    n_val = int(round(fraction * len(songs)))
    if fraction > 0 and len(songs) > 1:
        n_val = min(max(n_val, 1), len(songs) - 1)
    else:
        n_val = 0
    rng = np.random.default_rng([seed, 0x5EED])
    held = {songs[i] for i in rng.permutation(len(songs))[:n_val]}
    return [b for b in bars if b.song_id not in held], [b for b in bars if b.song_id in held]


class Corpus:
    """Training bars plus the per-song index neighbor sampling needs."""

    def __init__(self, bars: list[BarTokens]):
        if not bars:
            raise ValueError("empty corpus")
        self.bars = list(bars)
        self.index = index_by_song(self.bars)
        self.multi_bar = [i for i, b in enumerate(self.bars) if len(self.index[b.song_id]) >= 2]


def pair_views(
    variant: str,
    anchors: list[BarTokens],
    song_index: dict[str, list[BarTokens]],
    mask_rng: np.random.Generator,
    partner_rng: np.random.Generator,
) -> PairBatch:
    view_a = [mlm_mask(a.ids, mask_rng) for a in anchors]
    batch = PairBatch(view_a=view_a, anchors=list(anchors))
    if variant == "bert":
        return batch
    if variant == "aug":
        partners = [pitch_velocity_shift(a, partner_rng) for a in anchors]
    elif variant == "neighbor":
        partners = [sample_neighbor(song_index, a, partner_rng) for a in anchors]
    else:
        partners = list(anchors)
    if variant == "dropout":
        batch.view_b = [dropout_twin(v)[1].input_ids for v in view_a]
    else:
        batch.view_b = [np.asarray(p.ids, dtype=np.int64) for p in partners]
    batch.partners = partners
    return batch


def build_pair_batch(variant: str, corpus: Corpus, seed: int, step: int, batch_size: int) -> PairBatch:
    """Views for one step: masked anchors plus their positive partners."""
    rng = step_rng(seed, step, _ANCHORS)
    candidates = corpus.multi_bar if variant == "neighbor" else range(len(corpus.bars))
    if not len(candidates):
        raise SingletonSong("neighbor training needs at least one song with two or more bars")
    chosen = rng.choice(np.asarray(candidates), size=min(batch_size, len(candidates)), replace=False)
    anchors = [corpus.bars[i] for i in chosen]
    return pair_views(variant, anchors, corpus.index, step_rng(seed, step, _MASK), step_rng(seed, step, _PARTNER))


def length_groups(lengths, size: int = MICRO_BATCH) -> list[np.ndarray]:
    """Indices sorted by length and cut into groups of ``size``, so each group pads little."""
    order = np.argsort(np.asarray(lengths), kind="stable")
    return [order[i : i + size] for i in range(0, len(order), size)]


def _run_view(params, seqs, model_cfg, dropout_on, rng, need_grads, targets=None, logits=True):
    """Forward a view in length-sorted micro-batches; returns [(indices, targets, output)]."""
    runs = []
    for g in length_groups([len(x) for x in seqs]):
        ids, tgt = pack_batch([seqs[i] for i in g], model_cfg, None if targets is None else [targets[i] for i in g])
        out = forward(params, ids, model_cfg, dropout_on, rng, compute_logits=logits, keep_cache=need_grads)
        runs.append((g, tgt, out))
    return runs


def _pooled(runs, n, hidden, mode):
    z = np.zeros((n, hidden))
    for g, _, out in runs:
        z[g] = pool(out.hidden[-1], out.valid, mode)
    return z


def loss_and_grads(
    params: dict[str, np.ndarray],
    batch: PairBatch,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seed: int,
    step: int,
    dropout_on: bool = True,
    need_grads: bool = True,
):
    """LossReport and gradients of L_MLM + alpha * L_NT-Xent for one PairBatch.

    Each view runs in length-sorted micro-batches; the losses are still the
    batch-level means, so this only saves work spent on padding.
    """
    N = len(batch.view_a)
    H = model_cfg.hidden_size
    grads = {k: np.zeros_like(v) for k, v in params.items()} if need_grads else None
    runs_a = _run_view(
        params, [v.input_ids for v in batch.view_a], model_cfg, dropout_on, step_rng(seed, step, _DROP_A),
        need_grads, targets=[v.mlm_targets for v in batch.view_a],
    )
    n_sel = sum(int(np.sum(v.mlm_targets != IGNORE)) for v in batch.view_a)
    mlm, hits = 0.0, 0.0
    d_logits = []
    for _, tgt, out in runs_a:
        n_c = int(np.sum(tgt != IGNORE))
        if n_c == 0:
            # possible only for near-empty bars; the chunk contributes no MLM signal
            d_logits.append(None)
            continue
        loss_c, acc_c, d_c = mlm_loss_and_grad(out.logits, tgt)
        mlm += loss_c * n_c / n_sel
        hits += acc_c * n_c
        d_logits.append(d_c * (n_c / n_sel))
    mlm_acc = hits / n_sel if n_sel else float("nan")

    ntx, ntx_acc = 0.0, float("nan")
    d_last_a = [None] * len(runs_a)
    runs_b = []
    if train_cfg.contrastive and batch.view_b:
        runs_b = _run_view(
            params, batch.view_b, model_cfg, dropout_on, step_rng(seed, step, _DROP_B), need_grads, logits=False
        )
        mode = model_cfg.pooling
        pooled = np.concatenate([_pooled(runs_a, N, H, mode), _pooled(runs_b, N, H, mode)])
        ntx, ntx_acc, dz = nt_xent_and_grad(project(params, pooled, model_cfg), train_cfg.tau)
        if need_grads and train_cfg.alpha != 0:
            dz = project_backward(params, pooled, train_cfg.alpha * dz, model_cfg, grads)
            d_last_a = [pool_backward(dz[:N][g], out.valid, out.valid.shape[1], mode) for g, _, out in runs_a]
            d_last_b = [pool_backward(dz[N:][g], out.valid, out.valid.shape[1], mode) for g, _, out in runs_b]
        else:
            runs_b = []
    alpha = train_cfg.alpha if train_cfg.contrastive else 0.0
    report = LossReport(mlm, ntx, mlm + alpha * ntx, mlm_acc, ntx_acc)
    if not need_grads:
        return report, None
    jobs = [(out, dl, dh) for (_, _, out), dl, dh in zip(runs_a, d_logits, d_last_a)]
    jobs += [(out, None, dh) for (_, _, out), dh in zip(runs_b, d_last_b if runs_b else [])]
    for out, dl, dh in jobs:
        if dl is None and dh is None:
            continue
        g = backward(params, out, model_cfg, d_logits=dl, d_last=dh)
        for k in grads:
            grads[k] += g[k]
    return report, grads


class Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0
        self.warmup = max(1, int(round(cfg.warmup_fraction * cfg.steps)))

    def lr(self, step: int) -> float:
        # linear warmup, then linear decay to zero at the last step
        base = self.cfg.learning_rate
        if step < self.warmup:
            return base * (step + 1) / self.warmup
        remaining = max(self.cfg.steps - self.warmup, 1)
        return base * max(0.0, 1.0 - (step - self.warmup) / remaining)

    def update(self, params, grads, step: int) -> None:
        c = self.cfg
        self.t += 1
        lr = self.lr(step)
        b1t = 1.0 - c.beta1**self.t
        b2t = 1.0 - c.beta2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            params[k] -= lr * (m / b1t) / (np.sqrt(v / b2t) + c.adam_eps)


def train_step(params, batch: PairBatch, model_cfg: ModelConfig, train_cfg: TrainConfig, optimizer: Adam, step: int):
    report, grads = loss_and_grads(params, batch, model_cfg, train_cfg, train_cfg.seed, step)
    if not np.isfinite(report.total):
        raise NonFiniteLoss(f"non-finite loss at step {step}: {report}")
    if train_cfg.grad_clip > 0:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > train_cfg.grad_clip:
            for g in grads.values():
                g *= train_cfg.grad_clip / norm
    optimizer.update(params, grads, step)
    return params, report


def train(
    bars: list[BarTokens],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir=None,
    threads: int = 1,
    params: dict[str, np.ndarray] | None = None,
    log_every: int = 0,
):
    """Train on the song-level training split; returns (params, per-step LossReports, split)."""
    train_bars, val_bars = split_by_song(bars, train_cfg.validation_fraction, train_cfg.seed)
    corpus = Corpus(train_bars)
    if params is None:
        params = init_params(model_cfg, np.random.default_rng([train_cfg.seed, 0xC0FFEE]))
    optimizer = Adam(params, train_cfg)
    out_dir = Path(out_dir) if out_dir is not None else None
    tlog = TrainingLog(out_dir / "train_log.csv") if out_dir is not None else None
    history: list[LossReport] = []

    def make(step):
        return build_pair_batch(train_cfg.variant, corpus, train_cfg.seed, step, train_cfg.batch_size)

    window = max(2, 2 * threads)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool_exec:
        pending = {}
        for step in range(train_cfg.steps):
            for ahead in range(step, min(step + window, train_cfg.steps)):
                if ahead not in pending:
                    pending[ahead] = pool_exec.submit(make, ahead)
            batch = pending.pop(step).result()
            try:
                params, report = train_step(params, batch, model_cfg, train_cfg, optimizer, step)
            except NonFiniteLoss:
                if out_dir is not None:
                    save_checkpoint(params, model_cfg, out_dir / "nonfinite_dump.ckpt", train_cfg)
                raise
            history.append(report)
            if tlog is not None:
                tlog.append(step, report)
            if log_every and step % log_every == 0:
                log.info("step %d total %.4f mlm_acc %.3f ntxent_acc %.3f",
                         step, report.total, report.mlm_accuracy, report.ntxent_accuracy)
    return params, history, (train_bars, val_bars)


def evaluate(
    params,
    bars: list[BarTokens],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seed: int = 12345,
    repeats: int = 2,
) -> dict[str, float]:
    """Training-style MLM and NT-Xent accuracy over ``bars``.

    Dropout is off except for the dropout variant's contrastive pass, whose
    positive pair would otherwise be two identical embeddings.
    """
    if not bars:
        return {"mlm_acc": float("nan"), "ntxent_acc": float("nan")}
    corpus = Corpus(bars)
    N = train_cfg.batch_size
    correct = total = 0
    ntx_hits = []
    for r in range(repeats):
        order = np.random.default_rng([seed, r]).permutation(len(bars))
        for start in range(0, len(order), N):
            idx = order[start : start + N]
            mask_rng = step_rng(seed, r * 100_000 + start, _MASK)
            views = [mlm_mask(bars[i].ids, mask_rng) for i in idx]
            ids, tgt = pack_batch([v.input_ids for v in views], model_cfg, [v.mlm_targets for v in views])
            out = forward(params, ids, model_cfg, compute_logits=True)
            sel = tgt != -100
            correct += int((out.logits.argmax(-1)[sel] == tgt[sel]).sum())
            total += int(sel.sum())
        if train_cfg.contrastive:
            for b, start in enumerate(range(0, len(order), N)):
                step = r * 100_000 + b
                anchors = [bars[i] for i in order[start : start + N]]
                if train_cfg.variant == "neighbor":
                    anchors = [a for a in anchors if len(corpus.index[a.song_id]) >= 2]
                if len(anchors) < 2:
                    continue
                batch = pair_views(
                    train_cfg.variant, anchors, corpus.index, step_rng(seed, step, _MASK), step_rng(seed, step, _PARTNER)
                )
                drop = train_cfg.variant == "dropout"
                report, _ = loss_and_grads(params, batch, model_cfg, train_cfg, seed, step, dropout_on=drop, need_grads=False)
                ntx_hits.append((report.ntxent_accuracy, len(anchors)))
    ntx = float("nan")
    if ntx_hits:
        ntx = sum(a * n for a, n in ntx_hits) / sum(n for _, n in ntx_hits)
    return {"mlm_acc": correct / max(total, 1), "ntxent_acc": ntx}


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"BARBERT\x00"
FORMAT_VERSION = 1
_DIGEST = 32


def save_checkpoint(params, model_cfg: ModelConfig, path, train_cfg: TrainConfig | None = None) -> None:
    """Container: magic, u32 version, u32 header length, JSON header, f64 LE data, sha256."""
    shapes = param_shapes(model_cfg)
    header = {
        "model": model_cfg.to_dict(),
        "train": asdict(train_cfg) if train_cfg is not None else None,
        "dtype": "<f8",
        "params": [[name, list(shape)] for name, shape in shapes.items()],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(head)), head]
    for name, shape in shapes.items():
        arr = np.asarray(params[name], dtype="<f8")
        if arr.shape != shape:
            raise ValueError(f"parameter {name} has shape {arr.shape}, config expects {shape}")
        chunks.append(arr.tobytes(order="C"))
    body = b"".join(chunks)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path, expected: ModelConfig | None = None):
    """Returns (params, ModelConfig, TrainConfig or None)."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 8 + _DIGEST or blob[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpoint(f"{path}: not a checkpoint or truncated header")
    version, head_len = struct.unpack("<II", blob[len(MAGIC) : len(MAGIC) + 8])
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpoint(f"{path}: checksum mismatch (truncated or damaged)")
    start = len(MAGIC) + 8
    try:
        header = json.loads(body[start : start + head_len])
        model_cfg = ModelConfig(**header["model"])
    except (ValueError, TypeError, KeyError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable header ({exc})") from exc
    train_cfg = None
    if header.get("train"):
        known = {f.name for f in fields(TrainConfig)}
        train_cfg = TrainConfig(**{k: v for k, v in header["train"].items() if k in known})
    shapes = param_shapes(model_cfg)
    stored = {name: tuple(shape) for name, shape in header["params"]}
    if stored != shapes:
        raise VersionMismatch(f"{path}: parameter shapes disagree with the stored model config")
    if expected is not None and expected != model_cfg:
        raise VersionMismatch(f"{path}: checkpoint config {model_cfg} differs from expected {expected}")
    offset = start + head_len
    params = {}
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        if offset + 8 * n > len(body):
            raise CorruptCheckpoint(f"{path}: data ends inside {name}")
        params[name] = np.frombuffer(body, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * n
    if offset != len(body):
        raise CorruptCheckpoint(f"{path}: {len(body) - offset} trailing bytes")
    return params, model_cfg, train_cfg
