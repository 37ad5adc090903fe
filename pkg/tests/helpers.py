"""Shared oracles for the test suite: finite differences and a joint loss."""

import numpy as np

from barbert.encoder import backward, forward, pack_batch, pool, pool_backward, project, project_backward
from barbert.objectives import mlm_loss_and_grad, nt_xent_and_grad


def joint_loss(params, cfg, batch, w_mlm=1.0, w_ntx=0.0, tau=0.1, dropout_seed=None, need_grads=True):
    """w_mlm * MLM(view a) + w_ntx * NT-Xent(pooled a, pooled b), with grads.

    ``batch`` is (seqs_a, targets_a, seqs_b). Dropout masks are redrawn from
    the same seeds on every call so the loss is a deterministic function.
    """
    seqs_a, tgt_a, seqs_b = batch
    drop = dropout_seed is not None
    rng_a = np.random.default_rng([dropout_seed, 0]) if drop else None
    rng_b = np.random.default_rng([dropout_seed, 1]) if drop else None
    ids_a, t_a = pack_batch(seqs_a, cfg, tgt_a)
    out_a = forward(params, ids_a, cfg, drop, rng_a, keep_cache=need_grads)
    loss = 0.0
    d_logits = d_last_a = None
    if w_mlm:
        mlm, _, d_logits = mlm_loss_and_grad(out_a.logits, t_a)
        loss += w_mlm * mlm
        d_logits = w_mlm * d_logits
    grads_b = None
    if w_ntx:
        ids_b, _ = pack_batch(seqs_b, cfg)
        out_b = forward(params, ids_b, cfg, drop, rng_b, compute_logits=False, keep_cache=need_grads)
        pooled = np.concatenate([pool(out_a.hidden[-1], out_a.valid), pool(out_b.hidden[-1], out_b.valid)])
        ntx, _, dz = nt_xent_and_grad(project(params, pooled, cfg), tau)
        loss += w_ntx * ntx
        n = len(seqs_a)
        head = {k: np.zeros_like(params[k]) for k in ("proj_w", "proj_b") if k in params}
        dz = project_backward(params, pooled, w_ntx * dz, cfg, head)
        d_last_a = pool_backward(dz[:n], out_a.valid, ids_a.shape[1])
        if need_grads:
            grads_b = backward(params, out_b, cfg, d_last=pool_backward(dz[n:], out_b.valid, ids_b.shape[1]))
    if not need_grads:
        return loss, None
    grads = backward(params, out_a, cfg, d_logits=d_logits, d_last=d_last_a)
    if grads_b is not None:
        for k in grads:
            grads[k] += grads_b[k]
        for k, g in head.items():
            grads[k] += g
    return loss, grads


def sample_indices(shape, n, rng):
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(n, size), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def gradcheck(params, loss_fn, analytic, n_per_tensor=12, h=1e-3, rng=None, extra=None, floor=1e-7):
    """Per-tensor relative error between analytic and central-difference gradients.

    Error for a tensor is ||a - n|| / max(||a|| + ||n||, floor) over the
    sampled entries. The floor matters for tensors whose true gradient is
    zero (the attention key bias shifts every score in a row equally), where
    both sides are rounding noise of order 1e-13. ``extra`` maps tensor names
    to additional indices that must be checked (for example embedding rows
    actually used).
    """
    rng = rng or np.random.default_rng(0)
    errors = {}
    for name, value in params.items():
        idx = sample_indices(value.shape, n_per_tensor, rng) + list((extra or {}).get(name, []))
        a, num = [], []
        for ix in idx:
            old = value[ix]
            value[ix] = old + h
            plus = loss_fn()
            value[ix] = old - h
            minus = loss_fn()
            value[ix] = old
            num.append((plus - minus) / (2 * h))
            a.append(analytic[name][ix])
        a, num = np.array(a), np.array(num)
        errors[name] = float(np.linalg.norm(a - num) / max(np.linalg.norm(a) + np.linalg.norm(num), floor))
    return errors


def random_batch(rng, n=3, min_len=4, max_len=12, vocab=556):
    """Random sequences, MLM targets on about a third of positions, and random partners."""
    seqs_a, tgts, seqs_b = [], [], []
    for _ in range(n):
        L = int(rng.integers(min_len, max_len + 1))
        ids = rng.integers(0, vocab, size=L)
        tgt = np.full(L, -100)
        sel = rng.random(L) < 0.35
        sel[0] = True
        tgt[sel] = ids[sel]
        inp = ids.copy()
        inp[sel] = 557  # MASK
        seqs_a.append(inp)
        tgts.append(tgt)
        seqs_b.append(rng.integers(0, vocab, size=int(rng.integers(min_len, max_len + 1))))
    return seqs_a, tgts, seqs_b
