"""Bidirectional transformer encoder in float64 numpy with an exact backward pass.

Post-LN BERT layout: token + learned position embeddings, embedding
layer norm, then ``num_layers`` blocks of multi-head self-attention and a
GELU feed-forward net, each wrapped in residual + layer norm. The MLM head
is dense + GELU + layer norm followed by a decoder tied to the musical rows
of the token embedding.

Dropout, when on, is applied to attention probabilities and to the
feed-forward output before its residual add.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from .remi import build_vocab
from .views import IGNORE

LN_EPS = 1e-12


class SequenceTooLong(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    hidden_size: int = 128
    num_heads: int = 4
    ffn_size: int = 512
    max_seq_len: int = 256
    dropout_rate: float = 0.1
    vocab_size: int = 560
    init_std: float = 0.02
    pooling: str = "mean"
    projection_head: bool = False  # linear map on pooled vectors before NT-Xent

    def __post_init__(self):
        if min(self.num_layers, self.hidden_size, self.num_heads, self.ffn_size, self.max_seq_len) <= 0:
            raise ValueError("model dimensions must be positive")
        if self.hidden_size % self.num_heads:
            raise ValueError("hidden_size must be divisible by num_heads")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.vocab_size != build_vocab().size:
            raise ValueError(f"vocab_size must be {build_vocab().size}")
        if self.pooling not in ("mean", "cls"):
            raise ValueError("pooling must be 'mean' or 'cls'")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    H, F, V = config.hidden_size, config.ffn_size, config.vocab_size
    shapes = {
        "tok_emb": (V, H),
        "pos_emb": (config.max_seq_len, H),
        "emb_ln_g": (H,),
        "emb_ln_b": (H,),
    }
    for i in range(config.num_layers):
        p = f"layer{i}."
        shapes.update(
            {
                p + "wq": (H, H), p + "bq": (H,),
                p + "wk": (H, H), p + "bk": (H,),
                p + "wv": (H, H), p + "bv": (H,),
                p + "wo": (H, H), p + "bo": (H,),
                p + "ln1_g": (H,), p + "ln1_b": (H,),
                p + "w1": (H, F), p + "b1": (F,),
                p + "w2": (F, H), p + "b2": (H,),
                p + "ln2_g": (H,), p + "ln2_b": (H,),
            }
        )
    shapes.update(
        {
            "head_w": (H, H),
            "head_b": (H,),
            "head_ln_g": (H,),
            "head_ln_b": (H,),
            "out_b": (build_vocab().musical_size,),
        }
    )
    if config.projection_head:
        shapes.update({"proj_w": (H, H), "proj_b": (H,)})
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.split(".")[-1]
        if leaf.endswith("_g"):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, config.init_std, size=shape)
    return params


# -- batching ---------------------------------------------------------------


def pack_batch(seqs, config: ModelConfig, targets=None, truncate: bool = True):
    """Prepend CLS, truncate to ``max_seq_len`` and right-pad with PAD.

    Returns ``(ids, aligned_targets)``; targets are IGNORE at CLS and pads.
    """
    vocab = build_vocab()
    limit = config.max_seq_len - 1
    lengths = [len(s) for s in seqs]
    if not truncate and any(n > limit for n in lengths):
        raise SequenceTooLong(f"sequence of {max(lengths)} tokens exceeds {limit}")
    T = 1 + min(max(lengths, default=0), limit)
    ids = np.full((len(seqs), T), vocab.pad, dtype=np.int64)
    ids[:, 0] = vocab.cls
    tgt = np.full((len(seqs), T), IGNORE, dtype=np.int64)
    for i, s in enumerate(seqs):
        n = min(len(s), limit)
        ids[i, 1 : 1 + n] = np.asarray(s[:n], dtype=np.int64)
        if targets is not None:
            tgt[i, 1 : 1 + n] = np.asarray(targets[i][:n], dtype=np.int64)
    return ids, (tgt if targets is not None else None)


# -- primitives -------------------------------------------------------------


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    y = xc * inv
    return y * g + b, (y, inv)


def _layer_norm_back(dout, g, cache):
    y, inv = cache
    dy = dout * g
    dx = inv * (dy - dy.mean(axis=-1, keepdims=True) - y * (dy * y).mean(axis=-1, keepdims=True))
    return dx, (dout * y).reshape(-1, y.shape[-1]).sum(0), dout.reshape(-1, y.shape[-1]).sum(0)


def _dropout_mask(rng, shape, rate):
    return (rng.random(shape) >= rate) / (1.0 - rate)


@dataclass
class ForwardOutput:
    hidden: list[np.ndarray]
    logits: np.ndarray | None
    valid: np.ndarray  # (B, T) bool, False on PAD
    attention: list[np.ndarray] = field(default_factory=list)
    cache: dict | None = None


def forward(
    params: dict[str, np.ndarray],
    ids: np.ndarray,
    config: ModelConfig,
    dropout_on: bool = False,
    rng: np.random.Generator | None = None,
    compute_logits: bool = True,
    keep_cache: bool = False,
) -> ForwardOutput:
    """Run the encoder on a packed (B, T) id batch.

    Returns hidden states for layers 0..L and, if requested, logits over the
    musical vocabulary at every position.
    """
    vocab = build_vocab()
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ValueError("ids must be a (batch, time) array")
    B, T = ids.shape
    if T > config.max_seq_len:
        raise SequenceTooLong(f"{T} positions exceed max_seq_len {config.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ValueError("token id outside vocabulary")
    rate = config.dropout_rate if dropout_on else 0.0
    if rate > 0 and rng is None:
        raise ValueError("dropout needs an rng")
    nh, dh, H = config.num_heads, config.head_dim, config.hidden_size

    valid = ids != vocab.pad
    cache: dict = {"ids": ids, "valid": valid, "layers": []}

    e = params["tok_emb"][ids] + params["pos_emb"][:T][None]
    h, ln = _layer_norm(e, params["emb_ln_g"], params["emb_ln_b"])
    cache["emb_ln"] = ln
    hidden = [h]
    attentions = []
    scale = 1.0 / np.sqrt(dh)

    for i in range(config.num_layers):
        p = f"layer{i}."
        x = h

        def heads(t):
            return t.reshape(B, T, nh, dh).transpose(0, 2, 1, 3)

        q = heads(x @ params[p + "wq"] + params[p + "bq"])
        k = heads(x @ params[p + "wk"] + params[p + "bk"])
        v = heads(x @ params[p + "wv"] + params[p + "bv"])
        probs = _kernels.masked_softmax(q @ k.transpose(0, 1, 3, 2), valid, scale)
        attn_mask = _dropout_mask(rng, probs.shape, rate) if rate > 0 else None
        probs_d = probs * attn_mask if attn_mask is not None else probs
        ctx = (probs_d @ v).transpose(0, 2, 1, 3).reshape(B, T, H)
        o = ctx @ params[p + "wo"] + params[p + "bo"]
        h1, ln1 = _layer_norm(x + o, params[p + "ln1_g"], params[p + "ln1_b"])
        f_pre = h1 @ params[p + "w1"] + params[p + "b1"]
        # exact erf GELU; phi (the normal CDF) is kept for backward
        f, f_phi = _kernels.gelu(f_pre)
        g = f @ params[p + "w2"] + params[p + "b2"]
        ffn_mask = _dropout_mask(rng, g.shape, rate) if rate > 0 else None
        g_d = g * ffn_mask if ffn_mask is not None else g
        h, ln2 = _layer_norm(h1 + g_d, params[p + "ln2_g"], params[p + "ln2_b"])
        hidden.append(h)
        attentions.append(probs)
        if keep_cache:
            cache["layers"].append(
                dict(x=x, q=q, k=k, v=v, probs=probs, attn_mask=attn_mask, probs_d=probs_d, ctx=ctx,
                     ln1=ln1, h1=h1, f_pre=f_pre, f=f, f_phi=f_phi, ffn_mask=ffn_mask, ln2=ln2)
            )

    logits = None
    if compute_logits:
        t_pre = h @ params["head_w"] + params["head_b"]
        t, t_phi = _kernels.gelu(t_pre)
        u, ln_h = _layer_norm(t, params["head_ln_g"], params["head_ln_b"])
        logits = u @ params["tok_emb"][: vocab.musical_size].T + params["out_b"]
        if keep_cache:
            cache.update(t_pre=t_pre, t_phi=t_phi, u=u, ln_h=ln_h)

    return ForwardOutput(hidden, logits, valid, attentions, cache if keep_cache else None)


def backward(
    params: dict[str, np.ndarray],
    out: ForwardOutput,
    config: ModelConfig,
    d_logits: np.ndarray | None = None,
    d_last: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its gradient w.r.t. logits and/or the last hidden layer."""
    cache = out.cache
    if cache is None:
        raise ValueError("forward must be run with keep_cache=True")
    vocab = build_vocab()
    M = vocab.musical_size
    nh, dh, H = config.num_heads, config.head_dim, config.hidden_size
    ids = cache["ids"]
    B, T = ids.shape
    grads = {name: np.zeros_like(value) for name, value in params.items()}

    dh_ = np.zeros((B, T, H)) if d_last is None else np.array(d_last, dtype=np.float64)
    if d_logits is not None:
        if out.logits is None:
            raise ValueError("logits were not computed in forward")
        u = cache["u"].reshape(-1, H)
        dl = d_logits.reshape(-1, M)
        # MLM gradients touch only the selected positions; skip the zero rows
        rows = np.flatnonzero(np.any(dl != 0, axis=1))
        dl = dl[rows]
        grads["out_b"] += dl.sum(0)
        grads["tok_emb"][:M] += dl.T @ u[rows]
        du = np.zeros((B * T, H))
        du[rows] = dl @ params["tok_emb"][:M]
        du = du.reshape(B, T, H)
        dt, grads["head_ln_g"], grads["head_ln_b"] = _layer_norm_back(du, params["head_ln_g"], cache["ln_h"])
        dt_pre = _kernels.gelu_backward(dt, cache["t_pre"], cache["t_phi"])
        grads["head_w"] += out.hidden[-1].reshape(-1, H).T @ dt_pre.reshape(-1, H)
        grads["head_b"] += dt_pre.reshape(-1, H).sum(0)
        dh_ = dh_ + dt_pre @ params["head_w"].T

    scale = 1.0 / np.sqrt(dh)
    for i in reversed(range(config.num_layers)):
        p = f"layer{i}."
        c = cache["layers"][i]
        # second residual block
        dsum2, grads[p + "ln2_g"], grads[p + "ln2_b"] = _layer_norm_back(dh_, params[p + "ln2_g"], c["ln2"])
        dg = dsum2 * c["ffn_mask"] if c["ffn_mask"] is not None else dsum2
        grads[p + "w2"] += c["f"].reshape(-1, config.ffn_size).T @ dg.reshape(-1, H)
        grads[p + "b2"] += dg.reshape(-1, H).sum(0)
        df_pre = _kernels.gelu_backward(dg @ params[p + "w2"].T, c["f_pre"], c["f_phi"])
        grads[p + "w1"] += c["h1"].reshape(-1, H).T @ df_pre.reshape(-1, config.ffn_size)
        grads[p + "b1"] += df_pre.reshape(-1, config.ffn_size).sum(0)
        dh1 = dsum2 + df_pre @ params[p + "w1"].T
        # first residual block
        dsum1, grads[p + "ln1_g"], grads[p + "ln1_b"] = _layer_norm_back(dh1, params[p + "ln1_g"], c["ln1"])
        do = dsum1
        grads[p + "wo"] += c["ctx"].reshape(-1, H).T @ do.reshape(-1, H)
        grads[p + "bo"] += do.reshape(-1, H).sum(0)
        dctx = (do @ params[p + "wo"].T).reshape(B, T, nh, dh).transpose(0, 2, 1, 3)
        dprobs_d = dctx @ c["v"].transpose(0, 1, 3, 2)
        dv = c["probs_d"].transpose(0, 1, 3, 2) @ dctx
        dprobs = dprobs_d * c["attn_mask"] if c["attn_mask"] is not None else dprobs_d
        probs = c["probs"]
        dscores = _kernels.softmax_backward(probs, dprobs, scale)
        dq = dscores @ c["k"]
        dk = dscores.transpose(0, 1, 3, 2) @ c["q"]

        def merge(t):
            return t.transpose(0, 2, 1, 3).reshape(B * T, H)

        x2 = c["x"].reshape(-1, H)
        dx = dsum1.copy()
        for name, d in (("q", dq), ("k", dk), ("v", dv)):
            d2 = merge(d)
            grads[p + "w" + name] += x2.T @ d2
            grads[p + "b" + name] += d2.sum(0)
            dx += (d2 @ params[p + "w" + name].T).reshape(B, T, H)
        dh_ = dx

    de, grads["emb_ln_g"], grads["emb_ln_b"] = _layer_norm_back(dh_, params["emb_ln_g"], cache["emb_ln"])
    np.add.at(grads["tok_emb"], ids.ravel(), de.reshape(-1, H))
    grads["pos_emb"][:T] += de.sum(0)
    return grads


# -- pooling ----------------------------------------------------------------


def pool(hidden: np.ndarray, valid: np.ndarray, mode: str = "mean") -> np.ndarray:
    """Bar embeddings from one layer's (B, T, H) states.

    Mean mode averages over non-PAD positions (zero vector if there are
    none); cls mode takes position 0.
    """
    if mode == "cls":
        return hidden[:, 0, :].copy()
    if mode != "mean":
        raise ValueError(f"unknown pooling mode {mode!r}")
    w = valid.astype(np.float64)
    counts = w.sum(axis=1, keepdims=True)
    return (hidden * w[:, :, None]).sum(axis=1) / np.maximum(counts, 1.0)


def pool_backward(d_pooled: np.ndarray, valid: np.ndarray, T: int, mode: str = "mean") -> np.ndarray:
    B, H = d_pooled.shape
    if mode == "cls":
        d = np.zeros((B, T, H))
        d[:, 0, :] = d_pooled
        return d
    w = valid.astype(np.float64)
    counts = np.maximum(w.sum(axis=1, keepdims=True), 1.0)
    return (w / counts)[:, :, None] * d_pooled[:, None, :]


def project(params, z: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Contrastive vectors from pooled embeddings; identity without a projection head."""
    if not config.projection_head:
        return z
    return z @ params["proj_w"] + params["proj_b"]


def project_backward(params, z: np.ndarray, dz: np.ndarray, config: ModelConfig, grads: dict) -> np.ndarray:
    """Accumulates projection-head gradients into ``grads``; returns d loss / d pooled."""
    if not config.projection_head:
        return dz
    grads["proj_w"] += z.T @ dz
    grads["proj_b"] += dz.sum(0)
    return dz @ params["proj_w"].T


def embed_bars(
    params: dict[str, np.ndarray],
    seqs,
    config: ModelConfig,
    layers=None,
    batch_size: int = 64,
    mode: str | None = None,
) -> np.ndarray:
    """Pooled dropout-off embeddings, shape (n_layers_requested, n_bars, H)."""
    mode = mode or config.pooling
    layers = list(range(config.num_layers + 1)) if layers is None else list(layers)
    out = np.zeros((len(layers), len(seqs), config.hidden_size))
    # sort by length so padding stays small; results are placed back by index
    order = sorted(range(len(seqs)), key=lambda i: (len(seqs[i]), i))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        ids, _ = pack_batch([seqs[i] for i in idx], config)
        res = forward(params, ids, config, compute_logits=False)
        for j, layer in enumerate(layers):
            out[j, idx] = pool(res.hidden[layer], res.valid, mode)
    return out
