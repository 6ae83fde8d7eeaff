"""A one-block, one-head causal transformer with an analytic backward pass.

Layout, for tokens x of length T::

    X  = embed[x] + pos_embed[:T]
    Q, K, V = X @ W_Q, X @ W_K, X @ W_V        (W = w_qkv + scale * A @ B)
    H  = X + softmax(mask(Q K^T / sqrt(d_k))) V @ attn_out
    H2 = H + tanh(H @ ffn_w1) @ ffn_w2
    p  = softmax(H2 @ out_proj)

No biases, no normalisation, no dropout.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .adapter import Adapter, AdaptedWeights, effective_weight
from .extraction import StackedAttentionWeights

IGNORE = -1
BASE_BLOCKS = ("embed", "pos_embed", "w_qkv", "attn_out", "ffn_w1", "ffn_w2", "out_proj")
ADAPTER_BLOCKS = ("adapter_a", "adapter_b")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelDims:
    vocab_size: int = 16
    d_model: int = 32
    d_k: int = 64
    seq_len: int = 16
    d_ff: int = 64

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ModelError(f"{f.name} must be positive")


@dataclass
class ToyTransformer:
    dims: ModelDims
    embed: np.ndarray
    pos_embed: np.ndarray
    w_qkv: np.ndarray
    attn_out: np.ndarray
    ffn_w1: np.ndarray
    ffn_w2: np.ndarray
    out_proj: np.ndarray
    adapter: Adapter | None = None

    def __post_init__(self):
        d = self.dims
        expected = {
            "embed": (d.vocab_size, d.d_model),
            "pos_embed": (d.seq_len, d.d_model),
            "w_qkv": (3 * d.d_model, d.d_k),
            "attn_out": (d.d_k, d.d_model),
            "ffn_w1": (d.d_model, d.d_ff),
            "ffn_w2": (d.d_ff, d.d_model),
            "out_proj": (d.d_model, d.vocab_size),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ModelError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.adapter is not None and self.adapter.shape != expected["w_qkv"]:
            raise ModelError(f"adapter shape {self.adapter.shape} does not fit w_qkv {expected['w_qkv']}")

    @property
    def attention(self) -> AdaptedWeights | StackedAttentionWeights:
        base = StackedAttentionWeights.from_stacked(self.w_qkv)
        return base if self.adapter is None else AdaptedWeights(base, self.adapter)

    def attention_weight(self) -> np.ndarray:
        if self.adapter is None:
            return self.w_qkv
        return effective_weight(self.attention)

    def parameters(self) -> dict[str, np.ndarray]:
        """Name -> parameter array; the arrays are live, not copies."""
        params = {name: getattr(self, name) for name in BASE_BLOCKS}
        if self.adapter is not None:
            params["adapter_a"] = self.adapter.a
            params["adapter_b"] = self.adapter.b
        return params

    def copy(self) -> "ToyTransformer":
        kw = {name: getattr(self, name).copy() for name in BASE_BLOCKS}
        return ToyTransformer(dims=self.dims, adapter=None if self.adapter is None else self.adapter.copy(), **kw)

    def with_adapter(self, adapter: Adapter | None) -> "ToyTransformer":
        """Copy of the base weights carrying ``adapter``."""
        m = self.copy()
        m.adapter = adapter
        m.__post_init__()
        return m


def init_model(dims: ModelDims, seed: int) -> ToyTransformer:
    rng = np.random.default_rng(seed)
    d = dims

    def normal(shape, std):
        return rng.normal(0.0, std, size=shape)

    return ToyTransformer(
        dims=d,
        embed=normal((d.vocab_size, d.d_model), 1.0),
        pos_embed=normal((d.seq_len, d.d_model), 1.0),
        w_qkv=normal((3 * d.d_model, d.d_k), 1.0 / np.sqrt(d.d_model)),
        attn_out=normal((d.d_k, d.d_model), 1.0 / np.sqrt(d.d_k)),
        ffn_w1=normal((d.d_model, d.d_ff), 1.0 / np.sqrt(d.d_model)),
        ffn_w2=normal((d.d_ff, d.d_model), 1.0 / np.sqrt(d.d_ff)),
        out_proj=normal((d.d_model, d.vocab_size), 1.0 / np.sqrt(d.d_model)),
    )


def split_heads(w) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split a stacked (3*d_model, d_k) weight into W_Q, W_K, W_V views."""
    w = np.asarray(w)
    if w.ndim != 2 or w.shape[0] % 3:
        raise ModelError(f"cannot split {w.shape} into three equal row blocks")
    d = w.shape[0] // 3
    return w[:d], w[d : 2 * d], w[2 * d :]


def _softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


@dataclass
class ForwardCache:
    model_id: int
    dims: ModelDims
    tokens: np.ndarray
    x: np.ndarray
    w: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray
    z: np.ndarray
    h: np.ndarray
    g: np.ndarray
    h2: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    extra: dict = field(default_factory=dict)


def forward(model: ToyTransformer, tokens) -> tuple[np.ndarray, ForwardCache]:
    """Next-token probabilities for a (T,) or (B, T) integer token array."""
    tok = np.asarray(tokens)
    if tok.ndim == 1:
        tok = tok[None, :]
    if tok.ndim != 2 or not np.issubdtype(tok.dtype, np.integer):
        raise ModelError("tokens must be a 1-D or 2-D integer array")
    d = model.dims
    bsz, t = tok.shape
    if t > d.seq_len:
        raise ModelError(f"sequence length {t} exceeds model seq_len {d.seq_len}")
    bad = np.argwhere((tok < 0) | (tok >= d.vocab_size))
    if bad.size:
        b, pos = bad[0]
        raise ModelError(f"token {tok[b, pos]} at position {pos} (sequence {b}) outside vocab [0, {d.vocab_size})")

    x = model.embed[tok] + model.pos_embed[:t]
    w = model.attention_weight()
    wq, wk, wv = split_heads(w)
    q, k, v = x @ wq, x @ wk, x @ wv
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(d.d_k)
    causal = np.tril(np.ones((t, t), dtype=bool))
    scores = np.where(causal, scores, -np.inf)
    attn = _softmax(scores)
    z = attn @ v
    h = x + z @ model.attn_out
    g = np.tanh(h @ model.ffn_w1)
    h2 = h + g @ model.ffn_w2
    logits = h2 @ model.out_proj
    probs = _softmax(logits)
    cache = ForwardCache(id(model), d, tok, x, w, q, k, v, attn, z, h, g, h2, logits, probs)
    return probs, cache


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean cross-entropy over positions whose target is not IGNORE."""
    mask = targets != IGNORE
    n = int(np.sum(mask))
    if n == 0:
        raise ModelError("no labelled positions")
    z = logits - np.max(logits, axis=-1, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, np.where(mask, targets, 0)[..., None], axis=-1)[..., 0]
    return float(-np.sum(picked[mask]) / n)


def backward(model: ToyTransformer, cache: ForwardCache, targets, trainable=None):
    """Loss and gradients for the blocks named in ``trainable``.

    ``targets`` has the token array's shape, with IGNORE marking unscored
    positions.  The returned dict holds every parameter block; blocks that are
    not trained (including a frozen adapter B) map to None.
    """
    if cache.model_id != id(model) or cache.dims != model.dims:
        raise ModelError("forward cache does not belong to this model")
    tgt = np.asarray(targets)
    if tgt.ndim == 1:
        tgt = tgt[None, :]
    if tgt.shape != cache.tokens.shape:
        raise ModelError(f"targets shape {tgt.shape} does not match tokens {cache.tokens.shape}")
    if np.any((tgt != IGNORE) & ((tgt < 0) | (tgt >= model.dims.vocab_size))):
        raise ModelError("target token outside vocabulary")

    params = model.parameters()
    if trainable is None:
        trainable = default_trainable(model)
    trainable = set(trainable)
    unknown = trainable - set(params)
    if unknown:
        raise ModelError(f"unknown parameter blocks {sorted(unknown)}")
    if model.adapter is not None and model.adapter.b_frozen:
        trainable.discard("adapter_b")

    loss = cross_entropy(cache.logits, tgt)
    d = model.dims
    mask = tgt != IGNORE
    n = int(np.sum(mask))
    onehot = np.zeros_like(cache.probs)
    bi, ti = np.nonzero(mask)
    onehot[bi, ti, tgt[bi, ti]] = 1.0
    dlogits = (cache.probs - onehot) * mask[..., None] / n

    grads: dict[str, np.ndarray | None] = {name: None for name in params}

    def flat(a):
        return a.reshape(-1, a.shape[-1])

    if "out_proj" in trainable:
        grads["out_proj"] = flat(cache.h2).T @ flat(dlogits)
    dh = dlogits @ model.out_proj.T
    if "ffn_w2" in trainable:
        grads["ffn_w2"] = flat(cache.g).T @ flat(dh)
    du = (dh @ model.ffn_w2.T) * (1.0 - cache.g * cache.g)
    if "ffn_w1" in trainable:
        grads["ffn_w1"] = flat(cache.h).T @ flat(du)
    dh = dh + du @ model.ffn_w1.T
    if "attn_out" in trainable:
        grads["attn_out"] = flat(cache.z).T @ flat(dh)
    dz = dh @ model.attn_out.T
    dx = dh.copy()

    dattn = dz @ cache.v.transpose(0, 2, 1)
    dv = cache.attn.transpose(0, 2, 1) @ dz
    dscores = cache.attn * (dattn - np.sum(dattn * cache.attn, axis=-1, keepdims=True))
    dscores /= np.sqrt(d.d_k)
    dq = dscores @ cache.k
    dk = dscores.transpose(0, 2, 1) @ cache.q

    wq, wk, wv = split_heads(cache.w)
    needs_w = trainable & {"w_qkv", "adapter_a", "adapter_b"}
    if needs_w:
        xf = flat(cache.x)
        dw = np.vstack([xf.T @ flat(dq), xf.T @ flat(dk), xf.T @ flat(dv)])
        if "w_qkv" in trainable:
            grads["w_qkv"] = dw
        ad = model.adapter
        if "adapter_a" in trainable:
            grads["adapter_a"] = ad.scale * (dw @ ad.b.T)
        if "adapter_b" in trainable:
            grads["adapter_b"] = ad.scale * (ad.a.T @ dw)

    if trainable & {"embed", "pos_embed"}:
        dx = dx + dq @ wq.T + dk @ wk.T + dv @ wv.T
        if "embed" in trainable:
            ge = np.zeros_like(model.embed)
            np.add.at(ge, cache.tokens.ravel(), flat(dx))
            grads["embed"] = ge
        if "pos_embed" in trainable:
            gp = np.zeros_like(model.pos_embed)
            gp[: dx.shape[1]] = dx.sum(axis=0)
            grads["pos_embed"] = gp
    return loss, grads


def default_trainable(model: ToyTransformer) -> tuple[str, ...]:
    """Adapter blocks when an adapter is attached, otherwise every base block."""
    if model.adapter is None:
        return BASE_BLOCKS
    if model.adapter.b_frozen:
        return ("adapter_a",)
    return ADAPTER_BLOCKS


def loss_and_accuracy(model: ToyTransformer, tokens, targets) -> tuple[float, float]:
    probs, cache = forward(model, tokens)
    tgt = np.asarray(targets)
    if tgt.ndim == 1:
        tgt = tgt[None, :]
    mask = tgt != IGNORE
    pred = np.argmax(cache.logits, axis=-1)
    acc = float(np.sum((pred == tgt) & mask) / np.sum(mask))
    return cross_entropy(cache.logits, tgt), acc
