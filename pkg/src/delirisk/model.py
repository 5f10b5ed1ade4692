"""Small transformer encoder with masked-token and classification heads.

Implemented directly on numpy with hand-written backward passes so that
training is bitwise reproducible, layer freezing is exact, and analytic
gradients can be verified against central finite differences. Post-norm
blocks, GELU feed-forward, learned positional embeddings, untied output
matrix for the masked-token head, direct sigmoid readout of position 0
for classification.

Padding contract: attention weights to [PAD] keys are exactly zero and
trailing all-pad columns are sliced off before any arithmetic, so
appending [PAD] tokens never changes an output bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .report import MASK, PAD

LN_EPS = 1e-5
_GELU_C = 0.7978845608028654  # sqrt(2/pi)


class TrainingAbort(Exception):
    """Non-finite loss or gradient; the trial must stop loudly."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_seq_len: int = 512
    num_layers: int = 4
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: Optional[int] = None
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.hidden_dim)
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(f"num_heads {self.num_heads} must divide hidden_dim {self.hidden_dim}")
        if self.max_seq_len < 8:
            raise ValueError("max_seq_len must be >= 8")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ModelConfig":
        return ModelConfig(**json.loads(text))


@dataclass(frozen=True)
class FreezeSpec:
    """Bottom x layers frozen (embeddings freeze with layer 0), top y trained."""
    x_frozen: int
    y_trainable: int

    def validate(self, num_layers: int) -> None:
        if self.x_frozen < 0 or self.y_trainable < 1:
            raise ValueError("need x_frozen >= 0 and y_trainable >= 1")
        if self.x_frozen + self.y_trainable != num_layers:
            raise ValueError(
                f"x_frozen + y_trainable must equal num_layers "
                f"({self.x_frozen}+{self.y_trainable} != {num_layers})")


@dataclass
class EncoderModel:
    config: ModelConfig
    params: dict
    rng_seed: int

    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    def astype(self, dtype) -> "EncoderModel":
        return EncoderModel(self.config,
                            {k: v.astype(dtype) for k, v in self.params.items()},
                            self.rng_seed)

    def copy(self) -> "EncoderModel":
        return EncoderModel(self.config, {k: v.copy() for k, v in self.params.items()},
                            self.rng_seed)

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())


def _param_layout(cfg: ModelConfig) -> list:
    """Fixed (name, shape, kind) creation order; kind picks the initializer."""
    d, f, v, s = cfg.hidden_dim, cfg.ffn_dim, cfg.vocab_size, cfg.max_seq_len
    layout = [
        ("tok_emb", (v, d), "embed"),
        ("pos_emb", (s, d), "embed"),
        ("emb_ln_g", (d,), "ones"),
        ("emb_ln_b", (d,), "zeros"),
    ]
    for i in range(cfg.num_layers):
        # no key bias: a per-key constant shift cancels inside the softmax,
        # so the parameter would be exactly inert
        layout += [
            (f"L{i}.attn_wq", (d, d), "xavier"), (f"L{i}.attn_bq", (d,), "zeros"),
            (f"L{i}.attn_wk", (d, d), "xavier"),
            (f"L{i}.attn_wv", (d, d), "xavier"), (f"L{i}.attn_bv", (d,), "zeros"),
            (f"L{i}.attn_wo", (d, d), "xavier"), (f"L{i}.attn_bo", (d,), "zeros"),
            (f"L{i}.ln1_g", (d,), "ones"), (f"L{i}.ln1_b", (d,), "zeros"),
            (f"L{i}.ffn_w1", (d, f), "xavier"), (f"L{i}.ffn_b1", (f,), "zeros"),
            (f"L{i}.ffn_w2", (f, d), "xavier"), (f"L{i}.ffn_b2", (d,), "zeros"),
            (f"L{i}.ln2_g", (d,), "ones"), (f"L{i}.ln2_b", (d,), "zeros"),
        ]
    layout += [
        ("mlm_w", (d, v), "xavier"), ("mlm_b", (v,), "zeros"),
        ("cls_w", (d, 1), "xavier"), ("cls_b", (1,), "zeros"),
    ]
    return layout


def init_model(cfg: ModelConfig, seed: int, dtype=np.float32) -> EncoderModel:
    """Seed-deterministic init: scaled uniform matrices, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, kind in _param_layout(cfg):
        if kind == "zeros":
            arr = np.zeros(shape)
        elif kind == "ones":
            arr = np.ones(shape)
        elif kind == "embed":
            arr = rng.uniform(-0.05, 0.05, size=shape)
        else:  # xavier
            fan_in, fan_out = shape[0], shape[-1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = arr.astype(dtype)
    return EncoderModel(config=cfg, params=params, rng_seed=seed)


def frozen_param_names(cfg: ModelConfig, freeze: FreezeSpec) -> set:
    freeze.validate(cfg.num_layers)
    names = set()
    if freeze.x_frozen >= 1:
        names.update(["tok_emb", "pos_emb", "emb_ln_g", "emb_ln_b"])
    for i in range(freeze.x_frozen):
        names.update(name for name, _, _ in _param_layout(cfg) if name.startswith(f"L{i}."))
    return names


def pad_batch(sequences) -> tuple:
    """Stack variable-length id sequences into (ids, mask) arrays."""
    n = len(sequences)
    t = max(len(s) for s in sequences)
    ids = np.full((n, t), PAD, dtype=np.int64)
    mask = np.zeros((n, t), dtype=bool)
    for i, s in enumerate(sequences):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _gelu(x):
    u = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def _layernorm_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = inv * (dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _dropout(x, rate, rng):
    if rate == 0.0 or rng is None:
        return x, None
    keep = (rng.random(x.shape) >= rate)
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    return x * keep * scale, (keep, scale)


def _dropout_backward(dy, cache):
    if cache is None:
        return dy
    keep, scale = cache
    return dy * keep * scale


def _split_heads(x, num_heads):
    b, t, d = x.shape
    return x.reshape(b, t, num_heads, d // num_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def encode(model: EncoderModel, ids, mask, train_rng=None):
    """Run the encoder; returns hidden states (B, T, d) and a backward cache.

    Trailing columns that are [PAD] in every row are sliced off first, so
    extra padding cannot perturb any bit of the output.
    """
    cfg, p = model.config, model.params
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if ids.max(initial=0) >= cfg.vocab_size:
        raise ValueError("token id out of vocabulary range")
    if ids.shape[1] > cfg.max_seq_len:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    last = np.flatnonzero(mask.any(axis=0))
    t_eff = int(last[-1]) + 1 if last.size else 1
    ids, mask = ids[:, :t_eff], mask[:, :t_eff]

    x = p["tok_emb"][ids] + p["pos_emb"][:t_eff][None, :, :]
    h, emb_ln_cache = _layernorm(x, p["emb_ln_g"], p["emb_ln_b"])
    h, emb_drop = _dropout(h, cfg.dropout_rate, train_rng)

    dh = cfg.hidden_dim // cfg.num_heads
    scale = np.asarray(1.0 / np.sqrt(dh), dtype=h.dtype)
    # additive mask: 0 at real keys, -inf at pads
    neg = np.zeros(mask.shape, dtype=h.dtype)
    neg[~mask] = -np.inf
    key_mask_add = neg[:, None, None, :]
    layer_caches = []
    for i in range(cfg.num_layers):
        L = f"L{i}."
        x_in = h
        hf = h.reshape(-1, cfg.hidden_dim)
        qkv = hf @ np.concatenate(
            [p[L + "attn_wq"], p[L + "attn_wk"], p[L + "attn_wv"]], axis=1)
        d = cfg.hidden_dim
        q = _split_heads((qkv[:, :d] + p[L + "attn_bq"]).reshape(h.shape), cfg.num_heads)
        k = _split_heads(qkv[:, d:2 * d].reshape(h.shape), cfg.num_heads)
        v = _split_heads((qkv[:, 2 * d:] + p[L + "attn_bv"]).reshape(h.shape), cfg.num_heads)
        scores = np.matmul(q, k.transpose(0, 1, 3, 2))
        scores *= scale
        scores += key_mask_add
        m = scores.max(axis=-1, keepdims=True)
        np.subtract(scores, np.where(np.isfinite(m), m, 0.0), out=scores)
        np.exp(scores, out=scores)
        denom = scores.sum(axis=-1, keepdims=True)
        np.divide(scores, np.where(denom == 0.0, 1.0, denom), out=scores)
        probs = scores
        ctx = _merge_heads(np.matmul(probs, v))
        attn_out = ctx @ p[L + "attn_wo"] + p[L + "attn_bo"]
        attn_out, attn_drop = _dropout(attn_out, cfg.dropout_rate, train_rng)
        h1, ln1_cache = _layernorm(x_in + attn_out, p[L + "ln1_g"], p[L + "ln1_b"])
        pre = h1 @ p[L + "ffn_w1"] + p[L + "ffn_b1"]
        act, tanh_cache = _gelu(pre)
        ffn_out = act @ p[L + "ffn_w2"] + p[L + "ffn_b2"]
        ffn_out, ffn_drop = _dropout(ffn_out, cfg.dropout_rate, train_rng)
        h2, ln2_cache = _layernorm(h1 + ffn_out, p[L + "ln2_g"], p[L + "ln2_b"])
        layer_caches.append(dict(x_in=x_in, q=q, k=k, v=v, probs=probs, ctx=ctx,
                                 ln1=ln1_cache, h1=h1, pre=pre, tanh=tanh_cache,
                                 act=act, ln2=ln2_cache,
                                 attn_drop=attn_drop, ffn_drop=ffn_drop))
        h = h2

    cache = dict(ids=ids, mask=mask, t_eff=t_eff, emb_ln=emb_ln_cache,
                 emb_drop=emb_drop, layers=layer_caches, scale=scale)
    return h, cache


def encode_backward(model: EncoderModel, cache, d_hidden) -> dict:
    """Backprop d loss / d hidden states into a gradient per parameter."""
    cfg, p = model.config, model.params
    grads = {}
    dh = d_hidden
    for i in reversed(range(cfg.num_layers)):
        L = f"L{i}."
        c = cache["layers"][i]
        d_sum2, dg2, db2 = _layernorm_backward(dh, p[L + "ln2_g"], c["ln2"])
        grads[L + "ln2_g"], grads[L + "ln2_b"] = dg2, db2
        d_ffn_out = _dropout_backward(d_sum2, c["ffn_drop"])
        b, t, _ = d_ffn_out.shape
        act2 = c["act"].reshape(b * t, -1)
        dff = d_ffn_out.reshape(b * t, -1)
        grads[L + "ffn_w2"] = act2.T @ dff
        grads[L + "ffn_b2"] = dff.sum(axis=0)
        dact = d_ffn_out @ p[L + "ffn_w2"].T
        dpre = dact * _gelu_grad(c["pre"], c["tanh"])
        h1f = c["h1"].reshape(b * t, -1)
        dpref = dpre.reshape(b * t, -1)
        grads[L + "ffn_w1"] = h1f.T @ dpref
        grads[L + "ffn_b1"] = dpref.sum(axis=0)
        dh1 = d_sum2 + dpre @ p[L + "ffn_w1"].T

        d_sum1, dg1, db1 = _layernorm_backward(dh1, p[L + "ln1_g"], c["ln1"])
        grads[L + "ln1_g"], grads[L + "ln1_b"] = dg1, db1
        d_attn_out = _dropout_backward(d_sum1, c["attn_drop"])
        ctx2 = c["ctx"].reshape(b * t, -1)
        dao = d_attn_out.reshape(b * t, -1)
        grads[L + "attn_wo"] = ctx2.T @ dao
        grads[L + "attn_bo"] = dao.sum(axis=0)
        dctx = _split_heads(d_attn_out @ p[L + "attn_wo"].T, cfg.num_heads)
        probs, q, k, v = c["probs"], c["q"], c["k"], c["v"]
        dprobs = np.matmul(dctx, v.transpose(0, 1, 3, 2))
        dv = np.matmul(probs.transpose(0, 1, 3, 2), dctx)
        dscores = (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * probs
        dscores = dscores * cache["scale"]
        dq = np.matmul(dscores, k)
        dk = np.matmul(dscores.transpose(0, 1, 3, 2), q)
        x_in = c["x_in"].reshape(b * t, -1)
        dqkv = np.concatenate([_merge_heads(dm).reshape(b * t, -1)
                               for dm in (dq, dk, dv)], axis=1)
        w_all = x_in.T @ dqkv
        d = cfg.hidden_dim
        grads[L + "attn_wq"] = w_all[:, :d]
        grads[L + "attn_wk"] = w_all[:, d:2 * d]
        grads[L + "attn_wv"] = w_all[:, 2 * d:]
        grads[L + "attn_bq"] = dqkv[:, :d].sum(axis=0)
        grads[L + "attn_bv"] = dqkv[:, 2 * d:].sum(axis=0)
        w_cat = np.concatenate([p[L + "attn_wq"], p[L + "attn_wk"], p[L + "attn_wv"]],
                               axis=1)
        dh = d_sum1 + (dqkv @ w_cat.T).reshape(b, t, -1)

    dh = _dropout_backward(dh, cache["emb_drop"])
    dx0, dg, db = _layernorm_backward(dh, p["emb_ln_g"], cache["emb_ln"])
    grads["emb_ln_g"], grads["emb_ln_b"] = dg, db
    ids_flat = cache["ids"].reshape(-1)
    dx0_flat = dx0.reshape(-1, cfg.hidden_dim)
    dtok = np.empty_like(p["tok_emb"])
    for j in range(cfg.hidden_dim):  # bincount is far faster than ufunc.at
        dtok[:, j] = np.bincount(ids_flat, weights=dx0_flat[:, j],
                                 minlength=cfg.vocab_size)
    grads["tok_emb"] = dtok
    dpos = np.zeros_like(p["pos_emb"])
    dpos[:cache["t_eff"]] = dx0.sum(axis=0)
    grads["pos_emb"] = dpos
    return grads


def forward_classify(model: EncoderModel, ids, mask):
    """Delirium probability from the position-0 representation, in (0, 1)."""
    h, _ = encode(model, ids, mask)
    z = h[:, 0, :] @ model.params["cls_w"][:, 0] + model.params["cls_b"][0]
    prob = _sigmoid(z.astype(np.float64))
    return np.clip(prob, 1e-12, 1.0 - 1e-12)


def _classify_logits(model, h):
    return h[:, 0, :] @ model.params["cls_w"][:, 0] + model.params["cls_b"][0]


def loss_classify(model: EncoderModel, ids, mask, labels) -> float:
    h, _ = encode(model, ids, mask)
    z = _classify_logits(model, h).astype(np.float64)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def loss_and_grads_classify(model: EncoderModel, ids, mask, labels, train_rng=None):
    h, cache = encode(model, ids, mask, train_rng=train_rng)
    p = model.params
    z = _classify_logits(model, h)
    z64 = z.astype(np.float64)
    y64 = np.asarray(labels, dtype=np.float64)
    loss = float(np.mean(np.logaddexp(0.0, z64) - y64 * z64))
    sig = _sigmoid(z)
    dz = ((sig - np.asarray(labels, dtype=z.dtype)) / z.shape[0]).astype(h.dtype)
    grads = {
        "cls_w": (h[:, 0, :].T @ dz)[:, None],
        "cls_b": np.array([dz.sum()], dtype=h.dtype),
    }
    d_hidden = np.zeros_like(h)
    d_hidden[:, 0, :] = dz[:, None] * p["cls_w"][:, 0]
    grads.update(encode_backward(model, cache, d_hidden))
    return loss, grads


def mask_tokens(token_ids, mask_rate: float, seed: int, vocab_size: int):
    """BERT-style corruption: select non-special positions independently
    with probability mask_rate; 80% become [MASK], 10% a random id, 10%
    stay unchanged. Targets record all selected positions. Returns None
    when the sequence holds no maskable token."""
    ids = np.asarray(token_ids, dtype=np.int64).copy()
    maskable = np.flatnonzero(ids >= 5)
    if maskable.size == 0:
        return None
    rng = np.random.default_rng(seed)
    selected = maskable[rng.random(maskable.size) < mask_rate]
    originals = ids[selected].copy()
    action = rng.random(selected.size)
    random_ids = rng.integers(0, vocab_size, size=selected.size)
    ids[selected[action < 0.8]] = MASK
    swap = (action >= 0.8) & (action < 0.9)
    ids[selected[swap]] = random_ids[swap]
    return ids, selected, originals


def _mlm_logits(model, h, positions):
    rows, cols = positions
    h_t = h[rows, cols]
    logits = h_t @ model.params["mlm_w"] + model.params["mlm_b"]
    return logits, h_t


def loss_mlm(model: EncoderModel, ids, mask, target_positions, target_ids) -> float:
    if len(target_positions[0]) == 0:
        raise ValueError("loss_mlm needs at least one target position")
    h, _ = encode(model, ids, mask)
    logits, _ = _mlm_logits(model, h, target_positions)
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logprob = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logprob[np.arange(len(target_ids)), target_ids].mean())


def loss_and_grads_mlm(model: EncoderModel, ids, mask, target_positions, target_ids,
                       train_rng=None):
    if len(target_positions[0]) == 0:
        raise ValueError("loss_and_grads_mlm needs at least one target position")
    h, cache = encode(model, ids, mask, train_rng=train_rng)
    logits, h_t = _mlm_logits(model, h, target_positions)
    n = logits.shape[0]
    z64 = logits.astype(np.float64)
    z64 = z64 - z64.max(axis=1, keepdims=True)
    logprob = z64 - np.log(np.exp(z64).sum(axis=1, keepdims=True))
    loss = float(-logprob[np.arange(n), target_ids].mean())

    zs = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(zs)
    softmax = ez / ez.sum(axis=1, keepdims=True)
    dlogits = softmax
    dlogits[np.arange(n), target_ids] -= 1.0
    dlogits /= n
    grads = {
        "mlm_w": h_t.T @ dlogits,
        "mlm_b": dlogits.sum(axis=0),
    }
    d_hidden = np.zeros_like(h)
    rows, cols = target_positions
    # (row, col) target pairs are unique, so assignment == scatter-add
    d_hidden[rows, cols] = dlogits @ model.params["mlm_w"].T
    grads.update(encode_backward(model, cache, d_hidden))
    return loss, grads


@dataclass
class AdamState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def ensure(self, params: dict) -> None:
        for k, arr in params.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(arr)
                self.v[k] = np.zeros_like(arr)


def adam_update(params: dict, grads: dict, opt: AdamState, trainable) -> None:
    opt.ensure(params)
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    bias1 = 1.0 - b1 ** opt.step
    bias2 = 1.0 - b2 ** opt.step
    for k in sorted(trainable):
        g = grads[k]
        opt.m[k] = b1 * opt.m[k] + (1.0 - b1) * g
        opt.v[k] = b2 * opt.v[k] + (1.0 - b2) * (g * g)
        mhat = opt.m[k] / bias1
        vhat = opt.v[k] / bias2
        params[k] = params[k] - opt.learning_rate * mhat / (np.sqrt(vhat) + opt.epsilon)


def train_step(model: EncoderModel, opt: AdamState, batch: dict, objective: str,
               freeze: FreezeSpec, train_rng=None) -> float:
    """One optimizer step on the batch; returns the pre-update loss."""
    if objective == "mlm":
        loss, grads = loss_and_grads_mlm(model, batch["ids"], batch["mask"],
                                         batch["target_positions"], batch["target_ids"],
                                         train_rng=train_rng)
    elif objective == "classify":
        loss, grads = loss_and_grads_classify(model, batch["ids"], batch["mask"],
                                              batch["labels"], train_rng=train_rng)
    else:
        raise ValueError(f"unknown objective {objective!r}")
    if not np.isfinite(loss):
        raise TrainingAbort(f"non-finite loss {loss!r} ({objective})")
    frozen = frozen_param_names(model.config, freeze)
    trainable = [k for k in grads if k not in frozen]
    for k in trainable:
        if not np.all(np.isfinite(grads[k])):
            raise TrainingAbort(f"non-finite gradient in {k} ({objective})")
    adam_update(model.params, grads, opt, trainable)
    return loss


def gradient_check(model: EncoderModel, batch: dict, objective: str,
                   n_coords: int = 200, seed: int = 0, eps: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences
    over randomly sampled coordinates, in 64-bit arithmetic."""
    m64 = model.astype(np.float64)
    if objective == "mlm":
        def loss_fn(mod):
            return loss_mlm(mod, batch["ids"], batch["mask"],
                            batch["target_positions"], batch["target_ids"])
        _, grads = loss_and_grads_mlm(m64, batch["ids"], batch["mask"],
                                      batch["target_positions"], batch["target_ids"])
    elif objective == "classify":
        def loss_fn(mod):
            return loss_classify(mod, batch["ids"], batch["mask"], batch["labels"])
        _, grads = loss_and_grads_classify(m64, batch["ids"], batch["mask"], batch["labels"])
    else:
        raise ValueError(f"unknown objective {objective!r}")

    keys = sorted(grads)
    sizes = np.array([grads[k].size for k in keys])
    cum = np.cumsum(sizes)
    rng = np.random.default_rng(seed)
    flat_idx = rng.integers(0, cum[-1], size=n_coords)

    def central_diff(arr, idx, step):
        orig = arr[idx]
        arr[idx] = orig + step
        f_plus = loss_fn(m64)
        arr[idx] = orig - step
        f_minus = loss_fn(m64)
        arr[idx] = orig
        return (f_plus - f_minus) / (2.0 * step)

    worst = 0.0
    for fi in flat_idx:
        ki = int(np.searchsorted(cum, fi, side="right"))
        offset = int(fi - (cum[ki - 1] if ki else 0))
        key = keys[ki]
        arr = m64.params[key]
        idx = np.unravel_index(offset, arr.shape)
        analytic = float(grads[key][idx])
        scale = 1.0 + abs(arr[idx])
        rel = np.inf
        # near-zero gradients drown in cancellation noise at small steps;
        # a coordinate passes if any step size confirms the analytic value
        for step in (eps * scale, 32 * eps * scale, 1024 * eps * scale):
            numeric = central_diff(arr, idx, step)
            rel = min(rel, abs(analytic - numeric) / max(1e-8, abs(numeric)))
            if rel <= 1e-6:
                break
        worst = max(worst, rel)
    return worst


def save_checkpoint(path, model: EncoderModel, opt: Optional[AdamState] = None) -> None:
    payload = {f"param__{k}": v for k, v in model.params.items()}
    payload["__config__"] = np.frombuffer(model.config.to_json().encode(), dtype=np.uint8)
    payload["__seed__"] = np.array([model.rng_seed], dtype=np.int64)
    if opt is not None:
        payload["__opt__"] = np.array([opt.learning_rate, opt.beta1, opt.beta2,
                                       opt.epsilon, float(opt.step)])
        payload.update({f"m__{k}": v for k, v in opt.m.items()})
        payload.update({f"v__{k}": v for k, v in opt.v.items()})
    np.savez(path, **payload)


def load_checkpoint(path) -> tuple:
    with np.load(path) as data:
        cfg = ModelConfig.from_json(bytes(data["__config__"]).decode())
        seed = int(data["__seed__"][0])
        params = {k[len("param__"):]: data[k] for k in data.files if k.startswith("param__")}
        opt = None
        if "__opt__" in data.files:
            lr, b1, b2, epsilon, step = data["__opt__"]
            opt = AdamState(learning_rate=float(lr), beta1=float(b1), beta2=float(b2),
                            epsilon=float(epsilon), step=int(step))
            opt.m = {k[len("m__"):]: data[k] for k in data.files if k.startswith("m__")}
            opt.v = {k[len("v__"):]: data[k] for k in data.files if k.startswith("v__")}
    return EncoderModel(config=cfg, params=params, rng_seed=seed), opt
