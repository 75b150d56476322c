"""Pre-norm transformer encoder in plain numpy, with hand-written backprop.

Parameters live in a flat ``dict[str, np.ndarray]``. Every array follows the
dtype of the parameters (float32 for training, float64 for gradient checks).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Literal

import numpy as np

from ..seqpipe import IGNORE

LN_EPS = 1e-5
INIT_STD = 0.02
_GELU_C = math.sqrt(2.0 / math.pi)

Params = dict[str, np.ndarray]
Objective = Literal["mlm", "bce"]


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    seq_len: int = 128
    vocab_size: int = 64
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be >= 4")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> ModelConfig:
        return cls(**obj)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes, in canonical (serialization) order."""
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.seq_len, d),
    }
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        shapes.update({
            p + "ln1_g": (d,), p + "ln1_b": (d,),
            p + "wq": (d, d), p + "bq": (d,),
            p + "wk": (d, d), p + "bk": (d,),
            p + "wv": (d, d), p + "bv": (d,),
            p + "wo": (d, d), p + "bo": (d,),
            p + "ln2_g": (d,), p + "ln2_b": (d,),
            p + "w1": (d, f), p + "b1": (f,),
            p + "w2": (f, d), p + "b2": (d,),
        })  # fmt: skip
    shapes.update({
        "lnf_g": (d,), "lnf_b": (d,),
        "mlm_bias": (cfg.vocab_size,),
        "cls_w": (d,), "cls_b": (1,),
    })  # fmt: skip
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Params:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            arr = np.ones(shape)
        elif leaf.startswith("w") or leaf.endswith("emb"):
            arr = rng.normal(0.0, INIT_STD, size=shape)
        else:
            arr = np.zeros(shape)
        params[name] = arr.astype(dtype)
    return params


def reset_classifier(params: Params) -> None:
    """Fresh zero-initialized classification head (fine-tuning starts from 0.5)."""
    params["cls_w"][...] = 0
    params["cls_b"][...] = 0


def check_params(params: Params, cfg: ModelConfig) -> None:
    shapes = param_shapes(cfg)
    if set(params) != set(shapes):
        raise ValueError("parameter names do not match config")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ValueError(f"{name}: shape {params[name].shape}, expected {shape}")


# -- building blocks --------------------------------------------------------------


def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def _layer_norm_back(dy, cache):
    xhat, rstd, g = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0)
    db = dy.reshape(-1, dy.shape[-1]).sum(0)
    dxhat = dy * g
    dx = rstd * (
        dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True)
    )
    return dx, dg, db


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * (u * u * u)))
    return 0.5 * u * (1.0 + t), t


def _gelu_back(dy, u, t):
    du_inner = _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return dy * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * du_inner)


def _dropout(x, rate, rng):
    if rng is None or rate == 0:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep, keep


def _softmax(s):
    s = s - s.max(-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(-1, keepdims=True)


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


# -- encoder ----------------------------------------------------------------------


@dataclass
class EncoderCache:
    ids: np.ndarray
    mask: np.ndarray
    emb_keep: np.ndarray | None
    layers: list
    final_ln: tuple


def forward_encoder(
    ids: np.ndarray,
    mask: np.ndarray,
    params: Params,
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, EncoderCache]:
    """Hidden states [B, T, d_model] after the final layer norm.

    ``rng`` switches on training mode (dropout); ``None`` is deterministic
    inference. Keys at pad positions (``mask == 0``) get -inf attention scores.
    """
    ids = np.asarray(ids)
    mask = np.asarray(mask, dtype=bool)
    if ids.ndim != 2 or ids.shape != mask.shape:
        raise ValueError(f"ids {ids.shape} and mask {mask.shape} must be matching [B, T]")
    b, t = ids.shape
    if t > cfg.seq_len:
        raise ValueError(f"sequence width {t} exceeds seq_len {cfg.seq_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError("token id outside vocabulary")
    if not mask.any(axis=1).all():
        raise ValueError("every sequence needs at least one real token")

    rate = cfg.dropout_rate
    x = params["tok_emb"][ids] + params["pos_emb"][:t]
    x, emb_keep = _dropout(x, rate, rng)
    neg = np.where(mask, 0.0, -np.inf).astype(x.dtype)[:, None, None, :]
    scale = 1.0 / math.sqrt(cfg.head_dim)

    layers = []
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        h, ln1 = _layer_norm(x, params[p + "ln1_g"], params[p + "ln1_b"])
        q = _split_heads(h @ params[p + "wq"] + params[p + "bq"], cfg.n_heads)
        k = _split_heads(h @ params[p + "wk"] + params[p + "bk"], cfg.n_heads)
        v = _split_heads(h @ params[p + "wv"] + params[p + "bv"], cfg.n_heads)
        probs = _softmax((q @ k.transpose(0, 1, 3, 2)) * scale + neg)
        ctx = _merge_heads(probs @ v)
        a, a_keep = _dropout(ctx @ params[p + "wo"] + params[p + "bo"], rate, rng)
        x = x + a

        h2, ln2 = _layer_norm(x, params[p + "ln2_g"], params[p + "ln2_b"])
        u = h2 @ params[p + "w1"] + params[p + "b1"]
        gu, tanh_u = _gelu(u)
        f, f_keep = _dropout(gu @ params[p + "w2"] + params[p + "b2"], rate, rng)
        x = x + f
        layers.append((h, ln1, q, k, v, probs, ctx, a_keep, h2, ln2, u, gu, tanh_u, f_keep))

    hidden, lnf = _layer_norm(x, params["lnf_g"], params["lnf_b"])
    return hidden, EncoderCache(ids, mask, emb_keep, layers, lnf)


def backward_encoder(
    dhidden: np.ndarray, cache: EncoderCache, params: Params, cfg: ModelConfig, grads: Params
) -> None:
    """Accumulate encoder parameter gradients into ``grads`` (in place)."""
    dx, dg, db = _layer_norm_back(dhidden, cache.final_ln)
    grads["lnf_g"] += dg
    grads["lnf_b"] += db
    scale = 1.0 / math.sqrt(cfg.head_dim)
    d = cfg.d_model

    for i in reversed(range(cfg.n_layers)):
        p = f"layer{i}."
        h, ln1, q, k, v, probs, ctx, a_keep, h2, ln2, u, gu, tanh_u, f_keep = cache.layers[i]

        # feed-forward branch
        df = dx if f_keep is None else dx * f_keep
        df2 = df.reshape(-1, d)
        grads[p + "w2"] += gu.reshape(-1, cfg.d_ff).T @ df2
        grads[p + "b2"] += df2.sum(0)
        dgu = df @ params[p + "w2"].T
        du = _gelu_back(dgu, u, tanh_u).reshape(-1, cfg.d_ff)
        grads[p + "w1"] += h2.reshape(-1, d).T @ du
        grads[p + "b1"] += du.sum(0)
        dh2 = (du @ params[p + "w1"].T).reshape(dx.shape)
        dln, dg, db = _layer_norm_back(dh2, ln2)
        grads[p + "ln2_g"] += dg
        grads[p + "ln2_b"] += db
        dx = dx + dln

        # attention branch
        da = dx if a_keep is None else dx * a_keep
        da2 = da.reshape(-1, d)
        grads[p + "wo"] += ctx.reshape(-1, d).T @ da2
        grads[p + "bo"] += da2.sum(0)
        dctx = _split_heads(da @ params[p + "wo"].T, cfg.n_heads)
        dprobs = dctx @ v.transpose(0, 1, 3, 2)
        dv = probs.transpose(0, 1, 3, 2) @ dctx
        ds = probs * (dprobs - (dprobs * probs).sum(-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        h2d = h.reshape(-1, d)
        dh = np.zeros_like(h)
        for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
            dproj = _merge_heads(dproj)
            grads[p + "w" + name] += h2d.T @ dproj.reshape(-1, d)
            grads[p + "b" + name] += dproj.reshape(-1, d).sum(0)
            dh += dproj @ params[p + "w" + name].T
        dln, dg, db = _layer_norm_back(dh, ln1)
        grads[p + "ln1_g"] += dg
        grads[p + "ln1_b"] += db
        dx = dx + dln

    if cache.emb_keep is not None:
        dx = dx * cache.emb_keep
    t = dx.shape[1]
    grads["pos_emb"][:t] += dx.sum(0)
    np.add.at(grads["tok_emb"], cache.ids.reshape(-1), dx.reshape(-1, d))


# -- heads ------------------------------------------------------------------------


def mlm_logits(hidden_at: np.ndarray, params: Params) -> np.ndarray:
    """Vocabulary logits with the output projection tied to ``tok_emb``."""
    return hidden_at @ params["tok_emb"].T + params["mlm_bias"]


def _log_softmax(z):
    z = z - z.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def mlm_loss(hidden: np.ndarray, targets: np.ndarray, params: Params) -> float:
    """Mean cross-entropy over positions whose target is not ``IGNORE``."""
    sel = targets != IGNORE
    if not sel.any():
        raise ValueError("no masked positions to score")
    logp = _log_softmax(mlm_logits(hidden[sel], params))
    return float(-logp[np.arange(logp.shape[0]), targets[sel]].mean())


def pool(hidden: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean of hidden states over real (non-pad) positions: [B, d_model]."""
    m = np.asarray(mask, dtype=hidden.dtype)
    counts = m.sum(1, keepdims=True)
    if (counts == 0).any():
        raise ValueError("cannot pool an all-pad sequence")
    return (hidden * m[..., None]).sum(1) / counts


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def classify_logit(hidden: np.ndarray, mask: np.ndarray, params: Params) -> np.ndarray:
    return pool(hidden, mask) @ params["cls_w"] + params["cls_b"][0]


def pool_and_classify(hidden: np.ndarray, mask: np.ndarray, params: Params) -> np.ndarray:
    """Case probabilities, one per sequence."""
    return _sigmoid(classify_logit(hidden, mask, params))


def predict_proba(
    ids: np.ndarray, mask: np.ndarray, params: Params, cfg: ModelConfig
) -> np.ndarray:
    hidden, _ = forward_encoder(ids, mask, params, cfg)
    return pool_and_classify(hidden, mask, params)


# -- loss + gradients ----------------------------------------------------------------


@dataclass
class Batch:
    ids: np.ndarray  # [B, T]
    mask: np.ndarray  # [B, T] bool
    targets: np.ndarray | None = None  # [B, T] MLM targets, IGNORE elsewhere
    labels: np.ndarray | None = None  # [B] 0/1
    pos_weight: float = 1.0  # BCE weight on positive examples


def loss_and_grads(
    batch: Batch,
    params: Params,
    cfg: ModelConfig,
    objective: Objective,
    rng: np.random.Generator | None = None,
) -> tuple[float, Params]:
    """Loss and exact gradients for every parameter (zeros where unused)."""
    hidden, cache = forward_encoder(batch.ids, batch.mask, params, cfg, rng)
    grads = {k: np.zeros_like(v) for k, v in params.items()}

    if objective == "mlm":
        if batch.targets is None:
            raise ValueError("mlm objective needs targets")
        sel = batch.targets != IGNORE
        n = int(sel.sum())
        if n == 0:
            raise ValueError("batch has no masked positions")
        h_sel = hidden[sel]
        tgt = batch.targets[sel]
        logp = _log_softmax(mlm_logits(h_sel, params))
        loss = -logp[np.arange(n), tgt].mean()
        dlogits = np.exp(logp)
        dlogits[np.arange(n), tgt] -= 1.0
        dlogits /= n
        grads["tok_emb"] += dlogits.T @ h_sel
        grads["mlm_bias"] += dlogits.sum(0)
        dhidden = np.zeros_like(hidden)
        dhidden[sel] = dlogits @ params["tok_emb"]
    elif objective == "bce":
        if batch.labels is None:
            raise ValueError("bce objective needs labels")
        y = np.asarray(batch.labels, dtype=hidden.dtype)
        m = batch.mask.astype(hidden.dtype)
        counts = m.sum(1, keepdims=True)
        pooled = (hidden * m[..., None]).sum(1) / counts
        z = pooled @ params["cls_w"] + params["cls_b"][0]
        w = np.where(y > 0.5, batch.pos_weight, 1.0).astype(hidden.dtype)
        # softplus form of BCE: y*softplus(-z) + (1-y)*softplus(z)
        sp_neg = np.logaddexp(0, -z)
        sp_pos = np.logaddexp(0, z)
        loss = (w * (y * sp_neg + (1 - y) * sp_pos)).mean()
        dz = w * (_sigmoid(z) - y) / len(y)
        grads["cls_w"] += pooled.T @ dz
        grads["cls_b"] += dz.sum(keepdims=True)
        dpooled = dz[:, None] * params["cls_w"][None, :]
        dhidden = dpooled[:, None, :] * (m / counts)[..., None]
    else:
        raise ValueError(f"unknown objective {objective!r}")

    loss = float(loss)
    if not math.isfinite(loss):
        raise NonFiniteLossError(
            f"non-finite {objective} loss; max |param| = "
            f"{max(float(np.abs(v).max()) for v in params.values()):.3g}"
        )
    backward_encoder(dhidden.astype(hidden.dtype, copy=False), cache, params, cfg, grads)
    return loss, grads
