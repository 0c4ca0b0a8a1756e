"""Transformer encoder for parcel time series, in plain numpy.

The forward pass keeps the intermediate arrays it needs so the backward pass
can return exact gradients for every parameter.  Attention matrices of every
layer and head are exposed for the explainability tooling.

Parameter layout (``H`` heads, ``d`` model dim, ``dh = d / H``):

=========================  ====================
``embed.weight``           ``[13, d]``
``embed.bias``             ``[d]``
``embed.norm.gain``        ``[d]`` (and ``.bias``; only with ``embed_norm``)
``layer{l}.query``         ``[H, dh, d_k]``
``layer{l}.key``           ``[H, dh, d_k]``
``layer{l}.value``         ``[H, dh, d_v]``
``layer{l}.norm1.gain``    ``[d]`` (and ``.bias``)
``layer{l}.ff.weight1``    ``[d, ff]`` (``.bias1`` ``[ff]``)
``layer{l}.ff.weight2``    ``[ff, d]`` (``.bias2`` ``[d]``)
``layer{l}.norm2.gain``    ``[d]`` (and ``.bias``)
``classifier.weight``      ``[d, C]``
``classifier.bias``        ``[C]``
=========================  ====================
"""
from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .dataset import NUM_BANDS, PaddedBatch, positional_encodings
from .errors import NonFiniteLoss, ShapeMismatch

LAYER_NORM_EPS = 1e-5
CHECKPOINT_FORMAT = "cropattn-checkpoint/1"


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 1
    num_heads: int = 1
    model_dim: int = 128
    num_classes: int = 2
    t_max: int = 144
    key_dim: int | None = None
    value_dim: int | None = None
    feed_forward_dim: int | None = None
    input_dim: int = NUM_BANDS
    dropout: float = 0.0
    embed_norm: bool = True

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "model_dim", "num_classes", "t_max", "input_dim"):
            if getattr(self, name) < 1:
                raise ShapeMismatch(f"{name} must be >= 1")
        if self.model_dim % self.num_heads:
            raise ShapeMismatch("model_dim must be divisible by num_heads")
        if self.model_dim % 2:
            raise ShapeMismatch("model_dim must be even for the positional encoding")
        head = self.model_dim // self.num_heads
        if self.key_dim is None:
            object.__setattr__(self, "key_dim", head)
        if self.value_dim is None:
            object.__setattr__(self, "value_dim", head)
        if self.feed_forward_dim is None:
            object.__setattr__(self, "feed_forward_dim", 4 * self.model_dim)
        if self.key_dim < 1 or self.feed_forward_dim < 1:
            raise ShapeMismatch("key_dim and feed_forward_dim must be >= 1")
        if self.value_dim * self.num_heads != self.model_dim:
            raise ShapeMismatch("num_heads * value_dim must equal model_dim (residual path)")
        if not 0 <= self.dropout < 1:
            raise ShapeMismatch("dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def parameter_shapes(self) -> dict:
        d, h, dh = self.model_dim, self.num_heads, self.head_dim
        shapes = {"embed.weight": (self.input_dim, d), "embed.bias": (d,)}
        if self.embed_norm:
            # puts projected reflectances on the same scale as the date encoding
            shapes.update({"embed.norm.gain": (d,), "embed.norm.bias": (d,)})
        for l in range(self.num_layers):
            p = f"layer{l}."
            shapes.update({
                p + "query": (h, dh, self.key_dim),
                p + "key": (h, dh, self.key_dim),
                p + "value": (h, dh, self.value_dim),
                p + "norm1.gain": (d,), p + "norm1.bias": (d,),
                p + "ff.weight1": (d, self.feed_forward_dim), p + "ff.bias1": (self.feed_forward_dim,),
                p + "ff.weight2": (self.feed_forward_dim, d), p + "ff.bias2": (d,),
                p + "norm2.gain": (d,), p + "norm2.bias": (d,),
            })
        shapes.update({"classifier.weight": (d, self.num_classes), "classifier.bias": (self.num_classes,)})
        return shapes


def _fan_in(name: str, config: ModelConfig) -> int:
    if name.startswith("embed."):
        return config.input_dim
    if name.endswith(("query", "key", "value")):
        return config.head_dim
    if name.endswith(("ff.weight2", "ff.bias2")):
        return config.feed_forward_dim
    return config.model_dim


def init_params(config: ModelConfig, seed: int = 0) -> dict:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; layer norms start at identity."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in config.parameter_shapes().items():
        if ".norm" in name:
            params[name] = np.ones(shape) if name.endswith("gain") else np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(_fan_in(name, config))
            params[name] = rng.uniform(-bound, bound, shape)
    return params


def check_params(params: dict, config: ModelConfig) -> None:
    for name, shape in config.parameter_shapes().items():
        if name not in params:
            raise ShapeMismatch(f"missing parameter {name}")
        if params[name].shape != tuple(shape):
            raise ShapeMismatch(f"{name}: expected {shape}, got {params[name].shape}")


# ---------------------------------------------------------------------------
# attention building blocks


def project_qkv(x, theta_q, theta_k, theta_v):
    """Plain projections ``Q = x θq, K = x θk, V = x θv`` (no bias)."""
    x = np.asarray(x, dtype=float)
    for theta in (theta_q, theta_k, theta_v):
        if x.shape[-1] != np.shape(theta)[-2]:
            raise ShapeMismatch(f"input width {x.shape[-1]} vs projection {np.shape(theta)}")
    if np.shape(theta_q)[-1] != np.shape(theta_k)[-1]:
        raise ShapeMismatch("query and key projections must share d_k")
    return x @ theta_q, x @ theta_k, x @ theta_v


def scaled_dot_attention(q, k, mask=None):
    """Row-softmax of ``q kᵀ / sqrt(d_k)`` with padded keys excluded.

    ``mask`` flags valid slots (last axis).  Rows of padded queries are all
    zero, so are columns of padded keys.
    """
    q = np.asarray(q, dtype=float)
    k = np.asarray(k, dtype=float)
    if q.shape[-1] != k.shape[-1] or q.shape[-2] != k.shape[-2]:
        raise ShapeMismatch(f"query {q.shape} and key {k.shape} disagree")
    t = q.shape[-2]
    if mask is None:
        mask = np.ones(q.shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-1] != t:
        raise ShapeMismatch(f"mask length {mask.shape[-1]} != sequence length {t}")
    logits = q @ np.swapaxes(k, -1, -2) / np.sqrt(q.shape[-1])
    cols = mask[..., None, :]
    rows = mask[..., :, None]
    logits = np.where(cols, logits, -np.inf)
    top = np.max(logits, axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    weights = np.exp(logits - top)
    total = weights.sum(axis=-1, keepdims=True)
    weights = weights / np.where(total > 0, total, 1.0)
    return np.where(rows & cols, weights, 0.0)


def attend(a, v):
    """``h_i = Σ_j a_ij v_j``."""
    a = np.asarray(a, dtype=float)
    v = np.asarray(v, dtype=float)
    if a.shape[-1] != v.shape[-2]:
        raise ShapeMismatch(f"attention {a.shape} and values {v.shape} disagree")
    return a @ v


def _split_heads(x, num_heads):
    *lead, t, d = x.shape
    if d % num_heads:
        raise ShapeMismatch(f"width {d} not divisible by {num_heads} heads")
    x = x.reshape(*lead, t, num_heads, d // num_heads)
    return np.moveaxis(x, -2, -3)  # [..., H, T, dh]


def _merge_heads(x):
    x = np.moveaxis(x, -3, -2)  # [..., T, H, dv]
    return x.reshape(*x.shape[:-2], x.shape[-2] * x.shape[-1])


def multi_head(x, theta_q, theta_k, theta_v, mask=None):
    """Heads attend over contiguous, non-overlapping column blocks of ``x``.

    Projections have shape ``[H, d/H, d_k]``.  Returns the concatenated head
    outputs ``[..., T, H*d_v]`` and attention ``[..., H, T, T]``.
    """
    x = np.asarray(x, dtype=float)
    heads = np.shape(theta_q)[0]
    xh = _split_heads(x, heads)
    q, k, v = project_qkv(xh, theta_q, theta_k, theta_v)
    head_mask = None if mask is None else np.asarray(mask, dtype=bool)[..., None, :]
    a = scaled_dot_attention(q, k, head_mask)
    return _merge_heads(attend(a, v)), a


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    inv = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    return xhat * gain + bias, (xhat, inv)


def _layer_norm_backward(dy, gain, cache):
    xhat, inv = cache
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    lead = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=lead), dy.sum(axis=lead)


def _layer(params, l):
    p = f"layer{l}."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


def encoder_layer(x, layer_params, mask=None, *, residual=True, dropout=0.0, rng=None, _cache=None):
    """Post-norm block: attention + residual + norm, then feed-forward + residual + norm.

    ``layer_params`` uses the per-layer names without the ``layer{l}.``
    prefix.  Padded rows of the output are zero.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != layer_params["norm1.gain"].shape[0]:
        raise ShapeMismatch(f"input width {x.shape[-1]} does not match layer width")
    valid = np.ones(x.shape[:-1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    rowmask = valid[..., None].astype(float)
    heads_out, a = multi_head(x, layer_params["query"], layer_params["key"], layer_params["value"], valid)
    drop1 = _dropout_mask(heads_out.shape, dropout, rng)
    if drop1 is not None:
        heads_out = heads_out * drop1
    r1 = x + heads_out if residual else heads_out
    x1, ln1 = layer_norm(r1, layer_params["norm1.gain"], layer_params["norm1.bias"])
    pre = x1 @ layer_params["ff.weight1"] + layer_params["ff.bias1"]
    hidden = np.maximum(pre, 0.0)
    ff = hidden @ layer_params["ff.weight2"] + layer_params["ff.bias2"]
    drop2 = _dropout_mask(ff.shape, dropout, rng)
    if drop2 is not None:
        ff = ff * drop2
    x2, ln2 = layer_norm(x1 + ff, layer_params["norm2.gain"], layer_params["norm2.bias"])
    out = x2 * rowmask
    if _cache is not None:
        _cache.update(x=x, a=a, rowmask=rowmask, drop1=drop1, drop2=drop2, ln1=ln1, x1=x1,
                      pre=pre, hidden=hidden, ln2=ln2, residual=residual)
    return out, a


def _dropout_mask(shape, rate, rng):
    if not rate or rng is None:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _encoder_layer_backward(dout, lp, cache):
    grads = {}
    dx2 = dout * cache["rowmask"]
    dr2, grads["norm2.gain"], grads["norm2.bias"] = _layer_norm_backward(dx2, lp["norm2.gain"], cache["ln2"])
    dff = dr2 if cache["drop2"] is None else dr2 * cache["drop2"]
    lead = tuple(range(dff.ndim - 1))
    grads["ff.weight2"] = np.tensordot(cache["hidden"], dff, axes=(lead, lead))
    grads["ff.bias2"] = dff.sum(axis=lead)
    dpre = (dff @ lp["ff.weight2"].T) * (cache["pre"] > 0)
    grads["ff.weight1"] = np.tensordot(cache["x1"], dpre, axes=(lead, lead))
    grads["ff.bias1"] = dpre.sum(axis=lead)
    dx1 = dr2 + dpre @ lp["ff.weight1"].T
    dr1, grads["norm1.gain"], grads["norm1.bias"] = _layer_norm_backward(dx1, lp["norm1.gain"], cache["ln1"])
    dheads = dr1 if cache["drop1"] is None else dr1 * cache["drop1"]
    dx = dr1.copy() if cache["residual"] else np.zeros_like(dr1)

    heads = lp["query"].shape[0]
    xh = _split_heads(cache["x"], heads)
    q, k, v = xh @ lp["query"], xh @ lp["key"], xh @ lp["value"]
    a = cache["a"]
    dh = _split_heads(dheads, heads)
    da = dh @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(a, -1, -2) @ dh
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) / np.sqrt(q.shape[-1])
    dq = ds @ k
    dk = np.swapaxes(ds, -1, -2) @ q
    batch_axes = tuple(range(xh.ndim - 3))
    for name, dproj in (("query", dq), ("key", dk), ("value", dv)):
        g = np.swapaxes(xh, -1, -2) @ dproj  # [..., H, dh, d*]
        grads[name] = g.sum(axis=batch_axes) if batch_axes else g
    dxh = dq @ np.swapaxes(lp["query"], -1, -2) + dk @ np.swapaxes(lp["key"], -1, -2) \
        + dv @ np.swapaxes(lp["value"], -1, -2)
    dx += _merge_heads(dxh)
    return dx, grads


# ---------------------------------------------------------------------------
# full model


@dataclass
class AttentionRecord:
    """Attention of one parcel: ``matrices[layer, head]`` is ``[T_max, T_max]``."""

    parcel_id: str
    matrices: np.ndarray
    valid_length: int
    crop: str | None = None
    dates: tuple = ()

    def mean_matrix(self) -> np.ndarray:
        """Element-wise mean over layers and heads, trimmed to the valid block."""
        t = self.valid_length
        return self.matrices.reshape(-1, *self.matrices.shape[-2:]).mean(axis=0)[:t, :t]


@dataclass
class ForwardOutput:
    logits: np.ndarray       # [B, C]
    attention: np.ndarray    # [B, L, H, T, T]
    pooled: np.ndarray       # [B, d]
    valid_lengths: np.ndarray
    parcel_ids: list = field(default_factory=list)
    crops: list = field(default_factory=list)
    dates: list = field(default_factory=list)

    @property
    def records(self) -> list:
        return [AttentionRecord(pid, self.attention[i], int(self.valid_lengths[i]),
                                self.crops[i] if self.crops else None,
                                tuple(self.dates[i]) if self.dates else ())
                for i, pid in enumerate(self.parcel_ids)]


def _check_batch(batch: PaddedBatch, config: ModelConfig):
    if batch.inputs.ndim != 3 or batch.inputs.shape[-1] != config.input_dim:
        raise ShapeMismatch(f"inputs {batch.inputs.shape} do not match input_dim={config.input_dim}")
    if batch.validity_mask.shape != batch.inputs.shape[:2] or batch.days.shape != batch.inputs.shape[:2]:
        raise ShapeMismatch("mask/days shape disagrees with inputs")


def _forward(batch, params, config, *, residual=True, rng=None, cache=None):
    _check_batch(batch, config)
    mask = batch.validity_mask
    rowmask = mask[..., None].astype(float)
    pe = positional_encodings(np.where(mask, batch.days, 0), config.model_dim)
    e = batch.inputs @ params["embed.weight"] + params["embed.bias"]
    ln0 = None
    if config.embed_norm:
        e, ln0 = layer_norm(e, params["embed.norm.gain"], params["embed.norm.bias"])
    x = (e + pe) * rowmask
    layer_caches, attn = [], []
    dropout = config.dropout if rng is not None else 0.0
    for l in range(config.num_layers):
        lc = {} if cache is not None else None
        x, a = encoder_layer(x, _layer(params, l), mask, residual=residual, dropout=dropout, rng=rng, _cache=lc)
        layer_caches.append(lc)
        attn.append(a)
    masked = np.where(mask[..., None], x, -np.inf)
    arg = np.argmax(masked, axis=1)  # [B, d]
    pooled = np.take_along_axis(x, arg[:, None, :], axis=1)[:, 0, :]
    logits = pooled @ params["classifier.weight"] + params["classifier.bias"]
    if cache is not None:
        cache.update(layers=layer_caches, ln0=ln0, arg=arg, pooled=pooled, rowmask=rowmask, x_shape=x.shape)
    attention = np.stack(attn, axis=1)  # [B, L, H, T, T]
    return ForwardOutput(logits, attention, pooled, mask.sum(axis=1), list(batch.parcel_ids),
                         list(batch.crops), list(batch.dates))


def forward(batch: PaddedBatch, params: dict, config: ModelConfig, *, residual: bool = True) -> ForwardOutput:
    """Embed, add date encoding, run the encoder stack, max-pool valid slots, classify."""
    return _forward(batch, params, config, residual=residual)


def _backward(dlogits, batch, params, config, cache):
    grads = {"classifier.weight": cache["pooled"].T @ dlogits, "classifier.bias": dlogits.sum(axis=0)}
    dpooled = dlogits @ params["classifier.weight"].T
    dx = np.zeros(cache["x_shape"])
    b_idx = np.arange(dx.shape[0])[:, None]
    f_idx = np.arange(dx.shape[2])[None, :]
    np.add.at(dx, (b_idx, cache["arg"], f_idx), dpooled)
    for l in reversed(range(config.num_layers)):
        dx, lg = _encoder_layer_backward(dx, _layer(params, l), cache["layers"][l])
        grads.update({f"layer{l}.{k}": v for k, v in lg.items()})
    de = dx * cache["rowmask"]
    if config.embed_norm:
        de, grads["embed.norm.gain"], grads["embed.norm.bias"] = _layer_norm_backward(
            de, params["embed.norm.gain"], cache["ln0"])
    grads["embed.weight"] = np.tensordot(batch.inputs, de, axes=((0, 1), (0, 1)))
    grads["embed.bias"] = de.sum(axis=(0, 1))
    return {name: grads[name] for name in params}


# ---------------------------------------------------------------------------
# losses


def log_softmax(logits):
    logits = np.asarray(logits, dtype=float)
    top = logits.max(axis=-1, keepdims=True)
    shifted = logits - top
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def focal_loss_and_grad(logits, labels, gamma):
    """Mean focal loss over the batch and its gradient with respect to ``logits``."""
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    logp = log_softmax(logits)
    p = np.exp(logp)
    rows = np.arange(len(labels))
    log_pt = logp[rows, labels]
    pt = p[rows, labels]
    miss = -np.expm1(log_pt)  # 1 - pt without cancellation
    per = -(miss ** gamma) * log_pt
    # dL/dpt * pt, with the (1-pt)^(gamma-1) log pt term taken as 0 at pt == 1
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(miss > 0, gamma * miss ** (gamma - 1) * pt * log_pt, 0.0) if gamma else 0.0
    scale = term - miss ** gamma
    onehot = np.zeros_like(p)
    onehot[rows, labels] = 1.0
    grad = scale[:, None] * (onehot - p) / len(labels)
    return per.mean(), grad, per


def loss_gradients(batch: PaddedBatch, params: dict, config: ModelConfig, focal_gamma: float = 2.0,
                   *, rng=None):
    """Mean focal loss of ``batch`` and exact gradients for every parameter.

    Returns ``(loss, grads, output)``; ``grads`` has the keys of ``params``.
    Pass ``rng`` to enable dropout (if configured).
    """
    cache: dict = {}
    out = _forward(batch, params, config, rng=rng if config.dropout else None, cache=cache)
    if not np.all(np.isfinite(out.logits)):
        raise NonFiniteLoss("non-finite logits")
    loss, dlogits, _ = focal_loss_and_grad(out.logits, batch.labels, focal_gamma)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")
    return float(loss), _backward(dlogits, batch, params, config, cache), out


# ---------------------------------------------------------------------------
# checkpoint I/O


@dataclass
class Checkpoint:
    config: ModelConfig
    class_vocabulary: list
    params: dict
    metadata: dict = field(default_factory=dict)


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "float64-le", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(entry: dict) -> np.ndarray:
    if entry.get("dtype") != "float64-le":
        raise ValueError(f"unsupported dtype {entry.get('dtype')!r}")
    raw = base64.b64decode(entry["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(float)


def save_checkpoint(checkpoint: Checkpoint, path) -> Path:
    """JSON file: config, vocabulary, metadata and base64 little-endian float64 arrays with shapes."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(checkpoint.config),
        "class_vocabulary": list(checkpoint.class_vocabulary),
        "metadata": checkpoint.metadata,
        "parameters": {name: _encode_array(v) for name, v in checkpoint.params.items()},
    }
    path = Path(path)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path) -> Checkpoint:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    known = {f.name for f in fields(ModelConfig)}
    config = ModelConfig(**{k: v for k, v in doc["config"].items() if k in known})
    order = list(config.parameter_shapes())
    params = {name: _decode_array(doc["parameters"][name]) for name in order}
    check_params(params, config)
    return Checkpoint(config, doc["class_vocabulary"], params, doc.get("metadata", {}))
