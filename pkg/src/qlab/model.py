"""Decoder-only transformer with explicit forward, loss, and backward passes.

Pre-norm blocks with gain-only RMS normalization, learned positional
embeddings, no biases, untied unembedding, tanh-approximate GELU in the
MLP. Linear weights are stored [d_out, d_in] and applied as ``x @ W.T``.
The quantizable layers are exactly the attention and MLP projections;
embeddings, norms, and the unembedding stay full precision.

All activations run in the checkpoint's dtype (float32 in training,
float64 in gradient-check tests); softmax and loss reductions accumulate
in 64-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import math

import numpy as np

from .data import Batch, CalibrationSet
from .errors import ConfigError, NumericFailure
from . import store

NORM_EPS = 1e-6
GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
GELU_C1 = 0.044715


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 256
    d_model: int = 192
    n_layers: int = 6
    n_heads: int = 6
    d_ff: int = 768
    seq_len: int = 256
    init_seed: int = 1
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.seq_len < 2:
            raise ConfigError("seq_len must be at least 2")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    step: int
    tokens_seen: int
    config: ModelConfig

    def astype(self, dtype) -> "Checkpoint":
        return replace(self, tensors={k: v.astype(dtype) for k, v in self.tensors.items()})


GradientSet = Dict[str, np.ndarray]


def tensor_shapes(config: ModelConfig) -> Dict[str, Tuple[int, int]]:
    """Tensor name -> shape map, fully determined by the config."""
    d, f, v = config.d_model, config.d_ff, config.vocab
    shapes = {"embed.tok": (v, d), "embed.pos": (config.seq_len, d)}
    for i in range(config.n_layers):
        p = f"layers.{i}"
        shapes[f"{p}.norm1.g"] = (1, d)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{w}"] = (d, d)
        shapes[f"{p}.norm2.g"] = (1, d)
        shapes[f"{p}.mlp.w1"] = (f, d)
        shapes[f"{p}.mlp.w2"] = (d, f)
    shapes["norm_f.g"] = (1, d)
    shapes["unembed"] = (v, d)
    return shapes


def quantizable_layer_names(config: ModelConfig) -> List[str]:
    """Attention and MLP projections, in forward order."""
    names = []
    for i in range(config.n_layers):
        p = f"layers.{i}"
        names += [f"{p}.attn.wq", f"{p}.attn.wk", f"{p}.attn.wv", f"{p}.attn.wo"]
        names += [f"{p}.mlp.w1", f"{p}.mlp.w2"]
    return names


def capture_stages(config: ModelConfig) -> List[List[str]]:
    """Quantizable layers grouped by shared input: q/k/v together, then o, w1, w2."""
    stages = []
    for i in range(config.n_layers):
        p = f"layers.{i}"
        stages.append([f"{p}.attn.wq", f"{p}.attn.wk", f"{p}.attn.wv"])
        stages.append([f"{p}.attn.wo"])
        stages.append([f"{p}.mlp.w1"])
        stages.append([f"{p}.mlp.w2"])
    return stages


def init(config: ModelConfig, dtype=np.float32) -> Checkpoint:
    """Seeded Gaussian init.

    All weights draw from Normal(0, init_std^2); the residual-output
    projections (attn.wo, mlp.w2) are additionally scaled by
    1/sqrt(2*n_layers); norm gains start at 1.
    """
    rng = np.random.Generator(np.random.PCG64(config.init_seed))
    resid_scale = 1.0 / math.sqrt(2.0 * config.n_layers) if config.n_layers else 1.0
    tensors = {}
    for name, shape in tensor_shapes(config).items():
        if name.endswith(".g"):
            tensors[name] = np.ones(shape, dtype=dtype)
            continue
        std = config.init_std
        if name.endswith("attn.wo") or name.endswith("mlp.w2"):
            std *= resid_scale
        tensors[name] = (rng.standard_normal(shape) * std).astype(dtype)
    return Checkpoint(tensors, step=0, tokens_seen=0, config=config)


def _rms(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (xhat, r) with xhat = x * r, r = 1/sqrt(mean(x^2) + eps)."""
    mu = np.mean(np.square(x), axis=-1, keepdims=True, dtype=np.float64)
    r = (1.0 / np.sqrt(mu + NORM_EPS)).astype(x.dtype)
    return x * r, r


def _rms_backward(dxhat: np.ndarray, xhat: np.ndarray, r: np.ndarray) -> np.ndarray:
    m = np.mean(dxhat * xhat, axis=-1, keepdims=True, dtype=np.float64).astype(xhat.dtype)
    return r * (dxhat - xhat * m)


def _gelu(u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    t = np.tanh(GELU_C0 * (u + GELU_C1 * u * u * u))
    return 0.5 * u * (1.0 + t), t


def _gelu_backward(du_out: np.ndarray, u: np.ndarray, t: np.ndarray) -> np.ndarray:
    dt = GELU_C0 * (1.0 + 3.0 * GELU_C1 * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dt)


def _softmax_masked(scores: np.ndarray, mask_add: np.ndarray) -> np.ndarray:
    s = scores + mask_add
    s -= np.max(s, axis=-1, keepdims=True)
    e = np.exp(s)
    denom = np.sum(e, axis=-1, keepdims=True, dtype=np.float64).astype(scores.dtype)
    return e / denom


def _causal_mask(seq: int, dtype) -> np.ndarray:
    mask = np.zeros((seq, seq), dtype=dtype)
    mask[np.triu_indices(seq, k=1)] = -np.inf
    return mask


def _check_finite(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericFailure(f"non-finite activations in {where}", where=where)


def _inputs_of(batch: Union[Batch, np.ndarray]) -> np.ndarray:
    return batch.inputs if isinstance(batch, Batch) else batch


def forward(
    ckpt: Checkpoint,
    batch: Union[Batch, np.ndarray],
    overrides: Optional[Dict[str, np.ndarray]] = None,
    collect: Optional[Sequence[str]] = None,
    need_cache: bool = True,
) -> Tuple[np.ndarray, dict]:
    """Run the model; returns (logits, cache).

    `overrides` substitutes named weight matrices (used to evaluate with a
    quantized prefix); `collect` names quantizable layers whose inputs
    should be captured into cache['captured'] as stacked rows.
    """
    cfg = ckpt.config
    ids = _inputs_of(batch)
    B, S = ids.shape
    if S > cfg.seq_len:
        raise ConfigError(f"batch seq {S} exceeds model seq_len {cfg.seq_len}")
    T = ckpt.tensors
    if overrides:
        T = {**T, **overrides}
    dtype = T["embed.tok"].dtype
    H, Dh = cfg.n_heads, cfg.d_head
    collect = set(collect or ())
    captured: Dict[str, np.ndarray] = {}

    x = T["embed.tok"][ids] + T["embed.pos"][:S]
    mask_add = _causal_mask(S, dtype)
    inv_dh = 1.0 / math.sqrt(Dh)
    layers = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        x0 = x
        xhat1, r1 = _rms(x0)
        a_in = xhat1 * T[f"{p}.norm1.g"]
        flat = a_in.reshape(B * S, -1)
        if collect:
            for w in ("wq", "wk", "wv"):
                if f"{p}.attn.{w}" in collect:
                    captured[f"{p}.attn.{w}"] = flat.copy()
                    break
        q = (flat @ T[f"{p}.attn.wq"].T).reshape(B, S, H, Dh).transpose(0, 2, 1, 3)
        k = (flat @ T[f"{p}.attn.wk"].T).reshape(B, S, H, Dh).transpose(0, 2, 1, 3)
        v = (flat @ T[f"{p}.attn.wv"].T).reshape(B, S, H, Dh).transpose(0, 2, 1, 3)
        scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * inv_dh
        probs = _softmax_masked(scores, mask_add)
        ctx = np.matmul(probs, v).transpose(0, 2, 1, 3).reshape(B, S, -1)
        if f"{p}.attn.wo" in collect:
            captured[f"{p}.attn.wo"] = ctx.reshape(B * S, -1).copy()
        attn_out = ctx.reshape(B * S, -1) @ T[f"{p}.attn.wo"].T
        x1 = x0 + attn_out.reshape(B, S, -1)

        xhat2, r2 = _rms(x1)
        m_in = xhat2 * T[f"{p}.norm2.g"]
        if f"{p}.mlp.w1" in collect:
            captured[f"{p}.mlp.w1"] = m_in.reshape(B * S, -1).copy()
        h1 = (m_in.reshape(B * S, -1) @ T[f"{p}.mlp.w1"].T).reshape(B, S, -1)
        gh1, tanh_cache = _gelu(h1)
        if f"{p}.mlp.w2" in collect:
            captured[f"{p}.mlp.w2"] = gh1.reshape(B * S, -1).copy()
        mlp_out = gh1.reshape(B * S, -1) @ T[f"{p}.mlp.w2"].T
        x = x1 + mlp_out.reshape(B, S, -1)
        _check_finite(x, p)
        if need_cache:
            layers.append(
                dict(x0=x0, xhat1=xhat1, r1=r1, q=q, k=k, v=v, probs=probs, ctx=ctx,
                     x1=x1, xhat2=xhat2, r2=r2, h1=h1, tanh=tanh_cache, gh1=gh1)
            )

    xhatf, rf = _rms(x)
    hf = xhatf * T["norm_f.g"]
    logits = (hf.reshape(B * S, -1) @ T["unembed"].T).reshape(B, S, cfg.vocab)
    _check_finite(logits, "unembed")
    cache = dict(layers=layers, xhatf=xhatf, rf=rf, logits=logits, ids=ids,
                 shape=(B, S), overrides=overrides or {}, captured=captured)
    return logits, cache


def _log_softmax_stats(logits: np.ndarray):
    m = np.max(logits, axis=-1, keepdims=True)
    z = logits - m
    e = np.exp(z)
    denom = np.sum(e, axis=-1, keepdims=True, dtype=np.float64)
    return z, e, denom


def loss(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean cross-entropy in nats over all positions, stable log-softmax."""
    z, _, denom = _log_softmax_stats(logits)
    tgt = np.take_along_axis(z, targets[..., None].astype(np.int64), axis=-1)[..., 0]
    nll = np.log(denom[..., 0]) - tgt.astype(np.float64)
    return float(np.mean(nll))


def backward(ckpt: Checkpoint, batch: Batch, cache: dict) -> GradientSet:
    """Exact gradients of the mean cross-entropy w.r.t. every tensor."""
    cfg = ckpt.config
    T = ckpt.tensors
    if cache["overrides"]:
        T = {**T, **cache["overrides"]}
    B, S = cache["shape"]
    H, Dh = cfg.n_heads, cfg.d_head
    n_pos = B * S
    dtype = T["embed.tok"].dtype
    inv_dh = 1.0 / math.sqrt(Dh)
    grads: GradientSet = {}

    logits = cache["logits"]
    z, e, denom = _log_softmax_stats(logits)
    probs = (e / denom.astype(dtype)).astype(dtype)
    dlogits = probs.copy()
    flat_idx = (
        np.arange(n_pos) * cfg.vocab + batch.targets.reshape(-1).astype(np.int64)
    )
    dlogits.reshape(-1)[flat_idx] -= 1.0
    dlogits *= 1.0 / n_pos

    xhatf, rf = cache["xhatf"], cache["rf"]
    hf = xhatf * T["norm_f.g"]
    dl_flat = dlogits.reshape(n_pos, -1)
    grads["unembed"] = dl_flat.T @ hf.reshape(n_pos, -1)
    dhf = (dl_flat @ T["unembed"]).reshape(B, S, -1)
    grads["norm_f.g"] = np.sum(dhf * xhatf, axis=(0, 1), keepdims=False)[None, :]
    dx = _rms_backward(dhf * T["norm_f.g"], xhatf, rf)

    for i in range(cfg.n_layers - 1, -1, -1):
        p = f"layers.{i}"
        c = cache["layers"][i]
        # MLP sublayer: x = x1 + gelu(m_in @ W1.T) @ W2.T
        dmlp = dx.reshape(n_pos, -1)
        grads[f"{p}.mlp.w2"] = dmlp.T @ c["gh1"].reshape(n_pos, -1)
        dgh1 = (dmlp @ T[f"{p}.mlp.w2"]).reshape(B, S, -1)
        dh1 = _gelu_backward(dgh1, c["h1"], c["tanh"])
        m_in = c["xhat2"] * T[f"{p}.norm2.g"]
        grads[f"{p}.mlp.w1"] = dh1.reshape(n_pos, -1).T @ m_in.reshape(n_pos, -1)
        dm_in = (dh1.reshape(n_pos, -1) @ T[f"{p}.mlp.w1"]).reshape(B, S, -1)
        grads[f"{p}.norm2.g"] = np.sum(dm_in * c["xhat2"], axis=(0, 1))[None, :]
        dx1 = dx + _rms_backward(dm_in * T[f"{p}.norm2.g"], c["xhat2"], c["r2"])

        # attention sublayer: x1 = x0 + (P @ v merged) @ Wo.T
        dattn = dx1.reshape(n_pos, -1)
        grads[f"{p}.attn.wo"] = dattn.T @ c["ctx"].reshape(n_pos, -1)
        dctx = (dattn @ T[f"{p}.attn.wo"]).reshape(B, S, H, Dh).transpose(0, 2, 1, 3)
        probs_a = c["probs"]
        dprobs = np.matmul(dctx, c["v"].transpose(0, 1, 3, 2))
        dv = np.matmul(probs_a.transpose(0, 1, 3, 2), dctx)
        row = np.sum(dprobs * probs_a, axis=-1, keepdims=True, dtype=np.float64).astype(dtype)
        dscores = probs_a * (dprobs - row)
        dq = np.matmul(dscores, c["k"]) * inv_dh
        dk = np.matmul(dscores.transpose(0, 1, 3, 2), c["q"]) * inv_dh

        def merge(h):  # (B,H,S,Dh) -> (B*S, D)
            return h.transpose(0, 2, 1, 3).reshape(n_pos, -1)

        a_in = (c["xhat1"] * T[f"{p}.norm1.g"]).reshape(n_pos, -1)
        dq_f, dk_f, dv_f = merge(dq), merge(dk), merge(dv)
        grads[f"{p}.attn.wq"] = dq_f.T @ a_in
        grads[f"{p}.attn.wk"] = dk_f.T @ a_in
        grads[f"{p}.attn.wv"] = dv_f.T @ a_in
        da_in = dq_f @ T[f"{p}.attn.wq"] + dk_f @ T[f"{p}.attn.wk"] + dv_f @ T[f"{p}.attn.wv"]
        da_in = da_in.reshape(B, S, -1)
        grads[f"{p}.norm1.g"] = np.sum(da_in * c["xhat1"], axis=(0, 1))[None, :]
        dx = dx1 + _rms_backward(da_in * T[f"{p}.norm1.g"], c["xhat1"], c["r1"])

    dtok = np.zeros_like(T["embed.tok"])
    np.add.at(dtok, cache["ids"], dx)
    grads["embed.tok"] = dtok
    dpos = np.zeros_like(T["embed.pos"])
    dpos[:S] = np.sum(dx, axis=0)
    grads["embed.pos"] = dpos
    return grads


def capture_layer_inputs(
    ckpt: Checkpoint,
    calib: CalibrationSet,
    quantized_prefix: Optional[Dict[str, np.ndarray]] = None,
    layers: Optional[Sequence[str]] = None,
) -> Dict[str, np.ndarray]:
    """Stacked input rows X for each requested quantizable layer.

    When `quantized_prefix` maps earlier layer names to dequantized weight
    matrices, the captured inputs reflect those substitutions (sequential
    propagation). Row count is calib sequences x seq_len.
    """
    if not calib.batches:
        raise ConfigError("calibration set is empty")
    names = list(layers) if layers is not None else quantizable_layer_names(ckpt.config)
    dtype = ckpt.tensors["embed.tok"].dtype
    overrides = None
    if quantized_prefix:
        overrides = {k: np.asarray(v, dtype=dtype) for k, v in quantized_prefix.items()}
    chunks: Dict[str, List[np.ndarray]] = {n: [] for n in names}
    for batch in calib.batches:
        _, cache = forward(ckpt, batch, overrides=overrides, collect=names, need_cache=False)
        got = cache["captured"]
        for n in names:
            if n in got:
                chunks[n].append(got[n])
            else:
                # q/k/v share one captured input
                base = n.rsplit(".", 1)[0]
                for w in ("wq", "wk", "wv"):
                    if f"{base}.{w}" in got:
                        chunks[n].append(got[f"{base}.{w}"])
                        break
    return {n: np.concatenate(parts, axis=0) for n, parts in chunks.items()}


# -- checkpoint serialization ------------------------------------------------

_META = "__meta__"


def save_checkpoint(path: str, ckpt: Checkpoint, overwrite: bool = False) -> None:
    """Weights as f32 payloads plus one f64 metadata tensor."""
    c = ckpt.config
    meta = np.array(
        [[ckpt.step, ckpt.tokens_seen, c.vocab, c.d_model, c.n_layers, c.n_heads,
          c.d_ff, c.seq_len, c.init_seed, c.init_std]], dtype=np.float64
    )
    entries = [(_META, "f64", 1, meta.shape[1], store.encode_tensor(meta, "f64"))]
    for name in sorted(ckpt.tensors):
        t = ckpt.tensors[name]
        entries.append((name, "f32", t.shape[0], t.shape[1], store.encode_tensor(t, "f32")))
    store.write_tensor_file(path, entries, overwrite=overwrite)


def load_checkpoint(path: str, dtype=np.float32) -> Checkpoint:
    raw = store.read_tensor_file(path)
    if _META not in raw:
        raise ConfigError(f"{path}: missing metadata tensor")
    dt, r, c, payload = raw.pop(_META)
    meta = store.decode_tensor(payload, dt, r, c)[0]
    config = ModelConfig(
        vocab=int(meta[2]), d_model=int(meta[3]), n_layers=int(meta[4]),
        n_heads=int(meta[5]), d_ff=int(meta[6]), seq_len=int(meta[7]),
        init_seed=int(meta[8]), init_std=float(meta[9]),
    )
    tensors = {}
    for name, (dt, rows, cols, payload) in raw.items():
        tensors[name] = store.decode_tensor(payload, dt, rows, cols).astype(dtype)
    expect = tensor_shapes(config)
    if set(tensors) != set(expect):
        raise ConfigError(f"{path}: tensor set does not match config")
    return Checkpoint(tensors, step=int(meta[0]), tokens_seen=int(meta[1]), config=config)
