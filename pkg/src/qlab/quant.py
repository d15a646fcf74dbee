"""Grouped low-bit weight quantization: RTN baseline and GPTQ.

Grids are asymmetric min-max with the range anchored at zero (the group
range is [min(w,0), max(w,0)]), so the zero point is exactly representable
and constant nonzero groups reconstruct exactly. Code rounding is
half-up. Scales are stored in 32-bit so files round-trip bit-exactly;
all quantization arithmetic runs in 64-bit, where products of codes with
a 32-bit scale are exact.

GPTQ processes columns in natural order against the upper Cholesky factor
of the damped inverse Hessian, recomputing group parameters from the
error-compensated weights at each group boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import store
from .errors import ConfigError, ContractViolation, FactorizationError, QuantizationError
from .model import Checkpoint, ModelConfig, capture_stages
from .ndkernel import cholesky, frobenius_norm, spd_inverse
from .data import CalibrationSet


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 4
    group_size: int = 128
    damping_frac: float = 0.01
    propagate_quantized: bool = True
    method: str = "gptq"  # rtn | gptq
    static_groups: bool = False  # ablation: group params from original weights

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ConfigError("bits must lie in [2, 8]")
        if self.group_size < 1:
            raise ConfigError("group_size must be at least 1")
        if not 0 < self.damping_frac < 1:
            raise ConfigError("damping_frac must lie in (0, 1)")
        if self.method not in ("rtn", "gptq"):
            raise ConfigError(f"unknown quantization method {self.method!r}")


@dataclass
class QuantizedLinear:
    codes: np.ndarray  # uint8 [d_out, d_in], values < 2^bits
    scales: np.ndarray  # float32 [d_out, n_groups]
    zeros: np.ndarray  # int32 [d_out, n_groups]
    bits: int
    group_size: int

    @property
    def shape(self) -> Tuple[int, int]:
        return self.codes.shape

    def __post_init__(self):
        if self.codes.max(initial=0) >= (1 << self.bits):
            raise ContractViolation("code exceeds bit width")


@dataclass
class QuantizedModel:
    layers: Dict[str, QuantizedLinear]
    passthrough: Dict[str, np.ndarray]  # full-precision tensors
    config: ModelConfig
    source_step: int
    source_tokens: int
    quant: QuantConfig


@dataclass
class LayerQuantStats:
    name: str
    weight_error: float  # ||W - What||_F
    recon_error: Optional[float]  # ||X W^T - X What^T||_F, None without calibration
    damping_used: float


def round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def group_params(w_group: np.ndarray, bits: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-row (scale, zero) for one group of columns.

    scale = (max - min)/(2^b - 1) over the zero-anchored range; all-zero
    rows get the sentinel scale 1 with zero 0 (all codes equal the zero
    point). Returned scales are float32, zeros int32.
    """
    w = np.asarray(w_group, dtype=np.float64)
    maxq = (1 << bits) - 1
    xmin = np.minimum(w.min(axis=1), 0.0)
    xmax = np.maximum(w.max(axis=1), 0.0)
    rng = xmax - xmin
    scale64 = np.where(rng == 0.0, 1.0, rng / maxq)
    scale = scale64.astype(np.float32)
    zero = np.clip(round_half_up(-xmin / scale.astype(np.float64)), 0, maxq).astype(np.int32)
    return scale, zero


def quantize_codes(
    w: np.ndarray, scale: np.ndarray, zero: np.ndarray, bits: int
) -> np.ndarray:
    """Round-half-up onto the grid and clamp into [0, 2^b)."""
    maxq = (1 << bits) - 1
    s = scale.astype(np.float64)[:, None]
    c = round_half_up(np.asarray(w, dtype=np.float64) / s) + zero[:, None]
    return np.clip(c, 0, maxq).astype(np.uint8)


def dequant_codes(codes: np.ndarray, scale: np.ndarray, zero: np.ndarray) -> np.ndarray:
    """(codes - zero) * scale in float64; exact for 32-bit scales."""
    diff = codes.astype(np.float64) - zero.astype(np.float64)[:, None]
    return diff * scale.astype(np.float64)[:, None]


def _group_index(d_in: int, group_size: int) -> np.ndarray:
    return np.arange(d_in) // group_size


def dequantize(q: QuantizedLinear) -> np.ndarray:
    """Full dequantized matrix in float64 (exact grid values)."""
    gi = _group_index(q.shape[1], q.group_size)
    diff = q.codes.astype(np.float64) - q.zeros.astype(np.float64)[:, gi]
    return diff * q.scales.astype(np.float64)[:, gi]


def rtn_quantize(W: np.ndarray, cfg: QuantConfig) -> QuantizedLinear:
    """Independent nearest-grid rounding per group; ignores calibration."""
    W = np.asarray(W)
    if not np.all(np.isfinite(W)):
        raise ContractViolation("rtn_quantize requires finite weights")
    d_out, d_in = W.shape
    g = cfg.group_size
    n_groups = (d_in + g - 1) // g
    codes = np.empty((d_out, d_in), dtype=np.uint8)
    scales = np.empty((d_out, n_groups), dtype=np.float32)
    zeros = np.empty((d_out, n_groups), dtype=np.int32)
    w64 = W.astype(np.float64)
    for gi in range(n_groups):
        lo, hi = gi * g, min((gi + 1) * g, d_in)
        scale, zero = group_params(w64[:, lo:hi], cfg.bits)
        codes[:, lo:hi] = quantize_codes(w64[:, lo:hi], scale, zero, cfg.bits)
        scales[:, gi], zeros[:, gi] = scale, zero
    return QuantizedLinear(codes, scales, zeros, cfg.bits, cfg.group_size)


def gptq_quantize(
    W: np.ndarray, X: np.ndarray, cfg: QuantConfig, name: str = ""
) -> QuantizedLinear:
    """Error-compensated quantization against the calibration inputs X.

    Steps: H = 2 X^T X; dead columns (zero diagonal) are pinned and the
    corresponding weights zeroed; H is damped by damping_frac times its
    mean diagonal; U is the upper Cholesky factor of H^-1 (positive
    diagonal); per column j the rounding residual e = (w_j - deq_j)/U_jj
    is pushed into the remaining columns via U[j, j+1:].
    """
    W = np.asarray(W)
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] != W.shape[1]:
        raise ContractViolation(
            f"calibration inputs {X.shape} do not match weights {W.shape}"
        )
    if not np.all(np.isfinite(W)):
        raise ContractViolation("gptq_quantize requires finite weights")
    d_out, d_in = W.shape
    g = cfg.group_size
    n_groups = (d_in + g - 1) // g
    w64 = W.astype(np.float64)
    x64 = X.astype(np.float64)

    H = 2.0 * (x64.T @ x64)
    dead = np.diag(H) == 0.0
    if dead.any():
        H[dead, dead] = 1.0
        w64[:, dead] = 0.0
    damp = cfg.damping_frac * float(np.mean(np.diag(H)))
    H[np.diag_indices(d_in)] += damp
    try:
        Hinv = spd_inverse(H)
        Hinv = (Hinv + Hinv.T) * 0.5
        U = cholesky(Hinv).T
    except FactorizationError as exc:
        raise QuantizationError(
            f"Hessian factorization failed for {name or 'layer'}: {exc}", layer=name
        ) from exc

    codes = np.empty((d_out, d_in), dtype=np.uint8)
    scales = np.empty((d_out, n_groups), dtype=np.float32)
    zeros = np.empty((d_out, n_groups), dtype=np.int32)
    if cfg.static_groups:
        for gi in range(n_groups):
            lo, hi = gi * g, min((gi + 1) * g, d_in)
            scales[:, gi], zeros[:, gi] = group_params(w64[:, lo:hi], cfg.bits)
    scale = zero = None
    for j in range(d_in):
        gi = j // g
        if cfg.static_groups:
            scale, zero = scales[:, gi], zeros[:, gi]
        elif j % g == 0:
            hi = min(j + g, d_in)
            scale, zero = group_params(w64[:, j:hi], cfg.bits)
            scales[:, gi], zeros[:, gi] = scale, zero
        col = quantize_codes(w64[:, j : j + 1], scale, zero, cfg.bits)[:, 0]
        codes[:, j] = col
        deq = (col.astype(np.float64) - zero) * scale.astype(np.float64)
        err = (w64[:, j] - deq) / U[j, j]
        if j + 1 < d_in:
            w64[:, j + 1 :] -= np.outer(err, U[j, j + 1 :])
    return QuantizedLinear(codes, scales, zeros, cfg.bits, cfg.group_size)


def weight_error(W: np.ndarray, What: np.ndarray) -> float:
    return frobenius_norm(np.asarray(W, dtype=np.float64) - np.asarray(What, dtype=np.float64))


def reconstruction_error(W: np.ndarray, What: np.ndarray, X: np.ndarray) -> float:
    """||X W^T - X What^T||_F over the calibration activations."""
    d = np.asarray(W, dtype=np.float64) - np.asarray(What, dtype=np.float64)
    return frobenius_norm(np.asarray(X, dtype=np.float64) @ d.T)


DAMPING_LADDER = (1.0, 10.0, 100.0)


def _quantize_layer(
    W: np.ndarray, X: Optional[np.ndarray], cfg: QuantConfig, name: str
) -> Tuple[QuantizedLinear, float]:
    if cfg.method == "rtn":
        return rtn_quantize(W, cfg), cfg.damping_frac
    last: Optional[QuantizationError] = None
    for mult in DAMPING_LADDER:
        damp = cfg.damping_frac * mult
        if damp >= 1.0:
            break
        try:
            return gptq_quantize(W, X, replace(cfg, damping_frac=damp), name), damp
        except QuantizationError as exc:
            last = exc
    raise QuantizationError(
        f"quantization failed for {name} after damping retries", layer=name
    ) from last


def quantize_model(
    ckpt: Checkpoint,
    calib: Optional[CalibrationSet],
    cfg: QuantConfig,
    on_layer: Optional[Callable[[LayerQuantStats], None]] = None,
) -> Tuple[QuantizedModel, List[LayerQuantStats]]:
    """Quantize every quantizable layer in forward order.

    With propagate_quantized on, each layer's calibration inputs are
    captured with all earlier layers already replaced by their dequantized
    weights. Per-layer weight and reconstruction errors stream through
    `on_layer` and are returned; on failure the partial stats ride on the
    raised QuantizationError.
    """
    from .model import capture_layer_inputs  # local to avoid cycle at import time

    if cfg.method == "gptq" and (calib is None or not calib.batches):
        raise ConfigError("gptq quantization requires a non-empty calibration set")
    work_dtype = ckpt.tensors["embed.tok"].dtype
    stats: List[LayerQuantStats] = []
    layers: Dict[str, QuantizedLinear] = {}
    overrides: Dict[str, np.ndarray] = {}
    propagating = cfg.propagate_quantized and cfg.method == "gptq"

    def capture(wanted: List[str]) -> Dict[str, np.ndarray]:
        if calib is None or not calib.batches:
            return {}
        prefix = overrides if propagating else None
        rep = wanted[0]  # q/k/v share inputs; fetch once
        got = capture_layer_inputs(ckpt, calib, quantized_prefix=prefix, layers=[rep])
        return {n: got[rep] for n in wanted}

    try:
        for stage in capture_stages(ckpt.config):
            xs = capture(stage)
            for lname in stage:
                W = ckpt.tensors[lname]
                X = xs.get(lname)
                q, damp_used = _quantize_layer(W, X, cfg, lname)
                what = dequantize(q)
                rec = reconstruction_error(W, what, X) if X is not None else None
                st = LayerQuantStats(lname, weight_error(W, what), rec, damp_used)
                stats.append(st)
                if on_layer:
                    on_layer(st)
                layers[lname] = q
                overrides[lname] = what.astype(work_dtype)
    except QuantizationError as exc:
        exc.partial_stats = stats  # type: ignore[attr-defined]
        raise
    passthrough = {k: v for k, v in ckpt.tensors.items() if k not in layers}
    qm = QuantizedModel(layers, passthrough, ckpt.config, ckpt.step, ckpt.tokens_seen, cfg)
    return qm, stats


def eval_checkpoint(qm: QuantizedModel, dtype=np.float32) -> Checkpoint:
    """Materialize a quantized model as a full-precision checkpoint for eval."""
    tensors = dict(qm.passthrough)
    for name, q in qm.layers.items():
        tensors[name] = dequantize(q).astype(dtype)
    return Checkpoint(tensors, step=qm.source_step, tokens_seen=qm.source_tokens, config=qm.config)


# -- bit packing and serialization -------------------------------------------


def pack_codes(codes: np.ndarray, bits: int) -> np.ndarray:
    """LSB-first bit-packed rows, padded to byte boundaries."""
    rows, cols = codes.shape
    shifts = np.arange(bits, dtype=np.uint8)
    bits_arr = ((codes[:, :, None] >> shifts) & 1).reshape(rows, cols * bits)
    return np.packbits(bits_arr, axis=1, bitorder="little")


def unpack_codes(packed: np.ndarray, bits: int, cols: int) -> np.ndarray:
    rows = packed.shape[0]
    bits_arr = np.unpackbits(packed, axis=1, count=cols * bits, bitorder="little")
    bits_arr = bits_arr.reshape(rows, cols, bits).astype(np.int32)
    weights = (1 << np.arange(bits, dtype=np.int32))
    return (bits_arr * weights).sum(axis=2).astype(np.uint8)


_QMETA = "__quant_meta__"
_MMETA = "__meta__"


def save_quantized(path: str, qm: QuantizedModel, overwrite: bool = False) -> None:
    c = qm.config
    mmeta = np.array(
        [[qm.source_step, qm.source_tokens, c.vocab, c.d_model, c.n_layers, c.n_heads,
          c.d_ff, c.seq_len, c.init_seed, c.init_std]], dtype=np.float64
    )
    q = qm.quant
    qmeta = np.array(
        [[q.bits, q.group_size, q.damping_frac, int(q.propagate_quantized),
          1.0 if q.method == "gptq" else 0.0, int(q.static_groups)]], dtype=np.float64
    )
    entries = [
        (_MMETA, "f64", 1, mmeta.shape[1], store.encode_tensor(mmeta, "f64")),
        (_QMETA, "f64", 1, qmeta.shape[1], store.encode_tensor(qmeta, "f64")),
    ]
    for name in sorted(qm.layers):
        ql = qm.layers[name]
        rows, cols = ql.shape
        token = f"u{ql.bits}p"
        entries.append((f"{name}.codes", token, rows, cols, pack_codes(ql.codes, ql.bits).tobytes()))
        entries.append((f"{name}.scales", "f32", *ql.scales.shape, store.encode_tensor(ql.scales, "f32")))
        entries.append((f"{name}.zeros", "i32", *ql.zeros.shape, store.encode_tensor(ql.zeros, "i32")))
    for name in sorted(qm.passthrough):
        t = qm.passthrough[name]
        entries.append((name, "f32", t.shape[0], t.shape[1], store.encode_tensor(t, "f32")))
    store.write_tensor_file(path, entries, overwrite=overwrite)


def load_quantized(path: str) -> QuantizedModel:
    raw = store.read_tensor_file(path)
    dt, r, c, payload = raw.pop(_MMETA)
    meta = store.decode_tensor(payload, dt, r, c)[0]
    config = ModelConfig(
        vocab=int(meta[2]), d_model=int(meta[3]), n_layers=int(meta[4]),
        n_heads=int(meta[5]), d_ff=int(meta[6]), seq_len=int(meta[7]),
        init_seed=int(meta[8]), init_std=float(meta[9]),
    )
    dt, r, c, payload = raw.pop(_QMETA)
    qv = store.decode_tensor(payload, dt, r, c)[0]
    qcfg = QuantConfig(
        bits=int(qv[0]), group_size=int(qv[1]), damping_frac=float(qv[2]),
        propagate_quantized=bool(qv[3]), method="gptq" if qv[4] else "rtn",
        static_groups=bool(qv[5]),
    )
    layers: Dict[str, QuantizedLinear] = {}
    passthrough: Dict[str, np.ndarray] = {}
    code_entries = {n[: -len(".codes")]: v for n, v in raw.items() if n.endswith(".codes")}
    for base, (token, rows, cols, payload) in code_entries.items():
        bits = int(token[1:-1])
        packed = np.frombuffer(payload, dtype=np.uint8).reshape(rows, store.packed_row_bytes(cols, bits))
        codes = unpack_codes(packed, bits, cols)
        sdt, sr, sc, sp = raw[f"{base}.scales"]
        zdt, zr, zc, zp = raw[f"{base}.zeros"]
        layers[base] = QuantizedLinear(
            codes,
            store.decode_tensor(sp, sdt, sr, sc),
            store.decode_tensor(zp, zdt, zr, zc),
            bits,
            qcfg.group_size,
        )
    for name, (token, rows, cols, payload) in raw.items():
        if name.endswith(".codes") or name.endswith(".scales") or name.endswith(".zeros"):
            continue
        passthrough[name] = store.decode_tensor(payload, token, rows, cols)
    return QuantizedModel(layers, passthrough, config, int(meta[0]), int(meta[1]), qcfg)
