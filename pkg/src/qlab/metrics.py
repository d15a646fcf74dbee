"""Degradation metrics, evaluation over fixed batch sets, and the metrics CSV."""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .data import Batch
from .errors import ContractViolation, MergeError
from .model import Checkpoint, forward, loss
from .quant import QuantizedModel, eval_checkpoint

EvalTarget = Union[Checkpoint, QuantizedModel]


def _as_checkpoint(target: EvalTarget) -> Checkpoint:
    if isinstance(target, QuantizedModel):
        return eval_checkpoint(target)
    return target


def eval_ce(target: EvalTarget, batches: Sequence[Batch]) -> float:
    """Mean cross-entropy in nats over every position of the batch set.

    Quantized models are dequantized to full precision and run through the
    standard forward pass.
    """
    ckpt = _as_checkpoint(target)
    total_nats = 0.0
    total_pos = 0
    for b in batches:
        logits, _ = forward(ckpt, b, need_cache=False)
        n = b.inputs.size
        total_nats += loss(logits, b.targets) * n
        total_pos += n
    return total_nats / total_pos


def eval_accuracy(target: EvalTarget, batches: Sequence[Batch]) -> float:
    """Fraction of positions whose argmax logit matches the target."""
    ckpt = _as_checkpoint(target)
    hits = 0
    total = 0
    for b in batches:
        logits, _ = forward(ckpt, b, need_cache=False)
        hits += int(np.sum(np.argmax(logits, axis=-1) == b.targets))
        total += b.inputs.size
    return hits / total


def relative_ce_error(ce_q: float, ce_fp: float) -> float:
    """CE(quantized)/CE(full) - 1; may be negative."""
    if ce_fp <= 0:
        raise ContractViolation(f"full-precision CE must be positive, got {ce_fp}")
    return ce_q / ce_fp - 1.0


def delta_ptq(ce_q: float, ce_fp: float) -> float:
    """Plain CE difference CE(quantized) - CE(full)."""
    return ce_q - ce_fp


def relative_acc_drop(acc_fp: float, acc_q: float) -> float:
    """(Acc(full) - Acc(quantized)) / (1 - Acc(full)).

    Singular as acc_fp approaches 1; callers should guard near-perfect
    accuracies before dividing.
    """
    if not (0.0 <= acc_fp <= 1.0 and 0.0 <= acc_q <= 1.0):
        raise ContractViolation("accuracies must lie in [0, 1]")
    if acc_fp >= 1.0 - 1e-12:
        raise ContractViolation("relative accuracy drop undefined at acc_fp == 1")
    return (acc_fp - acc_q) / (1.0 - acc_fp)


def weight_norm(ckpt: Checkpoint) -> float:
    """Global L2 norm over all trainable tensors."""
    total = 0.0
    for t in ckpt.tensors.values():
        total += float(np.sum(np.square(t, dtype=np.float64)))
    return float(np.sqrt(total))


# -- metric records and CSV --------------------------------------------------

CSV_HEADER = (
    "run_id,step,tokens_seen,lr,train_loss,val_ce_fp,val_ce_q3,val_ce_q4,"
    "rel_ce_err3,rel_ce_err4,delta_ptq3,delta_ptq4,acc_fp,acc_q3,acc_q4,"
    "rel_acc_drop3,rel_acc_drop4,grad_norm,weight_norm"
)
CSV_COLUMNS = CSV_HEADER.split(",")


@dataclass
class MetricRecord:
    run_id: str
    step: int
    tokens_seen: Optional[int] = None
    lr: Optional[float] = None
    train_loss: Optional[float] = None
    val_ce_fp: Optional[float] = None
    val_ce_q: Dict[int, float] = field(default_factory=dict)
    rel_ce_err: Dict[int, float] = field(default_factory=dict)
    delta_ptq: Dict[int, float] = field(default_factory=dict)
    acc_fp: Optional[float] = None
    acc_q: Dict[int, float] = field(default_factory=dict)
    rel_acc_drop: Dict[int, float] = field(default_factory=dict)
    grad_norm: Optional[float] = None
    weight_norm: Optional[float] = None

    def validate(self) -> None:
        for label, value in (("val_ce_fp", self.val_ce_fp), *(
            (f"val_ce_q{b}", v) for b, v in self.val_ce_q.items()
        )):
            if value is not None and (not np.isfinite(value) or value <= 0):
                raise ContractViolation(f"{label} must be finite and positive: {value}")
        for label, value in (("acc_fp", self.acc_fp), *(
            (f"acc_q{b}", v) for b, v in self.acc_q.items()
        )):
            if value is not None and not (0.0 <= value <= 1.0):
                raise ContractViolation(f"{label} must lie in [0, 1]: {value}")


def fmt_real(x: Optional[float]) -> str:
    return "" if x is None else f"{x:.9g}"


def record_to_row(rec: MetricRecord) -> Dict[str, str]:
    rec.validate()
    row = {c: "" for c in CSV_COLUMNS}
    row["run_id"] = rec.run_id
    row["step"] = str(rec.step)
    if rec.tokens_seen is not None:
        row["tokens_seen"] = str(rec.tokens_seen)
    row["lr"] = fmt_real(rec.lr)
    row["train_loss"] = fmt_real(rec.train_loss)
    row["val_ce_fp"] = fmt_real(rec.val_ce_fp)
    for b in (3, 4):
        row[f"val_ce_q{b}"] = fmt_real(rec.val_ce_q.get(b))
        row[f"rel_ce_err{b}"] = fmt_real(rec.rel_ce_err.get(b))
        row[f"delta_ptq{b}"] = fmt_real(rec.delta_ptq.get(b))
        row[f"acc_q{b}"] = fmt_real(rec.acc_q.get(b))
        row[f"rel_acc_drop{b}"] = fmt_real(rec.rel_acc_drop.get(b))
    row["acc_fp"] = fmt_real(rec.acc_fp)
    row["grad_norm"] = fmt_real(rec.grad_norm)
    row["weight_norm"] = fmt_real(rec.weight_norm)
    return row


class MetricsStore:
    """CSV-backed store keyed by (run_id, step); merges must agree field-wise."""

    def __init__(self, path: str):
        self.path = path
        self.rows: Dict[tuple, Dict[str, str]] = {}
        self.order: List[tuple] = []
        if os.path.exists(path):
            self._load()

    def _load(self) -> None:
        with open(self.path, "r", encoding="utf-8") as f:
            lines = [ln.rstrip("\n") for ln in f if ln.strip()]
        if not lines:
            return
        if lines[0] != CSV_HEADER:
            raise MergeError(f"{self.path}: unexpected header")
        for ln in lines[1:]:
            parts = ln.split(",")
            row = dict(zip(CSV_COLUMNS, parts))
            key = (row["run_id"], int(row["step"]))
            self.rows[key] = row
            self.order.append(key)

    def upsert(self, rec: MetricRecord) -> None:
        row = record_to_row(rec)
        key = (rec.run_id, rec.step)
        if key not in self.rows:
            self.rows[key] = row
            self.order.append(key)
            return
        existing = self.rows[key]
        for col in CSV_COLUMNS:
            new = row[col]
            if not new:
                continue
            old = existing[col]
            if old and old != new:
                raise MergeError(
                    f"conflicting {col} for {key}: {old!r} vs {new!r}"
                )
            existing[col] = new

    def save(self) -> None:
        fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(self.path)) or ".")
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(CSV_HEADER + "\n")
            for key in self.order:
                row = self.rows[key]
                f.write(",".join(row[c] for c in CSV_COLUMNS) + "\n")
        os.replace(tmp, self.path)
