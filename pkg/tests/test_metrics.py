import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import tiny_model_config
from qlab.data import Batch, fixed_eval_batches
from qlab.errors import ContractViolation, MergeError
from qlab.metrics import (
    CSV_HEADER,
    MetricRecord,
    MetricsStore,
    delta_ptq,
    eval_accuracy,
    eval_ce,
    fmt_real,
    relative_acc_drop,
    relative_ce_error,
    weight_norm,
)
from qlab.model import Checkpoint, init


def test_relative_ce_error_cases():
    assert relative_ce_error(2.0, 2.0) == 0.0
    assert abs(relative_ce_error(2.2, 2.0) - 0.1) < 1e-12
    assert relative_ce_error(1.8, 2.0) < 0.0
    with pytest.raises(ContractViolation):
        relative_ce_error(1.0, 0.0)


def test_delta_ptq_cases():
    assert delta_ptq(2.0, 2.0) == 0.0
    assert delta_ptq(2.5, 2.0) == 0.5


@given(
    st.floats(0.1, 50.0, allow_nan=False),
    st.floats(0.01, 10.0, allow_nan=False),
)
@settings(max_examples=60, deadline=None)
def test_delta_equals_relative_times_base(ce_fp, gap):
    ce_q = ce_fp + gap
    lhs = delta_ptq(ce_q, ce_fp)
    rhs = relative_ce_error(ce_q, ce_fp) * ce_fp
    assert abs(lhs - rhs) < 1e-12 * max(abs(lhs), 1.0)


def test_relative_acc_drop_cases():
    assert relative_acc_drop(0.6, 0.6) == 0.0
    assert abs(relative_acc_drop(0.6, 0.4) - 0.5) < 1e-12
    assert relative_acc_drop(0.5, 0.6) < 0.0
    # near-singular values are the caller's problem but still compute
    assert relative_acc_drop(0.999999, 0.9) > 0
    with pytest.raises(ContractViolation):
        relative_acc_drop(1.0, 0.5)
    with pytest.raises(ContractViolation):
        relative_acc_drop(0.5, 1.2)


def test_weight_norm_cases():
    cfg = tiny_model_config()
    ck = init(cfg)
    zero = Checkpoint({k: np.zeros_like(v) for k, v in ck.tensors.items()}, 0, 0, cfg)
    assert weight_norm(zero) == 0.0
    single = Checkpoint({"w": np.array([[3.0, 4.0]])}, 0, 0, cfg)
    assert weight_norm(single) == 5.0
    flat = np.concatenate([v.reshape(-1).astype(np.float64) for v in ck.tensors.values()])
    assert abs(weight_norm(ck) - np.linalg.norm(flat)) < 1e-12 * weight_norm(ck)


def test_eval_ce_uniform_model(corpus_splits):
    _, val, _ = corpus_splits
    cfg = tiny_model_config(init_std=0.0)
    ck = init(cfg)
    batches = fixed_eval_batches(val, 2, 4, cfg.seq_len)
    assert abs(eval_ce(ck, batches) - math.log(256)) < 1e-6


def test_eval_ce_deterministic(corpus_splits):
    _, val, _ = corpus_splits
    cfg = tiny_model_config()
    ck = init(cfg)
    batches = fixed_eval_batches(val, 2, 4, cfg.seq_len)
    assert eval_ce(ck, batches) == eval_ce(ck, batches)
    assert eval_accuracy(ck, batches) == eval_accuracy(ck, batches)


def test_eval_accuracy_uniform_model_near_chance():
    cfg = tiny_model_config(vocab=16, d_model=8, n_layers=1, n_heads=2, d_ff=16,
                            seq_len=16, init_std=0.0)
    ck = init(cfg)
    # break logit ties away from argmax=0 with a tiny unembedding perturbation
    rng = np.random.Generator(np.random.PCG64(0))
    ck.tensors["unembed"] += rng.standard_normal(ck.tensors["unembed"].shape).astype(np.float32) * 1e-4
    ck.tensors["embed.tok"] += rng.standard_normal(ck.tensors["embed.tok"].shape).astype(np.float32) * 1e-2
    n = 4096
    ids = rng.integers(0, 16, (n // 16, 16)).astype(np.int32)
    tg = rng.integers(0, 16, (n // 16, 16)).astype(np.int32)
    acc = eval_accuracy(ck, [Batch(ids, tg)])
    p = 1.0 / 16
    sigma = math.sqrt(p * (1 - p) / n)
    assert abs(acc - p) < 4 * sigma


def test_perfect_memorizer_accuracy():
    # a bigram lookup: token embedding one-hot, unembedding maps each token to
    # a huge logit on its deterministic successor
    cfg = tiny_model_config(vocab=16, d_model=16, n_layers=0, n_heads=1, d_ff=16,
                            seq_len=8, init_std=0.0)
    ck = init(cfg)
    ck.tensors["embed.tok"][:] = np.eye(16, dtype=np.float32) * 10
    succ = (np.arange(16) + 3) % 16
    U = np.zeros((16, 16), dtype=np.float32)
    for tok, s in enumerate(succ):
        U[s, tok] = 100.0
    ck.tensors["unembed"][:] = U
    rng = np.random.Generator(np.random.PCG64(1))
    ids = rng.integers(0, 16, (4, 8)).astype(np.int32)
    tg = succ[ids].astype(np.int32)
    assert eval_accuracy(ck, [Batch(ids, tg)]) == 1.0


# -- CSV store ------------------------------------------------------------------


def test_csv_header_exact():
    assert CSV_HEADER == (
        "run_id,step,tokens_seen,lr,train_loss,val_ce_fp,val_ce_q3,val_ce_q4,"
        "rel_ce_err3,rel_ce_err4,delta_ptq3,delta_ptq4,acc_fp,acc_q3,acc_q4,"
        "rel_acc_drop3,rel_acc_drop4,grad_norm,weight_norm"
    )


def test_fmt_real_nine_significant_digits():
    assert fmt_real(math.pi) == "3.14159265"
    assert fmt_real(None) == ""
    assert fmt_real(3e-3) == "0.003"


def test_store_roundtrip_and_merge(tmp_path):
    path = str(tmp_path / "m.csv")
    s = MetricsStore(path)
    s.upsert(MetricRecord("r1", 10, tokens_seen=100, lr=1e-3, train_loss=2.5))
    s.upsert(MetricRecord("r1", 20, val_ce_fp=2.0, val_ce_q={3: 2.4}, rel_ce_err={3: 0.2}))
    s.save()
    s2 = MetricsStore(path)
    assert ("r1", 10) in s2.rows and ("r1", 20) in s2.rows
    # merge quant fields into the training row
    s2.upsert(MetricRecord("r1", 10, val_ce_fp=2.2))
    s2.save()
    s3 = MetricsStore(path)
    row = s3.rows[("r1", 10)]
    assert row["train_loss"] == "2.5" and row["val_ce_fp"] == "2.2"


def test_store_rejects_conflicting_values(tmp_path):
    path = str(tmp_path / "m.csv")
    s = MetricsStore(path)
    s.upsert(MetricRecord("r1", 10, val_ce_fp=2.0))
    with pytest.raises(MergeError):
        s.upsert(MetricRecord("r1", 10, val_ce_fp=2.00001))
    # identical value merges fine
    s.upsert(MetricRecord("r1", 10, val_ce_fp=2.0))


def test_record_validation():
    with pytest.raises(ContractViolation):
        MetricRecord("r", 0, val_ce_fp=-1.0).validate()
    with pytest.raises(ContractViolation):
        MetricRecord("r", 0, acc_fp=1.5).validate()
    MetricRecord("r", 0, val_ce_fp=2.0, acc_fp=0.5).validate()
