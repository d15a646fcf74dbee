"""Experiment orchestration: run directories, branching, sweeps, eval jobs.

A run directory is append-only and fully determined by (corpus bytes,
manifest): checkpoints are immutable and checksummed, metrics land in
one CSV keyed by (run_id, step), and the high-frequency norm log is a
separate CSV. Cooldown branches resume the parent's checkpoint,
optimizer state, and data cursor, so a branch plus its trunk prefix is
step-for-step identical to the equivalent single WSD run.
"""

from __future__ import annotations

import logging
import os
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import config as cfgmod
from .averaging import AveragingWindow, lawa_push, soup
from .data import (
    Batch,
    CalibrationSet,
    TokenStream,
    build_calibration,
    fixed_eval_batches,
    load_corpus,
    split,
    token_fingerprint,
)
from .errors import ConfigError, QlabError
from .metrics import (
    MetricRecord,
    MetricsStore,
    eval_accuracy,
    eval_ce,
    relative_acc_drop,
    relative_ce_error,
    delta_ptq,
    weight_norm,
)
from .model import Checkpoint, init, load_checkpoint, save_checkpoint
from .optim import (
    OptimState,
    ScheduleSpec,
    TrainEvent,
    TrainHook,
    init_opt_state,
    schedule_value,
    train_loop,
)
from .quant import quantize_model, save_quantized
from . import store

log = logging.getLogger("qlab")

MANIFEST = "manifest.cfg"
METRICS = "metrics.csv"
NORMS = "norms.csv"
QUANT_LAYERS = "quant_layers.csv"
_OPT_META = "__opt_meta__"


def qlab_threads() -> int:
    env = os.environ.get("QLAB_THREADS", "")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


# -- optimizer state files -----------------------------------------------------


def save_opt_state(path: str, state: OptimState, cursor: int, overwrite: bool = False) -> None:
    meta = np.array([[state.t, cursor]], dtype=np.float64)
    entries = [(_OPT_META, "f64", 1, 2, store.encode_tensor(meta, "f64"))]
    for prefix, tensors in (("m", state.m), ("v", state.v)):
        for name in sorted(tensors):
            t = tensors[name]
            entries.append(
                (f"{prefix}.{name}", "f32", t.shape[0], t.shape[1], store.encode_tensor(t, "f32"))
            )
    store.write_tensor_file(path, entries, overwrite=overwrite)


def load_opt_state(path: str, dtype=np.float32) -> Tuple[OptimState, int]:
    raw = store.read_tensor_file(path)
    dt, r, c, payload = raw.pop(_OPT_META)
    meta = store.decode_tensor(payload, dt, r, c)[0]
    m: Dict[str, np.ndarray] = {}
    v: Dict[str, np.ndarray] = {}
    for name, (dt, rows, cols, payload) in raw.items():
        arr = store.decode_tensor(payload, dt, rows, cols).astype(dtype)
        if name.startswith("m."):
            m[name[2:]] = arr
        elif name.startswith("v."):
            v[name[2:]] = arr
    return OptimState(m=m, v=v, t=int(meta[0])), int(meta[1])


# -- run directory helpers ------------------------------------------------------


def ckpt_path(run_dir: str, step: int, kind: str = "ckpt") -> str:
    return os.path.join(run_dir, f"{kind}_{step}.qlab")


def opt_path(run_dir: str, step: int) -> str:
    return os.path.join(run_dir, f"ckpt_{step}.opt.qlab")


def list_ckpt_steps(run_dir: str, kind: str = "ckpt") -> List[int]:
    steps = []
    prefix, suffix = f"{kind}_", ".qlab"
    for name in os.listdir(run_dir):
        if name.startswith(prefix) and name.endswith(suffix) and ".opt." not in name:
            stem = name[len(prefix) : -len(suffix)]
            if stem.isdigit():
                steps.append(int(stem))
    return sorted(steps)


def write_manifest(run_dir: str, cfg: Dict[str, object], run_keys: Dict[str, str]) -> None:
    merged = dict(cfg)
    merged.update(run_keys)
    with open(os.path.join(run_dir, MANIFEST), "w", encoding="utf-8") as f:
        f.write(cfgmod.canonical_text(merged, include_run=True))


def load_manifest(run_dir: str) -> Dict[str, object]:
    path = os.path.join(run_dir, MANIFEST)
    if not os.path.isfile(path):
        raise ConfigError(f"no manifest at {path}")
    with open(path, "r", encoding="utf-8") as f:
        parsed = cfgmod.parse_config_text(f.read(), allow_run_keys=True)
    full: Dict[str, object] = {k: d for k, (_, d) in cfgmod.REGISTRY.items()}
    full.update(parsed)
    return full


@dataclass
class RunData:
    train: TokenStream
    val: TokenStream
    calib: TokenStream
    eval_batches: List[Batch]
    eval_hash: str

    def calibration(self, cfg: Dict[str, object]) -> CalibrationSet:
        return build_calibration(
            self.calib, cfg["quant.calib_samples"], cfg["data.seq_len"]
        )


def build_data(cfg: Dict[str, object]) -> RunData:
    if not cfg["data.path"]:
        raise ConfigError("data.path is required")
    stream = load_corpus(cfg["data.path"], cfg["data.limit_bytes"] or None)
    train, val, calib = split(
        stream, cfg["data.val_fraction"], cfg["data.calib_fraction"], cfg["data.seed"]
    )
    eval_batches = fixed_eval_batches(
        val, cfg["eval.batches"], cfg["eval.batch_size"], cfg["data.seq_len"]
    )
    return RunData(train, val, calib, eval_batches, token_fingerprint(eval_batches))


def _phase_boundaries(spec: ScheduleSpec) -> Tuple[int, ...]:
    marks = {spec.total_steps}
    if spec.warmup_steps:
        marks.add(spec.warmup_steps)
    if spec.decay_steps:
        marks.add(spec.total_steps - spec.decay_steps)
    return tuple(sorted(marks))


class _NormLog:
    def __init__(self, path: str):
        self.path = path
        if not os.path.exists(path):
            with open(path, "w", encoding="utf-8") as f:
                f.write("step,lr,train_loss,grad_norm,weight_norm\n")

    def append(self, ev: TrainEvent) -> None:
        wn = weight_norm(ev.ckpt)
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(
                f"{ev.step},{ev.lr:.9g},{ev.train_loss:.9g},{ev.grad_norm:.9g},{wn:.9g}\n"
            )


def cmd_train(
    cfg: Dict[str, object],
    out_root: str,
    force: bool = False,
    resume: bool = False,
    stop_after: Optional[int] = None,
    parent: Optional[Tuple[str, int]] = None,
    start_state: Optional[Tuple[Checkpoint, OptimState, int]] = None,
) -> str:
    """Train under `cfg` into out_root/<run_id>; returns the run directory.

    `start_state` seeds a branch with its parent's checkpoint, optimizer
    state, and data cursor.
    """
    spec = cfgmod.schedule_spec(cfg)
    ocfg = cfgmod.optim_config(cfg)
    mcfg = cfgmod.model_config(cfg)
    run_id = cfgmod.run_id_of(cfg, parent)
    run_dir = os.path.join(out_root, run_id)
    fresh = True
    if os.path.isdir(run_dir):
        if force:
            shutil.rmtree(run_dir)
        elif resume:
            fresh = False
        else:
            raise ConfigError(
                f"run {run_id} already exists at {run_dir}; pass --force to redo or --resume to continue"
            )
    os.makedirs(run_dir, exist_ok=True)

    data = build_data(cfg)
    calib_hash = token_fingerprint(data.calibration(cfg).batches)
    if fresh:
        run_keys = {
            "run.id": run_id,
            "run.created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "run.code_version": _code_version(),
            "run.eval_set_hash": data.eval_hash,
            "run.calib_set_hash": calib_hash,
        }
        if parent:
            run_keys["run.parent_id"] = parent[0]
            run_keys["run.branch_step"] = str(parent[1])
        write_manifest(run_dir, cfg, run_keys)

    target = spec.total_steps if stop_after is None else min(stop_after, spec.total_steps)
    if fresh:
        if start_state is not None:
            ckpt, opt_state, cursor = start_state
        else:
            ckpt = init(mcfg)
            opt_state = init_opt_state(ckpt)
            cursor = 0
        if not os.path.exists(ckpt_path(run_dir, ckpt.step)):
            save_checkpoint(ckpt_path(run_dir, ckpt.step), ckpt)
            save_opt_state(opt_path(run_dir, ckpt.step), opt_state, cursor)
    else:
        steps_on_disk = list_ckpt_steps(run_dir)
        if not steps_on_disk:
            raise ConfigError(f"cannot resume {run_dir}: no checkpoints")
        last = steps_on_disk[-1]
        ckpt = load_checkpoint(ckpt_path(run_dir, last))
        opt_state, cursor = load_opt_state(opt_path(run_dir, last))
    if ckpt.step >= target:
        return run_dir

    metrics_store = MetricsStore(os.path.join(run_dir, METRICS))
    norm_log = _NormLog(os.path.join(run_dir, NORMS))
    # checkpoints also land on phase boundaries and the stop point (resume);
    # eval/norm rows fire on intervals plus the schedule end only, so a
    # stopped+resumed run emits byte-identical CSVs
    ckpt_marks = _phase_boundaries(spec) + (target,)

    def save_hook(ev: TrainEvent) -> None:
        path = ckpt_path(run_dir, ev.step)
        if not os.path.exists(path):
            save_checkpoint(path, ev.ckpt)
            save_opt_state(opt_path(run_dir, ev.step), ev.opt_state, ev.cursor)

    def eval_hook(ev: TrainEvent) -> None:
        ce = eval_ce(ev.ckpt, data.eval_batches)
        acc = eval_accuracy(ev.ckpt, data.eval_batches)
        rec = MetricRecord(
            run_id=run_id, step=ev.step, tokens_seen=ev.ckpt.tokens_seen, lr=ev.lr,
            train_loss=ev.train_loss, val_ce_fp=ce, acc_fp=acc,
            grad_norm=ev.grad_norm, weight_norm=weight_norm(ev.ckpt),
        )
        metrics_store.upsert(rec)
        metrics_store.save()
        log.info("run %s step %d: train %.4f val %.4f acc %.4f lr %.3g",
                 run_id[:8], ev.step, ev.train_loss, ce, acc, ev.lr)

    hooks = [
        TrainHook(cfg["train.ckpt_interval"], save_hook, ckpt_marks),
        TrainHook(cfg["train.eval_interval"], eval_hook, (spec.total_steps,)),
        TrainHook(cfg["train.log_interval"], norm_log.append, (spec.total_steps,)),
    ]
    train_loop(
        ckpt, opt_state, data.train, cursor, spec, ocfg,
        cfg["train.batch_size"], cfg["data.seq_len"], target - ckpt.step, hooks,
    )
    return run_dir


def _code_version() -> str:
    from . import __version__

    return __version__


def cmd_branch(
    parent_dir: str,
    branch_step: int,
    decay_frac: float = 0.1,
    out_root: Optional[str] = None,
    decay_steps: Optional[int] = None,
    force: bool = False,
) -> str:
    """Cool down a trunk from `branch_step`; returns the child run directory.

    The cooldown length defaults to decay_frac * branch_step. The child's
    schedule is the WSD run that matches the trunk up to the branch point
    and then decays linearly to zero.
    """
    cfg = load_manifest(parent_dir)
    parent_id = str(cfg.get("run.id", os.path.basename(parent_dir)))
    cpath, opath = ckpt_path(parent_dir, branch_step), opt_path(parent_dir, branch_step)
    for p in (cpath, opath):
        if not os.path.exists(p):
            raise ConfigError(
                f"branch point {branch_step} needs {p}; rerun training with a "
                f"checkpoint interval that lands on step {branch_step}"
            )
    parent_spec = cfgmod.schedule_spec(cfg)
    if parent_spec.decay_steps and branch_step > parent_spec.total_steps - parent_spec.decay_steps:
        raise ConfigError("cannot branch inside the parent's own decay phase")
    cool = decay_steps if decay_steps is not None else max(1, round(decay_frac * branch_step))
    total = branch_step + cool
    warmup = min(parent_spec.warmup_steps, branch_step)
    child = {k: v for k, v in cfg.items() if k not in cfgmod.RUN_KEYS}
    child["schedule.kind"] = "wsd"
    child["schedule.total_steps"] = total
    child["schedule.warmup_frac"] = warmup / total
    child["schedule.decay_frac"] = cool / total
    ckpt = load_checkpoint(cpath)
    opt_state, cursor = load_opt_state(opath)
    return cmd_train(
        child,
        out_root or os.path.dirname(os.path.abspath(parent_dir)),
        force=force,
        parent=(parent_id, branch_step),
        start_state=(ckpt, opt_state, cursor),
    )


# -- quantize + eval -----------------------------------------------------------


class _QuantLayerLog:
    def __init__(self, path: str):
        self.path = path
        if not os.path.exists(path):
            with open(path, "w", encoding="utf-8") as f:
                f.write("run_id,step,bits,method,layer,weight_error,recon_error,damping\n")

    def append(self, run_id: str, step: int, bits: int, method: str, stats) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            for s in stats:
                rec = "" if s.recon_error is None else f"{s.recon_error:.9g}"
                f.write(
                    f"{run_id},{step},{bits},{method},{s.name},"
                    f"{s.weight_error:.9g},{rec},{s.damping_used:.9g}\n"
                )


def evaluate_checkpoint_quantized(
    ckpt: Checkpoint,
    data: RunData,
    cfg: Dict[str, object],
    bits: Sequence[int],
    method: str,
    run_id: str,
    lr: Optional[float] = None,
):
    """Full MetricRecord for one checkpoint: FP eval plus each bit width."""
    calib = data.calibration(cfg) if method == "gptq" else None
    ce_fp = eval_ce(ckpt, data.eval_batches)
    acc_fp = eval_accuracy(ckpt, data.eval_batches)
    rec = MetricRecord(
        run_id=run_id, step=ckpt.step, tokens_seen=ckpt.tokens_seen, lr=lr,
        val_ce_fp=ce_fp, acc_fp=acc_fp, weight_norm=weight_norm(ckpt),
    )
    layer_stats = []
    for b in bits:
        qcfg = cfgmod.quant_config(cfg, b, method)
        qm, stats = quantize_model(ckpt, calib, qcfg)
        ce_q = eval_ce(qm, data.eval_batches)
        acc_q = eval_accuracy(qm, data.eval_batches)
        rec.val_ce_q[b] = ce_q
        rec.rel_ce_err[b] = relative_ce_error(ce_q, ce_fp)
        rec.delta_ptq[b] = delta_ptq(ce_q, ce_fp)
        rec.acc_q[b] = acc_q
        if acc_fp < 1.0 - 1e-12:
            rec.rel_acc_drop[b] = relative_acc_drop(acc_fp, acc_q)
        layer_stats.append((b, stats))
    return rec, layer_stats


def cmd_quantize_eval(
    run_dir: str,
    bits: Sequence[int] = (3, 4),
    method: Optional[str] = None,
    steps: Optional[Sequence[int]] = None,
    kind: str = "ckpt",
) -> Tuple[List[MetricRecord], List[Tuple[int, str]]]:
    """Quantize and evaluate stored checkpoints; appends metric CSV rows.

    Returns (records, failures). Per-checkpoint failures are recorded and
    the sweep continues.
    """
    cfg = load_manifest(run_dir)
    base_id = str(cfg.get("run.id", os.path.basename(run_dir)))
    run_id = base_id if kind == "ckpt" else f"{base_id}-{kind}"
    data = build_data(cfg)
    recorded = str(cfg.get("run.eval_set_hash", ""))
    if recorded and recorded != data.eval_hash:
        raise ConfigError(
            f"eval set hash mismatch for {run_dir}: corpus or config changed"
        )
    method = method or str(cfg["quant.method"])
    available = list_ckpt_steps(run_dir, kind)
    selected = available if steps is None else [s for s in available if s in set(steps)]
    if steps is not None:
        missing = set(steps) - set(available)
        if missing:
            raise ConfigError(f"no {kind} checkpoints at steps {sorted(missing)}")
    if not selected:
        log.warning("quantize-eval selected zero checkpoints in %s", run_dir)
        return [], []
    spec = cfgmod.schedule_spec(cfg)
    peak = cfg["optim.peak_lr"]

    def job(step: int):
        ckpt = load_checkpoint(ckpt_path(run_dir, step, kind))
        lr = schedule_value(spec, peak, step) if step <= spec.total_steps else None
        return evaluate_checkpoint_quantized(ckpt, data, cfg, bits, method, run_id, lr)

    results: Dict[int, tuple] = {}
    failures: List[Tuple[int, str]] = []
    workers = min(qlab_threads(), len(selected))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futs = {s: pool.submit(job, s) for s in selected}
        for s, fut in futs.items():
            try:
                results[s] = fut.result()
            except QlabError as exc:
                failures.append((s, str(exc)))
                log.error("quantize-eval failed at step %d: %s", s, exc)
    else:
        for s in selected:
            try:
                results[s] = job(s)
            except QlabError as exc:
                failures.append((s, str(exc)))
                log.error("quantize-eval failed at step %d: %s", s, exc)

    metrics_store = MetricsStore(os.path.join(run_dir, METRICS))
    layer_log = _QuantLayerLog(os.path.join(run_dir, QUANT_LAYERS))
    records = []
    for s in sorted(results):
        rec, layer_stats = results[s]
        metrics_store.upsert(rec)
        for b, stats in layer_stats:
            layer_log.append(run_id, s, b, method, stats)
        records.append(rec)
    metrics_store.save()
    return records, failures


# -- averaging over a run --------------------------------------------------------


def cmd_average(run_dir: str, k: int, interval: int) -> List[str]:
    """Rolling LAWA over stored checkpoints; emits lawa<k>_<step>.qlab files."""
    steps = [s for s in list_ckpt_steps(run_dir) if s > 0 and s % interval == 0]
    if not steps:
        raise ConfigError(f"no checkpoints at multiples of {interval} in {run_dir}")
    window = AveragingWindow(capacity=k)
    out = []
    for s in steps:
        ckpt = load_checkpoint(ckpt_path(run_dir, s))
        avg = lawa_push(window, ckpt)
        path = ckpt_path(run_dir, s, kind=f"lawa{k}")
        if not os.path.exists(path):
            save_checkpoint(path, avg)
        out.append(path)
    return out


def cmd_soup(inputs: Sequence[Tuple[str, float]], out_path: str) -> str:
    """Weighted merge of checkpoint files: [(path, weight), ...] -> out_path."""
    ckpts = [load_checkpoint(p) for p, _ in inputs]
    merged = soup(ckpts, [w for _, w in inputs])
    save_checkpoint(out_path, merged)
    return out_path


# -- sweeps ----------------------------------------------------------------------


@dataclass
class SweepPlan:
    base: Dict[str, object]
    axes: List[Tuple[str, List[object]]]
    seeds: List[int]


def parse_plan(path: str) -> SweepPlan:
    with open(path, "r", encoding="utf-8") as f:
        raw = cfgmod.parse_config_text(f.read(), allow_sweep_keys=True)
    base = {k: d for k, (_, d) in cfgmod.REGISTRY.items()}
    axes: List[Tuple[str, List[object]]] = []
    seeds = [0]
    for key, value in raw.items():
        if not key.startswith(cfgmod.SWEEP_PREFIX):
            base[key] = value
            continue
        target = key[len(cfgmod.SWEEP_PREFIX) :]
        if target == "seeds":
            seeds = [int(p.strip()) for p in str(value).split(",") if p.strip()]
            continue
        if target not in cfgmod.REGISTRY:
            raise ConfigError(f"sweep axis over unknown key {target!r}")
        typ, _ = cfgmod.REGISTRY[target]
        if typ == "int_list":
            raise ConfigError(f"cannot sweep list-valued key {target!r}")
        parse = cfgmod._PARSERS[typ]
        axes.append((target, [parse(p.strip()) for p in str(value).split(",") if p.strip()]))
    return SweepPlan(base, axes, seeds)


def plan_cells(plan: SweepPlan) -> List[Dict[str, object]]:
    cells: List[Dict[str, object]] = [dict(plan.base)]
    for key, values in plan.axes:
        cells = [dict(c, **{key: v}) for c in cells for v in values]
    out = []
    for seed in plan.seeds:
        for c in cells:
            cc = dict(c)
            cc["model.init_seed"] = seed
            cc["data.seed"] = seed
            out.append(cc)
    return out


def cmd_sweep(plan_path: str, out_root: str, force: bool = False) -> Tuple[List[str], str, int]:
    """Run every cell of a plan, then quantize-eval its final checkpoint.

    Returns (run_dirs, summary_csv_path, failure_count).
    """
    plan = parse_plan(plan_path)
    cells = plan_cells(plan)
    axis_keys = [k for k, _ in plan.axes]
    summary_path = os.path.join(out_root, "summary.csv")
    os.makedirs(out_root, exist_ok=True)
    header = (
        ["run_id", "seed"] + axis_keys
        + ["final_step", "val_ce_fp", "acc_fp", "rel_ce_err3", "rel_ce_err4",
           "delta_ptq3", "delta_ptq4", "status"]
    )
    lines = [",".join(header)]
    dirs: List[str] = []
    failures = 0
    for cell in cells:
        seed = cell["model.init_seed"]
        label = [str(cell[k]) for k in axis_keys]
        try:
            run_dir = cmd_train(cell, out_root, force=force)
            dirs.append(run_dir)
            final = cfgmod.schedule_spec(cell).total_steps
            recs, fails = cmd_quantize_eval(
                run_dir, bits=cell["quant.bits"], steps=[final]
            )
            if fails or not recs:
                raise QlabError(f"quantize-eval failed: {fails}")
            rec = recs[0]
            row = [rec.run_id, str(seed)] + label + [
                str(rec.step),
                f"{rec.val_ce_fp:.9g}",
                f"{rec.acc_fp:.9g}",
                _opt_fmt(rec.rel_ce_err.get(3)),
                _opt_fmt(rec.rel_ce_err.get(4)),
                _opt_fmt(rec.delta_ptq.get(3)),
                _opt_fmt(rec.delta_ptq.get(4)),
                "ok",
            ]
        except QlabError as exc:
            failures += 1
            log.error("sweep cell failed (%s): %s", label, exc)
            row = [cfgmod.run_id_of(cell), str(seed)] + label + [""] * 7 + ["failed"]
        lines.append(",".join(row))
    with open(summary_path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return dirs, summary_path, failures


def _opt_fmt(x: Optional[float]) -> str:
    return "" if x is None else f"{x:.9g}"


def lineage_forest(out_root: str) -> Dict[str, Optional[str]]:
    """Map run_id -> parent_id across an out_root; raises on cycles or
    dangling parents."""
    parents: Dict[str, Optional[str]] = {}
    for name in sorted(os.listdir(out_root)):
        run_dir = os.path.join(out_root, name)
        if not os.path.isfile(os.path.join(run_dir, MANIFEST)):
            continue
        cfg = load_manifest(run_dir)
        rid = str(cfg.get("run.id", name))
        parent = cfg.get("run.parent_id")
        parents[rid] = str(parent) if parent else None
    for rid in parents:
        seen = set()
        cur = rid
        while cur is not None:
            if cur in seen:
                raise ConfigError(f"lineage cycle through {cur}")
            seen.add(cur)
            if cur not in parents:
                raise ConfigError(f"run {rid} references missing parent {cur}")
            cur = parents[cur]
    return parents
