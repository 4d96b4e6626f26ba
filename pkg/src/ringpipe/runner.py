"""Training, verification, and benchmark runs over a RunConfig.

`train` executes the configured mode step by step, streams the metrics
CSV, and writes resumable checkpoints.  `verify` replays a short run while
recording full weight snapshots, then re-derives every delayed gradient
with the sequential-backprop oracle and reports deviations per (step,
module).  `bench` compares logical-clock throughput and module utilization
across K values.
"""

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from .config import RunConfig
from .data import BatchSource, load_corpus
from .engine import (
    ConcurrentPipelineEngine,
    LogicalCostModel,
    PipelineEngine,
    SequentialRunner,
    WorkerFailure,
    packet_grad_sq_norm,
    sequential_gradients,
)
from .layers import TransformerBlockLayer
from .metrics import MetricsRow, MetricsWriter, read_metrics
from .model import (
    ModuleState,
    build_stack,
    measure_layer_costs,
    partition,
    snapshot_params,
)
from .optim import make_optimizer
from .tensor import NonFiniteError, SeededRng, mix64

ORACLE_TOLERANCE = 1e-10

# config fields that must match between a checkpoint and the resuming run
_STRUCTURAL_FIELDS = (
    "data", "vocab_mode", "seq_len", "batch_size", "n_blocks", "model_dim",
    "ffn_dim", "dropout_p", "k", "mode", "tied_grad", "stale_weights",
    "balance", "optimizer", "lr", "lr_mode", "warmup_steps", "steps",
    "adam_beta1", "adam_beta2", "adam_eps", "seed_init", "seed_data",
    "seed_dropout",
)


@dataclass
class Runtime:
    cfg: RunConfig
    source: BatchSource
    stack: object
    part: object
    engine: object
    optimizer: object
    vocab_size: int


def build_runtime(cfg, synthetic_cost=None):
    tokens, vocab = load_corpus(cfg.data, cfg.vocab_mode)
    source = BatchSource(tokens, cfg.seq_len, cfg.batch_size, cfg.seed_data)
    stack = build_stack(
        vocab, cfg.model_dim, cfg.ffn_dim, cfg.n_blocks, cfg.seq_len,
        cfg.dropout_p, cfg.seed_init,
    )
    costs = None
    if cfg.balance == "by_cost":
        costs = measure_layer_costs(stack, source.batch_at(0).x, cfg.seed_dropout)
    k = 1 if cfg.mode == "sequential" else cfg.k
    part = partition(stack.num_layers, k, cfg.balance, costs)

    if synthetic_cost is not None:
        cost_model = LogicalCostModel.synthetic(k, synthetic_cost, cfg.relay_cost)
    else:
        cost_model = LogicalCostModel.derived(
            part, cfg.relay_cost, recompute=cfg.mode != "sequential"
        )

    common = dict(
        dropout_seed=cfg.seed_dropout,
        tied_grad=cfg.tied_grad,
        cost_model=cost_model,
    )
    if cfg.mode == "sequential":
        engine = SequentialRunner(stack, part, **common)
    elif cfg.mode == "ouroboros-ref":
        engine = PipelineEngine(stack, part, stale_weights=cfg.stale_weights, **common)
    elif cfg.mode == "ouroboros-concurrent":
        engine = ConcurrentPipelineEngine(
            stack, part, stale_weights=cfg.stale_weights, **common
        )
    else:
        raise ValueError(f"unknown mode {cfg.mode!r}")

    optimizer = make_optimizer(
        cfg.optimizer, cfg.lr_schedule(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    )
    return Runtime(cfg, source, stack, part, engine, optimizer, vocab)


# ---------------------------------------------------------------------------
# checkpoint state


def _collect_state(runtime, next_step):
    stack = runtime.stack
    arrays = {"stack.tied": stack.tied}
    for idx, params in enumerate(stack.params):
        for name, arr in params.items():
            if name == "tied":
                continue
            arrays[f"stack.L{idx}.{name}"] = arr
    for key, arr in runtime.optimizer.state_arrays().items():
        arrays[f"optim.{key}"] = arr

    engine = runtime.engine
    if isinstance(engine, (PipelineEngine,)):
        for m in engine.modules:
            start = m.layer_range[0]
            for s in m.ring.steps():
                for offset, params in enumerate(m.ring.get(s)):
                    for name, arr in params.items():
                        arrays[f"m{m.index}.ring.{s}.L{start + offset}.{name}"] = arr
            for j, slot in enumerate(m.slots):
                arrays[f"m{m.index}.slot{j}.inputs"] = np.asarray(slot.inputs)
                if slot.targets is not None:
                    arrays[f"m{m.index}.slot{j}.targets"] = np.asarray(slot.targets)
                arrays[f"m{m.index}.slot{j}.meta"] = np.array(
                    [slot.step, slot.sample_id], dtype=np.int64
                )
                arrays[f"m{m.index}.slot{j}.seeds"] = np.array(
                    slot.layer_seeds, dtype=np.uint64
                )
        for k, arr in engine.export_boundary().items():
            arrays[f"boundary.{k}"] = arr
    sidecar = {
        "format": ckpt.VERSION,
        "next_step": next_step,
        "clock": engine.clock,
        "config": runtime.cfg.to_dict(),
    }
    return arrays, sidecar


def save_training_state(path, runtime, next_step):
    arrays, sidecar = _collect_state(runtime, next_step)
    ckpt.save_arrays(path, arrays)
    ckpt.save_sidecar(path, sidecar)


def load_training_state(path, runtime):
    """Restore weights, optimizer moments, snapshot rings, pending slots,
    and boundary gradients in place; returns the next step index."""
    arrays = ckpt.load_arrays(path)
    sidecar = ckpt.load_sidecar(path)
    saved_cfg = sidecar["config"]
    for name in _STRUCTURAL_FIELDS:
        ours = getattr(runtime.cfg, name)
        theirs = saved_cfg.get(name)
        if ours != theirs:
            raise ckpt.CheckpointError(
                f"checkpoint config mismatch on {name!r}: {theirs!r} != {ours!r}"
            )

    stack = runtime.stack
    stack.tied[:] = arrays.pop("stack.tied")
    for idx, params in enumerate(stack.params):
        for name, arr in params.items():
            if name == "tied":
                continue
            arr[:] = arrays.pop(f"stack.L{idx}.{name}")

    optim_arrays = {}
    for name in list(arrays):
        if name.startswith("optim."):
            optim_arrays[name[len("optim."):]] = arrays.pop(name)
    runtime.optimizer.load_state_arrays(optim_arrays)

    engine = runtime.engine
    if isinstance(engine, PipelineEngine):
        from .model import StaleSlot

        for m in engine.modules:
            start = m.layer_range[0]
            prefix = f"m{m.index}."
            ring_steps = sorted(
                {
                    int(name.split(".")[2])
                    for name in arrays
                    if name.startswith(prefix + "ring.")
                }
            )
            for s in ring_steps:
                params_list = []
                for offset, live in enumerate(m.params):
                    entry = {}
                    for name in live:
                        entry[name] = arrays.pop(
                            f"{prefix}ring.{s}.L{start + offset}.{name}"
                        )
                    params_list.append(entry)
                m.ring.put(s, params_list)
            m.slots.clear()
            j = 0
            while f"{prefix}slot{j}.meta" in arrays:
                meta = arrays.pop(f"{prefix}slot{j}.meta")
                seeds = [int(v) for v in arrays.pop(f"{prefix}slot{j}.seeds")]
                inputs = arrays.pop(f"{prefix}slot{j}.inputs")
                targets = arrays.pop(f"{prefix}slot{j}.targets", None)
                m.slots.append(
                    StaleSlot(int(meta[0]), int(meta[1]), inputs, targets, seeds)
                )
                j += 1
        restored = {}
        for name in list(arrays):
            if name.startswith("boundary."):
                restored[int(name.split(".")[1])] = arrays.pop(name)
        engine.import_boundary(restored)
    engine.clock = float(sidecar["clock"])
    return int(sidecar["next_step"])


# ---------------------------------------------------------------------------
# train


def train(cfg, progress=None):
    """Run the configured training; returns a summary dict.

    Aborts (with `diverged` set) as soon as the loss or any gradient goes
    non-finite.  Writes metrics.csv, trace.jsonl (pipeline modes), and a
    final checkpoint under cfg.out_dir.
    """
    cfg.validate()
    runtime = build_runtime(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    trace_path = os.path.join(cfg.out_dir, "trace.jsonl")
    ckpt_path = os.path.join(cfg.out_dir, "checkpoint.bin")

    start_step = 0
    if cfg.resume:
        start_step = load_training_state(cfg.resume, runtime)

    writer = MetricsWriter(metrics_path)
    engine = runtime.engine
    optimizer = runtime.optimizer
    diverged_at = None
    last_loss = math.nan
    steps_run = 0
    end_step = min(cfg.steps, cfg.halt_at) if cfg.halt_at else cfg.steps
    try:
        for t in range(start_step, end_step):
            wall0 = time.perf_counter()
            try:
                batch = runtime.source.batch_at(t)
                packet, loss = engine.step(t, batch, optimizer)
            except (NonFiniteError, WorkerFailure):
                diverged_at = t
                break
            if not math.isfinite(loss):
                diverged_at = t
                break
            wall_ms = (time.perf_counter() - wall0) * 1e3
            row = MetricsRow(
                t,
                wall_ms,
                engine.last_step_logical,
                loss,
                packet_grad_sq_norm(packet),
                optimizer.schedule.at(t),
            )
            writer.write(row)
            last_loss = loss
            steps_run += 1
            if progress is not None:
                progress(t, loss)
            if cfg.checkpoint_every and (t + 1) % cfg.checkpoint_every == 0:
                save_training_state(ckpt_path, runtime, t + 1)
        if diverged_at is None:
            save_training_state(ckpt_path, runtime, end_step)
    finally:
        writer.close()
        if hasattr(engine, "trace"):
            engine.trace.to_jsonl(trace_path)
        engine.close()

    return {
        "mode": cfg.mode,
        "k": runtime.part.k,
        "steps_run": steps_run,
        "start_step": start_step,
        "final_loss": last_loss,
        "diverged": diverged_at is not None,
        "diverged_at": diverged_at,
        "metrics_path": metrics_path,
        "trace_path": trace_path,
        "checkpoint_path": ckpt_path,
    }


# ---------------------------------------------------------------------------
# verify


def _spot_finite_difference(seed=123, coords_per_param=3, h_rel=1e-6):
    """Central-difference spot check of the full-model analytic gradient."""
    from .engine import BatchSample
    from .model import full_forward_loss

    stack = build_stack(7, 6, 6, 2, 4, 0.0, seed)
    rng = SeededRng(mix64(seed, 1))
    x = (rng.uniform((2, 4)) * 7).astype(np.int64)
    y = (rng.uniform((2, 4)) * 7).astype(np.int64)
    grads, grad_vi, grad_vo, _, _ = sequential_gradients(
        stack.layers, stack.params, BatchSample(x, y, 0), dropout_seed=5, step=0
    )

    def loss_fn():
        loss, _ = full_forward_loss(stack, x, y, dropout_seed=5, step=0, train=True)
        return loss

    worst = 0.0
    picker = SeededRng(mix64(seed, 2))
    checks = [("tied", stack.tied, grad_vi + grad_vo)]
    for idx, params in enumerate(stack.params):
        for name, arr in params.items():
            if name == "tied":
                continue
            checks.append((f"L{idx}.{name}", arr, grads[f"L{idx}.{name}"]))
    for label, arr, analytic in checks:
        flat = arr.reshape(-1)
        aflat = analytic.reshape(-1)
        for _ in range(coords_per_param):
            i = int(picker.uniform(()) * flat.size)
            old = flat[i]
            h = h_rel * max(1.0, abs(old))
            flat[i] = old + h
            f_plus = loss_fn()
            flat[i] = old - h
            f_minus = loss_fn()
            flat[i] = old
            fd = (f_plus - f_minus) / (2 * h)
            denom = max(abs(aflat[i]), abs(fd), 1.0)
            worst = max(worst, float(abs(aflat[i] - fd) / denom))
    return worst


def dropout_replay_check(n_pairs=100, seed=77):
    """Recompute-vs-store-all agreement over random (module, step) pairs.

    Each pair runs a module forward with dropout, then compares a backward
    through the kept tapes against the recompute path, bitwise.
    """
    picker = SeededRng(seed)
    mismatches = 0
    for pair in range(n_pairs):
        dim = 8
        blocks = 1 + int(picker.uniform(()) * 3)
        layer_count = blocks
        stack = build_stack(7, dim, dim, blocks + 1, 4, 0.2, mix64(seed, pair))
        start = 1 + int(picker.uniform(()) * (blocks + 1 - layer_count))
        module = ModuleState(
            1, 1, (start, start + layer_count),
            stack.layers[start : start + layer_count],
            stack.params[start : start + layer_count],
            mix64(seed, pair, 1),
        )
        step = int(picker.uniform(()) * 50)
        module.snapshot(step)
        x = picker.uniform((2, 4, dim)) - 0.5
        out = module.forward(x, step, step, None, True)
        slot = module.slots[0]
        _, tapes = module._run_forward(module.params, x, slot.layer_seeds, True)
        grad_out = picker.uniform(out.shape) - 0.5
        _, grads_store, _, _ = module._backward_from_tapes(
            module.params, tapes, slot, grad_out
        )
        _, grads_rec, _, _ = module.recompute_backward(slot, grad_out)
        for key in grads_store:
            if grads_store[key].tobytes() != grads_rec[key].tobytes():
                mismatches += 1
    return mismatches


def _k1_bitwise_check(cfg, steps=20):
    """ouroboros-ref with K=1 against the sequential runner, bitwise."""
    tokens, vocab = load_corpus(cfg.data, cfg.vocab_mode)
    source = BatchSource(tokens, cfg.seq_len, cfg.batch_size, cfg.seed_data)

    def make(mode_sequential):
        stack = build_stack(
            vocab, cfg.model_dim, cfg.ffn_dim, cfg.n_blocks, cfg.seq_len,
            cfg.dropout_p, cfg.seed_init,
        )
        part = partition(stack.num_layers, 1)
        if mode_sequential:
            eng = SequentialRunner(stack, part, cfg.seed_dropout, cfg.tied_grad)
        else:
            eng = PipelineEngine(stack, part, cfg.seed_dropout, cfg.tied_grad)
        opt = make_optimizer(
            cfg.optimizer, cfg.lr_schedule(), cfg.adam_beta1, cfg.adam_beta2,
            cfg.adam_eps,
        )
        return stack, eng, opt

    stack_a, eng_a, opt_a = make(False)
    stack_b, eng_b, opt_b = make(True)
    for t in range(steps):
        batch = source.batch_at(t)
        _, loss_a = eng_a.step(t, batch, opt_a)
        _, loss_b = eng_b.step(t, batch, opt_b)
        if loss_a != loss_b:
            return False
    return stack_a.tied.tobytes() == stack_b.tied.tobytes()


def verify(cfg, steps=50):
    """Replay a short run and check every delayed gradient against the
    sequential-backprop oracle at the recorded snapshots; also runs the
    finite-difference, dropout-replay, tie, and K=1 collapse checks."""
    if steps > 200:
        raise ValueError("verify is capped at 200 steps (oracle cost)")
    cfg.validate()
    if cfg.mode == "sequential":
        raise ValueError("verify targets the pipeline modes; set mode=ouroboros-ref")
    runtime = build_runtime(cfg)
    engine = runtime.engine
    stack = runtime.stack
    K = runtime.part.k

    packets = []
    batches = []
    snapshots = []
    tie_ok = True
    emb_params = engine.modules[0].params[0]
    proj_params = engine.modules[-1].params[-1]
    try:
        for t in range(steps):
            batch = runtime.source.batch_at(t)
            snapshots.append(snapshot_params(stack.params))
            batches.append(batch)
            packet, _ = engine.step(t, batch, runtime.optimizer)
            packets.append(packet)
            if emb_params["tied"] is not proj_params["tied"]:
                tie_ok = False
        ring_ok = _ring_matches_snapshots(engine, snapshots)
    finally:
        engine.close()

    deviations = []  # (t, k, max_abs)
    emb_deviations = []  # (t, max_abs)
    zero_pad_ok = True
    oracle_cache = {}

    def oracle(s):
        if s not in oracle_cache:
            oracle_cache[s] = sequential_gradients(
                stack.layers, snapshots[s], batches[s], cfg.seed_dropout, s
            )
        return oracle_cache[s]

    for t, packet in enumerate(packets):
        for k in range(1, K + 1):
            s = t - K + k
            got = packet.module_grads[k - 1]
            if s < 0:
                if any(g.any() for g in got.values()):
                    zero_pad_ok = False
                continue
            oracle_grads = oracle(s)[0]
            start, end = runtime.part.groups[k - 1]
            worst = 0.0
            for key, arr in oracle_grads.items():
                layer_idx = int(key.split(".")[0][1:])
                if start <= layer_idx < end:
                    worst = max(worst, float(np.abs(got[key] - arr).max()))
            deviations.append((t, k, worst))
        if t - K + 1 < 0:
            if packet.emb_grad.any():
                zero_pad_ok = False
            continue
        vo = oracle(t)[2]
        vi = oracle(t - K + 1)[1]
        if cfg.tied_grad == "half_avg":
            expect = 0.5 * vo + 0.5 * vi
        else:
            expect = vo + vi
        emb_deviations.append((t, float(np.abs(packet.emb_grad - expect).max())))

    oracle_max = max(
        [d for _, _, d in deviations] + [d for _, d in emb_deviations] + [0.0]
    )
    fd_worst = _spot_finite_difference()
    replay_mismatches = dropout_replay_check(n_pairs=10)
    k1_ok = _k1_bitwise_check(cfg)

    oracle_ok = oracle_max <= ORACLE_TOLERANCE
    informational = cfg.stale_weights == "current"
    passed = (
        (oracle_ok or informational)
        and zero_pad_ok
        and tie_ok
        and ring_ok
        and fd_worst < 1e-6
        and replay_mismatches == 0
        and k1_ok
    )
    return {
        "mode": cfg.mode,
        "k": K,
        "steps": steps,
        "stale_weights": cfg.stale_weights,
        "oracle_max_abs": oracle_max,
        "oracle_tolerance": ORACLE_TOLERANCE,
        "oracle_ok": oracle_ok,
        "oracle_informational": informational,
        "worst_by_module": _worst_by_module(deviations, K),
        "emb_max_abs": max([d for _, d in emb_deviations] + [0.0]),
        "zero_padding_ok": zero_pad_ok,
        "tie_ok": tie_ok,
        "snapshot_fidelity_ok": ring_ok,
        "finite_difference_worst": fd_worst,
        "finite_difference_ok": fd_worst < 1e-6,
        "dropout_replay_mismatches": replay_mismatches,
        "k1_bitwise_ok": k1_ok,
        "passed": passed,
    }


def _worst_by_module(deviations, K):
    worst = {k: 0.0 for k in range(1, K + 1)}
    for _, k, d in deviations:
        worst[k] = max(worst[k], d)
    return worst


def _ring_matches_snapshots(engine, snapshots):
    """Ring snapshots must equal the full-stack copies recorded outside."""
    for m in engine.modules:
        start, end = m.layer_range
        for s in m.ring.steps():
            if s >= len(snapshots):
                return False
            recorded = snapshots[s][start:end]
            ring = m.ring.get(s)
            for rec_params, ring_params in zip(recorded, ring):
                for name in ring_params:
                    if rec_params[name].tobytes() != ring_params[name].tobytes():
                        return False
    return True


# ---------------------------------------------------------------------------
# bench


def bench(cfg, k_values, steps=30, module_cost=1.0):
    """Throughput table across K: wall steps/sec plus logical-clock
    accounting with equal synthetic per-module costs, sequential baseline
    versus the pipeline, and per-module backward utilization."""
    cfg.validate()
    rows = []
    for k in k_values:
        if k > cfg.n_layers:
            raise ValueError(f"K={k} exceeds layer count {cfg.n_layers}")
        run_cfg = RunConfig(**{**cfg.to_dict(), "k": k, "steps": steps})
        run_cfg.mode = "ouroboros-concurrent" if k >= 2 else "ouroboros-ref"
        run_cfg.lr_mode = "fixed"
        runtime = build_runtime(run_cfg, synthetic_cost=module_cost)
        engine = runtime.engine
        wall0 = time.perf_counter()
        logical = []
        backward_logical = []
        try:
            for t in range(steps):
                engine.step(t, runtime.source.batch_at(t), runtime.optimizer)
                logical.append(engine.last_step_logical)
                backward_logical.append(engine.last_backward_logical)
            wall = time.perf_counter() - wall0
            utilization = {}
            steady = [r for r in engine.trace.rows if r["step"] >= k]
            for m in engine.modules:
                busy = sum(
                    1 for r in steady
                    if r["module"] == m.index and r["phase"] == "backward"
                )
                total = steps - k
                utilization[m.index] = busy / total if total > 0 else 1.0
        finally:
            engine.close()

        seq_logical = (
            sum(LogicalCostModel.synthetic(k, module_cost, cfg.relay_cost).fwd)
            + sum(LogicalCostModel.synthetic(k, module_cost, cfg.relay_cost).bwd)
            + 2 * (k - 1) * cfg.relay_cost
        )
        seq_backward = k * module_cost + (k - 1) * cfg.relay_cost
        pipe_logical = logical[-1]
        pipe_backward = backward_logical[-1]
        rows.append(
            {
                "k": k,
                "wall_steps_per_sec": steps / wall,
                "logical_per_step": pipe_logical,
                "sequential_logical_per_step": seq_logical,
                "speedup_logical": seq_logical / pipe_logical,
                "backward_logical": pipe_backward,
                "sequential_backward_logical": seq_backward,
                "speedup_backward": seq_backward / pipe_backward,
                "utilization": utilization,
            }
        )
    return rows
