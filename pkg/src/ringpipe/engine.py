"""The delayed-gradient pipeline schedule.

Each step t: (1) every module snapshots its weights, (2) the step's batch
relays forward through all K modules at the pre-update weights, (3) every
module runs the delayed backward for the sample that entered the pipeline
K-k steps ago, at the weight snapshot taken back then (module K's backward
is always fresh), (4) the tied-embedding gradient mixes the fresh
output-side part with the (K-1)-stale input-side part, (5) the optimizer
applies the assembled packet behind a barrier.

Boundary error gradients hop one module down per step, so module k backs
up sample s exactly one step after module k+1 did.  The reference executor
runs everything on one thread in a fixed order; the concurrent executor
runs module backwards on worker threads exchanging tensors through bounded
FIFO queues and produces bit-identical packets.

`sequential_gradients` is the independent full-backprop path used both as
the training baseline and as the oracle that verifies every delayed
gradient at its recorded snapshot.
"""

import json
import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from .layers import cross_entropy, loss_and_head_backward
from .model import ScheduleViolation, build_modules
from .tensor import DimensionError, NonFiniteError, SeededRng, mix64


@dataclass
class BatchSample:
    x: np.ndarray  # token ids [B, T]
    y: np.ndarray  # next-token targets [B, T]
    sample_id: int


@dataclass
class GradientPacket:
    """Per-step output: one gradient dict per module (tied matrix excluded),
    the mixed tied-embedding gradient, and which sample each module consumed
    (None while that module is still zero-padded)."""

    step: int
    module_grads: list
    emb_grad: np.ndarray
    sample_ids: list
    loss: float


def embedding_gradient(t, K, grad_vo_fresh, grad_vi_stale, convention="half_avg"):
    """Mix the fresh output-projection gradient with the stale input-embedding
    gradient; zero until the first delayed input-side gradient exists."""
    if t - K + 1 < 0:
        if grad_vi_stale is not None:
            raise ScheduleViolation("stale embedding gradient before step K-1")
        return np.zeros_like(grad_vo_fresh)
    if grad_vi_stale is None:
        raise ScheduleViolation("missing stale embedding gradient")
    if grad_vo_fresh.shape != grad_vi_stale.shape:
        raise DimensionError("embedding gradient shape mismatch")
    if convention == "half_avg":
        return 0.5 * grad_vo_fresh + 0.5 * grad_vi_stale
    if convention == "sum":
        return grad_vo_fresh + grad_vi_stale
    raise ValueError(f"unknown tied_grad convention {convention!r}")


def packet_grad_sq_norm(packet):
    """Squared norm of the assembled packet, summed in a fixed key order."""
    acc = 0.0
    for grads in packet.module_grads:
        for key in sorted(grads):
            g = grads[key]
            acc += float(np.sum(g * g))
    acc += float(np.sum(packet.emb_grad * packet.emb_grad))
    return acc


@dataclass
class LogicalCostModel:
    """Per-module cost units on the simulated clock."""

    fwd: list
    bwd: list
    relay: float = 0.05

    @classmethod
    def derived(cls, part, relay=0.05, recompute=True):
        # one unit per layer forward, two per backward, plus the recompute
        # forward the delayed backward pays for
        sizes = [end - start for start, end in part.groups]
        factor = 3.0 if recompute else 2.0
        return cls([float(s) for s in sizes], [factor * s for s in sizes], relay)

    @classmethod
    def synthetic(cls, K, module_cost=1.0, relay=0.05):
        return cls([module_cost] * K, [module_cost] * K, relay)


class ScheduleTrace:
    """Logical-clock occupancy records, one per (step, module, phase)."""

    def __init__(self):
        self.rows = []

    def record(self, step, module, phase, sample_id, start, end):
        self.rows.append(
            {
                "step": step,
                "module": module,
                "phase": phase,
                "sample": sample_id,
                "start": start,
                "end": end,
            }
        )

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for row in self.rows:
                fh.write(json.dumps(row) + "\n")

    def backward_rows(self):
        return [r for r in self.rows if r["phase"] == "backward"]

    def idle_backward_steps(self, module, from_step=0):
        return [
            r["step"]
            for r in self.rows
            if r["phase"] == "idle" and r["module"] == module and r["step"] >= from_step
        ]


class WorkerFailure(RuntimeError):
    pass


class PipelineEngine:
    """Reference executor: deterministic single-thread schedule."""

    def __init__(
        self,
        stack,
        part,
        dropout_seed,
        tied_grad="half_avg",
        stale_weights="snapshot",
        train=True,
        cost_model=None,
    ):
        self.stack = stack
        self.part = part
        self.K = part.k
        self.modules = build_modules(stack, part, dropout_seed)
        self.tied_grad = tied_grad
        self.stale_weights = stale_weights
        self.train = train
        self.costs = cost_model or LogicalCostModel.derived(part)
        self.trace = ScheduleTrace()
        self.clock = 0.0
        self.last_step_logical = 0.0
        self.boundary = {}  # module k -> error gradient waiting for its next backward

    # -- schedule phases ---------------------------------------------------

    def _relay(self, t, batch):
        x = batch.x
        start = self.clock
        for m in self.modules:
            targets = batch.y if m.has_projection else None
            end = start + self.costs.fwd[m.index - 1]
            self.trace.record(t, m.index, "forward", batch.sample_id, start, end)
            x = m.forward(x, t, batch.sample_id, targets, self.train)
            start = end + (self.costs.relay if m.index < self.K else 0.0)
        return x, start

    def _module_backward(self, t, k):
        m = self.modules[k - 1]
        if t - self.K + k < 0:
            return None
        slot = m.pop_slot()
        if slot.step != t - self.K + k:
            raise ScheduleViolation(
                f"module {k} popped slot for step {slot.step}, expected {t - self.K + k}"
            )
        grad_out = None
        if not m.has_projection:
            if k not in self.boundary:
                raise ScheduleViolation(f"module {k} missing boundary gradient")
            grad_out = self.boundary[k]
        g_in, grads, tied, loss = m.recompute_backward(
            slot, grad_out, self.stale_weights, self.train
        )
        return g_in, grads, tied, slot.sample_id, slot.step

    def _backward_all(self, t):
        return {k: self._module_backward(t, k) for k in range(1, self.K + 1)}

    def _assemble(self, t, results, loss):
        module_grads = []
        sample_ids = []
        grad_vo = None
        grad_vi = None
        next_boundary = {}
        for k in range(1, self.K + 1):
            res = results[k]
            if res is None:
                module_grads.append(self.modules[k - 1].zero_grads())
                sample_ids.append(None)
                continue
            g_in, grads, tied, sample_id, _ = res
            module_grads.append(grads)
            sample_ids.append(sample_id)
            if tied["Vo"] is not None:
                grad_vo = tied["Vo"]
            if tied["Vi"] is not None:
                grad_vi = tied["Vi"]
            if k > 1:
                next_boundary[k - 1] = g_in
        self.boundary = next_boundary
        emb = embedding_gradient(t, self.K, grad_vo, grad_vi, self.tied_grad)
        return GradientPacket(t, module_grads, emb, sample_ids, loss)

    def _advance_clock(self, t, results, relay_end):
        longest = 0.0
        for k in range(1, self.K + 1):
            res = results[k]
            if res is None:
                self.trace.record(t, k, "idle", None, relay_end, relay_end)
                continue
            dur = self.costs.bwd[k - 1]
            self.trace.record(t, k, "backward", res[3], relay_end, relay_end + dur)
            longest = max(longest, dur)
        handoff = self.costs.relay if self.K > 1 else 0.0
        step_end = relay_end + longest + handoff
        self.last_step_logical = step_end - self.clock
        self.last_backward_logical = longest + handoff
        self.clock = step_end

    # -- public ------------------------------------------------------------

    def step(self, t, batch, optimizer=None):
        """One schedule step; applies the optimizer if one is given."""
        if t < 0:
            raise ValueError("step index must be >= 0")
        for m in self.modules:
            m.snapshot(t)
        logits, relay_end = self._relay(t, batch)
        loss = cross_entropy(logits, batch.y)
        results = self._backward_all(t)
        packet = self._assemble(t, results, loss)
        self._advance_clock(t, results, relay_end)
        if optimizer is not None:
            optimizer.apply(t, packet, self.modules, self.stack.tied)
        return packet, loss

    def export_boundary(self):
        return dict(self.boundary)

    def import_boundary(self, grads):
        self.boundary = dict(grads)

    def close(self):
        pass


class ConcurrentPipelineEngine(PipelineEngine):
    """Same schedule, but each module runs on its own worker thread.

    Activations and boundary gradients travel through bounded FIFO queues;
    a per-step barrier precedes the optimizer update.  Every tensor a
    worker consumes is fully determined before the step starts (or, for
    activations, by the single upstream producer), so packets are
    bit-identical to the reference executor no matter how threads
    interleave.
    """

    def __init__(self, *args, timeout=120.0, **kwargs):
        super().__init__(*args, **kwargs)
        if self.K < 2:
            raise ValueError("concurrent execution needs K >= 2")
        self._timeout = timeout
        self._act_queues = [queue.Queue(maxsize=self.K) for _ in range(self.K + 1)]
        self._bound_queues = {k: queue.Queue(maxsize=self.K) for k in range(1, self.K)}
        self._cmd_queues = [queue.Queue(maxsize=1) for _ in range(self.K)]
        self._barrier = threading.Barrier(self.K + 1)
        self._results = [None] * (self.K + 1)
        self._errors = []
        self._workers = [
            threading.Thread(target=self._worker_loop, args=(k,), daemon=True)
            for k in range(1, self.K + 1)
        ]
        for w in self._workers:
            w.start()

    def _get_or_abort(self, q, t):
        """Poll a queue while watching for worker failures."""
        waited = 0.0
        while True:
            if self._errors:
                raise WorkerFailure(self._diagnostic(t))
            try:
                return q.get(timeout=0.2)
            except queue.Empty:
                waited += 0.2
                if waited >= self._timeout:
                    raise WorkerFailure(self._diagnostic(t))

    def _worker_loop(self, k):
        m = self.modules[k - 1]
        try:
            while True:
                cmd = self._cmd_queues[k - 1].get()
                if cmd is None:
                    return
                t, sample_id, targets = cmd
                x = self._act_queues[k - 1].get()
                out = m.forward(x, t, sample_id, targets if m.has_projection else None, self.train)
                self._act_queues[k].put(out)
                # delayed backward: needs only this module's state and the
                # boundary gradient its upstream neighbor queued last step
                if t - self.K + k < 0:
                    self._results[k] = None
                else:
                    slot = m.pop_slot()
                    if slot.step != t - self.K + k:
                        raise ScheduleViolation(
                            f"module {k} popped slot for step {slot.step}"
                        )
                    grad_out = None
                    if not m.has_projection:
                        grad_out = self._bound_queues[k].get()
                    g_in, grads, tied, _ = m.recompute_backward(
                        slot, grad_out, self.stale_weights, self.train
                    )
                    if k > 1:
                        self._bound_queues[k - 1].put(g_in)
                    self._results[k] = (g_in, grads, tied, slot.sample_id, slot.step)
                self._barrier.wait()  # packet assembly + optimizer run now
                self._barrier.wait()  # weights updated; safe to start next step
        except Exception as exc:  # propagate through the coordinator
            self._errors.append((k, exc))
            self._barrier.abort()

    def step(self, t, batch, optimizer=None):
        if t < 0:
            raise ValueError("step index must be >= 0")
        for m in self.modules:
            m.snapshot(t)
        for q in self._cmd_queues:
            q.put((t, batch.sample_id, batch.y))
        self._act_queues[0].put(batch.x)
        logits = self._get_or_abort(self._act_queues[self.K], t)
        loss = cross_entropy(logits, batch.y)
        try:
            self._barrier.wait(timeout=self._timeout)
        except threading.BrokenBarrierError:
            raise WorkerFailure(self._diagnostic(t))
        results = {k: self._results[k] for k in range(1, self.K + 1)}
        packet = self._assemble(t, results, loss)
        relay_end = self._replay_relay_clock(t, batch.sample_id)
        self._advance_clock(t, results, relay_end)
        if optimizer is not None:
            optimizer.apply(t, packet, self.modules, self.stack.tied)
        try:
            self._barrier.wait(timeout=self._timeout)
        except threading.BrokenBarrierError:
            raise WorkerFailure(self._diagnostic(t))
        return packet, loss

    def _replay_relay_clock(self, t, sample_id):
        # logical relay accounting matches the reference executor exactly
        start = self.clock
        for k in range(1, self.K + 1):
            end = start + self.costs.fwd[k - 1]
            self.trace.record(t, k, "forward", sample_id, start, end)
            start = end + (self.costs.relay if k < self.K else 0.0)
        return start

    def import_boundary(self, grads):
        # between steps the waiting boundary gradients live in the queues
        self.boundary = dict(grads)
        for k, arr in grads.items():
            self._bound_queues[k].put(arr)

    def _diagnostic(self, t):
        lines = [f"concurrent schedule aborted at step {t}"]
        for k, exc in self._errors:
            lines.append(f"module {k}: {type(exc).__name__}: {exc}")
        for row in self.trace.rows[-3 * self.K :]:
            lines.append(str(row))
        return "\n".join(lines)

    def close(self):
        for q in self._cmd_queues:
            try:
                q.put_nowait(None)
            except queue.Full:
                pass
        # workers stuck mid-step after an abort are daemons; don't wait on them
        for w in self._workers:
            w.join(timeout=0.5)


def sequential_gradients(layers, params_list, batch, dropout_seed, step, train=True):
    """Full-network backprop at explicit weights: the verification oracle.

    Runs every layer forward with the same per-(step, layer) dropout
    streams the pipeline uses, then backpropagates through the stored
    tapes.  Returns per-layer gradients keyed like the pipeline's, the two
    tied-matrix gradients kept separate, the loss, and the logits.
    """
    x = batch.x
    tapes = []
    for idx, (layer, params) in enumerate(zip(layers, params_list)):
        rng = SeededRng(mix64(dropout_seed, step, idx))
        x, tape = layer.forward(params, x, rng, train)
        tapes.append(tape)
    logits = x

    grads = {}
    grad_vi = None
    last = len(layers) - 1
    if layers[last].kind != "projection":
        raise ValueError("stack must end with the output projection")
    loss, g, grad_vo = loss_and_head_backward(
        tapes[last].inputs, params_list[last]["tied"], batch.y
    )
    for idx in range(last - 1, -1, -1):
        g, layer_grads = layers[idx].backward(params_list[idx], tapes[idx], g)
        for name, arr in layer_grads.items():
            if name == "tied":
                grad_vi = arr
            else:
                grads[f"L{idx}.{name}"] = arr
    return grads, grad_vi, grad_vo, loss, logits


class SequentialRunner:
    """Plain backprop baseline over the unpartitioned stack, with the same
    packet/optimizer plumbing so logs are directly comparable."""

    def __init__(self, stack, part, dropout_seed, tied_grad="half_avg", train=True,
                 cost_model=None):
        self.stack = stack
        self.part = part
        self.K = part.k
        self.modules = build_modules(stack, part, dropout_seed)
        self.dropout_seed = dropout_seed
        self.tied_grad = tied_grad
        self.train = train
        self.costs = cost_model or LogicalCostModel.derived(part, recompute=False)
        self.trace = ScheduleTrace()
        self.clock = 0.0
        self.last_step_logical = 0.0

    def step(self, t, batch, optimizer=None):
        grads, grad_vi, grad_vo, _, logits = sequential_gradients(
            self.stack.layers, self.stack.params, batch, self.dropout_seed, t, self.train
        )
        loss = cross_entropy(logits, batch.y)
        if self.tied_grad == "half_avg":
            emb = 0.5 * grad_vo + 0.5 * grad_vi
        elif self.tied_grad == "sum":
            emb = grad_vo + grad_vi
        else:
            raise ValueError(f"unknown tied_grad convention {self.tied_grad!r}")
        module_grads = []
        for m in self.modules:
            start, end = m.layer_range
            module_grads.append(
                {key: arr for key, arr in grads.items()
                 if start <= int(key.split(".")[0][1:]) < end}
            )
        packet = GradientPacket(t, module_grads, emb, [batch.sample_id] * self.K, loss)
        hops = 2 * (self.K - 1) * self.costs.relay
        duration = sum(self.costs.fwd) + sum(self.costs.bwd) + hops
        self.last_step_logical = duration
        self.last_backward_logical = sum(self.costs.bwd) + (self.K - 1) * self.costs.relay
        self.trace.record(t, 0, "forward", batch.sample_id, self.clock, self.clock + duration)
        self.clock += duration
        if optimizer is not None:
            optimizer.apply(t, packet, self.modules, self.stack.tied)
        return packet, loss

    def close(self):
        pass


def check_one_step_behind(trace, K):
    """Trace invariant: module k backs up sample s at step s + K - k."""
    for row in trace.backward_rows():
        expected = row["sample"] + K - row["module"]
        if row["step"] != expected:
            raise ScheduleViolation(
                f"backward of module {row['module']} for sample {row['sample']} "
                f"at step {row['step']}, expected {expected}"
            )
    return True
