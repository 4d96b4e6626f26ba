"""Layer stack construction, contiguous partitioning with ring placement,
per-module weight snapshots, and recompute-based delayed backward.

A module owns a contiguous slice of layers.  Its forward stores only the
slice input (plus the dropout stream coordinates) in a stale slot; the
delayed backward re-runs the slice forward from that slot at the weight
snapshot taken when the sample originally passed through, so the gradients
it emits are exactly what a plain backward at those weights would produce.
"""

import time
from collections import OrderedDict, deque
from dataclasses import dataclass, field

import numpy as np

from .layers import (
    EmbeddingLayer,
    OutputProjectionLayer,
    TransformerBlockLayer,
    cross_entropy,
    loss_and_head_backward,
    make_tied_matrix,
)
from .tensor import SeededRng, mix64


class PartitionError(ValueError):
    pass


class ScheduleViolation(RuntimeError):
    """A slot or snapshot queue was used outside the schedule's bounds."""


class LayerStack:
    """The unpartitioned model: embedding, transformer blocks, projection.

    `params[i]` belongs to `layers[i]`; the embedding and projection dicts
    reference the same tied matrix object.
    """

    def __init__(self, layers, params, tied):
        self.layers = layers
        self.params = params
        self.tied = tied

    @property
    def num_layers(self):
        return len(self.layers)


def build_stack(vocab_size, model_dim, ffn_dim, n_blocks, seq_len, dropout_p, init_seed):
    rng = SeededRng(mix64(init_seed))
    tied = make_tied_matrix(vocab_size, model_dim, rng)
    layers = [EmbeddingLayer(vocab_size, model_dim, seq_len, dropout_p)]
    layers += [TransformerBlockLayer(model_dim, ffn_dim, dropout_p) for _ in range(n_blocks)]
    layers.append(OutputProjectionLayer(vocab_size, model_dim))
    params = [layer.init_params(rng, tied) for layer in layers]
    return LayerStack(layers, params, tied)


@dataclass
class ModulePartition:
    k: int
    groups: list  # (start, end) half-open layer index ranges
    device_of: list  # logical device id per module, 0-based

    def __post_init__(self):
        if len(self.groups) != self.k or len(self.device_of) != self.k:
            raise PartitionError("group/device lists must have K entries")
        pos = 0
        for start, end in self.groups:
            if start != pos or end <= start:
                raise PartitionError("groups must be contiguous, ordered, nonempty")
            pos = end
        if self.k >= 2 and self.device_of[0] != self.device_of[-1]:
            raise PartitionError("first and last module must share a device")

    @property
    def num_devices(self):
        return len(set(self.device_of))


def _even_sizes(L, K):
    base, rem = divmod(L, K)
    return [base + 1 if i < rem else base for i in range(K)]


def _by_cost_sizes(L, K, costs):
    # exact min-max contiguous partition via DP over prefix sums
    prefix = [0.0]
    for c in costs:
        prefix.append(prefix[-1] + float(c))
    best = {(0, 0): 0.0}
    choice = {}
    for k in range(1, K + 1):
        for j in range(k, L - (K - k) + 1):
            opts = []
            for i in range(k - 1, j):
                if (i, k - 1) in best:
                    opts.append((max(best[(i, k - 1)], prefix[j] - prefix[i]), i))
            val, cut = min(opts)
            best[(j, k)] = val
            choice[(j, k)] = cut
    sizes = []
    j = L
    for k in range(K, 0, -1):
        i = choice[(j, k)]
        sizes.append(j - i)
        j = i
    return sizes[::-1]


def partition(L, K, balance="even", costs=None):
    """Split L layers into K contiguous groups with ring device placement.

    `even` keeps group sizes within one of each other; `by_cost` minimizes
    the maximum per-group cost given measured per-layer costs.  Modules 1
    and K land on the same logical device, so K modules use K-1 devices.
    """
    if K < 1 or K > L:
        raise PartitionError(f"need 1 <= K <= L, got K={K}, L={L}")
    if balance == "even":
        sizes = _even_sizes(L, K)
    elif balance == "by_cost":
        if costs is None or len(costs) != L:
            raise PartitionError("by_cost needs one cost per layer")
        sizes = _by_cost_sizes(L, K, costs)
    else:
        raise PartitionError(f"unknown balance mode {balance!r}")
    groups = []
    pos = 0
    for s in sizes:
        groups.append((pos, pos + s))
        pos += s
    if K == 1:
        device_of = [0]
    else:
        device_of = [0] + list(range(1, K - 1)) + [0]
    return ModulePartition(K, groups, device_of)


def measure_layer_costs(stack, batch_x, dropout_seed=0, repeats=3):
    """Wall-clock forward+backward cost per layer, for by_cost partitioning."""
    costs = []
    x = batch_x
    for idx, (layer, params) in enumerate(zip(stack.layers, stack.params)):
        rng = SeededRng(mix64(dropout_seed, 0, idx))
        t0 = time.perf_counter()
        for _ in range(repeats):
            out, tape = layer.forward(params, x, rng.at(0), True)
            if layer.kind == "projection":
                loss_and_head_backward(tape.inputs, params["tied"], np.zeros_like(batch_x))
            else:
                layer.backward(params, tape, np.ones_like(out))
        costs.append((time.perf_counter() - t0) / repeats)
        x = out if layer.kind != "projection" else tape.inputs
    return costs


@dataclass
class StaleSlot:
    step: int
    sample_id: int
    inputs: np.ndarray
    targets: object  # only set on the module holding the projection head
    layer_seeds: list  # per-layer dropout stream seeds used by the forward


def snapshot_params(params_list):
    return [{name: arr.copy() for name, arr in p.items()} for p in params_list]


class SnapshotRing:
    """FIFO of recent weight snapshots for one module, keyed by step."""

    def __init__(self, capacity):
        self.capacity = capacity
        self._store = OrderedDict()

    def put(self, step, params_list):
        self._store[step] = params_list
        while len(self._store) > self.capacity:
            self._store.popitem(last=False)

    def get(self, step):
        if step not in self._store:
            raise ScheduleViolation(f"snapshot for step {step} not in ring")
        return self._store[step]

    def steps(self):
        return list(self._store.keys())

    def __len__(self):
        return len(self._store)


class ModuleState:
    """One pipeline module: a layer slice, its live weights, the snapshot
    ring, and the queue of pending delayed backwards."""

    def __init__(self, index, k_total, layer_range, layers, params, dropout_seed):
        self.index = index  # 1-based module id
        self.k_total = k_total
        self.layer_range = layer_range  # global (start, end)
        self.layers = layers
        self.params = params  # live weights, shared with the optimizer
        self.dropout_seed = dropout_seed
        self.slot_capacity = k_total - index + 1
        self.ring = SnapshotRing(self.slot_capacity)
        self.slots = deque()
        self.peak_slot_floats = 0
        self.peak_slots = 0
        self.has_embedding = layers[0].kind == "embedding"
        self.has_projection = layers[-1].kind == "projection"

    def _layer_seed(self, step, offset):
        return mix64(self.dropout_seed, step, self.layer_range[0] + offset)

    def snapshot(self, step):
        self.ring.put(step, snapshot_params(self.params))

    def forward(self, x, step, sample_id, targets=None, train=True):
        """Run the slice forward at live weights and queue a stale slot."""
        seeds = [self._layer_seed(step, i) for i in range(len(self.layers))]
        self.slots.append(StaleSlot(step, sample_id, x, targets, seeds))
        if len(self.slots) > self.slot_capacity:
            raise ScheduleViolation(
                f"module {self.index} slot queue exceeded {self.slot_capacity}"
            )
        self.peak_slots = max(self.peak_slots, len(self.slots))
        stored = sum(np.asarray(s.inputs).size for s in self.slots)
        self.peak_slot_floats = max(self.peak_slot_floats, stored)
        out, _ = self._run_forward(self.params, x, seeds, train)
        return out

    def _run_forward(self, params_list, x, seeds, train):
        tapes = []
        for layer, params, seed in zip(self.layers, params_list, seeds):
            x, tape = layer.forward(params, x, SeededRng(seed), train)
            tapes.append(tape)
        return x, tapes

    def pop_slot(self):
        if not self.slots:
            raise ScheduleViolation(f"module {self.index} has no pending slot")
        return self.slots.popleft()

    def recompute_backward(self, slot, grad_out, stale_mode="snapshot", train=True):
        """Delayed backward for one slot.

        Recomputes the slice forward from the stored input with the weights
        the ring holds for the slot's step (`snapshot` mode) or the live
        weights (`current` mode), then backpropagates.  Returns the gradient
        for the module input, the per-parameter gradients keyed by
        "L{global_idx}.{name}" (tied matrix excluded), the tied gradients
        seen from each end, and the loss if this module owns the head.
        """
        if stale_mode == "snapshot":
            params_list = self.ring.get(slot.step)
        elif stale_mode == "current":
            params_list = self.params
        else:
            raise ValueError(f"unknown stale_weights mode {stale_mode!r}")

        _, tapes = self._run_forward(params_list, slot.inputs, slot.layer_seeds, train)
        return self._backward_from_tapes(params_list, tapes, slot, grad_out)

    def _backward_from_tapes(self, params_list, tapes, slot, grad_out):
        grads = {}
        tied = {"Vi": None, "Vo": None}
        loss = None
        start = self.layer_range[0]
        g = grad_out
        for offset in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[offset]
            params = params_list[offset]
            tape = tapes[offset]
            if layer.kind == "projection":
                if slot.targets is None:
                    raise ScheduleViolation("projection module slot lacks targets")
                loss, g, tied["Vo"] = loss_and_head_backward(
                    tape.inputs, params["tied"], slot.targets
                )
                continue
            g, layer_grads = layer.backward(params, tape, g)
            for name, arr in layer_grads.items():
                if name == "tied":
                    tied["Vi"] = arr
                else:
                    grads[f"L{start + offset}.{name}"] = arr
        return g, grads, tied, loss

    def zero_grads(self):
        """Zero tensors shaped like this module's (non-tied) parameters."""
        grads = {}
        start = self.layer_range[0]
        for offset, params in enumerate(self.params):
            for name, arr in params.items():
                if name == "tied":
                    continue
                grads[f"L{start + offset}.{name}"] = np.zeros_like(arr)
        return grads


def build_modules(stack, part, dropout_seed):
    modules = []
    for k, (start, end) in enumerate(part.groups, start=1):
        modules.append(
            ModuleState(
                k,
                part.k,
                (start, end),
                stack.layers[start:end],
                stack.params[start:end],
                dropout_seed,
            )
        )
    return modules


def full_forward_loss(stack, batch_x, batch_y, dropout_seed, step, train=True):
    """Unpartitioned forward pass; returns (loss, logits)."""
    x = batch_x
    for idx, (layer, params) in enumerate(zip(stack.layers, stack.params)):
        rng = SeededRng(mix64(dropout_seed, step, idx))
        x, _ = layer.forward(params, x, rng, train)
    return cross_entropy(x, batch_y), x
