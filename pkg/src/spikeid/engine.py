"""Event-driven inference engine for the converted spiking network.

Mirrors the serial hardware pipeline: an input event (an energy-channel
address) triggers, in time-division-multiplexed order, the integrate-and-
fire updates of every convolution neuron it feeds (filter-major, then
position); spikes cascade breadth-first into the pooling stage and then
the dense output stage. Each stage's membrane updates are tallied in
per-layer operation counters, the power/latency proxy.

Neuron dynamics are leak-free integrate-and-fire with reset by
subtraction and a membrane floor:

    V' = V + w
    fire and subtract the threshold once if V' >= v_thr
    clamp to v_min if V' < v_min

A single subtraction per update keeps V < v_thr only when every weight
magnitude is at most the layer threshold, so the engine rejects models
violating that bound. Thresholds are also bounded so every V + w fits a
16-bit signed membrane register.

Two interchangeable implementations are provided: `Engine` (numba,
compiled per-event kernel, used for batch runs) and `PythonEngine` (plain
Python reference with an optional per-update trace hook); tests hold them
bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .conversion import SpikingModel
from .events import EventStream

# widest membrane excursion is V + w with V < v_thr and |w| <= v_thr,
# so thresholds up to 2^14 - 1 keep every value within int16
MAX_THRESHOLD = (1 << 14) - 1
MIN_FLOOR = -(1 << 14)

LAYERS = ("conv", "pool", "fc")


def neuron_update(v: int, w: int, v_thr: int, v_min: int) -> tuple[int, bool]:
    """One integrate-and-fire membrane update; returns (new V, fired)."""
    v = v + w
    if v >= v_thr:
        return v - v_thr, True
    if v < v_min:
        return v_min, False
    return v, False


@dataclass
class InferenceResult:
    class_counts: np.ndarray
    predicted: int
    tie: bool
    ops: dict[str, int]
    events_consumed: int

    @classmethod
    def from_counts(cls, counts: np.ndarray, ops: dict[str, int],
                    events_consumed: int) -> "InferenceResult":
        counts = np.asarray(counts, dtype=np.int64)
        top = counts.max() if counts.size else 0
        return cls(class_counts=counts,
                   predicted=int(np.argmax(counts)),
                   tie=bool((counts == top).sum() > 1),
                   ops=ops,
                   events_consumed=events_consumed)


def _validate_model(model: SpikingModel) -> None:
    bounds = (
        ("conv", int(np.max(np.abs(model.conv_w))) if model.conv_w.size else 0),
        ("pool", model.pool_w),
        ("fc", int(np.max(np.abs(model.fc_w))) if model.fc_w.size else 0),
    )
    for layer, max_w in bounds:
        thr = getattr(model.v_thr, layer)
        floor = getattr(model.v_min, layer)
        if max_w > thr:
            raise ValueError(
                f"{layer} weight magnitude {max_w} exceeds threshold {thr}; "
                "a single-subtraction reset cannot bound the membrane")
        if thr > MAX_THRESHOLD or floor < MIN_FLOOR:
            raise ValueError(
                f"{layer} threshold/floor outside the 16-bit membrane range")


# ---------------------------------------------------------------------------
# numba kernels
#
# All state lives in caller-owned arrays. ops is a 3-element tally
# (conv, pool, fc); the spike buffers are scratch space sized for the
# worst cascade of one event.


@njit(cache=True)
def _single_event(channel, conv_w, fc_w, pool_w, thr, vmin, pool_size, pooled_per_map,
                  conv_v, pool_v, out_v, class_counts, ops,
                  sp_f, sp_p, emitted):
    num_filters, kernel_size = conv_w.shape
    conv_len = conv_v.shape[1]
    num_classes = out_v.shape[0]

    p_lo = channel - kernel_size + 1
    if p_lo < 0:
        p_lo = 0
    p_hi = channel if channel < conv_len - 1 else conv_len - 1

    # stage 1: convolution neurons, filters in series
    n_conv = 0
    for f in range(num_filters):
        for p in range(p_lo, p_hi + 1):
            v = conv_v[f, p] + conv_w[f, channel - p]
            ops[0] += 1
            if v >= thr[0]:
                conv_v[f, p] = v - thr[0]
                sp_f[n_conv] = f
                sp_p[n_conv] = p
                n_conv += 1
            elif v < vmin[0]:
                conv_v[f, p] = vmin[0]
            else:
                conv_v[f, p] = v

    # stage 2: pooling neurons (positions beyond the truncated pooling
    # window boundary feed no pool neuron)
    n_pool = 0
    used = pooled_per_map * pool_size
    for s in range(n_conv):
        p = sp_p[s]
        if p >= used:
            continue
        f = sp_f[s]
        j = p // pool_size
        v = pool_v[f, j] + pool_w
        ops[1] += 1
        if v >= thr[1]:
            pool_v[f, j] = v - thr[1]
            sp_f[n_pool] = f
            sp_p[n_pool] = j
            n_pool += 1
        elif v < vmin[1]:
            pool_v[f, j] = vmin[1]
        else:
            pool_v[f, j] = v

    # stage 3: dense output neurons
    n_emit = 0
    for s in range(n_pool):
        i = sp_f[s] * pooled_per_map + sp_p[s]
        for o in range(num_classes):
            v = out_v[o] + fc_w[i, o]
            ops[2] += 1
            if v >= thr[2]:
                out_v[o] = v - thr[2]
                class_counts[o] += 1
                emitted[n_emit] = o
                n_emit += 1
            elif v < vmin[2]:
                out_v[o] = vmin[2]
            else:
                out_v[o] = v
    return n_emit


@njit(cache=True)
def _run_stream(channels, conv_w, fc_w, pool_w, thr, vmin, pool_size, pooled_per_map,
                conv_v, pool_v, out_v, class_counts, ops, sp_f, sp_p, emitted):
    for e in range(channels.shape[0]):
        _single_event(channels[e], conv_w, fc_w, pool_w, thr, vmin,
                      pool_size, pooled_per_map, conv_v, pool_v, out_v,
                      class_counts, ops, sp_f, sp_p, emitted)


@njit(cache=True)
def _run_stream_instrumented(channels, conv_w, fc_w, pool_w, thr, vmin, pool_size,
                             pooled_per_map, conv_v, pool_v, out_v, class_counts,
                             ops, sp_f, sp_p, emitted, conv_ops, pool_ops, fc_ops):
    for e in range(channels.shape[0]):
        c0, p0, f0 = ops[0], ops[1], ops[2]
        _single_event(channels[e], conv_w, fc_w, pool_w, thr, vmin,
                      pool_size, pooled_per_map, conv_v, pool_v, out_v,
                      class_counts, ops, sp_f, sp_p, emitted)
        conv_ops[e] = ops[0] - c0
        pool_ops[e] = ops[1] - p0
        fc_ops[e] = ops[2] - f0


# ---------------------------------------------------------------------------
# engines


class Engine:
    """Stateful event-driven engine (numba-accelerated)."""

    def __init__(self, model: SpikingModel):
        _validate_model(model)
        self.model = model
        arch = model.arch
        self._conv_w = np.ascontiguousarray(model.conv_w, dtype=np.int64)
        self._fc_w = np.ascontiguousarray(model.fc_w, dtype=np.int64)
        self._thr = np.array(model.v_thr.as_tuple(), dtype=np.int64)
        self._vmin = np.array(model.v_min.as_tuple(), dtype=np.int64)
        self.conv_v = np.zeros((arch.num_filters, arch.conv_len), dtype=np.int64)
        self.pool_v = np.zeros((arch.num_filters, arch.pooled_per_map), dtype=np.int64)
        self.out_v = np.zeros(arch.num_classes, dtype=np.int64)
        self.class_counts = np.zeros(arch.num_classes, dtype=np.int64)
        self._ops = np.zeros(3, dtype=np.int64)
        self._events = 0
        fanout = arch.num_filters * arch.kernel_size
        self._sp_f = np.zeros(fanout, dtype=np.int64)
        self._sp_p = np.zeros(fanout, dtype=np.int64)
        self._emitted = np.zeros(fanout * arch.num_classes, dtype=np.int64)

    def reset(self) -> None:
        """Zero all membranes and counters; the model is unchanged."""
        self.conv_v[:] = 0
        self.pool_v[:] = 0
        self.out_v[:] = 0
        self.class_counts[:] = 0
        self._ops[:] = 0
        self._events = 0

    @property
    def ops(self) -> dict[str, int]:
        return dict(zip(LAYERS, (int(v) for v in self._ops)))

    def _check_channel(self, channel: int) -> None:
        if not 0 <= channel < self.model.arch.input_len:
            raise ValueError(f"channel {channel} outside [0, {self.model.arch.input_len})")

    def process_event(self, channel: int) -> list[int]:
        """Feed one input event; returns the output-layer spikes it caused."""
        self._check_channel(channel)
        n = _single_event(channel, self._conv_w, self._fc_w, self.model.pool_w,
                          self._thr, self._vmin, self.model.arch.pool_size,
                          self.model.arch.pooled_per_map, self.conv_v, self.pool_v,
                          self.out_v, self.class_counts, self._ops,
                          self._sp_f, self._sp_p, self._emitted)
        self._events += 1
        return [int(v) for v in self._emitted[:n]]

    def process_events(self, channels: np.ndarray) -> None:
        """Feed a block of events in order (no reset)."""
        channels = np.ascontiguousarray(channels, dtype=np.int64)
        if channels.size:
            if channels.min() < 0 or channels.max() >= self.model.arch.input_len:
                raise ValueError("channel outside the input range")
        _run_stream(channels, self._conv_w, self._fc_w, self.model.pool_w,
                    self._thr, self._vmin, self.model.arch.pool_size,
                    self.model.arch.pooled_per_map, self.conv_v, self.pool_v,
                    self.out_v, self.class_counts, self._ops,
                    self._sp_f, self._sp_p, self._emitted)
        self._events += channels.size

    def result(self) -> InferenceResult:
        return InferenceResult.from_counts(self.class_counts.copy(), self.ops,
                                           self._events)

    def run(self, stream: EventStream) -> InferenceResult:
        """Reset, consume a whole stream in timestep order, and report."""
        self.reset()
        self.process_events(stream.channels)
        return self.result()

    def run_instrumented(self, channels: np.ndarray):
        """Like process_events but returns per-event (conv, pool, fc) update
        counts; used by the operation-bound tests."""
        channels = np.ascontiguousarray(channels, dtype=np.int64)
        per_event = [np.zeros(channels.size, dtype=np.int64) for _ in range(3)]
        _run_stream_instrumented(channels, self._conv_w, self._fc_w, self.model.pool_w,
                                 self._thr, self._vmin, self.model.arch.pool_size,
                                 self.model.arch.pooled_per_map, self.conv_v,
                                 self.pool_v, self.out_v, self.class_counts,
                                 self._ops, self._sp_f, self._sp_p, self._emitted,
                                 *per_event)
        self._events += channels.size
        return tuple(per_event)


class PythonEngine:
    """Reference implementation; optionally traces every membrane update.

    The trace callback receives (layer, neuron, weight, new_v, fired) where
    neuron is "f:p" for the convolution and pooling stages and the class
    index for the output stage.
    """

    def __init__(self, model: SpikingModel, trace=None):
        _validate_model(model)
        self.model = model
        self.trace = trace
        arch = model.arch
        self.conv_v = np.zeros((arch.num_filters, arch.conv_len), dtype=np.int64)
        self.pool_v = np.zeros((arch.num_filters, arch.pooled_per_map), dtype=np.int64)
        self.out_v = np.zeros(arch.num_classes, dtype=np.int64)
        self.class_counts = np.zeros(arch.num_classes, dtype=np.int64)
        self._ops = {layer: 0 for layer in LAYERS}
        self._events = 0

    def reset(self) -> None:
        self.conv_v[:] = 0
        self.pool_v[:] = 0
        self.out_v[:] = 0
        self.class_counts[:] = 0
        self._ops = {layer: 0 for layer in LAYERS}
        self._events = 0

    @property
    def ops(self) -> dict[str, int]:
        return dict(self._ops)

    def process_event(self, channel: int) -> list[int]:
        model = self.model
        arch = model.arch
        if not 0 <= channel < arch.input_len:
            raise ValueError(f"channel {channel} outside [0, {arch.input_len})")
        thr, vmin = model.v_thr, model.v_min

        p_lo = max(0, channel - arch.kernel_size + 1)
        p_hi = min(arch.conv_len - 1, channel)
        conv_spikes = []
        for f in range(arch.num_filters):
            for p in range(p_lo, p_hi + 1):
                w = int(model.conv_w[f, channel - p])
                v, fired = neuron_update(int(self.conv_v[f, p]), w, thr.conv, vmin.conv)
                self.conv_v[f, p] = v
                self._ops["conv"] += 1
                if self.trace:
                    self.trace("conv", f"{f}:{p}", w, v, fired)
                if fired:
                    conv_spikes.append((f, p))

        pool_spikes = []
        used = arch.pooled_per_map * arch.pool_size
        for f, p in conv_spikes:
            if p >= used:
                continue
            j = p // arch.pool_size
            v, fired = neuron_update(int(self.pool_v[f, j]), model.pool_w,
                                     thr.pool, vmin.pool)
            self.pool_v[f, j] = v
            self._ops["pool"] += 1
            if self.trace:
                self.trace("pool", f"{f}:{j}", model.pool_w, v, fired)
            if fired:
                pool_spikes.append((f, j))

        emitted = []
        for f, j in pool_spikes:
            i = f * arch.pooled_per_map + j
            for o in range(arch.num_classes):
                w = int(model.fc_w[i, o])
                v, fired = neuron_update(int(self.out_v[o]), w, thr.fc, vmin.fc)
                self.out_v[o] = v
                self._ops["fc"] += 1
                if self.trace:
                    self.trace("fc", str(o), w, v, fired)
                if fired:
                    self.class_counts[o] += 1
                    emitted.append(o)
        self._events += 1
        return emitted

    def process_events(self, channels) -> None:
        for c in channels:
            self.process_event(int(c))

    def result(self) -> InferenceResult:
        return InferenceResult.from_counts(self.class_counts.copy(), self.ops,
                                           self._events)

    def run(self, stream: EventStream) -> InferenceResult:
        self.reset()
        self.process_events(stream.channels)
        return self.result()


def run_inference(model: SpikingModel, stream: EventStream,
                  trace=None) -> InferenceResult:
    """One-shot inference over a stream on a fresh engine.

    A trace callback (or file object, which receives one comma-separated
    line per membrane update) forces the reference engine.
    """
    if trace is None:
        return Engine(model).run(stream)
    if hasattr(trace, "write"):
        fh = trace

        def trace_fn(layer, neuron, weight, v, fired):
            fh.write(f"{layer},{neuron},{weight},{v},{int(fired)}\n")
    else:
        trace_fn = trace
    return PythonEngine(model, trace=trace_fn).run(stream)
