"""Bit-exact framed serial protocol and scripted batch runner.

The driver stimulates the engine with 16-bit big-endian frames and two
control vectors, one to collect the per-class spike counts and one to
reset the design between samples:

    bits[15:14]  opcode: 00 EVENT, 01 COLLECT, 10 RESET, 11 reserved
    bits[13:10]  must be zero
    bits[9:0]    payload (energy channel for EVENT, zero otherwise)

A COLLECT is answered with a result message: tag byte 0x52, one 32-bit
little-endian unsigned count per class, and a 16-bit little-endian
checksum (byte sum of everything before it, mod 65536).

The transport is any reliable ordered byte channel: an in-memory loopback
for single-process runs and a TCP socket for cross-process runs. No
physical UART timing is modeled.
"""

from __future__ import annotations

import socket
from dataclasses import dataclass, field

import numpy as np

from .engine import Engine, InferenceResult
from .events import EventStream, sample_events
from .spectra import Dataset

FRAME_SIZE = 2
OP_EVENT, OP_COLLECT, OP_RESET = 0, 1, 2
_OPCODE_NAMES = {OP_EVENT: "EVENT", OP_COLLECT: "COLLECT", OP_RESET: "RESET"}
MAX_CHANNEL = (1 << 10) - 1
RESULT_TAG = 0x52
COLLECT_WORD = OP_COLLECT << 14
RESET_WORD = OP_RESET << 14


class ProtocolError(Exception):
    """Malformed frame, bad checksum, or transport failure."""


@dataclass(frozen=True)
class Frame:
    opcode: int
    payload: int = 0


def encode_frame(opcode: int, payload: int = 0) -> bytes:
    if opcode not in _OPCODE_NAMES:
        raise ValueError(f"unknown opcode {opcode}")
    if opcode == OP_EVENT:
        if not 0 <= payload <= MAX_CHANNEL:
            raise ValueError(f"event channel {payload} outside [0, {MAX_CHANNEL}]")
    elif payload != 0:
        raise ValueError("control frames carry no payload")
    return ((opcode << 14) | payload).to_bytes(2, "big")


def decode_frame(data: bytes) -> Frame:
    if len(data) != FRAME_SIZE:
        raise ProtocolError(f"frame must be {FRAME_SIZE} bytes")
    word = int.from_bytes(data, "big")
    opcode = word >> 14
    if opcode not in _OPCODE_NAMES:
        raise ProtocolError(f"reserved opcode in frame 0x{word:04x}")
    if word & 0x3C00:
        raise ProtocolError(f"nonzero reserved bits in frame 0x{word:04x}")
    payload = word & 0x03FF
    if opcode != OP_EVENT and payload != 0:
        raise ProtocolError(f"control frame 0x{word:04x} carries a payload")
    return Frame(opcode, payload)


def encode_event_block(channels: np.ndarray) -> bytes:
    """All-EVENT frame block for a channel array (fast path for streams)."""
    channels = np.asarray(channels)
    if channels.size and (channels.min() < 0 or channels.max() > MAX_CHANNEL):
        raise ValueError("event channel out of range")
    return channels.astype(">u2").tobytes()


def result_message_size(num_classes: int) -> int:
    return 1 + 4 * num_classes + 2


def build_result_message(counts) -> bytes:
    counts = np.asarray(counts, dtype=np.int64)
    body = bytes([RESULT_TAG]) + counts.astype("<u4").tobytes()
    checksum = sum(body) & 0xFFFF
    return body + checksum.to_bytes(2, "little")


def parse_result_message(data: bytes, num_classes: int) -> np.ndarray:
    if len(data) != result_message_size(num_classes):
        raise ProtocolError(f"result message must be {result_message_size(num_classes)}"
                            f" bytes, got {len(data)}")
    if data[0] != RESULT_TAG:
        raise ProtocolError(f"bad result tag 0x{data[0]:02x}")
    checksum = int.from_bytes(data[-2:], "little")
    if checksum != sum(data[:-2]) & 0xFFFF:
        raise ProtocolError("result checksum mismatch")
    return np.frombuffer(data, dtype="<u4", count=num_classes, offset=1).astype(np.int64)


# ---------------------------------------------------------------------------
# engine-side responder


class EngineServer:
    """Feeds wire bytes to an engine and produces response bytes.

    Frames are processed in order as soon as they are complete; EVENT runs
    span-wise through the engine's batch path, so the responder stays fast
    for long streams.
    """

    def __init__(self, engine: Engine):
        self.engine = engine
        self._pending = b""

    def feed(self, data: bytes) -> bytes:
        buf = self._pending + data
        usable = len(buf) - (len(buf) % FRAME_SIZE)
        self._pending = buf[usable:]
        words = np.frombuffer(buf, dtype=">u2", count=usable // FRAME_SIZE)
        out = bytearray()
        start = 0
        for pos in np.flatnonzero(words > MAX_CHANNEL):
            self._consume_events(words[start:pos])
            word = int(words[pos])
            if word == COLLECT_WORD:
                out += build_result_message(self.engine.class_counts)
            elif word == RESET_WORD:
                self.engine.reset()
            else:
                raise ProtocolError(f"invalid frame 0x{word:04x}")
            start = pos + 1
        self._consume_events(words[start:])
        return bytes(out)

    def _consume_events(self, words) -> None:
        if words.size:
            self.engine.process_events(words.astype(np.int64))


# ---------------------------------------------------------------------------
# transports


class LoopbackTransport:
    """In-process duplex channel wired straight into an EngineServer."""

    def __init__(self, server: EngineServer):
        self.server = server
        self._rx = bytearray()

    def write(self, data: bytes) -> None:
        self._rx += self.server.feed(data)

    def read_exact(self, n: int) -> bytes:
        if len(self._rx) < n:
            raise ProtocolError(f"expected {n} response bytes, have {len(self._rx)}")
        out = bytes(self._rx[:n])
        del self._rx[:n]
        return out

    def close(self) -> None:
        pass


class SocketTransport:
    """Byte channel over a connected TCP socket."""

    def __init__(self, sock: socket.socket, timeout: float = 5.0):
        self.sock = sock
        self.sock.settimeout(timeout)

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 5.0) -> "SocketTransport":
        return cls(socket.create_connection((host, port), timeout=timeout), timeout)

    def write(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise ProtocolError(f"transport write failed: {exc}") from exc

    def read_exact(self, n: int) -> bytes:
        chunks = bytearray()
        while len(chunks) < n:
            try:
                chunk = self.sock.recv(n - len(chunks))
            except socket.timeout as exc:
                raise ProtocolError("transport timeout waiting for a response") from exc
            except OSError as exc:
                raise ProtocolError(f"transport read failed: {exc}") from exc
            if not chunk:
                raise ProtocolError("transport closed mid-message")
            chunks += chunk
        return bytes(chunks)

    def close(self) -> None:
        self.sock.close()


def serve_connection(conn: socket.socket, engine: Engine,
                     chunk_size: int = 1 << 16) -> None:
    """Run the engine-side responder over one TCP connection until EOF."""
    server = EngineServer(engine)
    while True:
        data = conn.recv(chunk_size)
        if not data:
            return
        response = server.feed(data)
        if response:
            conn.sendall(response)


# ---------------------------------------------------------------------------
# driver side


@dataclass
class SampleRecord:
    n_events: int
    collect_frame: bytes
    result_bytes: bytes
    reset_frame: bytes


@dataclass
class Transcript:
    """Per-sample record of the exchange, with boundary grammar checking."""

    samples: list = field(default_factory=list)

    def validate(self) -> None:
        for i, rec in enumerate(self.samples):
            if decode_frame(rec.collect_frame).opcode != OP_COLLECT:
                raise ProtocolError(f"sample {i}: missing COLLECT at boundary")
            if not rec.result_bytes or rec.result_bytes[0] != RESULT_TAG:
                raise ProtocolError(f"sample {i}: COLLECT not followed by a result")
            if decode_frame(rec.reset_frame).opcode != OP_RESET:
                raise ProtocolError(f"sample {i}: missing RESET after result")


def run_sample(transport, stream: EventStream, num_classes: int,
               transcript: Transcript | None = None) -> InferenceResult:
    """Drive one sample through the protocol: events, COLLECT, RESET.

    The wire carries only the class counts, so the returned result has no
    operation tallies.
    """
    transport.write(encode_event_block(stream.channels))
    collect = encode_frame(OP_COLLECT)
    transport.write(collect)
    raw = transport.read_exact(result_message_size(num_classes))
    counts = parse_result_message(raw, num_classes)
    reset = encode_frame(OP_RESET)
    transport.write(reset)
    if transcript is not None:
        transcript.samples.append(SampleRecord(len(stream), collect, raw, reset))
    return InferenceResult.from_counts(counts, {}, len(stream))


@dataclass
class BatchReport:
    classes: tuple
    totals: np.ndarray        # per-isotope sample counts
    correct: np.ndarray       # per-isotope correct predictions
    confusion: np.ndarray     # rows = true label; failed samples excluded
    protocol_errors: int
    duration: int
    rate: float
    base_seed: int

    @property
    def accuracy(self) -> float:
        return float(self.correct.sum() / max(self.totals.sum(), 1))

    def to_text(self) -> str:
        lines = ["# inference-report-v1",
                 f"# samples={int(self.totals.sum())} duration={self.duration} "
                 f"rate={repr(self.rate)} seed={self.base_seed}",
                 "isotope,total,correct,accuracy"]
        for i, name in enumerate(self.classes):
            acc = self.correct[i] / self.totals[i] if self.totals[i] else 0.0
            lines.append(f"{name},{self.totals[i]},{self.correct[i]},{repr(float(acc))}")
        lines.append(f"overall,{int(self.totals.sum())},{int(self.correct.sum())},"
                     f"{repr(self.accuracy)}")
        lines.append(f"protocol_errors,{self.protocol_errors}")
        for i, name in enumerate(self.classes):
            row = ",".join(str(int(v)) for v in self.confusion[i])
            lines.append(f"confusion,{name},{row}")
        return "\n".join(lines) + "\n"


def run_batch(dataset: Dataset, *, duration: int, rate: float, base_seed: int,
              engine: Engine | None = None, model=None, transport=None,
              transcript: Transcript | None = None) -> BatchReport:
    """Protocol-driven inference over a labeled dataset.

    Each sample's event stream is drawn with a seed derived from
    (base_seed, sample index), sent through the transport, and the
    collected counts are scored against the label. Per-sample protocol
    errors mark the sample failed and the batch continues.
    """
    if transport is None:
        if engine is None:
            if model is None:
                raise ValueError("run_batch needs a transport, engine, or model")
            engine = Engine(model)
        transport = LoopbackTransport(EngineServer(engine))
    classes = dataset.classes
    n_classes = len(classes)
    totals = np.zeros(n_classes, dtype=np.int64)
    correct = np.zeros(n_classes, dtype=np.int64)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    labels = dataset.label_indices()
    errors = 0
    for i, sample in enumerate(dataset.samples):
        seed = int(np.random.SeedSequence([base_seed, i]).generate_state(1)[0])
        stream = sample_events(sample, rate, duration, seed)
        truth = labels[i]
        totals[truth] += 1
        try:
            result = run_sample(transport, stream, n_classes, transcript)
        except ProtocolError:
            errors += 1
            continue
        confusion[truth, result.predicted] += 1
        if result.predicted == truth:
            correct[truth] += 1
    return BatchReport(classes=classes, totals=totals, correct=correct,
                       confusion=confusion, protocol_errors=errors,
                       duration=duration, rate=rate, base_seed=base_seed)
