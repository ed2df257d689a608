import socket
import threading
from pathlib import Path

import numpy as np
import pytest

from conftest import random_stream, random_toy_snn
from spikeid import events, spectra
from spikeid.engine import Engine, run_inference
from spikeid.harness import (
    COLLECT_WORD, MAX_CHANNEL, OP_COLLECT, OP_EVENT, OP_RESET, RESET_WORD,
    EngineServer, Frame, LoopbackTransport, ProtocolError, SocketTransport,
    Transcript, build_result_message, decode_frame, encode_event_block,
    encode_frame, parse_result_message, result_message_size, run_batch,
    run_sample, serve_connection,
)

GOLDEN = Path(__file__).parent / "golden"

VALID_WORDS = set(range(MAX_CHANNEL + 1)) | {COLLECT_WORD, RESET_WORD}


class TestFrameCodec:
    def test_encode_examples(self):
        assert encode_frame(OP_EVENT, 5) == b"\x00\x05"
        assert encode_frame(OP_COLLECT) == b"\x40\x00"
        assert encode_frame(OP_RESET) == b"\x80\x00"

    def test_decode_examples(self):
        assert decode_frame(b"\x00\x05") == Frame(OP_EVENT, 5)
        with pytest.raises(ProtocolError, match="reserved opcode"):
            decode_frame(b"\xc0\x00")

    def test_round_trip_all_valid_frames(self):
        frames = [Frame(OP_EVENT, c) for c in range(1024)]
        frames += [Frame(OP_COLLECT, 0), Frame(OP_RESET, 0)]
        encodings = set()
        for frame in frames:
            data = encode_frame(frame.opcode, frame.payload)
            encodings.add(data)
            assert decode_frame(data) == frame
        # all encodings distinct; EVENT(0), COLLECT and RESET in particular
        assert len(encodings) == len(frames)
        assert len({encode_frame(OP_EVENT, 0), encode_frame(OP_COLLECT),
                    encode_frame(OP_RESET)}) == 3

    def test_exhaustive_word_sweep(self):
        # every 16-bit word: decode accepts exactly the valid frame set
        accepted = set()
        for word in range(1 << 16):
            data = word.to_bytes(2, "big")
            try:
                frame = decode_frame(data)
            except ProtocolError:
                continue
            accepted.add(word)
            assert encode_frame(frame.opcode, frame.payload) == data
        assert accepted == VALID_WORDS

    def test_encode_validation(self):
        with pytest.raises(ValueError, match="channel"):
            encode_frame(OP_EVENT, 1024)
        with pytest.raises(ValueError, match="payload"):
            encode_frame(OP_COLLECT, 3)
        with pytest.raises(ValueError, match="opcode"):
            encode_frame(7, 0)

    def test_event_block_matches_frame_encoding(self):
        channels = np.array([0, 5, 1023, 512])
        block = encode_event_block(channels)
        assert block == b"".join(encode_frame(OP_EVENT, int(c)) for c in channels)


class TestResultMessage:
    def test_round_trip(self):
        counts = np.array([1, 2, 3, 4, 5, 6, 7, 4_000_000_000], dtype=np.int64)
        data = build_result_message(counts)
        assert len(data) == result_message_size(8)
        assert data[0] == 0x52
        assert np.array_equal(parse_result_message(data, 8), counts)

    def test_checksum_detects_corruption(self):
        data = bytearray(build_result_message(np.arange(8)))
        data[3] ^= 0xFF
        with pytest.raises(ProtocolError, match="checksum"):
            parse_result_message(bytes(data), 8)

    def test_bad_tag_rejected(self):
        data = bytearray(build_result_message(np.arange(8)))
        delta = data[0] - 0x00
        data[0] = 0x00
        # keep the checksum consistent so only the tag is wrong
        checksum = (int.from_bytes(data[-2:], "little") - delta) & 0xFFFF
        data[-2:] = checksum.to_bytes(2, "little")
        with pytest.raises(ProtocolError, match="tag"):
            parse_result_message(bytes(data), 8)

    def test_wrong_length_rejected(self):
        with pytest.raises(ProtocolError, match="bytes"):
            parse_result_message(b"\x52\x00", 8)


class TestEngineServer:
    def test_vectorized_parse_matches_frame_decoder(self):
        # the server's span parser must accept/reject exactly what
        # decode_frame does, including mid-buffer invalid words
        rng = np.random.default_rng(50)
        model = random_toy_snn(rng, input_len=1024)
        for _ in range(30):
            words = rng.integers(0, 1 << 16, size=rng.integers(1, 60))
            data = words.astype(">u2").tobytes()
            ref_valid = all(int(w) in VALID_WORDS for w in words)
            server = EngineServer(Engine(model))
            try:
                server.feed(data)
                got_valid = True
            except ProtocolError:
                got_valid = False
            assert got_valid == ref_valid

    def test_partial_frames_buffered(self):
        rng = np.random.default_rng(51)
        model = random_toy_snn(rng, input_len=1024)
        server = EngineServer(Engine(model))
        message = encode_frame(OP_EVENT, 7) + encode_frame(OP_COLLECT)
        out = b""
        for i in range(len(message)):  # byte-at-a-time delivery
            out += server.feed(message[i:i + 1])
        counts = parse_result_message(out, model.arch.num_classes)
        assert counts.sum() >= 0  # parsed cleanly


def loopback_for(model):
    return LoopbackTransport(EngineServer(Engine(model)))


class TestRunSample:
    def test_protocol_equals_direct_path(self):
        rng = np.random.default_rng(52)
        for _ in range(10):
            model = random_toy_snn(rng)
            stream = random_stream(rng, model.arch.input_len,
                                   int(rng.integers(0, 3000)))
            direct = run_inference(model, stream)
            via_wire = run_sample(loopback_for(model), stream,
                                  model.arch.num_classes)
            assert np.array_equal(via_wire.class_counts, direct.class_counts)
            assert via_wire.predicted == direct.predicted
            assert via_wire.tie == direct.tie

    def test_empty_stream_collects_zeros(self):
        rng = np.random.default_rng(53)
        model = random_toy_snn(rng)
        stream = random_stream(rng, model.arch.input_len, 0)
        result = run_sample(loopback_for(model), stream, model.arch.num_classes)
        assert np.all(result.class_counts == 0)

    def test_transcript_grammar(self):
        rng = np.random.default_rng(54)
        model = random_toy_snn(rng)
        transport = loopback_for(model)
        transcript = Transcript()
        for n in (5, 0, 17):
            run_sample(transport, random_stream(rng, model.arch.input_len, n),
                       model.arch.num_classes, transcript)
        transcript.validate()
        assert [rec.n_events for rec in transcript.samples] == [5, 0, 17]


class CorruptingTransport:
    """Flips one byte of every served result message."""

    def __init__(self, inner, corrupt_samples=frozenset()):
        self.inner = inner
        self.reads = 0
        self.corrupt_samples = corrupt_samples

    def write(self, data):
        self.inner.write(data)

    def read_exact(self, n):
        data = bytearray(self.inner.read_exact(n))
        if self.reads in self.corrupt_samples:
            data[1] ^= 0x40
        self.reads += 1
        return bytes(data)

    def close(self):
        self.inner.close()


def tiny_labeled_dataset(rng, model, n_per_class=3):
    classes = tuple(f"C{i}" for i in range(model.arch.num_classes))
    samples, folds = [], []
    for ci in range(len(classes)):
        for v in range(n_per_class):
            probs = rng.dirichlet(np.full(model.arch.input_len, 0.5))
            samples.append(spectra.NormalizedSpectrum(probs, label=classes[ci]))
            folds.append(v % 5)
    return spectra.Dataset(samples, folds, classes=classes)


class TestRunBatch:
    def test_checksum_fault_marks_sample_and_continues(self):
        rng = np.random.default_rng(55)
        model = random_toy_snn(rng)
        ds = tiny_labeled_dataset(rng, model)
        transport = CorruptingTransport(loopback_for(model), corrupt_samples={2})
        report = run_batch(ds, duration=500, rate=0.5, base_seed=4,
                           transport=transport)
        assert report.protocol_errors == 1
        assert int(report.totals.sum()) == len(ds)
        assert int(report.confusion.sum()) == len(ds) - 1

    def test_report_shape_and_determinism(self):
        rng = np.random.default_rng(56)
        model = random_toy_snn(rng)
        ds = tiny_labeled_dataset(rng, model, n_per_class=4)
        a = run_batch(ds, duration=800, rate=0.5, base_seed=11, model=model)
        b = run_batch(ds, duration=800, rate=0.5, base_seed=11, model=model)
        assert a.to_text() == b.to_text()
        assert np.all(a.totals == 4)
        assert a.confusion.sum(axis=1).tolist() == a.totals.tolist()
        text = a.to_text()
        assert text.startswith("# inference-report-v1")
        assert f"protocol_errors,0" in text

    def test_needs_some_engine_source(self):
        rng = np.random.default_rng(57)
        model = random_toy_snn(rng)
        ds = tiny_labeled_dataset(rng, model)
        with pytest.raises(ValueError, match="transport, engine, or model"):
            run_batch(ds, duration=10, rate=0.5, base_seed=0)


class TestSocketTransport:
    def test_tcp_round_trip_matches_direct(self, snn_model, small_dataset):
        server_sock = socket.create_server(("127.0.0.1", 0))
        port = server_sock.getsockname()[1]
        engine = Engine(snn_model)

        def serve():
            conn, _ = server_sock.accept()
            with conn:
                serve_connection(conn, engine)

        thread = threading.Thread(target=serve, daemon=True)
        thread.start()
        spectrum = small_dataset.samples[0]
        stream = events.sample_events(spectrum, 0.2, 20_000, seed=3)
        transport = SocketTransport.connect("127.0.0.1", port, timeout=10.0)
        try:
            via_wire = run_sample(transport, stream, 8)
        finally:
            transport.close()
        thread.join(timeout=10.0)
        server_sock.close()
        direct = run_inference(snn_model, stream)
        assert np.array_equal(via_wire.class_counts, direct.class_counts)

    def test_timeout_surfaces_as_protocol_error(self):
        server_sock = socket.create_server(("127.0.0.1", 0))
        port = server_sock.getsockname()[1]
        transport = SocketTransport.connect("127.0.0.1", port, timeout=0.2)
        try:
            with pytest.raises(ProtocolError, match="timeout"):
                transport.read_exact(1)
        finally:
            transport.close()
            server_sock.close()


class TestDurationRegression:
    def test_longer_integration_never_worse(self, snn_model, small_dataset):
        # golden-pinned regression: accuracy at the long duration must not
        # fall below the short duration on the shipped seeds
        test_set = small_dataset.subset(include=4)
        short = run_batch(test_set, duration=6_000, rate=0.005, base_seed=77,
                          model=snn_model)
        long = run_batch(test_set, duration=120_000, rate=0.005, base_seed=77,
                         model=snn_model)
        assert long.accuracy >= short.accuracy
        golden = (GOLDEN / "duration_regression.txt").read_text()
        assert f"short,{repr(short.accuracy)}\nlong,{repr(long.accuracy)}\n" == golden
