import socket
import threading
import time

import numpy as np
import pytest

from blmnode import nn, node, quant
from blmnode import workbench as wb
from blmnode.decision import Source, decide_source
from blmnode.errors import BindError, ModelLoadError, ParseError


# --- wire format -----------------------------------------------------------------------

def test_datagram_sizes():
    assert node.IN_SIZE == 1056
    assert node.OUT_SIZE == 2093
    assert len(node.encode_frame(1, np.zeros(260))) == 1056
    assert len(node.encode_output(1, np.zeros(520), Source.RR, 5)) == 2093


def test_frame_round_trip():
    v = np.random.default_rng(0).standard_normal(260).astype(np.float32).astype(float)
    seq, ts, back = node.decode_frame(node.encode_frame(7, v, 123456789))
    assert (seq, ts) == (7, 123456789)
    np.testing.assert_array_equal(back, v)
    assert node.encode_frame(7, v)[:4] == b"BLM1"


def test_output_round_trip():
    v = np.linspace(0, 1, 520, dtype=np.float32).astype(float)
    seq, back, decision, lat = node.decode_output(node.encode_output(3, v, Source.RR, 1_740_000))
    assert (seq, decision, lat) == (3, Source.RR, 1_740_000)
    np.testing.assert_array_equal(back, v)


@pytest.mark.parametrize("data", [
    b"XXXX" + node.encode_frame(0, np.zeros(260))[4:],
    node.encode_frame(0, np.zeros(260))[:-1],
    b"",
])
def test_malformed_frames(data):
    with pytest.raises(node.MalformedDatagram):
        node.decode_frame(data)


def test_non_finite_frame_rejected():
    data = node.encode_frame(0, np.r_[np.zeros(259), np.nan])
    with pytest.raises(node.MalformedDatagram):
        node.decode_frame(data)


# --- queue --------------------------------------------------------------------------------

def test_drop_oldest_freshness():
    q = node.DropOldestQueue(4)
    evicted = [q.put(i) for i in range(10)]
    assert evicted == [None] * 4 + [0, 1, 2, 3, 4, 5]
    q.close()
    assert q.get_all() == [6, 7, 8, 9]
    assert q.get() is None


def test_drop_oldest_under_concurrency():
    q = node.DropOldestQueue(4)
    got, dropped = [], []

    def consumer():
        while True:
            items = q.get_all()
            if not items:
                return
            got.extend(items)
            time.sleep(0.0005)

    t = threading.Thread(target=consumer)
    t.start()
    for i in range(2000):
        e = q.put(i)
        if e is not None:
            dropped.append(e)
    q.close()
    t.join()
    assert got == sorted(got)  # processed sequence strictly increasing
    assert 1999 in got  # the newest frame is never the one dropped
    assert sorted(got + dropped) == list(range(2000))


def test_queue_capacity_validation():
    with pytest.raises(ValueError):
        node.DropOldestQueue(0)


# --- stats ---------------------------------------------------------------------------------

def rec(seq, ms, ingress=0):
    ns = int(ms * 1e6)
    return node.LatencyRecord(seq, ns, ns <= 3_000_000, ns, ingress, ingress + ns)


def test_stats_equal_latencies():
    s = node.stats_report([rec(i, 1.74, i * 3_125_000) for i in range(10)])
    assert s.mean_ns == s.p50_ns == s.p99_ns == 1_740_000
    assert sum(s.hist_counts) == 10


def test_stats_miss_boundary():
    s = node.stats_report([rec(i, ms) for i, ms in enumerate([1, 2, 3, 4])])
    assert s.deadline_misses == 1
    assert s.min_ns <= s.p50_ns <= s.p99_ns <= s.max_ns
    assert s.p50_ns == 2_000_000 and s.p99_ns == 4_000_000


def test_stats_histogram_bins():
    s = node.stats_report([rec(0, 1.00), rec(1, 1.04), rec(2, 1.06), rec(3, 1.26)])
    assert s.hist_bin_ns == 50_000
    assert s.hist_start_ns == 1_000_000
    assert s.hist_counts == (2, 1, 0, 0, 0, 1)
    assert s.mode_ns == 1_025_000


def test_stats_fps():
    records = [rec(i, 1.0, i * 3_125_000) for i in range(320)]
    s = node.stats_report(records)
    span = (319 * 3_125_000 + 1_000_000) * 1e-9
    assert s.achieved_fps == pytest.approx(320 / span)


def test_nearest_rank():
    assert node.nearest_rank(list(range(1, 101)), 99) == 99
    assert node.nearest_rank([5], 99) == 5
    assert node.nearest_rank([1, 2, 3, 4], 50) == 2


def test_records_csv_round_trip(tmp_path):
    records = [rec(i, 1 + i / 10, i * 1000) for i in range(5)]
    path = tmp_path / "run.csv"
    node.write_records_csv(path, records)
    assert node.read_records_csv(path) == records


# --- config and engines ----------------------------------------------------------------------

def test_config_json_and_validation():
    c = node.NodeConfig(engine="BridgeSim", listen_port=0)
    assert node.NodeConfig.from_json(c.to_json()) == c
    with pytest.raises(ValueError):
        node.NodeConfig(deadline_ns=0)
    with pytest.raises(ValueError):
        node.NodeConfig(queue_capacity=0)
    with pytest.raises(ParseError):
        node.NodeConfig.from_json("{")


def test_model_load_error(tmp_path):
    cfg = node.NodeConfig(model_path=str(tmp_path / "missing.json"))
    with pytest.raises(ModelLoadError):
        node.load_engine(cfg)


@pytest.fixture(scope="module")
def engine():
    d = nn.reference_mlp_descriptor()
    m = nn.load_weights(wb.synth_weights(3, d, {"dense1": 0.1, "dense2": 0.1}), d)
    return node.Engine(node.EngineKind.QUANTIZED, m, quant.uniform_plan(d, 16, 7))


def test_engine_batch_matches_single(engine):
    frames = wb.synth_frames(1, 5)
    values, _ = engine.run_batch(frames)
    for f, v in zip(frames, values):
        np.testing.assert_array_equal(engine(f)[0].values, v)


def test_load_engine_from_files(tmp_path):
    d = nn.reference_mlp_descriptor()
    m = nn.load_weights(wb.synth_weights(3, d, {"dense1": 0.1, "dense2": 0.1}), d)
    (tmp_path / "m.json").write_text(d.to_json())
    nn.write_weight_file(tmp_path / "w.bin", m)
    (tmp_path / "p.json").write_text(quant.uniform_plan(d, 16, 7).to_json())
    cfg = node.NodeConfig(engine="BridgeSim", model_path=str(tmp_path / "m.json"),
                          weights_path=str(tmp_path / "w.bin"), plan_path=str(tmp_path / "p.json"))
    out, lat = node.load_engine(cfg)(np.zeros(260))
    assert out.values.shape == (520,) and lat >= 1_570_000


# --- the live service -----------------------------------------------------------------------

class Sink:
    def __init__(self):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(("127.0.0.1", 0))
        self.sock.settimeout(1.0)
        self.port = self.sock.getsockname()[1]
        self.got = []
        self.thread = threading.Thread(target=self._run, daemon=True)
        self.thread.start()

    def _run(self):
        while True:
            try:
                self.got.append(self.sock.recvfrom(4096)[0])
            except (socket.timeout, OSError):
                return

    def close(self):
        self.thread.join()
        self.sock.close()


def start_service(engine, **kw):
    sink = Sink()
    cfg = node.NodeConfig(listen_port=0, emit_port=sink.port, **kw)
    return node.NodeService(cfg, engine).start(), sink


def test_one_frame_in_one_out(engine):
    svc, sink = start_service(engine)
    frame = wb.synth_frames(2, 1)[0]
    tx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    tx.sendto(node.encode_frame(42, frame), svc.address)
    tx.close()
    time.sleep(0.3)
    stats = svc.stop()
    sink.close()
    assert len(sink.got) == 1
    seq, values, decision, lat = node.decode_output(sink.got[0])
    assert seq == 42 and decision == decide_source(values) and lat > 0
    want = engine(frame.astype(np.float32).astype(float))[0].values
    np.testing.assert_allclose(values, want.astype(np.float32))
    assert stats.frames == 1


def test_malformed_counted_not_fatal(engine):
    svc, sink = start_service(engine)
    tx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    tx.sendto(b"BAD!" + bytes(1052), svc.address)
    tx.sendto(b"short", svc.address)
    tx.sendto(node.encode_frame(1, np.zeros(260)), svc.address)
    tx.close()
    time.sleep(0.3)
    svc.stop()
    sink.close()
    assert svc.malformed == 2
    assert len(sink.got) == 1
    assert svc.received == len(svc.records) + svc.dropped + svc.malformed


def test_replay_accounting_and_decisions(engine, tmp_path):
    svc, sink = start_service(engine, records_path=str(tmp_path / "run.csv"))
    rep = node.replay(svc.address, fps=200, count=200, seed=3)
    time.sleep(0.3)
    stats = svc.stop()
    sink.close()
    assert rep.sent == 200
    assert svc.received == 200 == len(svc.records) + svc.dropped + svc.malformed
    seqs = svc.processed_seqs
    assert seqs == sorted(seqs) and len(set(seqs)) == len(seqs)
    assert len(sink.got) == len(svc.records)
    for data in sink.got:
        _, values, decision, _ = node.decode_output(data)
        assert decision == decide_source(values)
    assert stats.frames == len(svc.records)
    assert node.read_records_csv(tmp_path / "run.csv") == svc.records


def test_bind_error(engine):
    blocker = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    blocker.bind(("127.0.0.1", 0))
    try:
        with pytest.raises(BindError):
            node.NodeService(node.NodeConfig(listen_port=blocker.getsockname()[1]), engine)
    finally:
        blocker.close()


def test_replay_single_datagram():
    rx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    rx.bind(("127.0.0.1", 0))
    rx.settimeout(1.0)
    rep = node.replay(rx.getsockname(), fps=320, count=1)
    data = rx.recv(4096)
    rx.close()
    assert rep.sent == 1
    assert node.decode_frame(data)[0] == 0


def test_replay_rejects_bad_args():
    with pytest.raises(ValueError):
        node.replay(("127.0.0.1", 9), fps=0, count=1)
    with pytest.raises(ValueError):
        node.replay(("127.0.0.1", 9), fps=320, count=0)
