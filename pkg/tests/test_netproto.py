import random
import socket
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rosfs.container import Message
from rosfs.errors import (
    BadArity,
    BadCommand,
    BadFrame,
    BadParam,
    RosfsError,
    Timeout,
    UnknownTopic,
)
from rosfs.netproto import (
    QueryCommand,
    QueryServer,
    TokenBucket,
    decode_frame,
    encode_error,
    encode_records,
    parse_command,
    parse_endpoint,
    request,
    serve,
    throttle_link,
)
from rosfs.recorder import start_session
from rosfs.synth import TopicSpec, generate
from rosfs.recorder import record

S = 10**9


# ---------------------------------------------------------------------------
# Command grammar


def test_parse_query_latest():
    cmd = parse_command("q topicC 1")
    assert cmd == QueryCommand(kind="latest", topics=["topicC"], time_len=1.0)


def test_parse_query_auto():
    cmd = parse_command("qa topicA 1")
    assert cmd == QueryCommand(kind="auto", topics=["topicA"], time_len=1.0)


def test_parse_query_history_degenerate():
    cmd = parse_command("qh /imu 5 5")
    assert cmd.kind == "history"
    assert cmd.topics == ["/imu"]
    assert cmd.start_time == cmd.end_time == 5 * S


def test_parse_multi_topic():
    cmd = parse_command("q /a /b /c 2.5")
    assert cmd.topics == ["/a", "/b", "/c"]
    assert cmd.time_len == 2.5
    cmd = parse_command("qh /a /b 1.5 9.25")
    assert cmd.topics == ["/a", "/b"]
    assert (cmd.start_time, cmd.end_time) == (1_500_000_000, 9_250_000_000)


def test_parse_errors():
    with pytest.raises(BadCommand):
        parse_command("zz foo")
    with pytest.raises(BadCommand):
        parse_command("")
    with pytest.raises(BadArity):
        parse_command("q 1")  # no topic
    with pytest.raises(BadArity):
        parse_command("qh /t 5")
    with pytest.raises(BadParam):
        parse_command("q /t abc")
    with pytest.raises(BadParam):
        parse_command("q /t -1")
    with pytest.raises(BadParam):
        parse_command("qh /t nan inf")


@settings(max_examples=300, deadline=None)
@given(st.text(max_size=80))
def test_grammar_total_over_arbitrary_text(text):
    # parse never crashes: QueryCommand or a typed error
    try:
        cmd = parse_command(text)
        assert isinstance(cmd, QueryCommand)
        assert cmd.topics
    except (BadCommand, BadArity, BadParam):
        pass


# ---------------------------------------------------------------------------
# Frame round-trip


topics_st = st.text(
    alphabet=st.characters(blacklist_categories=("Cs",)), min_size=0, max_size=40
)
records_st = st.lists(
    st.tuples(topics_st, st.integers(min_value=0, max_value=2**64 - 1), st.binary(max_size=200)),
    max_size=20,
)


@settings(max_examples=200, deadline=None)
@given(records_st)
def test_wire_round_trip_property(raw_records):
    records = [(name, Message(ts, name, payload)) for name, ts, payload in raw_records]
    frame = encode_records(records)
    status, code, got = decode_frame(frame)
    assert status == 0 and code == 0
    assert [(n, m.timestamp, m.payload) for n, m in got] == [
        (n, m.timestamp, m.payload) for n, m in records
    ]


def test_error_frame_round_trip():
    frame = encode_error(4, "unknown topic '/x'")
    status, code, records = decode_frame(frame)
    assert status == 1 and code == 4
    assert records[0][1].payload == b"unknown topic '/x'"


def test_decode_rejects_garbage():
    with pytest.raises(BadFrame):
        decode_frame(b"JUNKJUNKJUNKJUNK")
    frame = encode_records([("t", Message(1, "t", b"x"))])
    with pytest.raises(BadFrame):
        decode_frame(frame[:-1])  # truncated
    with pytest.raises(BadFrame):
        decode_frame(frame + b"\x00")  # trailing byte


def test_parse_endpoint():
    assert parse_endpoint("127.0.0.1:9000") == ("127.0.0.1", 9000)
    assert parse_endpoint(("h", 1)) == ("h", 1)
    with pytest.raises(ValueError):
        parse_endpoint("nocolon")


# ---------------------------------------------------------------------------
# Live server


@pytest.fixture
def toy_server(tmp_path):
    root = tmp_path / "c"
    session = start_session(root)
    for t in range(1, 10):
        for name in ["topicZ", "topicA", "topicB", "topicC"]:
            session.ingest(Message(t * S, name, f"{name}@{t}".encode()))
    session.close()
    server = QueryServer(root).start()
    yield server
    server.shutdown()


def test_fig8_end_to_end(toy_server):
    res = request(toy_server.endpoint, "q topicC 1")
    assert [(n, m.timestamp, m.payload) for n, m in res.records] == [
        ("topicC", 9 * S, b"topicC@9")
    ]
    assert res.stats.query_duration > 0


def test_malformed_command_in_band_error(toy_server):
    with pytest.raises(BadCommand):
        request(toy_server.endpoint, "zz foo")
    # connection handling survives: next request still works
    res = request(toy_server.endpoint, "q topicC 2")
    assert res.stats.messages_returned == 2  # window (7, 9] holds t=8, t=9


def test_unknown_topic_over_wire(toy_server):
    with pytest.raises(UnknownTopic):
        request(toy_server.endpoint, "q /missing 1")


def test_history_over_wire(toy_server):
    res = request(toy_server.endpoint, "qh topicA topicB 3 5")
    got = [(n, m.timestamp) for n, m in res.records]
    assert got == [("topicA", t * S) for t in (3, 4, 5)] + [("topicB", t * S) for t in (3, 4, 5)]


def test_sixteen_concurrent_clients_no_loss(toy_server):
    results = {}
    errors = []

    def client(k):
        try:
            got = []
            for _ in range(3):
                res = request(toy_server.endpoint, "q topicC 100")
                got.append(res.stats.messages_returned)
                time.sleep(0.01)
            results[k] = got
        except Exception as e:  # noqa: BLE001
            errors.append(e)

    threads = [threading.Thread(target=client, args=(k,)) for k in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert errors == []
    assert len(results) == 16
    assert all(counts == [9, 9, 9] for counts in results.values())


def test_throttle_and_estimator(tmp_path):
    # one ~1 MB reply through a 2 MB/s link takes ~0.45 s (minus burst)
    spec = TopicSpec("/img", 10.0, 100_000, 1.0)
    record(tmp_path / "c", generate([spec], start_ns=S))
    server = serve(tmp_path / "c", ("127.0.0.1", 0), throttle_bps=2_000_000)
    try:
        res = request(server.endpoint, "q /img 100")
        assert res.stats.bytes_returned == 10 * 100_000
        assert 0.3 < res.stats.query_duration < 1.2
        rate = server.estimate.bytes_per_second
        assert rate is not None and abs(rate - 2_000_000) / 2_000_000 < 0.4
        # retune the link: transfers slow down accordingly
        throttle_link(server, 500_000)
        t0 = time.perf_counter()
        request(server.endpoint, "q /img 100")
        assert time.perf_counter() - t0 > 1.5
    finally:
        server.shutdown()


def test_request_timeout():
    # a listener that accepts and never replies
    lsock = socket.socket()
    lsock.bind(("127.0.0.1", 0))
    lsock.listen(1)
    endpoint = lsock.getsockname()
    stop = threading.Event()

    def sit():
        conn, _ = lsock.accept()
        stop.wait(5)
        conn.close()

    t = threading.Thread(target=sit, daemon=True)
    t.start()
    try:
        with pytest.raises(Timeout):
            request(endpoint, "q /t 1", timeout=0.3)
    finally:
        stop.set()
        lsock.close()


def test_token_bucket_paces():
    bucket = TokenBucket(100_000, capacity=1000)
    t0 = time.perf_counter()
    bucket.consume(50_000)
    elapsed = time.perf_counter() - t0
    assert 0.3 < elapsed < 1.0  # ~(50000-1000)/100000 s
