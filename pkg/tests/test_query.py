import random
import time

import pytest

from oracles import committed_latest, ewma, history_window, latest_window, result_tuples
from rosfs.container import Message
from rosfs.errors import InvalidRange, NoBandwidthEstimate, UnknownTopic
from rosfs.query import NS, BandwidthEstimate, QueryEngine, update_bandwidth
from rosfs.recorder import DurabilityPolicy, record, start_session
from rosfs.synth import TopicSpec, generate

S = NS  # 1 second in ns


@pytest.fixture
def toy_container(tmp_path):
    """Four topics; topicC (id 3) has messages at whole-second stamps 1..9."""
    root = tmp_path / "toy"
    session = start_session(root)
    log = []
    for t in range(1, 10):
        for name in ["topicZ", "topicA", "topicB", "topicC"]:
            msg = Message(t * S, name, f"{name}@{t}".encode())
            session.ingest(msg)
            log.append(msg)
    session.close()
    return root, log


def test_fig8_latest_one_second_of_topic_c(toy_container):
    root, log = toy_container
    engine = QueryEngine(root)
    res = engine.latest(["topicC"], 1.0)
    # watermark is at t=9; the most recent 1 second is (8, 9]: just msg 9
    assert result_tuples(res) == [("topicC", 9 * S, b"topicC@9")]
    assert res.stats.messages_returned == 1
    assert res.stats.watermark_ts == 9 * S
    engine.close()


def test_latest_whole_recording(toy_container):
    root, log = toy_container
    engine = QueryEngine(root)
    res = engine.latest(["topicC"], 100.0)
    assert result_tuples(res) == latest_window(log, ["topicC"], 9 * S, 100 * S)
    assert res.stats.messages_returned == 9
    engine.close()


def test_latest_random_vs_oracle(tmp_path):
    rng = random.Random(21)
    specs = [
        TopicSpec("/imu", 200.0, 64, 5.0, seed=1),
        TopicSpec("/img", 20.0, 900, 5.0, seed=1),
        TopicSpec("/gps", 7.0, 120, 5.0, seed=1),
    ]
    src = generate(specs, start_ns=10**9)
    log = list(src)
    record(tmp_path / "c", log)
    engine = QueryEngine(tmp_path / "c")
    wm = max(m.timestamp for m in log)
    names = [s.topic_name for s in specs]
    for _ in range(100):
        topics = rng.sample(names, rng.randrange(1, 4))
        time_len = rng.uniform(0.01, 6.0)
        res = engine.latest(topics, time_len)
        assert result_tuples(res) == latest_window(log, topics, wm, round(time_len * NS))
    engine.close()


def test_history_random_vs_oracle(tmp_path):
    rng = random.Random(31)
    specs = [
        TopicSpec("/a", 150.0, 48, 4.0, seed=2),
        TopicSpec("/b", 44.0, 333, 4.0, seed=2),
        TopicSpec("/c", 9.0, 80, 4.0, seed=2),
    ]
    src = generate(specs, start_ns=5 * S)
    log = list(src)
    record(tmp_path / "c", log)
    engine = QueryEngine(tmp_path / "c")
    t_lo = min(m.timestamp for m in log) - S
    t_hi = max(m.timestamp for m in log) + S
    names = [s.topic_name for s in specs]
    for _ in range(100):
        a, b = sorted((rng.randrange(t_lo, t_hi), rng.randrange(t_lo, t_hi)))
        topics = rng.sample(names, rng.randrange(1, 4))
        res = engine.history(topics, a, b)
        assert result_tuples(res) == history_window(log, topics, a, b)
    engine.close()


def test_history_degenerate_and_empty_ranges(toy_container):
    root, log = toy_container
    engine = QueryEngine(root)
    # start == end with no message exactly there
    assert engine.history(["topicC"], 3 * S + 1, 3 * S + 1).records == []
    # start == end exactly on a message
    res = engine.history(["topicC"], 3 * S, 3 * S)
    assert result_tuples(res) == [("topicC", 3 * S, b"topicC@3")]
    # range before all data
    assert engine.history(["topicC"], 1, 2).records == []
    engine.close()


def test_history_rate_times_interval(tmp_path):
    spec = TopicSpec("/visensor/imu", 200.0, 64, 10.0, "sensor_msgs/Imu")
    src = generate([spec], start_ns=10**9)
    record(tmp_path / "c", src)
    engine = QueryEngine(tmp_path / "c")
    start = 10**9 + 2 * S
    end = 10**9 + 6 * S
    res = engine.history(["/visensor/imu"], start, end)
    expect = 200 * 4
    assert abs(res.stats.messages_returned - expect) <= 1  # boundary message
    engine.close()


def test_history_inverted_range(toy_container):
    root, _ = toy_container
    engine = QueryEngine(root)
    with pytest.raises(InvalidRange):
        engine.history(["topicC"], 5 * S, 4 * S)
    engine.close()


def test_unknown_topic(toy_container):
    root, _ = toy_container
    engine = QueryEngine(root)
    with pytest.raises(UnknownTopic):
        engine.latest(["/nope"], 1.0)
    with pytest.raises(UnknownTopic):
        engine.history(["/nope"], 0, 10)
    engine.close()


def test_latest_empty_index_gives_stale_empty(tmp_path):
    session = start_session(tmp_path / "c")
    session.ingest(Message(1 * S, "/t", b"x"))
    # make the topic visible but leave the index empty: metadata was
    # written at registration, nothing has flushed yet
    engine = QueryEngine(tmp_path / "c")
    res = engine.latest(["/t"], 1.0)
    assert res.records == [] and res.stats.stale
    engine.close()
    session.close()


def test_multi_topic_grouping_request_order(toy_container):
    root, log = toy_container
    engine = QueryEngine(root)
    res = engine.history(["topicB", "topicZ"], 0, 100 * S)
    groups = res.groups()
    assert [g[0] for g in groups] == ["topicB", "topicZ"]
    for name, msgs in groups:
        stamps = [m.timestamp for m in msgs]
        assert stamps == sorted(stamps)
    assert result_tuples(res) == history_window(log, ["topicB", "topicZ"], 0, 100 * S)
    engine.close()


def test_read_under_write_consistent_subset(tmp_path):
    specs = [TopicSpec("/a", 300.0, 200, 2.0), TopicSpec("/b", 100.0, 500, 2.0)]
    src = generate(specs, start_ns=10**9)
    log = list(src)
    policy = DurabilityPolicy(flush_interval=0.005, flush_max_pending=32)
    session = start_session(tmp_path / "c", iter(log), policy)

    import threading

    worker = threading.Thread(target=session.run)
    worker.start()
    try:
        engine = None
        seen = 0
        deadline = time.time() + 10
        while time.time() < deadline and worker.is_alive():
            if engine is None:
                try:
                    engine = QueryEngine(tmp_path / "c")
                except Exception:
                    time.sleep(0.002)
                    continue
            try:
                res = engine.latest(["/a", "/b"], 10.0)
            except UnknownTopic:
                time.sleep(0.002)
                continue
            wm = res.stats.watermark
            if wm is None:
                continue
            expect = committed_latest(log, ["/a", "/b"], {"/a": 0, "/b": 1}, wm, 10 * NS)
            got = result_tuples(res)
            # the reader sees exactly the committed prefix for that watermark
            assert got == expect, f"mismatch at watermark {tuple(wm)}"
            seen += 1
    finally:
        worker.join()
        session.close()
    assert seen > 0
    if engine:
        engine.close()


# ---------------------------------------------------------------------------
# Query-Auto and the bandwidth estimator


def test_ewma_first_sample_identity():
    est = BandwidthEstimate()
    est.update(1_000_000, 1.0)
    assert est.bytes_per_second == 1_000_000.0


def test_ewma_constant_converges_within_5():
    est = BandwidthEstimate(alpha=0.3)
    for _ in range(5):
        est.update(5_000_000, 1.0)
    assert est.bytes_per_second == pytest.approx(5_000_000.0)


def test_ewma_step_change_matches_recurrence():
    est = BandwidthEstimate(alpha=0.3)
    est.update(10_000_000, 1.0)
    for _ in range(10):
        est.update(1_000_000, 1.0)
    oracle = ewma([10e6] + [1e6] * 10, alpha=0.3)
    assert est.bytes_per_second == pytest.approx(oracle)
    # within 20% of 1 MB/s after 10 samples
    assert abs(est.bytes_per_second - 1e6) / 1e6 < 0.20


def test_ewma_staleness():
    est = BandwidthEstimate(window=0.01)
    assert est.is_stale()
    est.update(100, 1.0)
    assert not est.is_stale()
    time.sleep(0.05)
    assert est.is_stale()


def test_update_bandwidth_validates():
    est = BandwidthEstimate()
    with pytest.raises(ValueError):
        update_bandwidth(est, 100, 0.0)


def test_auto_budget_arithmetic(tmp_path):
    # bandwidth 3 MB/s, 300.07 KB messages at 30 Hz, 1 s target:
    # time_len = 3e6 / (307272 * 30) = 0.3255 s -> 9..10 messages, then
    # the byte budget trims to 9 (10 x 307272 > 3e6)
    spec = TopicSpec("/camera/image", 30.0, 307_272, 5.0, "sensor_msgs/Image")
    record(tmp_path / "c", generate([spec], start_ns=10**9))
    engine = QueryEngine(tmp_path / "c")
    est = BandwidthEstimate()
    est.update(3_000_000, 1.0)
    res = engine.auto(["/camera/image"], 1.0, est)
    assert res.stats.time_len == pytest.approx(3e6 / (307_272 * 30.0), rel=0.05)
    assert res.stats.messages_returned == 9
    assert res.stats.bytes_returned <= 3_000_000
    engine.close()


def test_auto_infinite_bandwidth_clamps_to_recording(tmp_path):
    spec = TopicSpec("/t", 50.0, 100, 2.0)
    src = generate([spec], start_ns=10**9)
    log = list(src)
    record(tmp_path / "c", log)
    engine = QueryEngine(tmp_path / "c")
    est = BandwidthEstimate()
    est.update(10**15, 1.0)  # effectively infinite
    res = engine.auto(["/t"], 1.0, est)
    assert res.stats.messages_returned == len(log)  # whole recording
    engine.close()


def test_auto_requires_estimate(tmp_path):
    record(tmp_path / "c", generate([TopicSpec("/t", 10.0, 50, 1.0)]))
    engine = QueryEngine(tmp_path / "c")
    with pytest.raises(NoBandwidthEstimate):
        engine.auto(["/t"], 1.0, BandwidthEstimate())
    engine.close()


def test_auto_multi_topic_budget(tmp_path):
    specs = [
        TopicSpec("/big", 20.0, 50_000, 4.0),
        TopicSpec("/small", 200.0, 100, 4.0),
    ]
    record(tmp_path / "c", generate(specs, start_ns=10**9))
    engine = QueryEngine(tmp_path / "c")
    est = BandwidthEstimate()
    est.update(400_000, 1.0)
    res = engine.auto(["/big", "/small"], 1.0, est)
    assert res.stats.bytes_returned <= 400_000
    names = {name for name, _ in res.records}
    assert names == {"/big", "/small"}  # proportional shares keep both
    engine.close()
