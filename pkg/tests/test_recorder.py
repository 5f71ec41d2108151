import random
import threading
import time

import pytest

from rosfs.container import ContainerReader, Message, read_metadata, scan_brick, brick_path
from rosfs.errors import OutOfOrderTimestamp
from rosfs.recorder import (
    DurabilityPolicy,
    RecordSession,
    pace_messages,
    record,
    recover_container,
    start_session,
)
from rosfs.synth import SynthSource, TopicSpec, generate
from rosfs.timeindex import TimeIndexReader, recover as index_recover


def test_empty_source_valid_container(tmp_path):
    meta = record(tmp_path / "c", [])
    assert meta.topic_count == 0
    assert meta.start_timestamp == 0 and meta.end_timestamp == 0
    # cold-readable
    assert read_metadata(tmp_path / "c").topic_count == 0
    index_recover(tmp_path / "c" / "time.idx")


def test_200hz_for_10s_records_about_2000(tmp_path):
    src = generate([TopicSpec("/imu", 200.0, 64, 10.0, "sensor_msgs/Imu")])
    meta = record(tmp_path / "c", src)
    assert meta.topic_count == 1
    assert meta.topics[0].message_count == src.total_count() == 2000
    assert meta.topics[0].message_type == "sensor_msgs/Imu"


def test_fig7_msg9_lands_in_brick3_and_cache(tmp_path):
    session = start_session(tmp_path / "c")
    for name in ["topicZ", "topicA", "topicB"]:
        session.ingest(Message(1, name, b"x"))
    session.ingest(Message(9, "topicC", b"msg-nine"))
    assert session.topics.lookup("topicC") == 3
    meta = session.close()
    frames = list(scan_brick(brick_path(tmp_path / "c", 3)))
    assert [(ts, plen) for _, ts, plen in frames] == [(9, len(b"msg-nine"))]
    # index entry for (9, topic 3) points at offset 0 of 3.brick
    reader = TimeIndexReader.open(tmp_path / "c" / "time.idx")
    entries = [e for e in reader.scan_all() if e.key.topic_id == 3]
    assert len(entries) == 1 and entries[0].key.timestamp == 9 and entries[0].offset == 0
    reader.close()
    assert meta.topics[3].message_count == 1


def test_new_topic_auto_registered(tmp_path):
    session = start_session(tmp_path / "c")
    session.ingest(Message(5, "/fresh", b"first"))
    assert session.topics.lookup("/fresh") == 0
    assert brick_path(tmp_path / "c", 0).exists()
    session.close()


def test_interleaved_two_topic_order_preserved(tmp_path):
    rng = random.Random(11)
    msgs = []
    t = {"/a": 0, "/b": 0}
    for i in range(1000):
        topic = rng.choice(["/a", "/b"])
        t[topic] += rng.randrange(1, 4)
        msgs.append(Message(t[topic], topic, f"{topic}:{i}".encode()))
    meta = record(tmp_path / "c", msgs)
    reader = ContainerReader.open(tmp_path / "c")
    for tid, topic in ((0, msgs[0].topic), (1, "/b" if msgs[0].topic == "/a" else "/a")):
        got = reader.read_sequential(tid, 0, reader.brick_size(tid))
        want = [m for m in msgs if m.topic == topic]
        assert [(m.timestamp, m.payload) for m in got] == [(m.timestamp, m.payload) for m in want]
    assert sum(t.message_count for t in meta.topics) == 1000
    reader.close()


def test_no_loss_counters(tmp_path):
    src = generate(
        [TopicSpec("/a", 100.0, 128, 3.0), TopicSpec("/b", 333.0, 16, 3.0)]
    )
    meta = record(tmp_path / "c", src)
    assert sum(t.message_count for t in meta.topics) == src.total_count()


def test_out_of_order_policies(tmp_path):
    # reject: dropped and counted
    session = start_session(tmp_path / "r", policy=DurabilityPolicy(out_of_order="reject"))
    session.ingest(Message(10, "/t", b"a"))
    session.ingest(Message(5, "/t", b"late"))
    assert session.counters.dropped == 1
    meta = session.close()
    assert meta.topics[0].message_count == 1

    # clamp: rewritten to last timestamp
    session = start_session(tmp_path / "k", policy=DurabilityPolicy(out_of_order="clamp"))
    session.ingest(Message(10, "/t", b"a"))
    session.ingest(Message(5, "/t", b"late"))
    meta = session.close()
    assert meta.topics[0].message_count == 2
    frames = list(scan_brick(brick_path(tmp_path / "k", 0)))
    assert [ts for _, ts, _ in frames] == [10, 10]

    # strict: raises
    session = start_session(tmp_path / "s", policy=DurabilityPolicy(out_of_order="strict"))
    session.ingest(Message(10, "/t", b"a"))
    with pytest.raises(OutOfOrderTimestamp):
        session.ingest(Message(5, "/t", b"late"))
    session.close()


def test_same_timestamp_gets_seq(tmp_path):
    session = start_session(tmp_path / "c")
    for payload in (b"a", b"b", b"c"):
        session.ingest(Message(7, "/t", payload))
    session.close()
    reader = TimeIndexReader.open(tmp_path / "c" / "time.idx")
    keys = [tuple(e.key) for e in reader.scan_all()]
    assert keys == [(7, 0, 0), (7, 0, 1), (7, 0, 2)]
    reader.close()


def test_watermark_advances_during_recording(tmp_path):
    policy = DurabilityPolicy(flush_interval=0.02, flush_max_pending=10)
    session = start_session(tmp_path / "c", policy=policy)
    session.ingest(Message(1, "/t", b"x"))
    deadline = time.time() + 5
    reader = TimeIndexReader.open(tmp_path / "c" / "time.idx")
    wm = None
    while time.time() < deadline:
        reader.refresh()
        wm = reader.watermark
        if wm is not None:
            break
        time.sleep(0.01)
    assert wm is not None and wm.timestamp == 1
    reader.close()
    session.close()


def test_read_while_write_readable_prefix(tmp_path):
    """Concurrent reader: every committed index entry is byte-exact readable."""
    specs = [TopicSpec("/a", 500.0, 256, 2.0), TopicSpec("/b", 200.0, 1024, 2.0)]
    src = generate(specs)
    policy = DurabilityPolicy(flush_interval=0.01, flush_max_pending=64)
    session = start_session(tmp_path / "c", src, policy)
    errors: list[str] = []
    done = threading.Event()

    def read_loop():
        while not (tmp_path / "c" / "metadata").exists():
            time.sleep(0.005)
        idx = TimeIndexReader.open(tmp_path / "c" / "time.idx")
        reader = ContainerReader.open(tmp_path / "c")
        checked = 0
        while not done.is_set() or checked == 0:
            idx.refresh()
            wm = idx.watermark
            if wm is None:
                time.sleep(0.005)
                continue
            for entry in idx.scan_all():
                msg = reader.read_record_at(entry.key.topic_id, entry.offset)
                if msg.timestamp != entry.key.timestamp or not src.verify(msg):
                    errors.append(f"torn read at {tuple(entry.key)}")
            checked += 1
            time.sleep(0.02)
        idx.close()
        reader.close()

    t = threading.Thread(target=read_loop)
    t.start()
    session.run()
    session.close()
    done.set()
    t.join()
    assert errors == []


def test_pace_messages_real_time(tmp_path):
    msgs = [Message(10**9 + i * 10**8, "/t", b"x") for i in range(5)]  # 0.1 s apart
    t0 = time.monotonic()
    out = list(pace_messages(msgs, speed=4.0))
    elapsed = time.monotonic() - t0
    assert len(out) == 5
    assert 0.05 < elapsed < 1.0  # 0.4 s of data at 4x => ~0.1 s


def test_recover_container_truncates_torn_tail(tmp_path):
    src = generate([TopicSpec("/a", 100.0, 64, 1.0)])
    record(tmp_path / "c", src)
    path = brick_path(tmp_path / "c", 0)
    with open(path, "ab") as f:
        f.write(b"\xff\xff\x00\x00partial-frame")
    meta = recover_container(tmp_path / "c")
    assert meta.topics[0].message_count == 100
    frames = list(scan_brick(path))
    assert len(frames) == 100
    # metadata counts now match brick frames again
    assert read_metadata(tmp_path / "c").topics[0].message_count == 100


def test_recover_container_drops_unregistered_brick(tmp_path):
    record(tmp_path / "c", generate([TopicSpec("/a", 10.0, 16, 1.0)]))
    stray = tmp_path / "c" / "9.brick"
    stray.write_bytes(b"")
    recover_container(tmp_path / "c")
    assert not stray.exists()


def test_flusher_survives_and_close_flushes_everything(tmp_path):
    policy = DurabilityPolicy(flush_interval=5.0, flush_max_pending=10**6)
    src = generate([TopicSpec("/a", 100.0, 32, 1.0)])
    meta = record(tmp_path / "c", src, policy)
    # nothing should have flushed until close; close must flush all
    reader = TimeIndexReader.open(tmp_path / "c" / "time.idx")
    assert reader.entry_count == 100
    assert meta.topics[0].message_count == 100
    reader.close()
