import json
import threading
import time

import pytest
from hypothesis import given
from hypothesis import strategies as st

from asdbench.bench import (
    DeviceProfile, NegativeDuration, RunKey, RunRecord, RunStore, StoreCorrupt, TimingRecord, WorkloadFailed,
    ZeroDuration, canonical_duration_text, detect_device, format_duration, parse_duration, speedup, time_repeated,
    time_run,
)
from asdbench.metrics import MetricsReport

from published_tables import TABLES


ALL_TIMES = [row[-1] for table in TABLES.values() for row in table]


@pytest.mark.parametrize("text", ALL_TIMES)
def test_every_table_time_round_trips(text):
    canon = canonical_duration_text(text)
    assert format_duration(parse_duration(canon)) == canon


def test_fixtures():
    assert format_duration(5 * 3600 + 27 * 60) == "5h 27min"
    assert format_duration(33 * 60 + 42) == "33min 42s"
    assert canonical_duration_text("33 min 42s") == "33min 42s"
    assert canonical_duration_text("1hr 3min") == "1h 3min"


@pytest.mark.parametrize("seconds, text", [
    (0, "0min 0s"), (59.4, "0min 59s"), (59.5, "1min 0s"), (3599.5, "1h 0min"),
    (3600, "1h 0min"), (3600 + 29.9, "1h 0min"), (3600 + 30, "1h 1min"), (2 * 3600 - 20, "2h 0min"),
])
def test_rounding_edges(seconds, text):
    assert format_duration(seconds) == text


def test_negative_duration():
    with pytest.raises(NegativeDuration):
        format_duration(-1)


@given(st.integers(0, 3599))
def test_sub_hour_seconds_are_exact(s):
    assert parse_duration(format_duration(s)) == s


@given(st.integers(1, 30), st.integers(0, 59))
def test_hour_form_is_exact_on_whole_minutes(h, m):
    assert parse_duration(format_duration(h * 3600 + m * 60)) == h * 3600 + m * 60


def test_two_second_calibration():
    _, t = time_run(time.sleep, 2.0)
    assert 2.000 <= t.wall_seconds <= 2.050
    assert t.clock_source == "monotonic" and t.ended_ns > t.started_ns


def test_empty_workload_overhead():
    best = min(time_run(lambda: None)[1].wall_seconds for _ in range(20))
    assert best < 1e-3


def test_instant_workload_and_sequential_exclusivity():
    _, a = time_run(lambda: None)
    _, b = time_run(lambda: None)
    assert 0 < a.wall_seconds < 0.01
    assert b.started_ns >= a.ended_ns


def test_failed_workload_keeps_timing():
    def boom():
        time.sleep(0.01)
        raise RuntimeError("x")

    with pytest.raises(WorkloadFailed) as info:
        time_run(boom)
    assert info.value.timing.failed and info.value.timing.wall_seconds >= 0.01


def test_runs_are_serialised():
    spans = []

    def work():
        t0 = time.perf_counter()
        time.sleep(0.05)
        spans.append((t0, time.perf_counter()))

    threads = [threading.Thread(target=time_run, args=(work,)) for _ in range(3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    spans.sort()
    assert all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))


def test_time_repeated_keeps_median():
    delays = iter([0.03, 0.01, 0.02])
    _, t = time_repeated(lambda: time.sleep(next(delays)), repeats=3)
    assert 0.02 <= t.wall_seconds < 0.03


def test_speedup():
    assert speedup(19620, 2022) == pytest.approx(9.70, abs=0.01)
    assert speedup(42, 42) == 1.0 and speedup(10, 20) == 0.5
    with pytest.raises(ZeroDuration):
        speedup(1, 0)


@given(st.integers(1, 99), st.booleans())
def test_run_key_bijection(i, acc):
    k = RunKey(i, acc)
    assert RunKey.parse(k.render()) == k
    assert k.render().endswith("'") != acc


def test_run_key_notation():
    assert RunKey(1, True).render() == "D_1" and RunKey(1, False).render() == "D_1'"


def test_override_keeps_gpu_model(monkeypatch):
    from asdbench import bench

    monkeypatch.setattr(bench, "_gpu_model", lambda: "Tesla T4")
    on = detect_device(1, no_accelerator=False)
    off = detect_device(1, no_accelerator=True)
    assert on.accelerator_enabled and not off.accelerator_enabled
    assert off.gpu_model == "Tesla T4"


def test_device_profile():
    d = detect_device(1, no_accelerator=True)
    assert not d.accelerator_enabled and d.gpu_model is None and d.cpu_model
    with pytest.raises(ValueError):
        DeviceProfile("Device1", "cpu", 8.0, None, True)


def record(model="vgg16", key="D_1'", seconds=10.0, created="2026-01-01T00:00:00+00:00", acc=0.8):
    return RunRecord(
        model_name=model, run_key=RunKey.parse(key), device=DeviceProfile("Device1", "test cpu", 16.0, None, False),
        metrics=MetricsReport(acc, 0.5, 0.5, 0.5), timing=TimingRecord.from_seconds(seconds),
        config_hash="0" * 64, created_at=created,
    )


def test_store_round_trip(tmp_path):
    store = RunStore(tmp_path / "records.jsonl")
    r = record()
    store.append(r)
    assert list(store) == [r]
    store.append(record("resnet50"))
    assert len(store.path.read_text().splitlines()) == 2


def test_store_filters(tmp_path):
    store = RunStore(tmp_path / "records.jsonl")
    rows = [
        record("vgg16", "D_1'", created="2026-01-01"), record("vgg16", "D_1", created="2026-01-02"),
        record("mobilenet", "D_1'", created="2026-01-03"), record("vgg16", "D_2'", created="2026-01-04"),
    ]
    for r in rows:
        store.append(r)
    assert store.load(model_name="vgg16", run_key="D_1'") == [rows[0]]
    assert store.load(model_name="vgg16") == [rows[0], rows[1], rows[3]]
    assert store.load(since="2026-01-02", until="2026-01-03") == rows[1:3]


def test_store_corruption_names_the_line(tmp_path):
    store = RunStore(tmp_path / "records.jsonl")
    store.append(record())
    with open(store.path, "a") as fh:
        fh.write('{"truncated": \n')
    with pytest.raises(StoreCorrupt) as info:
        list(store)
    assert info.value.lineno == 2


def test_unknown_model_rejected():
    with pytest.raises(ValueError):
        record("alexnet")


def test_record_json_is_plain():
    d = record().to_dict()
    assert json.loads(json.dumps(d)) == d
    assert d["run_key"] == "D_1'"
