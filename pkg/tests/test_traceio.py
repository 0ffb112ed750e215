import numpy as np
import pytest

from fpfuse.simulation import TraceConfig, random_path, synthesize_trace
from fpfuse.traceio import GroundTruth, SensorTrace


@pytest.fixture(scope="module")
def pair(small_world):
    spec = random_path(small_world, 5, 40.0)
    return synthesize_trace(small_world, spec, cfg=TraceConfig(anchors=True), seed=5, trace_id="t5")


def test_trace_round_trip_is_byte_exact(pair, tmp_path):
    tr, _ = pair
    path = tmp_path / "t5.jsonl"
    tr.save(path)
    back = SensorTrace.load(path)
    assert back.dumps() == path.read_text()
    assert np.array_equal(back.imu.accel, tr.imu.accel) and np.array_equal(back.imu.mag, tr.imu.mag)
    assert back.anchors == tr.anchors and back.trace_id == "t5"
    assert [o.readings for o in back.rss] == [o.readings for o in tr.rss]


def test_truth_round_trip(pair, tmp_path):
    _, gt = pair
    path = tmp_path / "t5.truth.csv"
    gt.save_csv(path, manifest="m.json 0123")
    text = path.read_text()
    assert text.startswith("# manifest: m.json 0123\n")
    back = GroundTruth.load_csv(path)
    assert np.array_equal(back.p, gt.p) and np.array_equal(back.t, gt.t)
    assert np.allclose(back.C_bn, gt.C_bn, atol=1e-12)


def test_malformed_records(tmp_path):
    with pytest.raises(ValueError, match="line 1"):
        SensorTrace.loads("{not json}\n")
    with pytest.raises(ValueError):
        SensorTrace.loads('{"t": 0.0, "kind": "meta"}\n')


def test_unknown_kinds_ignored():
    text = '{"t":0.0,"kind":"imu","gyro":[0,0,0],"accel":[0,0,-9.81]}\n{"t":0.0,"kind":"baro","p":1013}\n' \
           '{"t":0.05,"kind":"imu","gyro":[0,0,0],"accel":[0,0,-9.81]}\n'
    tr = SensorTrace.loads(text)
    assert len(tr.imu) == 2


def test_truth_header_checked(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        GroundTruth.load_csv(p)
