import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from lapp.annotation import ReplayAnnotator, pair_hash
from lapp.persistence import (
    Checkpoint,
    CheckpointError,
    MetricsLogger,
    RunLock,
    RunLockError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    load_pairs,
    load_triples,
    read_jsonl,
    read_metrics,
    save_checkpoint,
    save_labels,
    save_pairs,
    save_triples,
)
from lapp.preference_model import PreferenceTriple, TrajectorySegment

finite = st.floats(allow_nan=False, allow_infinity=False)
array_dicts = st.dictionaries(
    st.text(min_size=1, max_size=12),
    arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4), elements=finite),
    max_size=5,
)


@settings(max_examples=100, deadline=None)
@given(array_dicts, st.dictionaries(st.text(max_size=5), st.integers() | st.text(max_size=5), max_size=4))
def test_checkpoint_round_trip_is_bit_exact(arrays_in, meta):
    back = decode_checkpoint(encode_checkpoint(Checkpoint(meta, arrays_in)))
    assert back.meta == meta and set(back.arrays) == set(arrays_in)
    for k, v in arrays_in.items():
        assert back.arrays[k].shape == v.shape
        assert back.arrays[k].tobytes() == v.astype("<f8").tobytes()


def test_checkpoint_preserves_special_values():
    arr = np.array([np.nan, np.inf, -np.inf, -0.0, 5e-324])
    back = decode_checkpoint(encode_checkpoint(Checkpoint({}, {"x": arr}))).arrays["x"]
    assert back.tobytes() == arr.tobytes()


def sample_bytes():
    return encode_checkpoint(Checkpoint({"epoch": 3}, {"w": np.arange(6.0).reshape(2, 3)}))


@pytest.mark.parametrize("cut", [1, 4, 10, 40])
def test_truncated_checkpoint_is_rejected(cut):
    with pytest.raises(CheckpointError):
        decode_checkpoint(sample_bytes()[:-cut])


def test_corruption_is_detected():
    data = bytearray(sample_bytes())
    data[len(data) // 2] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        decode_checkpoint(bytes(data))
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"NOTACKPT" + bytes(data[8:]))


def test_unsupported_version():
    data = encode_checkpoint(Checkpoint({}, {}, version=7))
    with pytest.raises(CheckpointError, match="version 7"):
        decode_checkpoint(data)


def test_atomic_save(tmp_path):
    path = tmp_path / "c.bin"
    save_checkpoint(Checkpoint({"a": 1}, {"x": np.ones(2)}), path)
    save_checkpoint(Checkpoint({"a": 2}, {"x": np.zeros(2)}), path)
    assert load_checkpoint(path).meta == {"a": 2}
    assert [p.name for p in tmp_path.iterdir()] == ["c.bin"]
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "missing.bin")


def test_metrics_logger_formats_and_order(tmp_path):
    log = MetricsLogger(tmp_path, "demo")
    log.log({"epoch": 0, "b": 1.5, "a": float("nan")})
    log.log({"epoch": 1, "b": 2.0})
    with pytest.raises(ValueError, match="does not follow"):
        log.log({"epoch": 1, "b": 0.0})
    with pytest.raises(ValueError, match="unexpected"):
        log.log({"epoch": 2, "zzz": 0.0})
    rows = read_metrics(tmp_path / "metrics_demo.jsonl")
    assert [r["epoch"] for r in rows] == [0, 1] and math.isnan(rows[0]["a"]) and math.isnan(rows[1]["a"])
    csv_lines = (tmp_path / "metrics_demo.csv").read_text().splitlines()
    assert csv_lines[0] == "epoch,a,b" and csv_lines[1] == "0,nan,1.5"


def test_metrics_logger_resume_drops_later_rows(tmp_path):
    log = MetricsLogger(tmp_path)
    for e in range(5):
        log.log({"epoch": e, "x": float(e)})
    resumed = MetricsLogger(tmp_path, resume_epoch=3)
    resumed.log({"epoch": 3, "x": 30.0})
    assert [r["x"] for r in read_metrics(tmp_path / "metrics_lapp.jsonl")] == [0.0, 1.0, 2.0, 30.0]


def seg(value, n=3):
    return TrajectorySegment(
        {"commands": np.full(n, value), "feet_contacts": np.ones((n, 4))}, np.full((n, 2), value), episode=1, start=2
    )


def test_triples_pairs_labels_round_trip(tmp_path):
    triples = [PreferenceTriple(seg(0.1), seg(0.2), 0.5), PreferenceTriple(seg(1 / 3), seg(2.0), 1.0)]
    save_triples(tmp_path / "t.jsonl", triples)
    back = load_triples(tmp_path / "t.jsonl")
    for a, b in zip(triples, back):
        assert a.segment_a == b.segment_a and a.segment_b == b.segment_b and a.label == b.label
    pairs = [(t.segment_a, t.segment_b) for t in triples]
    save_pairs(tmp_path / "p.jsonl", pairs)
    assert [r["pair_hash"] for r in read_jsonl(tmp_path / "p.jsonl")] == [pair_hash(a, b) for a, b in pairs]
    assert load_pairs(tmp_path / "p.jsonl") == pairs
    save_labels(tmp_path / "l.jsonl", pairs, [1, 3])
    assert ReplayAnnotator.from_file(tmp_path / "l.jsonl").label_pairs(load_pairs(tmp_path / "p.jsonl")) == [1, 3]


def test_read_jsonl_reports_bad_line(tmp_path):
    path = tmp_path / "x.jsonl"
    path.write_text(json.dumps({"a": 1}) + "\n{broken\n")
    with pytest.raises(ValueError, match=":2:"):
        read_jsonl(path)


def test_run_lock(tmp_path):
    with RunLock(tmp_path):
        with pytest.raises(RunLockError, match="in use"):
            with RunLock(tmp_path):
                pass
    assert not (tmp_path / ".lock").exists()
    with RunLock(tmp_path):
        pass
