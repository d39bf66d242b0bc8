import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from vitalstream import wire
from vitalstream.events import Batch, Posture, PostureEvent, RriEvent


def _batch(n_rri=3, n_post=2):
    rri = tuple(RriEvent("w1", 1000 * (i + 1), 800.0 + i, i + 1) for i in range(n_rri))
    post = tuple(PostureEvent("w1", 1000 * i, Posture.UPRIGHT, 3.25, i + 1) for i in range(n_post))
    return Batch("w1", "d1", rri, post)


def test_record_sizes_fit_cost_budget():
    # <= 16 B per RRI event and <= 12 B per posture event
    assert wire.RRI_RECORD_BYTES == 12
    assert wire.POSTURE_RECORD_BYTES == 11
    b = _batch(4, 5)
    header = 1 + 1 + 2 + 1 + 2 + 2 + 2
    assert len(wire.encode_binary(b)) == header + 4 * 12 + 5 * 11


def test_binary_roundtrip():
    b = _batch()
    assert wire.decode_binary(wire.encode_binary(b)) == b


def test_json_schema_shape():
    d = json.loads(wire.encode_json(_batch(1, 1)))
    assert set(d) == {"worker_id", "device_id", "streams"}
    assert d["streams"]["rri"][0] == {"t_ms": 1000, "rri_ms": 800.0, "seq": 1}
    assert d["streams"]["posture"][0] == {"t_ms": 0, "label": "UPRIGHT", "tilt_deg": 3.25, "seq": 1}


def test_missing_worker_id_names_field():
    body = json.dumps({"streams": {"rri": []}}).encode()
    with pytest.raises(wire.WireError) as exc:
        wire.decode_json(body)
    assert ("worker_id", "missing or not a non-empty string") in exc.value.problems


@pytest.mark.parametrize(
    "item, field",
    [
        ({"t_ms": -1, "rri_ms": 800, "seq": 1}, "streams.rri[0].t_ms"),
        ({"t_ms": 1, "rri_ms": 0, "seq": 1}, "streams.rri[0].rri_ms"),
        ({"t_ms": 1, "rri_ms": 800, "seq": "x"}, "streams.rri[0].seq"),
        ({"t_ms": 1, "rri_ms": True, "seq": 1}, "streams.rri[0].rri_ms"),
    ],
)
def test_bad_rri_fields(item, field):
    body = json.dumps({"worker_id": "w", "streams": {"rri": [item]}})
    with pytest.raises(wire.WireError) as exc:
        wire.decode_json(body)
    assert field in [f for f, _ in exc.value.problems]


def test_bad_posture_label_and_tilt():
    body = json.dumps({"worker_id": "w", "streams": {"posture": [{"t_ms": 0, "label": "SITTING", "tilt_deg": 200, "seq": 1}]}})
    with pytest.raises(wire.WireError) as exc:
        wire.decode_json(body)
    fields = [f for f, _ in exc.value.problems]
    assert "streams.posture[0].label" in fields and "streams.posture[0].tilt_deg" in fields


def test_invalid_json_and_non_object():
    with pytest.raises(wire.WireError):
        wire.decode_json(b"{nope")
    with pytest.raises(wire.WireError):
        wire.decode_json(b"[1, 2]")


def test_binary_rejects_truncation_and_version():
    data = wire.encode_binary(_batch())
    with pytest.raises(wire.WireError):
        wire.decode_binary(data[:-1])
    with pytest.raises(wire.WireError):
        wire.decode_binary(data + b"\x00")
    with pytest.raises(wire.WireError):
        wire.decode_binary(b"\x09" + data[1:])
    with pytest.raises(wire.WireError):
        wire.decode_binary(b"")


def test_binary_rejects_out_of_range():
    b = Batch("w", "", (RriEvent("w", 2**32, 800.0, 1),))
    with pytest.raises(wire.WireError):
        wire.encode_binary(b)
    with pytest.raises(wire.WireError):
        wire.encode_binary(Batch("w" * 300))


def test_decode_dispatches_on_content_type():
    b = _batch()
    assert wire.decode(wire.encode_binary(b), "application/octet-stream") == b
    assert wire.decode(wire.encode_json(b), "application/json; charset=utf-8") == b


def test_quantizers():
    assert wire.quantize_rri(800.12345) == 800.123
    assert wire.quantize_tilt(70.00001) == 70.0


rri_events = st.builds(
    lambda t, r, s: (t, wire.quantize_rri(r), s),
    st.integers(0, 2**32 - 1),
    st.floats(0.5, 4000.0),
    st.integers(0, 2**32 - 1),
)
post_events = st.builds(
    lambda t, lab, tilt, s: (t, lab, wire.quantize_tilt(tilt), s),
    st.integers(0, 2**32 - 1),
    st.sampled_from(list(Posture)),
    st.floats(0.0, 180.0),
    st.integers(0, 2**32 - 1),
)


@given(
    st.text(min_size=1, max_size=20).filter(lambda s: len(s.encode()) <= 255),
    st.lists(rri_events, max_size=30),
    st.lists(post_events, max_size=30),
)
def test_json_binary_interconvert_losslessly(worker, rris, posts):
    b = Batch(
        worker,
        "dev",
        tuple(RriEvent(worker, t, r, s) for t, r, s in rris),
        tuple(PostureEvent(worker, t, lab, tilt, s) for t, lab, tilt, s in posts),
    )
    via_binary = wire.decode_binary(wire.encode_binary(b))
    via_json = wire.decode_json(wire.encode_json(b))
    assert via_binary == b == via_json
    assert wire.decode_binary(wire.encode_binary(via_json)) == b
    assert wire.encode_json(via_binary) == wire.encode_json(b)
