import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ascrl import ccproto
from ascrl.ccproto import (MAX_BATCH, BadLength, BatchTooLarge, ModelUpdateMsg, StateReport,
                           TruncatedMessage, batch_size_bytes, decode_batch, decode_model_update,
                           decode_model_updates, decode_state_report, encode_batch,
                           encode_model_update, encode_state_report, overhead_ratio)
from ascrl.featurize import SystemState

f32 = st.floats(width=32, allow_nan=False, allow_infinity=False)
states = st.lists(f32, min_size=12, max_size=12).map(SystemState.from_values)
app_ids = st.integers(0, 0xFFFF)


def state(i=0):
    return SystemState.from_values([float(i + k) for k in range(12)])


class TestSizes:
    def test_report_is_50_bytes(self):
        assert len(encode_state_report(state(), 7)) == 50

    def test_full_batch_fits_one_packet(self):
        data = encode_batch([(i, state(i)) for i in range(MAX_BATCH)])
        assert len(data) == 1452 == batch_size_bytes(29)
        assert len(data) <= ccproto.WIRE_PACKET
        assert MAX_BATCH > 25

    def test_overhead(self):
        assert overhead_ratio(10, 100) == 0.001
        assert overhead_ratio(25, 100) == pytest.approx(0.0004)
        assert overhead_ratio(30, 100) == pytest.approx(2 / 3000)

    def test_overhead_args(self):
        with pytest.raises(ValueError):
            overhead_ratio(0, 100)


class TestRoundTrip:
    @given(states, app_ids)
    def test_report(self, s, app):
        rep = decode_state_report(encode_state_report(s, app))
        assert rep == StateReport(app, s)

    @given(st.lists(st.tuples(app_ids, states), min_size=1, max_size=MAX_BATCH))
    def test_batch(self, items):
        data = encode_batch(items)
        assert len(data) == batch_size_bytes(len(items))
        assert decode_batch(data) == [StateReport(a, s) for a, s in items]
        assert encode_batch(decode_batch(data)) == data

    @given(st.lists(st.tuples(app_ids, st.binary(max_size=64)), max_size=5))
    def test_updates(self, items):
        data = b"".join(encode_model_update(ModelUpdateMsg(a, b)) for a, b in items)
        assert decode_model_updates(data) == [ModelUpdateMsg(a, b) for a, b in items]

    def test_frames(self):
        buf = io.BytesIO(ccproto.frame(1, b"abc") + ccproto.frame(2, b""))
        assert ccproto.read_frame(buf) == (1, b"abc")
        assert ccproto.read_frame(buf) == (2, b"")
        assert ccproto.read_frame(buf) is None


class TestErrors:
    def test_truncated_report(self):
        with pytest.raises(TruncatedMessage):
            decode_state_report(encode_state_report(state(), 1)[:-1])

    def test_long_report(self):
        with pytest.raises(BadLength):
            decode_state_report(encode_state_report(state(), 1) + b"\0")

    def test_app_id_range(self):
        with pytest.raises(ValueError):
            encode_state_report(state(), 70000)

    def test_batch_limits(self):
        with pytest.raises(BatchTooLarge):
            encode_batch([(i, state()) for i in range(30)])
        with pytest.raises(ValueError):
            encode_batch([])
        with pytest.raises(BatchTooLarge):
            decode_batch((30).to_bytes(2, "little") + bytes(1500))

    @given(st.integers(1, 5), st.data())
    def test_any_cut_is_truncated(self, n, data):
        raw = encode_batch([(i, state(i)) for i in range(n)])
        cut = data.draw(st.integers(0, len(raw) - 1))
        with pytest.raises(TruncatedMessage):
            decode_batch(raw[:cut])

    def test_batch_trailing(self):
        with pytest.raises(BadLength):
            decode_batch(encode_batch([(1, state())]) + b"\0")

    def test_update_truncated(self):
        data = encode_model_update(ModelUpdateMsg(3, b"x" * 10))
        with pytest.raises(TruncatedMessage):
            decode_model_update(data[:-1])
        with pytest.raises(TruncatedMessage):
            decode_model_update(data[:3])

    def test_frame_truncated(self):
        with pytest.raises(TruncatedMessage):
            ccproto.read_frame(io.BytesIO(ccproto.frame(1, b"abcd")[:-1]))
