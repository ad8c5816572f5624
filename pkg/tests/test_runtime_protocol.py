"""Wire message validation, script parsing, and NDJSON round trips."""
from __future__ import annotations

import math

import numpy as np
import pytest

from lpm.errors import ProtocolError
from lpm.runtime.protocol import (
    CLIENT_TYPES,
    _synth_samples,
    client_message_to_event,
    dump_message,
    read_ndjson,
    script_row_to_event,
    validate_client_message,
    write_ndjson,
)

SR = 1000


class TestValidateClientMessage:
    def test_accepts_each_type(self):
        rows = [
            {"type": "start", "config": {}},
            {"type": "audio", "stream": "user", "silence_ms": 10},
            {"type": "text", "text": "hi"},
            {"type": "event", "name": "interrupt"},
            {"type": "play_ack", "index": 0},
            {"type": "end"},
        ]
        for row in rows:
            assert validate_client_message(row) is row

    @pytest.mark.parametrize(
        "raw,msg",
        [
            ("not a dict", "JSON object"),
            ({"type": "chunk"}, "unknown client message type"),
            ({"type": "audio", "stream": "narrator", "silence_ms": 1}, "stream"),
            ({"type": "audio", "stream": "user"}, "needs samples"),
            ({"type": "text"}, "needs a string"),
            ({"type": "event", "name": "dance"}, "unknown event name"),
            ({"type": "event", "name": "warmup_complete"}, "engine-internal"),
            ({"type": "play_ack", "index": -1}, "index >= 0"),
            ({"type": "play_ack"}, "index >= 0"),
            ({"type": "start", "config": 7}, "must be an object"),
        ],
    )
    def test_rejections(self, raw, msg):
        with pytest.raises(ProtocolError, match=msg):
            validate_client_message(raw)

    def test_client_types_cover_wire(self):
        assert set(CLIENT_TYPES) == {
            "start",
            "audio",
            "text",
            "event",
            "play_ack",
            "end",
        }


class TestSynthSamples:
    def test_explicit_samples(self):
        out = _synth_samples({"samples": [0.5, -0.5]}, SR)
        np.testing.assert_array_equal(out, np.asarray([0.5, -0.5], np.float32))

    def test_non_finite_samples_rejected(self):
        with pytest.raises(ProtocolError, match="finite"):
            _synth_samples({"samples": [float("nan")]}, SR)

    def test_silence(self):
        out = _synth_samples({"silence_ms": 250}, SR)
        assert out.shape == (250,)
        np.testing.assert_array_equal(out, 0.0)

    def test_tone(self):
        out = _synth_samples({"tone_ms": 1000, "freq": 1.0, "amp": 0.2}, SR)
        assert out.shape == (SR,)
        want = 0.2 * np.sin(2 * math.pi * np.arange(SR) / SR)
        np.testing.assert_allclose(out, want.astype(np.float32), atol=1e-6)

    def test_missing_form(self):
        with pytest.raises(ProtocolError, match="samples, silence_ms, or tone_ms"):
            _synth_samples({}, SR)

    def test_negative_durations(self):
        with pytest.raises(ProtocolError):
            _synth_samples({"silence_ms": -1}, SR)
        with pytest.raises(ProtocolError):
            _synth_samples({"tone_ms": -1}, SR)


class TestScriptRows:
    def test_audio_row(self):
        ev = script_row_to_event(
            {"type": "audio", "stream": "user", "silence_ms": 100, "at": 50}, SR
        )
        assert ev.at == 50.0 and ev.kind == "audio"
        assert ev.data["stream"] == "user"
        assert ev.data["samples"].shape == (100,)

    def test_at_required(self):
        with pytest.raises(ProtocolError, match="'at'"):
            script_row_to_event({"type": "text", "text": "hi"}, SR)

    def test_event_and_ack_rows(self):
        ev = script_row_to_event({"type": "event", "name": "end", "at": 0}, SR)
        assert ev.kind == "event" and ev.data == {"name": "end"}
        ack = script_row_to_event({"type": "play_ack", "index": 3, "at": 9}, SR)
        assert ack.kind == "play_ack" and ack.data == {"index": 3}

    def test_start_is_not_an_event(self):
        with pytest.raises(ProtocolError, match="handshake"):
            client_message_to_event({"type": "start", "config": {}}, 0.0, SR)


class TestNdjson:
    def test_round_trip(self, tmp_path):
        path = str(tmp_path / "trace.ndjson")
        msgs = [{"type": "state", "state": "idle"}, {"type": "end"}]
        write_ndjson(path, msgs)
        assert read_ndjson(path) == msgs

    def test_dump_is_canonical(self):
        line = dump_message({"b": 1, "a": [2, 3]})
        assert line == '{"a":[2,3],"b":1}'

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "gap.ndjson"
        path.write_text('{"a":1}\n\n{"b":2}\n')
        assert read_ndjson(str(path)) == [{"a": 1}, {"b": 2}]

    def test_bad_line_reports_number(self, tmp_path):
        path = tmp_path / "bad.ndjson"
        path.write_text('{"a":1}\nnot json\n')
        with pytest.raises(ProtocolError, match="line 2"):
            read_ndjson(str(path))
