"""Mask construction tests: chunk causality, windowing, audio alignment."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lpm.errors import ConfigError, MaskError
from lpm.maskgen import (
    AudioWindowSpec,
    audio_window_mask,
    chunk_causal_mask,
    windowed_context_mask,
)


class TestAudioWindowSpec:
    def test_defaults_and_ordering(self):
        spec = AudioWindowSpec()
        assert spec.listen_window > spec.speak_window >= 1

    def test_validation(self):
        with pytest.raises(ConfigError):
            AudioWindowSpec(speak_window=0)
        with pytest.raises(ConfigError):
            AudioWindowSpec(speak_window=5, listen_window=5)


class TestChunkCausalMask:
    def test_single_chunk_full_block(self):
        m = chunk_causal_mask(1, 3, 0).m
        assert m.shape == (3, 3) and m.all()

    def test_enumerated_example(self):
        # 3 chunks x 2 tokens + 1 ref; query token 2 sits in chunk 1
        m = chunk_causal_mask(3, 2, 1).m
        row = set(np.nonzero(m[2])[0])
        assert row == {0, 1, 2, 3, 6}

    def test_block_lower_triangular(self):
        tpc = 2
        m = chunk_causal_mask(4, tpc, 0).m
        for q in range(8):
            for k in range(8):
                assert m[q, k] == (k // tpc <= q // tpc)

    def test_refs_key_only_for_video(self):
        m = chunk_causal_mask(2, 2, 3).m
        video, refs = np.arange(4), np.arange(4, 7)
        assert m[np.ix_(video, refs)].all()  # video attends refs
        assert not m[np.ix_(refs, video)].any()  # refs blind to video
        assert m[np.ix_(refs, refs)].all()  # refs self-attend

    def test_zero_size_rejected(self):
        with pytest.raises(MaskError):
            chunk_causal_mask(0, 2, 0)

    def test_causality_exhaustive(self):
        # no (query chunk c, key chunk c' > c) pair is ever attendable
        for n_chunks in range(1, 7):
            for tpc in (1, 2, 3):
                for refs in (0, 2):
                    m = chunk_causal_mask(n_chunks, tpc, refs).m
                    for q in range(n_chunks * tpc):
                        for k in range(n_chunks * tpc):
                            if k // tpc > q // tpc:
                                assert not m[q, k]

    def test_every_row_nonempty(self):
        for n_chunks in (1, 3, 5):
            m = chunk_causal_mask(n_chunks, 2, 2).m
            assert m.any(axis=1).all()


class TestWindowedContextMask:
    def test_enumerated_example(self):
        m = windowed_context_mask((0, 1, 2, 8, 9), 2, 1).m
        assert m.shape == (11, 11)
        # queries of chunk 9 are local rows 8..9; keys cover all retained + ref
        assert m[8].all() and m[9].all()

    def test_degenerate_single_chunk(self):
        a = windowed_context_mask((0,), 3, 2).m
        b = chunk_causal_mask(1, 3, 2).m
        np.testing.assert_array_equal(a, b)

    def test_no_columns_for_evicted(self):
        m = windowed_context_mask((0, 4, 5), 2, 0).m
        assert m.shape == (6, 6)  # 3 retained chunks only; 1,2,3 have no columns

    def test_causality_on_original_ids(self):
        # chunk 4's queries must not see chunk 5's keys even though both retained
        m = windowed_context_mask((0, 4, 5), 2, 0).m
        q_c4, k_c5 = (2, 3), (4, 5)
        for q in q_c4:
            for k in k_c5:
                assert not m[q, k]
            assert m[q, 0] and m[q, 1]  # sees the sink chunk

    def test_empty_retained_rejected(self):
        with pytest.raises(MaskError):
            windowed_context_mask((), 2, 0)

    @settings(max_examples=60, deadline=None)
    @given(st.data())
    def test_monotone_in_retained_set(self, data):
        # enlarging the retained set never removes a true entry
        tpc = data.draw(st.integers(1, 3))
        refs = data.draw(st.integers(0, 2))
        base = sorted(data.draw(st.sets(st.integers(0, 9), min_size=1, max_size=4)))
        extra = sorted(data.draw(st.sets(st.integers(0, 9), min_size=0, max_size=3)) | set(base))
        small = windowed_context_mask(tuple(base), tpc, refs).m
        big = windowed_context_mask(tuple(extra), tpc, refs).m
        pos = {c: i for i, c in enumerate(extra)}
        for qi, qc in enumerate(base):
            for ki, kc in enumerate(base):
                sq = slice(qi * tpc, (qi + 1) * tpc)
                sk = slice(ki * tpc, (ki + 1) * tpc)
                bq = slice(pos[qc] * tpc, (pos[qc] + 1) * tpc)
                bk = slice(pos[kc] * tpc, (pos[kc] + 1) * tpc)
                assert (big[bq, bk] >= small[sq, sk]).all()
        assert big.any(axis=1).all()


class TestAudioWindowMask:
    def test_infinite_window_all_true(self):
        m = audio_window_mask(4, 4.0, 10, 16.0, float("inf")).m
        assert m.all()

    def test_arithmetic_example(self):
        # one token at tau=0, audio 16 fps, window 2 -> frames 0..2
        m = audio_window_mask(1, 1.0, 8, 16.0, 2).m
        assert set(np.nonzero(m[0])[0]) == {0, 1, 2}

    def test_listen_superset_of_speak(self):
        spec = AudioWindowSpec()
        speak = audio_window_mask(8, 8.0, 48, 16.0, spec.speak_window).m
        listen = audio_window_mask(8, 8.0, 48, 16.0, spec.listen_window).m
        assert (listen >= speak).all()

    def test_rows_never_empty(self):
        # tokens far beyond the audio still get their nearest frame
        m = audio_window_mask(30, 1.0, 3, 16.0, 1).m
        assert m.any(axis=1).all()

    def test_symmetric_window(self):
        m = audio_window_mask(3, 1.0, 64, 16.0, 4).m
        # token 1 sits at t=1s -> frame 16; window 4 frames each side
        assert set(np.nonzero(m[1])[0]) == set(range(12, 21))
