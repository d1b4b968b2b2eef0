import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import grids, random_grid
from trackquery.features import (
    UndefinedSimilarityError,
    aux_features,
    aux_features_batch,
    mixture_function,
    mixture_similarity,
    track_function,
    track_function_batch,
)
from trackquery.score import N_PITCH, N_STEP, Mixture, Segment, TrackRoll, transpose_grid


def counting_oracle(grid):
    """Per-entry loop over the grid, independent of the vectorised code."""
    pf = np.zeros(N_PITCH)
    tf = np.zeros(N_STEP)
    for p in range(N_PITCH):
        for t in range(N_STEP):
            if grid[p, t] != 0:
                pf[p] += 1.0 / N_STEP
                tf[t] += 1.0 / N_PITCH
    return pf, tf


class TestTrackFunction:
    def test_full_row(self):
        g = np.zeros((N_PITCH, N_STEP), dtype=np.int16)
        g[60, :] = 1
        f = track_function(g)
        expected = np.zeros(N_PITCH)
        expected[60] = 1.0
        np.testing.assert_array_equal(f.pitch_fn, expected)
        np.testing.assert_allclose(f.time_fn, np.full(N_STEP, 1 / 128))

    def test_empty(self):
        f = track_function(np.zeros((N_PITCH, N_STEP)))
        assert not f.pitch_fn.any() and not f.time_fn.any()

    def test_matches_counting_oracle_on_100_tracks(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            g = random_grid(rng, int(rng.integers(0, 60)))
            f = track_function(TrackRoll(g, "Violin"))
            pf, tf = counting_oracle(g)
            np.testing.assert_allclose(f.pitch_fn, pf, rtol=0, atol=1e-12)
            np.testing.assert_allclose(f.time_fn, tf, rtol=0, atol=1e-12)

    def test_batch_agrees(self, rng):
        gs = np.stack([random_grid(rng, 20) for _ in range(5)])
        pf, tf = track_function_batch(gs)
        for g, p, t in zip(gs, pf, tf):
            f = track_function(g)
            np.testing.assert_allclose(p, f.pitch_fn, atol=1e-6)
            np.testing.assert_allclose(t, f.time_fn, atol=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(grids(max_notes=60))
    def test_range(self, g):
        f = track_function(g)
        assert f.pitch_fn.min() >= 0 and f.pitch_fn.max() <= 1
        assert f.time_fn.min() >= 0 and f.time_fn.max() <= 1

    @settings(max_examples=50, deadline=None)
    @given(grids())
    def test_duration_invariance(self, g):
        other = np.where(g > 0, 1, 0)
        a, b = track_function(g), track_function(other)
        np.testing.assert_array_equal(a.pitch_fn, b.pitch_fn)
        np.testing.assert_array_equal(a.time_fn, b.time_fn)

    @settings(max_examples=50, deadline=None)
    @given(grids(), st.integers(-11, 11))
    def test_transposition_shifts_pitch_function(self, g, k):
        g = g.copy()
        g[:12] = 0
        g[-12:] = 0
        a, b = track_function(g), track_function(transpose_grid(g, k))
        np.testing.assert_array_equal(np.roll(a.pitch_fn, k), b.pitch_fn)
        np.testing.assert_array_equal(a.time_fn, b.time_fn)

    @settings(max_examples=30, deadline=None)
    @given(grids(), st.integers(1, 8))
    def test_time_shift_keeps_pitch_function(self, g, s):
        onsets = (g > 0).astype(np.int16)
        shifted = np.zeros_like(onsets)
        shifted[:, s:] = onsets[:, :-s]
        shifted[:, :s] = onsets[:, -s:]
        np.testing.assert_array_equal(track_function(onsets).pitch_fn, track_function(shifted).pitch_fn)

    def test_mixture_function_of_segment(self, rng):
        tracks = tuple(TrackRoll(random_grid(rng, 10), "Violin") for _ in range(3))
        mix = np.stack([t.grid for t in tracks]).max(axis=0)
        a = mixture_function(Segment(tracks))
        b = track_function(mix)
        np.testing.assert_array_equal(a.vector(), b.vector())
        np.testing.assert_array_equal(mixture_function(Mixture(mix)).vector(), b.vector())


class TestAuxFeatures:
    def test_hand_computed(self):
        g = np.zeros((N_PITCH, N_STEP), dtype=np.int16)
        g[60, 0] = g[64, 0] = 4
        a = aux_features(g)
        assert a.pitch_centre[0] == pytest.approx(62 / 127)
        assert a.voice_intensity[0] == pytest.approx(2 / 16)
        assert a.rhythm[0] == 1
        np.testing.assert_array_equal(a.stacked()[1:], 0)

    def test_cap(self):
        g = np.zeros((N_PITCH, N_STEP), dtype=np.int16)
        g[40:60, 5] = 1
        assert aux_features(g).voice_intensity[5] == 1.0
        g = np.zeros((N_PITCH, N_STEP), dtype=np.int16)
        g[40:56, 5] = 1
        assert aux_features(g).voice_intensity[5] == 1.0

    @settings(max_examples=100, deadline=None)
    @given(grids(max_notes=40))
    def test_invariants(self, g):
        a = aux_features_batch(g[None])[0]
        tf = track_function(g).time_fn
        np.testing.assert_array_equal(a[:, 2] == 1, tf > 0)
        assert set(np.unique(a[:, 2])) <= {0.0, 1.0}
        empty = a[:, 2] == 0
        assert not a[empty].any()
        assert a.min() >= 0 and a.max() <= 1


class TestMixtureSimilarity:
    def test_identical(self, rng):
        f = track_function(random_grid(rng, 10))
        assert mixture_similarity(f, f) == pytest.approx(1.0)

    def test_disjoint(self):
        a = np.zeros((N_PITCH, N_STEP), dtype=np.int16)
        b = np.zeros((N_PITCH, N_STEP), dtype=np.int16)
        a[60, 0] = 1
        b[70, 5] = 1
        assert mixture_similarity(track_function(a), track_function(b)) == 0.0

    def test_toy_pair_against_dot_product(self):
        a = np.zeros((N_PITCH, N_STEP), dtype=np.int16)
        b = np.zeros((N_PITCH, N_STEP), dtype=np.int16)
        a[60, 0] = a[64, 0] = a[67, 8] = 4
        b[60, 0] = b[62, 8] = 2
        va = np.zeros(160)
        vb = np.zeros(160)
        va[[60, 64, 67]] = 1 / 32
        va[128 + 0] = 2 / 128
        va[128 + 8] = 1 / 128
        vb[[60, 62]] = 1 / 32
        vb[128 + 0] = vb[128 + 8] = 1 / 128
        expected = va @ vb / np.sqrt((va @ va) * (vb @ vb))
        assert mixture_similarity(track_function(a), track_function(b)) == pytest.approx(expected, abs=1e-12)

    def test_zero_raises(self, rng):
        z = track_function(np.zeros((N_PITCH, N_STEP)))
        with pytest.raises(UndefinedSimilarityError):
            mixture_similarity(z, z)
        with pytest.raises(UndefinedSimilarityError):
            mixture_similarity(z, track_function(random_grid(rng, 3)))

    @settings(max_examples=50, deadline=None)
    @given(grids(max_notes=15).filter(lambda g: g.any()), grids(max_notes=15).filter(lambda g: g.any()), st.floats(0.1, 10))
    def test_symmetry_and_scaling(self, a, b, c):
        fa, fb = track_function(a), track_function(b)
        s = mixture_similarity(fa, fb)
        assert s == pytest.approx(mixture_similarity(fb, fa), abs=1e-12)
        assert 0 <= s <= 1 + 1e-12
        scaled = type(fa)(fa.pitch_fn * c, fa.time_fn * c)
        assert mixture_similarity(fa, scaled) == pytest.approx(1.0)
