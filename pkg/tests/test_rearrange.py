import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import random_segment
from trackquery.features import mixture_function
from trackquery.networks import ModelConfig, QandA
from trackquery.rearrange import (
    EmptyDatabaseError,
    MissingMelodyError,
    RearrangeOptions,
    ReferenceDB,
    ReferenceLengthError,
    melodic_instrument,
    note_f1,
    orchestrate,
    rearrange,
    rearrange_long,
    search_reference,
    search_reference_index,
    search_reference_piece,
    similarity_scores,
)
from trackquery.score import Segment, TrackRoll, notes_to_grid
from trackquery.synthetic import piano_corpus, pop_corpus


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return QandA(ModelConfig.tiny()).eval()


@pytest.fixture(scope="module")
def db():
    return ReferenceDB(pop_corpus(24, seed=4))


class TestSearch:
    def test_self_is_found_without_noise(self, db):
        for i, seg in enumerate(db.segments):
            j = search_reference_index(seg, db, alpha=0.0)
            assert mixture_function(db.segments[j]).vector() @ mixture_function(seg).vector() > 0
            assert similarity_scores(seg, db)[j] == pytest.approx(1.0)
            if not any(np.array_equal(mixture_function(s).vector(), mixture_function(seg).vector()) for s in db.segments[:i]):
                assert j == i

    def test_returns_segment(self, db):
        assert search_reference(db.segments[3], db, 0.0) is db.segments[3]

    def test_empty_db(self, rng):
        with pytest.raises(EmptyDatabaseError):
            search_reference(random_segment(rng), ReferenceDB([]))
        with pytest.raises(EmptyDatabaseError):
            search_reference_piece([random_segment(rng)], ReferenceDB([]))

    def test_large_alpha_is_uniform(self, db):
        rng = np.random.default_rng(0)
        n = 4800
        picks = [search_reference_index(db.segments[0], db, alpha=1e6, rng=rng) for _ in range(n)]
        counts = np.bincount(picks, minlength=len(db))
        assert stats.chisquare(counts).pvalue > 0.05

    def test_seeded_noise_is_reproducible(self, db):
        a = [search_reference_index(db.segments[1], db, 0.5, np.random.default_rng(9)) for _ in range(3)]
        assert len(set(a)) == 1

    def test_empty_source_scores_zero(self, db):
        empty = Segment((TrackRoll(notes_to_grid([]), "Acoustic Piano"),))
        np.testing.assert_array_equal(similarity_scores(empty, db), 0.0)

    @settings(max_examples=20, deadline=None)
    @given(st.floats(0.0, 5.0), st.integers(0, 2**31 - 1))
    def test_index_in_range(self, alpha, seed):
        db = ReferenceDB(pop_corpus(6, seed=1))
        i = search_reference_index(db.segments[0], db, alpha, np.random.default_rng(seed))
        assert 0 <= i < len(db)


class TestPieceSearch:
    def test_self_run(self, db):
        piece = db.pieces()[sorted(db.pieces())[1]]
        src = [db.segments[i] for i in piece[:2]]
        got = search_reference_piece(src, db, alpha=0.0)
        assert [s.source_id for s in got] == [src[0].source_id] * 2
        assert [s.index for s in got] == [s.index for s in src]

    def test_too_long(self, db):
        longest = max(len(v) for v in db.pieces().values())
        with pytest.raises(ReferenceLengthError):
            search_reference_piece(db.segments[: longest + 1], db, 0.0)


class TestDatabaseFile:
    def test_round_trip(self, db, tmp_path):
        db.save(tmp_path)
        back = ReferenceDB.load(tmp_path)
        assert len(back) == len(db)
        for a, b in zip(db.segments, back.segments):
            assert a.instruments == b.instruments and a.source_id == b.source_id and a.index == b.index
            for ta, tb in zip(a.tracks, b.tracks):
                np.testing.assert_array_equal(ta.grid, tb.grid)
        np.testing.assert_array_equal(back.mixture_vectors(), db.mixture_vectors())

    def test_bad_version(self, db, tmp_path):
        db.save(tmp_path)
        p = tmp_path / "refdb.json"
        p.write_text(p.read_text().replace('"version": 1', '"version": 99'))
        with pytest.raises(ValueError):
            ReferenceDB.load(tmp_path)


class TestRearrange:
    def test_one_track_per_reference_track(self, model, rng):
        src, ref = random_segment(rng, 2), random_segment(rng, 5)
        out = rearrange(src, ref, model)
        assert out.n_tracks == 5 and out.instruments == ref.instruments
        for t in out.tracks:
            assert t.grid.shape == (128, 32) and t.grid.min() >= 0

    def test_deterministic(self, model, rng):
        src, ref = random_segment(rng, 2), random_segment(rng, 3)
        a, b = rearrange(src, ref, model), rearrange(src, ref, model)
        for x, y in zip(a.tracks, b.tracks):
            np.testing.assert_array_equal(x.grid, y.grid)

    def test_trace_shapes(self, model, rng):
        trace = []
        rearrange(random_segment(rng, 2), random_segment(rng, 3), model, trace=trace)
        assert trace[0].z_function.shape == (3, 2 * model.cfg.fn_dim)
        assert trace[0].z_track.shape == (3, model.cfg.z_dim)


class TestOrchestrate:
    def test_adds_melody_track(self, model):
        src = pop_corpus(1, seed=2)[0]
        ref = piano_corpus(1, seed=2)[0]
        out = orchestrate(src, ref, model)
        assert out.n_tracks == ref.n_tracks + 1
        assert out.tracks[-1].role == "melody"
        assert out.tracks[-1].instrument == melodic_instrument(ref, model.vocab)

    def test_missing_melody(self, model, rng):
        src = random_segment(rng, 2)
        assert src.track_with_role("melody") is None
        with pytest.raises(MissingMelodyError):
            orchestrate(src, random_segment(rng, 2), model)

    def test_sampled_melody_is_seeded(self, model):
        src, ref = pop_corpus(1, seed=5)[0], pop_corpus(2, seed=6)[1]
        opts = RearrangeOptions(preserve_melody=True, sample_melody_posterior=True, seed=3)
        a, b = orchestrate(src, ref, model, opts), orchestrate(src, ref, model, opts)
        np.testing.assert_array_equal(a.tracks[-1].grid, b.tracks[-1].grid)

    def test_melodic_instrument_picks_highest(self):
        low = TrackRoll(notes_to_grid([(40, 0, 4)]), "Acoustic Bass")
        high = TrackRoll(notes_to_grid([(80, 0, 4)]), "Violin")
        assert melodic_instrument(Segment((low, high)), None) == "Violin"


class TestLong:
    def test_fixed_reference_too_short(self, model):
        segs = pop_corpus(3, seed=0)
        with pytest.raises(ReferenceLengthError):
            rearrange_long(segs, model, reference=segs[:1])

    def test_exactly_one_reference_source(self, model, db):
        with pytest.raises(ValueError):
            rearrange_long(db.segments[:1], model)
        with pytest.raises(ValueError):
            rearrange_long(db.segments[:1], model, reference=db.segments[:1], db=db)

    def test_db_driven_length(self, model, db):
        src = db.segments[:2]
        out = rearrange_long(src, model, RearrangeOptions(alpha=0.0), db=db)
        assert len(out) == 2


class TestNoteF1:
    def test_identity(self, rng):
        s = random_segment(rng, 3)
        assert note_f1(s, s) == 1.0

    def test_hand_computed(self):
        a = Segment((TrackRoll(notes_to_grid([(60, 0, 4), (62, 4, 4)]), "Violin"),))
        b = Segment((TrackRoll(notes_to_grid([(60, 0, 2), (64, 8, 4), (65, 9, 1)]), "Violin"),))
        # onset match ignores duration: tp=1, pred=2, true=3
        assert note_f1(a, b) == pytest.approx(2 / 5)

    def test_track_alignment_matters(self):
        g = notes_to_grid([(60, 0, 4)])
        e = notes_to_grid([])
        a = Segment((TrackRoll(g, "Violin"), TrackRoll(e, "Viola")))
        b = Segment((TrackRoll(e, "Violin"), TrackRoll(g, "Viola")))
        assert note_f1(a, b) == 0.0
