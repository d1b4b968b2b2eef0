"""Inference-time rearrangement: query a source mixture with a reference's track functions.

Piano cover generation, orchestration and re-instrumentation differ only in
which source and reference (database) are supplied.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .features import aux_features_batch, mixture_function, track_function
from .networks import QandA
from .score import N_PITCH, N_STEP, Segment, TrackRoll, condense_mixture

DB_VERSION = 1


class EmptyDatabaseError(ValueError):
    pass


class MissingMelodyError(ValueError):
    pass


class ReferenceLengthError(ValueError):
    pass


@dataclass(frozen=True)
class RearrangeOptions:
    preserve_melody: bool = False
    sample_melody_posterior: bool = False
    alpha: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


# --- reference database ------------------------------------------------------

class ReferenceDB:
    """Segments with cached mixture and per-track functions."""

    def __init__(self, segments: Sequence[Segment]):
        self.segments = list(segments)
        mix = [mixture_function(s) for s in self.segments]
        self.mix_pitch = np.stack([f.pitch_fn for f in mix]) if mix else np.zeros((0, N_PITCH))
        self.mix_time = np.stack([f.time_fn for f in mix]) if mix else np.zeros((0, N_STEP))
        self.track_functions = [[track_function(t) for t in s.tracks] for s in self.segments]

    def __len__(self):
        return len(self.segments)

    def mixture_vectors(self) -> np.ndarray:
        return np.concatenate([self.mix_pitch, self.mix_time], axis=1)

    def pieces(self) -> dict[str, list[int]]:
        """Entry indices per source piece, ordered by window index."""
        out: dict[str, list[int]] = {}
        for i, s in enumerate(self.segments):
            out.setdefault(s.source_id, []).append(i)
        return {k: sorted(v, key=lambda i: self.segments[i].index) for k, v in out.items()}

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries, grids = [], {}
        track_pitch, track_time = [], []
        for i, s in enumerate(self.segments):
            entries.append(
                {
                    "index": i,
                    "source": s.source_id,
                    "window": s.index,
                    "tempo": s.tempo,
                    "tracks": [{"instrument": t.instrument, "role": t.role, "name": t.name} for t in s.tracks],
                }
            )
            grids[f"seg{i:06d}"] = np.stack([t.grid for t in s.tracks]).astype(np.int8)
            track_pitch += [f.pitch_fn for f in self.track_functions[i]]
            track_time += [f.time_fn for f in self.track_functions[i]]
        np.savez_compressed(directory / "segments.npz", **grids)
        np.savez_compressed(
            directory / "features.npz",
            mix_pitch=self.mix_pitch,
            mix_time=self.mix_time,
            track_pitch=np.array(track_pitch).reshape(-1, N_PITCH),
            track_time=np.array(track_time).reshape(-1, N_STEP),
        )
        path = directory / "refdb.json"
        path.write_text(json.dumps({"version": DB_VERSION, "entries": entries}, indent=1))
        return path

    @classmethod
    def load(cls, directory, verify: bool = True) -> "ReferenceDB":
        directory = Path(directory)
        meta = json.loads((directory / "refdb.json").read_text())
        if meta.get("version") != DB_VERSION:
            raise ValueError(f"unsupported reference database version {meta.get('version')}")
        segments = []
        with np.load(directory / "segments.npz") as grids:
            for e in meta["entries"]:
                g = grids[f"seg{e['index']:06d}"]
                tracks = tuple(TrackRoll(g[k], t["instrument"], t["role"], t["name"]) for k, t in enumerate(e["tracks"]))
                segments.append(Segment(tracks, source_id=e["source"], index=e["window"], tempo=e["tempo"]))
        db = cls(segments)
        if verify:
            with np.load(directory / "features.npz") as feats:
                if not (np.allclose(feats["mix_pitch"], db.mix_pitch) and np.allclose(feats["mix_time"], db.mix_time)):
                    raise ValueError("cached reference features are stale")
        return db


def _unit_rows(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.divide(v, norm, out=np.zeros_like(v, dtype=np.float64), where=norm > 0)


def similarity_scores(source: Segment, db: ReferenceDB) -> np.ndarray:
    """Cosine similarity of the source mixture function to every entry (0 for an empty source)."""
    f = mixture_function(source).vector()
    return _unit_rows(db.mixture_vectors()) @ _unit_rows(f[None])[0]


def search_reference(source: Segment, db: ReferenceDB, alpha: float = 0.2, rng: np.random.Generator | None = None) -> Segment:
    return db.segments[search_reference_index(source, db, alpha, rng)]


def search_reference_index(source: Segment, db: ReferenceDB, alpha: float = 0.2, rng: np.random.Generator | None = None) -> int:
    """argmax over entries of cos(f(y_mix), f(x_mix)) + alpha * eps_y; ties go to the lowest index."""
    if len(db) == 0:
        raise EmptyDatabaseError("reference database is empty")
    score = similarity_scores(source, db)
    if alpha > 0:
        rng = rng if rng is not None else np.random.default_rng()
        score = score + alpha * rng.standard_normal(len(db))
    return int(np.argmax(score))


def search_reference_piece(source: Sequence[Segment], db: ReferenceDB, alpha: float = 0.2, rng: np.random.Generator | None = None) -> list[Segment]:
    """Pick one contiguous reference run as long as the source.

    Candidates are all length-L windows of db pieces; each is scored by the
    mean aligned cosine similarity plus alpha times one normal draw.
    """
    if len(db) == 0:
        raise EmptyDatabaseError("reference database is empty")
    L = len(source)
    unit_db = _unit_rows(db.mixture_vectors())
    src = _unit_rows(np.stack([mixture_function(s).vector() for s in source]))
    candidates, scores = [], []
    for name in sorted(db.pieces()):
        idx = db.pieces()[name]
        for start in range(len(idx) - L + 1):
            run = idx[start:start + L]
            candidates.append(run)
            scores.append(float(np.mean(np.sum(unit_db[run] * src, axis=1))))
    if not candidates:
        raise ReferenceLengthError(f"no reference piece spans {L} segments")
    scores = np.array(scores)
    if alpha > 0:
        rng = rng if rng is not None else np.random.default_rng()
        scores = scores + alpha * rng.standard_normal(len(scores))
    return [db.segments[i] for i in candidates[int(np.argmax(scores))]]


# --- style transfer ------------------------------------------------------------

@dataclass
class PipelineTrace:
    z_mix: torch.Tensor
    z_function: torch.Tensor
    z_track: torch.Tensor


def _query_latents(model: QandA, tracks) -> torch.Tensor:
    q_p, q_t = model.encode_tracks(tracks)
    return torch.cat([q_p.mean, q_t.mean], -1)


def _decode(model: QandA, z_track: torch.Tensor) -> np.ndarray:
    return model.decode_track(z_track).grids()


def rearrange(source: Segment, reference: Segment, model: QandA, opts: RearrangeOptions = RearrangeOptions(), trace: list | None = None) -> Segment:
    """Rearrange `source` under the reference's track system (one output track per reference track)."""
    for inst in reference.instruments:
        model.vocab.index(inst)
    model.eval()
    with torch.no_grad():
        z_mix = model.encode_mixture([condense_mixture(source)]).mean[0]
        z_f = _query_latents(model, reference.tracks)
        z_tr = model.separate(z_mix, z_f, reference.instruments).mean
        grids = _decode(model, z_tr)
    if trace is not None:
        trace.append(PipelineTrace(z_mix, z_f, z_tr))
    tracks = tuple(
        TrackRoll(g, t.instrument, t.role, t.name) for g, t in zip(grids, reference.tracks)
    )
    return Segment(tracks, source.meter, source.resolution, source.source_id, source.index, source.tempo)


def melodic_instrument(reference: Segment, vocab) -> str:
    """Instrument of the reference track with the highest mean pitch centre over its onsets."""
    best, best_height = None, -1.0
    for t in reference.tracks:
        feats = aux_features_batch(t.grid[None])[0]
        on = feats[:, 2] > 0
        if on.any():
            height = float(feats[on, 0].mean())
            if height > best_height:
                best, best_height = t.instrument, height
    return best if best is not None else vocab.melody_fallback


def orchestrate(
    source: Segment,
    reference: Segment,
    model: QandA,
    opts: RearrangeOptions = RearrangeOptions(preserve_melody=True),
    generator: torch.Generator | None = None,
    trace: list | None = None,
) -> Segment:
    """Rearrange with the source melody's function appended as an extra query (M + 1 output tracks)."""
    if not opts.preserve_melody:
        return rearrange(source, reference, model, opts, trace)
    melody = source.track_with_role("melody")
    if melody is None:
        raise MissingMelodyError("preserve_melody needs a melody-tagged source track")
    mel_inst = melodic_instrument(reference, model.vocab)
    instruments = reference.instruments + [mel_inst]
    for inst in instruments:
        model.vocab.index(inst)
    if generator is None:
        generator = torch.Generator().manual_seed(opts.seed)
    model.eval()
    with torch.no_grad():
        z_mix = model.encode_mixture([condense_mixture(source)]).mean[0]
        z_f = _query_latents(model, list(reference.tracks) + [melody])
        q = model.separate(z_mix, z_f, instruments)
        z_tr = q.mean.clone()
        if opts.sample_melody_posterior:
            z_tr[-1] = q[-1].sample(generator)
        grids = _decode(model, z_tr)
    if trace is not None:
        trace.append(PipelineTrace(z_mix, z_f, z_tr))
    tracks = [TrackRoll(g, t.instrument, t.role, t.name) for g, t in zip(grids[:-1], reference.tracks)]
    tracks.append(TrackRoll(grids[-1], mel_inst, "melody", "melody"))
    return Segment(tuple(tracks), source.meter, source.resolution, source.source_id, source.index, source.tempo)


def rearrange_long(
    source: Sequence[Segment],
    model: QandA,
    opts: RearrangeOptions = RearrangeOptions(),
    reference: Sequence[Segment] | None = None,
    db: ReferenceDB | None = None,
) -> list[Segment]:
    """Rearrange every 2-bar window independently against a time-aligned reference run."""
    if (reference is None) == (db is None):
        raise ValueError("give exactly one of a fixed reference or a reference database")
    source = list(source)
    if not source:
        return []
    rng = np.random.default_rng(opts.seed)
    if db is not None:
        reference = search_reference_piece(source, db, opts.alpha, rng)
    elif len(reference) < len(source):
        raise ReferenceLengthError(f"reference has {len(reference)} segments, source has {len(source)}")
    gen = torch.Generator().manual_seed(opts.seed)
    out = []
    for src, ref in zip(source, reference):
        if opts.preserve_melody:
            out.append(orchestrate(src, ref, model, opts, generator=gen))
        else:
            out.append(rearrange(src, ref, model, opts))
    return out


def note_f1(predicted: Segment, target: Segment) -> float:
    """Micro F1 over (track, pitch, onset) between aligned tracks."""
    tp = n_pred = n_true = 0
    for a, b in zip(predicted.tracks, target.tracks):
        pa, pb = a.grid > 0, b.grid > 0
        tp += int(np.sum(pa & pb))
        n_pred += int(pa.sum())
        n_true += int(pb.sum())
    if n_pred + n_true == 0:
        return 1.0
    return 2 * tp / (n_pred + n_true)
