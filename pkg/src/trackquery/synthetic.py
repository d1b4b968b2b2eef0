"""Desk-scale synthetic corpora: pop-style multi-track pieces, POP909-style piano pieces, 4-voice chorales."""
from __future__ import annotations

import numpy as np

from .score import N_STEP, Segment, TrackRoll, notes_to_grid

MAJOR = (0, 2, 4, 5, 7, 9, 11)
# diatonic triads as scale-degree indices
DEGREES = {"I": 0, "ii": 1, "iii": 2, "IV": 3, "V": 4, "vi": 5}
PROGRESSIONS = (
    ("I", "V", "vi", "IV"),
    ("I", "vi", "IV", "V"),
    ("vi", "IV", "I", "V"),
    ("I", "IV", "V", "I"),
    ("ii", "V", "I", "vi"),
)

MELODY_INSTRUMENTS = ("Synth Lead", "Pipe", "Violin", "Soprano/Alto Sax", "Trumpet")
BASS_INSTRUMENTS = ("Electric Bass", "Acoustic Bass")
PAD_INSTRUMENTS = ("Synth Pad", "String Ensemble", "Organ")
COMP_INSTRUMENTS = ("Acoustic Piano", "Clean Electric Guitar", "Acoustic Guitar", "Electric Piano")
STAB_INSTRUMENTS = ("Distorted Electric Guitar", "Brass Section")

VOICE_NAMES = ("soprano", "alto", "tenor", "bass")
VOICE_RANGES = ((67, 81), (57, 72), (48, 64), (36, 55))


def chord_pcs(key: int, degree: str) -> list[int]:
    d = DEGREES[degree]
    return [(key + MAJOR[(d + k) % 7]) % 12 for k in (0, 2, 4)]


def pitches_in(pcs, lo, hi) -> list[int]:
    return [p for p in range(lo, hi + 1) if p % 12 in pcs]


def _melody(rng, key, chords, lo=67, hi=84):
    notes, t = [], 0
    patterns = ((4, 4, 4, 4), (2, 2, 4, 8), (4, 2, 2, 8), (6, 2, 4, 4), (8, 8), (2, 2, 2, 2, 4, 4))
    scale = [p for p in range(lo, hi + 1) if (p - key) % 12 in MAJOR]
    prev = rng.choice(pitches_in(chords[0], lo + 4, hi - 4))
    for bar, pcs in enumerate(chords):
        t = bar * 16
        for k, d in enumerate(patterns[rng.integers(len(patterns))]):
            if k == 0:
                cands = pitches_in(pcs, lo, hi)
            else:
                cands = scale
            cands = sorted(cands, key=lambda p: (abs(p - prev), p))[:4]
            p = int(cands[rng.integers(len(cands))])
            notes.append((p, t, d))
            prev, t = p, t + d
    return notes


def _bass(rng, chords):
    style = rng.integers(3)
    notes = []
    for bar, pcs in enumerate(chords):
        root = pitches_in(pcs[:1], 36, 47)[0]
        t0 = bar * 16
        if style == 0:
            notes.append((root, t0, 16))
        elif style == 1:
            notes += [(root, t0 + 8 * k, 8) for k in range(2)]
        else:
            fifth = pitches_in(pcs[2:], root, root + 12)[0]
            notes += [(root, t0, 4), (root, t0 + 4, 4), (fifth, t0 + 8, 4), (root, t0 + 12, 4)]
    return notes


def _pad(rng, chords):
    notes = []
    for bar, pcs in enumerate(chords):
        voicing = pitches_in(pcs, 55, 70)[:3]
        notes += [(p, bar * 16, 16) for p in voicing]
    return notes


def _comp(rng, chords):
    style = rng.integers(2)
    notes = []
    for bar, pcs in enumerate(chords):
        chord = pitches_in(pcs, 52, 67)[:4]
        t0 = bar * 16
        if style == 0:  # arpeggio in eighths
            seq = chord + chord[-2:0:-1]
            notes += [(seq[k % len(seq)], t0 + 2 * k, 2) for k in range(8)]
        else:  # block quarters
            for k in range(4):
                notes += [(p, t0 + 4 * k, 3) for p in chord[:3]]
    return notes


def _stabs(rng, chords):
    notes = []
    for bar, pcs in enumerate(chords):
        chord = pitches_in(pcs, 60, 76)[:3]
        for k in range(4):
            notes += [(p, bar * 16 + 4 * k + 2, 2) for p in chord]
    return notes


TRACK_MAKERS = {
    "melody": (_melody, MELODY_INSTRUMENTS, "melody"),
    "bass": (_bass, BASS_INSTRUMENTS, "accompaniment"),
    "pad": (_pad, PAD_INSTRUMENTS, "accompaniment"),
    "comp": (_comp, COMP_INSTRUMENTS, "accompaniment"),
    "stabs": (_stabs, STAB_INSTRUMENTS, "accompaniment"),
}


def pop_piece(rng: np.random.Generator, n_segments: int = 4, source_id: str = "pop", n_tracks: int | None = None) -> list[Segment]:
    """A multi-track piece whose track system stays fixed across its 2-bar windows."""
    key = int(rng.integers(12))
    prog = PROGRESSIONS[rng.integers(len(PROGRESSIONS))]
    roles = ["melody", "bass"]
    extra = ["pad", "comp", "stabs"]
    k = int(rng.integers(0, 3)) if n_tracks is None else n_tracks - 2
    roles += [extra[i] for i in sorted(rng.choice(len(extra), size=k, replace=False))]
    systems = []
    for r in roles:
        maker, instruments, role = TRACK_MAKERS[r]
        systems.append((r, maker, instruments[rng.integers(len(instruments))], role))
    segments = []
    for s in range(n_segments):
        chords = [chord_pcs(key, prog[(2 * s + b) % 4]) for b in range(2)]
        tracks = []
        for name, maker, instrument, role in systems:
            notes = maker(rng, key, chords) if name == "melody" else maker(rng, chords)
            tracks.append(TrackRoll(notes_to_grid(notes), instrument, role, name=name))
        segments.append(Segment(tuple(tracks), source_id=source_id, index=s))
    return segments


def piano_piece(rng: np.random.Generator, n_segments: int = 4, source_id: str = "piano") -> list[Segment]:
    """POP909-style: piano-melody plus piano-accompaniment (arpeggio over bass)."""
    key = int(rng.integers(12))
    prog = PROGRESSIONS[rng.integers(len(PROGRESSIONS))]
    segments = []
    for s in range(n_segments):
        chords = [chord_pcs(key, prog[(2 * s + b) % 4]) for b in range(2)]
        mel = _melody(rng, key, chords)
        acc = _comp(rng, chords) + [(p, t, d) for p, t, d in _bass(rng, chords)]
        tracks = (
            TrackRoll(notes_to_grid(mel), "piano-melody", "melody", name="MELODY"),
            TrackRoll(notes_to_grid(acc), "piano-accompaniment", "accompaniment", name="PIANO"),
        )
        segments.append(Segment(tracks, source_id=source_id, index=s))
    return segments


def pop_corpus(n_segments: int, seed: int = 0, piece_len: int = 4, prefix: str = "pop") -> list[Segment]:
    rng = np.random.default_rng(seed)
    out = []
    i = 0
    while len(out) < n_segments:
        out += pop_piece(rng, min(piece_len, n_segments - len(out)), f"{prefix}{i:04d}")
        i += 1
    return out


def piano_corpus(n_segments: int, seed: int = 0, piece_len: int = 4) -> list[Segment]:
    rng = np.random.default_rng(seed)
    out = []
    i = 0
    while len(out) < n_segments:
        out += piano_piece(rng, min(piece_len, n_segments - len(out)), f"piano{i:04d}")
        i += 1
    return out


def _sounding(notes, time):
    for p, t, d in notes:
        if t <= time < t + d:
            return p
    raise ValueError(f"no note sounding at {time}")


def chorale_segment(rng: np.random.Generator, source_id: str = "chorale", index: int = 0, instrument: str = "Choir and Voice") -> Segment:
    """Four non-crossing voices, soprano first; chords change every quarter note with occasional passing eighths."""
    key = int(rng.integers(12))
    degrees = list(DEGREES)
    voices: list[list[tuple[int, int, int]]] = [[] for _ in range(4)]
    prev = None
    for beat in range(8):
        pcs = chord_pcs(key, degrees[rng.integers(len(degrees))])
        chosen = []
        upper = 128
        for v, (lo, hi) in enumerate(VOICE_RANGES):
            cands = [p for p in range(lo, min(hi, upper - 1) + 1) if p % 12 in pcs or (v == 3 and p % 12 == pcs[0])]
            if v == 3:
                cands = [p for p in cands if p % 12 == pcs[0]] or cands
            if prev is not None:
                cands = sorted(cands, key=lambda p: (abs(p - prev[v]), p))[:3]
            p = int(cands[rng.integers(len(cands))])
            chosen.append(p)
            upper = p
        for v, p in enumerate(chosen):
            voices[v].append((p, beat * 4, 4))
        prev = chosen
    # passing eighths: split a quarter into two eighths, second pitch stays inside its neighbours
    for v in range(4):
        for beat in range(7):
            if rng.random() < 0.2:
                p, t, _ = voices[v][beat]
                nxt = voices[v][beat + 1][0]
                step = int(np.sign(nxt - p)) * 2 or 1
                q = p + step
                above = _sounding(voices[v - 1], t + 2) if v > 0 else 128
                below = _sounding(voices[v + 1], t + 2) if v < 3 else -1
                if below < q < above:
                    voices[v][beat] = (p, t, 2)
                    voices[v].append((q, t + 2, 2))
    tracks = tuple(
        TrackRoll(notes_to_grid(notes), instrument, None, name=VOICE_NAMES[v]) for v, notes in enumerate(voices)
    )
    return Segment(tracks, source_id=source_id, index=index)


def chorale_corpus(n_segments: int, seed: int = 0, per_piece: int = 4) -> list[Segment]:
    rng = np.random.default_rng(seed)
    return [chorale_segment(rng, f"chorale{i // per_piece:04d}", i % per_piece) for i in range(n_segments)]
