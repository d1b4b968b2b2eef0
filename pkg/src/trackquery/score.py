"""Symbolic score model: 2-bar piano-roll segments, mixtures, MIDI I/O and corpus manifests.

A track is a 128 x 32 integer matrix. A nonzero entry at (p, t) is a note of
pitch p starting at step t whose value is its duration in steps (1/4 beat).
"""
from __future__ import annotations

import io
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import mido
import numpy as np

from .instruments import InstrumentVocab, default_vocab

N_PITCH = 128
N_STEP = 32
STEPS_PER_BEAT = 4
BEATS_PER_SEGMENT = 8
DRUM_CHANNEL = 9
ROLES = ("melody", "accompaniment", "other")

NoteEventSequence = list  # list of N_STEP lists of (pitch, duration) tuples


class MidiParseError(ValueError):
    """The input is not a readable standard MIDI file."""


class GridValidationError(ValueError):
    """A grid or event sequence violates the piano-roll invariants."""


def validate_grid(grid: np.ndarray) -> None:
    if grid.shape != (N_PITCH, N_STEP):
        raise GridValidationError(f"grid shape {grid.shape}, expected {(N_PITCH, N_STEP)}")
    if grid.min() < 0:
        raise GridValidationError("negative duration")
    limit = N_STEP - np.arange(N_STEP)
    if np.any(grid > limit[None, :]):
        raise GridValidationError("duration runs past the segment boundary")


def _frozen(grid) -> np.ndarray:
    arr = np.array(grid, dtype=np.int16, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class TrackRoll:
    grid: np.ndarray
    instrument: str
    role: str | None = None
    name: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "grid", _frozen(self.grid))
        validate_grid(self.grid)
        if self.role is not None and self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")

    @property
    def n_notes(self) -> int:
        return int(np.count_nonzero(self.grid))

    def notes(self) -> list[tuple[int, int, int]]:
        """(pitch, onset, duration) triples ordered by onset then pitch."""
        return grid_notes(self.grid)

    def __eq__(self, other):
        if not isinstance(other, TrackRoll):
            return NotImplemented
        return (
            self.instrument == other.instrument
            and self.role == other.role
            and self.name == other.name
            and np.array_equal(self.grid, other.grid)
        )

    __hash__ = None


@dataclass(frozen=True)
class Mixture:
    grid: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "grid", _frozen(self.grid))
        validate_grid(self.grid)

    def notes(self) -> list[tuple[int, int, int]]:
        return grid_notes(self.grid)

    def __eq__(self, other):
        if not isinstance(other, Mixture):
            return NotImplemented
        return np.array_equal(self.grid, other.grid)

    __hash__ = None


@dataclass(frozen=True)
class Segment:
    tracks: tuple[TrackRoll, ...]
    meter: tuple[int, int] = (4, 4)
    resolution: int = STEPS_PER_BEAT
    source_id: str = ""
    index: int = 0
    tempo: float = 120.0

    def __post_init__(self):
        object.__setattr__(self, "tracks", tuple(self.tracks))
        if len(self.tracks) < 1:
            raise ValueError("a segment needs at least one track")

    @property
    def n_tracks(self) -> int:
        return len(self.tracks)

    @property
    def instruments(self) -> list[str]:
        return [t.instrument for t in self.tracks]

    def track_with_role(self, role: str) -> TrackRoll | None:
        for t in self.tracks:
            if t.role == role:
                return t
        return None


def grid_notes(grid: np.ndarray) -> list[tuple[int, int, int]]:
    t_idx, p_idx = np.nonzero(np.asarray(grid).T)
    return [(int(p), int(t), int(grid[p, t])) for t, p in zip(t_idx, p_idx)]


def notes_to_grid(notes: Iterable[tuple[int, int, int]]) -> np.ndarray:
    grid = np.zeros((N_PITCH, N_STEP), dtype=np.int16)
    for p, t, d in notes:
        d = min(int(d), N_STEP - int(t))
        grid[p, t] = max(grid[p, t], d)
    return grid


def condense_mixture(seg: Segment) -> Mixture:
    stacked = np.stack([t.grid for t in seg.tracks])
    return Mixture(stacked.max(axis=0))


def _shift_grid(grid: np.ndarray, semitones: int) -> np.ndarray:
    out = np.zeros_like(grid)
    if semitones >= 0:
        out[semitones:] = grid[: N_PITCH - semitones]
    else:
        out[:semitones] = grid[-semitones:]
    return out


def transpose(seg: Segment, semitones: int) -> Segment:
    """Shift every note; notes leaving [0, 127] are dropped."""
    if abs(semitones) > 11:
        raise ValueError("transposition is limited to +/-11 semitones")
    if semitones == 0:
        return seg
    tracks = tuple(replace(t, grid=_shift_grid(t.grid, semitones)) for t in seg.tracks)
    return replace(seg, tracks=tracks)


def transpose_grid(grid: np.ndarray, semitones: int) -> np.ndarray:
    return _shift_grid(np.asarray(grid), semitones)


# --- note-event codec ------------------------------------------------------

def roll_to_events(grid: np.ndarray) -> NoteEventSequence:
    grid = np.asarray(grid)
    events = []
    for t in range(grid.shape[1]):
        pitches = np.nonzero(grid[:, t])[0]
        events.append([(int(p), int(grid[p, t])) for p in pitches])
    return events


def events_to_roll(seq: Sequence[Sequence[tuple[int, int]]]) -> np.ndarray:
    if len(seq) > N_STEP:
        raise GridValidationError(f"{len(seq)} steps, at most {N_STEP} allowed")
    grid = np.zeros((N_PITCH, N_STEP), dtype=np.int16)
    for t, step in enumerate(seq):
        seen = set()
        for pitch, dur in step:
            if not 0 <= pitch < N_PITCH:
                raise GridValidationError(f"pitch {pitch} out of range")
            if not 1 <= dur <= N_STEP:
                raise GridValidationError(f"duration {dur} out of range")
            if pitch in seen:
                raise GridValidationError(f"duplicate pitch {pitch} at step {t}")
            seen.add(pitch)
            grid[pitch, t] = dur
    return grid


# --- MIDI ingestion --------------------------------------------------------

@dataclass(frozen=True)
class QuantizeConfig:
    steps_per_beat: int = STEPS_PER_BEAT
    beats_per_segment: int = BEATS_PER_SEGMENT
    ignore_meter: bool = False  # voice-separation corpora: 8-beat windows regardless of meter
    keep_empty_tracks: bool = False
    keep_empty_segments: bool = False


@dataclass
class _RawTrack:
    name: str | None
    channel: int
    program: int
    notes: list = field(default_factory=list)  # (pitch, on_tick, off_tick)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _read_midi(data: bytes):
    try:
        return mido.MidiFile(file=io.BytesIO(data))
    except Exception as exc:  # mido raises a mix of OSError/EOFError/ValueError/KeyError
        raise MidiParseError(str(exc)) from exc


def _collect_tracks(mf) -> tuple[list[_RawTrack], list[tuple[int, int, int]], float]:
    raw: dict[tuple[int, int], _RawTrack] = {}
    order: list[tuple[int, int]] = []
    time_sigs = []
    tempo = None
    global_program = {}
    for ti, track in enumerate(mf.tracks):
        tick = 0
        name = None
        program = {}
        open_notes: dict[tuple[int, int], list[int]] = {}
        for msg in track:
            tick += msg.time
            if msg.type == "track_name":
                name = msg.name
            elif msg.type == "time_signature":
                time_sigs.append((tick, msg.numerator, msg.denominator))
            elif msg.type == "set_tempo" and tempo is None:
                tempo = mido.tempo2bpm(msg.tempo)
            elif msg.type == "program_change":
                program.setdefault(msg.channel, msg.program)
                global_program.setdefault(msg.channel, msg.program)
            elif msg.type in ("note_on", "note_off"):
                if msg.channel == DRUM_CHANNEL:
                    continue
                key = (ti, msg.channel)
                if key not in raw:
                    raw[key] = _RawTrack(name=name, channel=msg.channel, program=-1)
                    order.append(key)
                if msg.type == "note_on" and msg.velocity > 0:
                    open_notes.setdefault((msg.channel, msg.note), []).append(tick)
                else:
                    starts = open_notes.get((msg.channel, msg.note))
                    if starts:
                        raw[key].notes.append((msg.note, starts.pop(0), tick))
        for (ch, pitch), starts in open_notes.items():
            for on in starts:
                raw[(ti, ch)].notes.append((pitch, on, tick))
        for (tk, ch), rt in raw.items():
            if tk == ti:
                rt.name = rt.name if rt.name is not None else name
                if rt.program < 0 and ch in program:
                    rt.program = program[ch]
    tracks = []
    for key in order:
        rt = raw[key]
        if rt.program < 0:
            rt.program = global_program.get(rt.channel, 0)
        if rt.notes:
            tracks.append(rt)
    return tracks, sorted(time_sigs), tempo if tempo is not None else 120.0


def _regions(time_sigs, end_tick: int, ignore_meter: bool):
    """Yield (start_tick, end_tick, is_common_time, is_last)."""
    if ignore_meter:
        return [(0, end_tick, True, True)]
    sigs = [(0, 4, 4)] if not time_sigs or time_sigs[0][0] > 0 else []
    for tick, num, den in time_sigs:
        if sigs and sigs[-1][0] == tick:
            sigs[-1] = (tick, num, den)
        else:
            sigs.append((tick, num, den))
    out = []
    for i, (tick, num, den) in enumerate(sigs):
        stop = sigs[i + 1][0] if i + 1 < len(sigs) else end_tick
        if stop <= tick and i + 1 < len(sigs):
            continue
        out.append((tick, max(stop, tick), (num, den) == (4, 4), i + 1 == len(sigs)))
    return out


def ingest_midi(
    data: bytes,
    cfg: QuantizeConfig = QuantizeConfig(),
    source_id: str = "",
    vocab: InstrumentVocab | None = None,
) -> list[Segment]:
    """Quantize a standard MIDI file into 2-bar segments, one TrackRoll per MIDI track."""
    vocab = vocab or default_vocab()
    mf = _read_midi(data)
    tracks, time_sigs, tempo = _collect_tracks(mf)
    if not tracks:
        return []
    tpb = mf.ticks_per_beat
    spb = cfg.steps_per_beat
    win = cfg.beats_per_segment * spb

    def to_step(tick):
        return _round_half_up(tick / tpb * spb)

    quantized = []
    for rt in tracks:
        notes = []
        for pitch, on, off in rt.notes:
            s_on = to_step(on)
            notes.append((pitch, s_on, max(1, to_step(off) - s_on)))
        instrument, role = vocab.from_track(rt.name, rt.program)
        quantized.append((instrument, role, rt.name, notes))

    end_step = max(on + d for *_, notes in quantized for _, on, d in notes)
    end_tick = int(math.ceil(end_step * tpb / spb))
    windows = []
    for start_tick, stop_tick, common, last in _regions(time_sigs, end_tick, cfg.ignore_meter):
        start, stop = to_step(start_tick), to_step(stop_tick)
        if not common:
            warnings.warn(
                f"{source_id or 'midi'}: skipping non-4/4 section at step {start}", stacklevel=2
            )
            continue
        w = start
        while (w + win <= stop) or (last and w < stop):
            windows.append(w)
            w += win

    segments = []
    for wi, w in enumerate(windows):
        rolls = []
        for k, (instrument, role, name, notes) in enumerate(quantized):
            grid = np.zeros((N_PITCH, N_STEP), dtype=np.int16)
            for pitch, on, dur in notes:
                if w <= on < w + win:
                    t = on - w
                    d = min(dur, win - t)
                    grid[pitch, t] = max(grid[pitch, t], d)
            rolls.append(TrackRoll(grid, instrument, role, name=name or f"track{k}"))
        nonempty = [r for r in rolls if r.n_notes]
        if not nonempty and not cfg.keep_empty_segments:
            continue
        if nonempty and not cfg.keep_empty_tracks:
            rolls = nonempty
        segments.append(Segment(tuple(rolls), source_id=source_id, index=wi, tempo=tempo))
    return segments


def ingest_midi_file(path: str | Path, cfg: QuantizeConfig = QuantizeConfig(), vocab=None) -> list[Segment]:
    path = Path(path)
    return ingest_midi(path.read_bytes(), cfg, source_id=path.stem, vocab=vocab)


# --- MIDI writing ----------------------------------------------------------

TICKS_PER_BEAT = 480


def _track_key(track: TrackRoll, seen: dict) -> str:
    if track.name:
        return track.name
    k = seen.get(track.instrument, 0)
    seen[track.instrument] = k + 1
    return f"{track.instrument}#{k}"


def segments_to_midi(segments: Sequence[Segment], vocab: InstrumentVocab | None = None, tempo: float | None = None) -> bytes:
    """Concatenate consecutive segments into a format-1 MIDI file.

    Tracks are matched across segments by name (or instrument occurrence);
    each MIDI track is named after its instrument class so that re-ingestion
    recovers the instrument.
    """
    vocab = vocab or default_vocab()
    if tempo is None:
        tempo = segments[0].tempo if segments else 120.0
    tick_per_step = TICKS_PER_BEAT // STEPS_PER_BEAT
    lanes: dict[str, dict] = {}
    for si, seg in enumerate(segments):
        seen: dict = {}
        for track in seg.tracks:
            key = _track_key(track, seen)
            lane = lanes.setdefault(key, {"instrument": track.instrument, "role": track.role, "notes": []})
            for p, t, d in track.notes():
                lane["notes"].append((p, (si * N_STEP + t) * tick_per_step, (si * N_STEP + t + d) * tick_per_step))

    mf = mido.MidiFile(type=1, ticks_per_beat=TICKS_PER_BEAT)
    conductor = mido.MidiTrack()
    conductor.append(mido.MetaMessage("set_tempo", tempo=mido.bpm2tempo(tempo), time=0))
    conductor.append(mido.MetaMessage("time_signature", numerator=4, denominator=4, time=0))
    conductor.append(mido.MetaMessage("end_of_track", time=0))
    mf.tracks.append(conductor)
    channels = [c for c in range(16) if c != DRUM_CHANNEL]
    for li, lane in enumerate(lanes.values()):
        ch = channels[li % len(channels)]
        tr = mido.MidiTrack()
        label = lane["instrument"] + (" (melody)" if lane["role"] == "melody" else "")
        tr.append(mido.MetaMessage("track_name", name=label, time=0))
        tr.append(mido.Message("program_change", channel=ch, program=vocab.gm_program(lane["instrument"]), time=0))
        events = []
        for p, on, off in lane["notes"]:
            events.append((off, 0, p))
            events.append((on, 1, p))
        events.sort()
        now = 0
        for tick, kind, p in events:
            msg_type = "note_on" if kind else "note_off"
            tr.append(mido.Message(msg_type, channel=ch, note=p, velocity=80 if kind else 0, time=tick - now))
            now = tick
        tr.append(mido.MetaMessage("end_of_track", time=0))
        mf.tracks.append(tr)
    buf = io.BytesIO()
    mf.save(file=buf)
    return buf.getvalue()


# --- corpus manifest -------------------------------------------------------

MANIFEST_VERSION = 1


@dataclass
class Corpus:
    segments: list[Segment]
    splits: list[str]
    corpora: list[str]

    def split(self, name: str) -> list[Segment]:
        return [s for s, sp in zip(self.segments, self.splits) if sp == name]

    def __len__(self):
        return len(self.segments)


def assign_splits(source_ids: Sequence[str], ratios=(8, 1, 1), seed: int = 0) -> dict[str, str]:
    """Song-level random train/validation/test assignment."""
    songs = sorted(set(source_ids))
    rng = np.random.default_rng(seed)
    rng.shuffle(songs)
    total = sum(ratios)
    n_train = int(round(len(songs) * ratios[0] / total))
    n_val = int(round(len(songs) * ratios[1] / total))
    if len(songs) >= 3:
        n_train = min(max(n_train, 1), len(songs) - 2)
        n_val = max(n_val, 1)
    out = {}
    for i, s in enumerate(songs):
        out[s] = "train" if i < n_train else "validation" if i < n_train + n_val else "test"
    return out


def save_corpus(directory: str | Path, segments: Sequence[Segment], splits: Sequence[str], corpora: Sequence[str] | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    corpora = list(corpora) if corpora is not None else ["default"] * len(segments)
    entries, arrays = [], {}
    for i, (seg, split, corpus) in enumerate(zip(segments, splits, corpora)):
        sid = f"seg{i:06d}"
        entries.append(
            {
                "id": sid,
                "source": seg.source_id,
                "window": seg.index,
                "split": split,
                "corpus": corpus,
                "tempo": seg.tempo,
                "tracks": [{"instrument": t.instrument, "role": t.role, "name": t.name} for t in seg.tracks],
            }
        )
        arrays[sid] = np.stack([t.grid for t in seg.tracks]).astype(np.int8)
    np.savez_compressed(directory / "segments.npz", **arrays)
    manifest = {"version": MANIFEST_VERSION, "grids": "segments.npz", "segments": entries}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_corpus(directory: str | Path) -> Corpus:
    directory = Path(directory)
    if directory.is_file():
        directory = directory.parent
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.get('version')}")
    segments, splits, corpora = [], [], []
    with np.load(directory / manifest["grids"]) as grids:
        for e in manifest["segments"]:
            g = grids[e["id"]]
            tracks = tuple(
                TrackRoll(g[k], tr["instrument"], tr.get("role"), tr.get("name")) for k, tr in enumerate(e["tracks"])
            )
            segments.append(Segment(tracks, source_id=e["source"], index=e["window"], tempo=e.get("tempo", 120.0)))
            splits.append(e["split"])
            corpora.append(e.get("corpus", "default"))
    return Corpus(segments, splits, corpora)
