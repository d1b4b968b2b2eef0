"""Voice separation: infer per-voice function latents from the mixture, generate voices, assign mixture notes."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .instruments import InstrumentVocab
from .networks import LatentGaussian, ModelConfig, QandA, init_log_var_heads
from .score import Corpus, Mixture, Segment, TrackRoll, condense_mixture, grid_notes, notes_to_grid
from .training import Batch, ConfigurationError, TrainConfig, load_checkpoint, read_checkpoint, save_checkpoint, train

N_VOICES = 4
PITCH_WEIGHT = 1.0
TIME_WEIGHT = 2.0  # steps are weighted twice a semitone
DEFAULT_VOICE_INSTRUMENT = "Choir and Voice"

Note = tuple  # (pitch, onset, duration)


# --- function inference ---------------------------------------------------------

class FunctionInferrer(nn.Module):
    """GRU that emits voice function latents from the mixture latent, highest voice first."""

    def __init__(self, cfg: ModelConfig, n_voices: int = N_VOICES):
        super().__init__()
        f = 2 * cfg.fn_dim
        self.n_voices = n_voices
        self.init = nn.Linear(cfg.z_dim, cfg.voice_hidden)
        self.gru = nn.GRUCell(f + cfg.z_dim, cfg.voice_hidden)
        self.hint = nn.Linear(3, f + cfg.z_dim)
        self.mean = nn.Linear(cfg.voice_hidden, f)
        self.log_var = nn.Linear(cfg.voice_hidden, f)

    def forward(self, z_mix: torch.Tensor, hints: torch.Tensor | None = None) -> LatentGaussian:
        """z_mix (B, z); hints (B, V, 3) rows of (pitch/127, onset/32, present) -> (B, V, 2*fn)."""
        h = torch.tanh(self.init(z_mix))
        prev = z_mix.new_zeros(z_mix.shape[0], self.mean.out_features)
        means, log_vars = [], []
        for v in range(self.n_voices):
            x = torch.cat([prev, z_mix], -1)
            if hints is not None:
                x = x + self.hint(hints[:, v])
            h = self.gru(x, h)
            mu = self.mean(h)
            means.append(mu)
            log_vars.append(self.log_var(h))
            prev = mu
        return LatentGaussian(torch.stack(means, 1), torch.stack(log_vars, 1))


class QandAV(QandA):
    kind = "qanda-v"

    def __init__(self, cfg: ModelConfig | None = None, vocab: InstrumentVocab | None = None, voice_instruments: Sequence[str] | None = None):
        super().__init__(cfg, vocab)
        self.inferrer = FunctionInferrer(self.cfg)
        init_log_var_heads(self.inferrer, self.cfg.log_var_init)
        self.voice_instruments = tuple(voice_instruments or (DEFAULT_VOICE_INSTRUMENT,) * N_VOICES)
        for inst in self.voice_instruments:
            self.vocab.index(inst)

    def param_groups(self):
        groups = super().param_groups()
        groups["voice_inferrer"] = list(self.inferrer.parameters())
        return groups

    def infer_voice_functions(self, z_mix: torch.Tensor, hints: torch.Tensor | None = None) -> LatentGaussian:
        single = z_mix.dim() == 1
        if single:
            z_mix = z_mix.unsqueeze(0)
            hints = hints.unsqueeze(0) if hints is not None else None
        out = self.inferrer(z_mix, hints)
        return out[0] if single else out

    @classmethod
    def from_base(cls, base: QandA, voice_instruments=None) -> "QandAV":
        model = cls(base.cfg, base.vocab, voice_instruments)
        missing, unexpected = model.load_state_dict(base.state_dict(), strict=False)
        assert not unexpected and all(k.startswith("inferrer.") for k in missing)
        return model


def entry_hints(voices: Sequence, n_voices: int = N_VOICES) -> np.ndarray:
    """(pitch/127, onset/32, present) of each voice's first note; voices given as grids or TrackRolls."""
    out = np.zeros((n_voices, 3), dtype=np.float32)
    for v, voice in enumerate(list(voices)[:n_voices]):
        grid = voice.grid if isinstance(voice, TrackRoll) else np.asarray(voice)
        notes = grid_notes(grid)
        if notes:
            t0 = notes[0][1]
            p = max(n[0] for n in notes if n[1] == t0)
            out[v] = (p / 127.0, t0 / 32.0, 1.0)
    return out


def voice_function_posterior(hint_rate: float = 0.5):
    """Function posterior for the training loop: inferred latents with hints given on a fraction of batches."""

    def posterior(model: QandAV, z_mix: torch.Tensor, batch: Batch, generator: torch.Generator | None) -> LatentGaussian:
        hints = None
        if hint_rate > 0 and float(torch.rand(1, generator=generator)) < hint_rate:
            hints = torch.as_tensor(np.stack([entry_hints(g) for g in batch.grids]), dtype=z_mix.dtype)
        return model.inferrer(z_mix, hints)

    return posterior


# --- note assignment -----------------------------------------------------------

@dataclass
class VoiceAssignment:
    notes: list  # mixture notes (pitch, onset, duration)
    voices: list  # voice index per note, 0 = highest
    residual_conflicts: int = 0

    @property
    def flagged(self) -> bool:
        return self.residual_conflicts > 0

    def tracks(self, n_voices: int = N_VOICES) -> list[list[Note]]:
        out = [[] for _ in range(n_voices)]
        for n, v in zip(self.notes, self.voices):
            out[v].append(n)
        return out


def note_distance(a, b, time_weight: float = TIME_WEIGHT) -> float:
    return PITCH_WEIGHT * abs(a[0] - b[0]) + time_weight * abs(a[1] - b[1])


def distance_matrix(mix_notes: Sequence[Note], generated: Sequence[Sequence[Note]], time_weight: float = TIME_WEIGHT) -> np.ndarray:
    """D[i, v]: distance from mixture note i to the nearest generated note of voice v (inf if v is empty)."""
    d = np.full((len(mix_notes), len(generated)), np.inf)
    if not mix_notes:
        return d
    mp = np.array([n[0] for n in mix_notes], dtype=float)[:, None]
    mt = np.array([n[1] for n in mix_notes], dtype=float)[:, None]
    for v, notes in enumerate(generated):
        if notes:
            gp = np.array([n[0] for n in notes], dtype=float)[None]
            gt = np.array([n[1] for n in notes], dtype=float)[None]
            d[:, v] = (PITCH_WEIGHT * np.abs(mp - gp) + time_weight * np.abs(mt - gt)).min(axis=1)
    if np.isinf(d).all(axis=1).any():
        d[np.isinf(d).all(axis=1)] = 0.0
    return d


def _overlaps(a: Note, b: Note) -> bool:
    return a[1] < b[1] + b[2] and b[1] < a[1] + a[2]


def conflict_pairs(notes: Sequence[Note], voices: Sequence[int]) -> list[tuple[int, int]]:
    """Pairs of notes in the same voice that sound at the same step."""
    out = []
    for i, j in itertools.combinations(range(len(notes)), 2):
        if voices[i] == voices[j] and _overlaps(notes[i], notes[j]):
            out.append((i, j))
    return out


def assign_mixture_notes(mix_notes: Sequence[Note], generated: Sequence[Sequence[Note]], time_weight: float = TIME_WEIGHT) -> VoiceAssignment:
    """Nearest-generated-note voice per mixture note, then greedy conflict repair.

    While two notes share a voice and overlap in time, the conflicting note
    whose move costs the least added distance goes to its nearest other voice
    that is free at that time. Stops when no conflicts remain or no such move
    exists; leftover conflicts are counted in `residual_conflicts`.
    """
    notes = [tuple(int(x) for x in n) for n in mix_notes]
    n_voices = len(generated)
    d = distance_matrix(notes, generated, time_weight)
    voices = [int(np.argmin(row)) for row in d] if notes else []
    while True:
        pairs = conflict_pairs(notes, voices)
        if not pairs:
            break
        conflicting = sorted({i for pair in pairs for i in pair})
        best = None
        for i in conflicting:
            cur = voices[i]
            for v in sorted((u for u in range(n_voices) if u != cur), key=lambda u: (d[i, u], u)):
                if not np.isfinite(d[i, v]):
                    break
                if any(voices[j] == v and _overlaps(notes[i], notes[j]) for j in range(len(notes)) if j != i):
                    continue
                cost = d[i, v] - d[i, cur]
                if best is None or cost < best[0]:
                    best = (cost, i, v)
                break
        if best is None:
            return VoiceAssignment(notes, voices, len(pairs))
        _, i, v = best
        voices[i] = v
    return VoiceAssignment(notes, voices, 0)


def exhaustive_assignment(mix_notes: Sequence[Note], generated: Sequence[Sequence[Note]], time_weight: float = TIME_WEIGHT) -> tuple[float, list[list[int]]]:
    """Reference solver: minimum total distance over all conflict-free assignments (all optima returned)."""
    notes = [tuple(n) for n in mix_notes]
    d = distance_matrix(notes, generated, time_weight)
    best, arg = math.inf, []
    for combo in itertools.product(range(len(generated)), repeat=len(notes)):
        if conflict_pairs(notes, combo):
            continue
        cost = float(sum(d[i, v] for i, v in enumerate(combo)))
        if cost < best - 1e-9:
            best, arg = cost, [list(combo)]
        elif abs(cost - best) <= 1e-9:
            arg.append(list(combo))
    return best, arg


def assignment_cost(assignment: VoiceAssignment, generated, time_weight: float = TIME_WEIGHT) -> float:
    d = distance_matrix(assignment.notes, generated, time_weight)
    return float(sum(d[i, v] for i, v in enumerate(assignment.voices)))


# --- pipeline --------------------------------------------------------------------

@dataclass
class VoiceSeparation:
    tracks: list[TrackRoll]
    assignment: VoiceAssignment
    generated: list[np.ndarray] = field(repr=False)


def separate_voices(mix: Mixture | np.ndarray, model: QandAV, hints: np.ndarray | None = None) -> VoiceSeparation:
    grid = mix.grid if isinstance(mix, Mixture) else np.asarray(mix)
    model.eval()
    with torch.no_grad():
        z_mix = model.encode_mixture(grid[None]).mean[0]
        h = torch.as_tensor(hints, dtype=z_mix.dtype) if hints is not None else None
        z_f = model.infer_voice_functions(z_mix, h).mean
        z_tr = model.separate(z_mix, z_f, list(model.voice_instruments)).mean
        generated = model.decode_track(z_tr).grids()
    gen_notes = [grid_notes(g) for g in generated]
    assignment = assign_mixture_notes(grid_notes(grid), gen_notes)
    tracks = [
        TrackRoll(notes_to_grid(notes), model.voice_instruments[v], None, name=f"voice{v + 1}")
        for v, notes in enumerate(assignment.tracks(len(gen_notes)))
    ]
    return VoiceSeparation(tracks, assignment, list(generated))


def ground_truth_voices(seg: Segment, ordered: bool = True) -> list[TrackRoll]:
    """Voices high to low; without explicit order, tracks are sorted by mean pitch (descending)."""
    tracks = list(seg.tracks)
    if not ordered:
        def mean_pitch(t):
            notes = t.notes()
            return np.mean([n[0] for n in notes]) if notes else -1.0

        tracks.sort(key=mean_pitch, reverse=True)
    return tracks


def voice_accuracy(predicted_voices: Sequence[int], notes: Sequence[Note], truth: Sequence[TrackRoll]) -> tuple[int, int]:
    """(correct, total); a mixture note is correct if any true voice holds a note at its (pitch, onset)."""
    correct = 0
    for (p, t, _), v in zip(notes, predicted_voices):
        if v < len(truth) and truth[v].grid[p, t] > 0:
            correct += 1
    return correct, len(notes)


def random_assignment(notes: Sequence[Note], rng: np.random.Generator, n_voices: int = N_VOICES) -> list[int]:
    return [int(v) for v in rng.integers(0, n_voices, size=len(notes))]


def accuracy_on(segments: Sequence[Segment], model: QandAV | None, use_hints: bool = False, rng=None) -> float:
    """Note-level voice accuracy (%) of the full pipeline, or of uniform-random voices when model is None."""
    correct = total = 0
    for seg in segments:
        truth = ground_truth_voices(seg)
        mix = condense_mixture(seg)
        notes = mix.notes()
        if model is None:
            voices = random_assignment(notes, rng)
        else:
            hints = entry_hints(truth) if use_hints else None
            voices = separate_voices(mix, model, hints).assignment.voices
        c, n = voice_accuracy(voices, notes, truth)
        correct += c
        total += n
    return 100.0 * correct / max(total, 1)


# --- k-fold evaluation ------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    n_train: int
    n_test: int
    accuracy: float
    accuracy_hints: float


@dataclass
class VoiceSepReport:
    folds: list[FoldResult]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([f.accuracy for f in self.folds]))

    @property
    def mean_accuracy_hints(self) -> float:
        return float(np.mean([f.accuracy_hints for f in self.folds]))

    def to_dict(self) -> dict:
        return {
            "folds": [f.__dict__ for f in self.folds],
            "mean_accuracy": self.mean_accuracy,
            "mean_accuracy_hints": self.mean_accuracy_hints,
        }

    def to_csv(self) -> str:
        rows = ["fold,n_train,n_test,accuracy,accuracy_hints"]
        rows += [f"{f.fold},{f.n_train},{f.n_test},{f.accuracy:.2f},{f.accuracy_hints:.2f}" for f in self.folds]
        rows.append(f"mean,,,{self.mean_accuracy:.2f},{self.mean_accuracy_hints:.2f}")
        return "\n".join(rows) + "\n"


def kfold_indices(segments: Sequence[Segment], folds: int, seed: int = 0) -> list[list[int]]:
    """Fold membership by source piece when there are enough pieces, otherwise by segment."""
    if len(segments) < folds:
        raise ConfigurationError(f"{len(segments)} segments cannot fill {folds} folds")
    rng = np.random.default_rng(seed)
    sources = sorted({s.source_id for s in segments})
    if len(sources) >= folds:
        rng.shuffle(sources)
        fold_of = {src: i % folds for i, src in enumerate(sources)}
        return [[i for i, s in enumerate(segments) if fold_of[s.source_id] == f] for f in range(folds)]
    order = rng.permutation(len(segments))
    return [sorted(int(i) for i in order[f::folds]) for f in range(folds)]


def finetune_voicesep(base: QandA, segments: Sequence[Segment], cfg: TrainConfig, out_dir, voice_instruments=None, hint_rate: float = 0.5) -> QandAV:
    model = QandAV.from_base(base, voice_instruments or tuple(segments[0].instruments[:N_VOICES]))
    corpus = Corpus(list(segments), ["train"] * len(segments), ["voices"] * len(segments))
    train(corpus, cfg, out_dir, model=model, function_posterior=voice_function_posterior(hint_rate))
    return load_checkpoint(Path(out_dir) / "last.pt", base.vocab).model


def evaluate_voicesep(corpus: Corpus | Sequence[Segment], base: QandA, cfg: TrainConfig, work_dir, folds: int = 10, seed: int = 0) -> VoiceSepReport:
    segments = list(corpus.segments if isinstance(corpus, Corpus) else corpus)
    if any(s.n_tracks != N_VOICES for s in segments):
        raise ConfigurationError(f"voice-separation segments need exactly {N_VOICES} voices")
    results = []
    for f, test_idx in enumerate(kfold_indices(segments, folds, seed)):
        test = set(test_idx)
        train_segs = [s for i, s in enumerate(segments) if i not in test]
        test_segs = [segments[i] for i in test_idx]
        model = finetune_voicesep(base, train_segs, replace(cfg, seed=cfg.seed + f), Path(work_dir) / f"fold{f:02d}")
        results.append(
            FoldResult(f, len(train_segs), len(test_segs), accuracy_on(test_segs, model), accuracy_on(test_segs, model, use_hints=True))
        )
    return VoiceSepReport(results)
