"""Track style descriptors: onset histograms along pitch and time, and per-step auxiliary features."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .score import N_PITCH, N_STEP, Mixture, Segment, TrackRoll

VOICE_CAP = 16  # onsets per step that map to voice intensity 1.0
PITCH_NORM = 127.0


class UndefinedSimilarityError(ValueError):
    """Cosine similarity requested for a zero vector."""


@dataclass(frozen=True)
class TrackFunction:
    pitch_fn: np.ndarray  # (128,)
    time_fn: np.ndarray  # (32,)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.pitch_fn, self.time_fn])

    def to_json(self) -> str:
        return json.dumps({"pitch_fn": self.pitch_fn.tolist(), "time_fn": self.time_fn.tolist()})


@dataclass(frozen=True)
class AuxFeatures:
    pitch_centre: np.ndarray  # (32,)
    voice_intensity: np.ndarray  # (32,)
    rhythm: np.ndarray  # (32,)

    def stacked(self) -> np.ndarray:
        """(32, 3) array in the order pitch centre, voice intensity, rhythm."""
        return np.stack([self.pitch_centre, self.voice_intensity, self.rhythm], axis=-1)

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k).tolist() for k in ("pitch_centre", "voice_intensity", "rhythm")})


def _grid(x) -> np.ndarray:
    if isinstance(x, (TrackRoll, Mixture)):
        return x.grid
    return np.asarray(x)


def track_function(track) -> TrackFunction:
    onsets = (_grid(track) > 0).astype(np.float64)
    return TrackFunction(onsets.sum(axis=1) / N_STEP, onsets.sum(axis=0) / N_PITCH)


def track_function_batch(grids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised form over a stack of grids (..., 128, 32)."""
    onsets = (grids > 0).astype(np.float32)
    return onsets.sum(axis=-1) / N_STEP, onsets.sum(axis=-2) / N_PITCH


def mixture_function(seg: Segment | Mixture) -> TrackFunction:
    if isinstance(seg, Segment):
        grid = np.stack([t.grid for t in seg.tracks]).max(axis=0)
    else:
        grid = seg.grid
    return track_function(grid)


def aux_features(track) -> AuxFeatures:
    return AuxFeatures(*aux_features_batch(_grid(track)[None]).transpose(2, 0, 1)[:, 0])


def aux_features_batch(grids: np.ndarray) -> np.ndarray:
    """(..., 128, 32) grids -> (..., 32, 3) features."""
    onsets = (grids > 0).astype(np.float64)
    count = onsets.sum(axis=-2)
    pitches = np.arange(N_PITCH, dtype=np.float64)[:, None]
    pitch_sum = (onsets * pitches).sum(axis=-2)
    centre = np.divide(pitch_sum, count, out=np.zeros_like(pitch_sum), where=count > 0) / PITCH_NORM
    intensity = np.minimum(count / VOICE_CAP, 1.0)
    rhythm = (count > 0).astype(np.float64)
    return np.stack([centre, intensity, rhythm], axis=-1).astype(np.float32)


def mixture_similarity(a: TrackFunction, b: TrackFunction) -> float:
    va, vb = a.vector(), b.vector()
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        raise UndefinedSimilarityError("cosine similarity of an all-zero function")
    return float(np.dot(va, vb) / (na * nb))
