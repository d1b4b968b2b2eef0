import numpy as np
import pytest
from hypothesis import strategies as st

from trackquery.score import N_PITCH, N_STEP, Segment, TrackRoll


def random_grid(rng: np.random.Generator, n_notes: int, lo: int = 0, hi: int = N_PITCH) -> np.ndarray:
    grid = np.zeros((N_PITCH, N_STEP), dtype=np.int16)
    for _ in range(n_notes):
        p = int(rng.integers(lo, hi))
        t = int(rng.integers(N_STEP))
        grid[p, t] = int(rng.integers(1, N_STEP - t + 1))
    return grid


def random_segment(rng: np.random.Generator, n_tracks: int = 3, density: int = 12, instruments=None) -> Segment:
    names = instruments or ["Acoustic Piano", "Electric Bass", "Violin", "Synth Pad", "Trumpet", "Organ", "Pipe", "Orchestral Harp"]
    tracks = tuple(
        TrackRoll(random_grid(rng, int(rng.integers(1, density + 1))), names[k % len(names)], None, name=f"t{k}")
        for k in range(n_tracks)
    )
    return Segment(tracks)


@st.composite
def grids(draw, max_notes: int = 20):
    """Valid onset-duration grids."""
    n = draw(st.integers(0, max_notes))
    grid = np.zeros((N_PITCH, N_STEP), dtype=np.int16)
    for _ in range(n):
        p = draw(st.integers(0, N_PITCH - 1))
        t = draw(st.integers(0, N_STEP - 1))
        grid[p, t] = draw(st.integers(1, N_STEP - t))
    return grid


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def voicesep_recipe(epochs: int):
    """Desk recipe for the base model and the voice fine-tune: no function KL, teacher forcing held on."""
    from dataclasses import replace

    from trackquery.networks import ModelConfig
    from trackquery.training import ScheduleConfig, TrainConfig

    return TrainConfig(
        epochs=epochs,
        batch_size=4,
        augment=True,
        schedule=ScheduleConfig(beta_f_max=0.0, tf_start=1.0, tf_end=1.0, lr_end=1e-3),
        model=replace(ModelConfig.desk(), dropout=0.0),
    )


@pytest.fixture(scope="session")
def desk_voicesep(tmp_path_factory):
    """Base model on 72 chorale segments, then the voice fine-tune; returns (model, held-out segments)."""
    from trackquery.score import Corpus
    from trackquery.synthetic import chorale_corpus
    from trackquery.training import train
    from trackquery.voicesep import finetune_voicesep

    work = tmp_path_factory.mktemp("voicesep")
    segs = chorale_corpus(96, seed=0)
    pieces = sorted({s.source_id for s in segs})
    held = set(pieces[: len(pieces) // 4])
    train_segs = [s for s in segs if s.source_id not in held]
    test_segs = [s for s in segs if s.source_id in held]
    corpus = Corpus(train_segs, ["train"] * len(train_segs), ["chorale"] * len(train_segs))
    base = train(corpus, voicesep_recipe(150), work / "base").model
    return finetune_voicesep(base, train_segs, voicesep_recipe(100), work / "voices"), test_segs
