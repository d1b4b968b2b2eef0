"""ELBO objective, annealing schedules, batching with key augmentation, training loop and checkpoints."""
from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .features import aux_features_batch, track_function_batch
from .instruments import InstrumentVocab, default_vocab
from .networks import (
    PITCH_EOS,
    LatentGaussian,
    ModelConfig,
    NoteTokens,
    QandA,
    config_hash,
    grids_to_tokens,
)
from .score import Corpus, Segment, load_corpus, transpose_grid

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
KEY_OFFSETS = tuple(range(-5, 7))  # the 12 keys


class ConfigurationError(ValueError):
    pass


class IncompatibleCheckpointError(RuntimeError):
    pass


class CheckpointVersionError(IncompatibleCheckpointError):
    pass


# --- schedules ---------------------------------------------------------------

@dataclass(frozen=True)
class ScheduleConfig:
    beta_f_max: float = 0.5
    beta_o_max: float = 0.01
    kl_warmup: float = 0.5  # fraction of training spent ramping the KL weights
    tf_start: float = 0.8
    tf_end: float = 0.0
    lr_start: float = 1e-3
    lr_end: float = 1e-5


@dataclass(frozen=True)
class ScheduleState:
    epoch: int = 0
    beta_f: float = 0.0
    beta_o: float = 0.0
    tf_rate: float = 0.8
    lr: float = 1e-3


def schedule_at(progress: float, cfg: ScheduleConfig = ScheduleConfig(), epoch: int = 0) -> ScheduleState:
    progress = min(max(progress, 0.0), 1.0)
    warm = 1.0 if cfg.kl_warmup <= 0 else min(progress / cfg.kl_warmup, 1.0)
    return ScheduleState(
        epoch=epoch,
        beta_f=cfg.beta_f_max * warm,
        beta_o=cfg.beta_o_max * warm,
        tf_rate=cfg.tf_start + (cfg.tf_end - cfg.tf_start) * progress,
        lr=cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** progress,
    )


def step_schedule(sched: ScheduleState | None, epoch: int, total_epochs: int = 30, cfg: ScheduleConfig = ScheduleConfig()) -> ScheduleState:
    """Schedule values for `epoch`; the last epoch (total_epochs - 1 or later) sits at the endpoints."""
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    progress = epoch / max(total_epochs - 1, 1)
    return schedule_at(progress, cfg, epoch)


# --- batching ----------------------------------------------------------------

@dataclass
class Batch:
    mix_tokens: NoteTokens
    track_tokens: NoteTokens  # (B*N, ...)
    pitch_fn: torch.Tensor  # (B, N, 128)
    time_fn: torch.Tensor  # (B, N, 32)
    aux: torch.Tensor  # (B*N, 32, 3)
    instruments: torch.Tensor  # (B, N)
    grids: np.ndarray  # (B, N, 128, 32)

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.instruments.shape)


def make_batch(segments: Sequence[Segment], vocab: InstrumentVocab, max_notes: int, offset: int = 0, dtype=torch.float32) -> Batch:
    n = segments[0].n_tracks
    if any(s.n_tracks != n for s in segments):
        raise ValueError("a batch needs segments with equal track counts")
    grids = np.stack([np.stack([t.grid for t in s.tracks]) for s in segments])
    if offset:
        b = grids.shape[0]
        grids = np.stack([transpose_grid(g, offset) for g in grids.reshape(-1, *grids.shape[2:])]).reshape(b, n, *grids.shape[2:])
    flat = grids.reshape(-1, *grids.shape[2:])
    mix = grids.max(axis=1)
    pf, tf = track_function_batch(grids)
    instruments = torch.tensor([[vocab.index(t.instrument) for t in s.tracks] for s in segments], dtype=torch.long)
    return Batch(
        mix_tokens=grids_to_tokens(mix, max_notes),
        track_tokens=grids_to_tokens(flat, max_notes),
        pitch_fn=torch.as_tensor(pf, dtype=dtype),
        time_fn=torch.as_tensor(tf, dtype=dtype),
        aux=torch.as_tensor(aux_features_batch(flat), dtype=dtype),
        instruments=instruments,
        grids=grids,
    )


def group_batches(indices_by_key: dict, batch_size: int, rng: np.random.Generator | None) -> list[list[int]]:
    """Chunk each equal-track-count group into batches; shuffle within groups and across batches."""
    batches = []
    for key in sorted(indices_by_key):
        idx = list(indices_by_key[key])
        if rng is not None:
            rng.shuffle(idx)
        batches.extend(idx[i:i + batch_size] for i in range(0, len(idx), batch_size))
    if rng is not None:
        order = rng.permutation(len(batches))
        batches = [batches[i] for i in order]
    return batches


def index_groups(segments: Sequence[Segment], corpora: Sequence[str] | None = None) -> dict:
    groups = defaultdict(list)
    for i, s in enumerate(segments):
        groups[(corpora[i] if corpora else "default", s.n_tracks)].append(i)
    return groups


def draw_key_offset(rng: np.random.Generator) -> int:
    return int(rng.choice(KEY_OFFSETS))


# --- objective -----------------------------------------------------------------

@dataclass
class LossBreakdown:
    track_recon: torch.Tensor
    function_recon: torch.Tensor
    aux_recon: torch.Tensor
    kl_mix: torch.Tensor
    kl_function: torch.Tensor
    kl_track: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def track_reconstruction(pitch_logits, dur_logits, target: NoteTokens) -> torch.Tensor:
    """Token cross-entropy: pitch (notes + closing EOS) plus duration (notes only)."""
    k = target.pitch.shape[-1]
    pos = torch.arange(k)
    pitch_mask = pos <= target.n_notes.unsqueeze(-1)
    note_mask = pos < target.n_notes.unsqueeze(-1)
    ce_p = F.cross_entropy(pitch_logits.reshape(-1, pitch_logits.shape[-1]), target.pitch.reshape(-1), reduction="none")
    ce_p = (ce_p * pitch_mask.reshape(-1)).sum() / pitch_mask.sum()
    dur_target = (target.dur - 1).clamp(min=0).reshape(-1)
    ce_d = F.cross_entropy(dur_logits.reshape(-1, dur_logits.shape[-1]), dur_target, reduction="none")
    n_note = note_mask.sum()
    ce_d = (ce_d * note_mask.reshape(-1)).sum() / n_note.clamp(min=1)
    return ce_p + ce_d


FunctionPosterior = Callable[[QandA, torch.Tensor, Batch, torch.Generator], LatentGaussian]


@dataclass
class ForwardTrace:
    """Intermediate latents of one ELBO evaluation (used by tests and diagnostics)."""

    q_mix: LatentGaussian
    q_function: LatentGaussian
    q_track: LatentGaussian
    z_track: torch.Tensor
    decoded: object


def elbo_loss(
    model: QandA,
    batch: Batch,
    sched: ScheduleState,
    generator: torch.Generator | None = None,
    function_posterior: FunctionPosterior | None = None,
    trace: list | None = None,
) -> LossBreakdown:
    b, n = batch.size
    q_mix = model.mixture_encoder(batch.mix_tokens)
    z_mix = q_mix.sample(generator)
    fd = model.cfg.fn_dim
    if function_posterior is None:
        q_p, q_t = model.function_encoder(batch.pitch_fn, batch.time_fn)
        q_f = LatentGaussian(torch.cat([q_p.mean, q_t.mean], -1), torch.cat([q_p.log_var, q_t.log_var], -1))
    else:
        q_f = function_posterior(model, z_mix, batch, generator)
    z_f = q_f.sample(generator)
    q_tr = model.separator(z_mix, z_f, batch.instruments)
    z_tr = q_tr.sample(generator)

    pf_hat, tf_hat = model.function_decoder(z_f[..., :fd], z_f[..., fd:])
    # squared error summed over the 160 function entries, averaged over tracks
    function_recon = (pf_hat - batch.pitch_fn).pow(2).sum(-1).mean() + (tf_hat - batch.time_fn).pow(2).sum(-1).mean()

    aux_raw = model.aux_predictor(z_tr).reshape(b * n, -1, 3)
    aux_recon = F.mse_loss(torch.sigmoid(aux_raw[..., :2]), batch.aux[..., :2]) + F.binary_cross_entropy_with_logits(
        aux_raw[..., 2], batch.aux[..., 2]
    )
    dec = model.track_decoder(z_tr.reshape(b * n, -1), batch.aux, batch.track_tokens, sched.tf_rate, generator)
    track_recon = track_reconstruction(dec.pitch_logits, dec.dur_logits, batch.track_tokens)

    kl_mix = q_mix.kl().mean()
    kl_function = q_f.kl().mean()
    kl_track = q_tr.kl().mean()
    total = track_recon + function_recon + aux_recon + sched.beta_f * kl_function + sched.beta_o * (kl_mix + kl_track)
    if trace is not None:
        trace.append(ForwardTrace(q_mix, q_f, q_tr, z_tr, dec))
    return LossBreakdown(track_recon, function_recon, aux_recon, kl_mix, kl_function, kl_track, total)


# --- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    model: QandA
    schedule: ScheduleState
    epoch: int
    payload: dict = field(repr=False)


def save_checkpoint(path, model: QandA, schedule: ScheduleState, epoch: int = 0, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": getattr(model, "kind", "qanda"),
        "model_config": model.cfg.to_dict(),
        "vocab": list(model.vocab.names),
        "config_hash": model.config_hash,
        "state_dict": model.state_dict(),
        "schedule": asdict(schedule),
        "epoch": epoch,
    }
    if hasattr(model, "voice_instruments"):
        payload["voice_instruments"] = list(model.voice_instruments)
    if extra:
        payload.update(extra)
    torch.save(payload, path)
    return path


def read_checkpoint(path, vocab: InstrumentVocab | None = None) -> dict:
    vocab = vocab or default_vocab()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise IncompatibleCheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    version = payload.get("format_version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint format {version!r}, this build reads {CHECKPOINT_VERSION}")
    cfg = ModelConfig.from_dict(payload["model_config"])
    if config_hash(cfg, payload["vocab"]) != payload["config_hash"]:
        raise IncompatibleCheckpointError("checkpoint config hash does not match its contents")
    if list(payload["vocab"]) != list(vocab.names):
        raise IncompatibleCheckpointError("checkpoint instrument vocabulary differs from the installed one")
    return payload


def load_checkpoint(path, vocab: InstrumentVocab | None = None) -> Checkpoint:
    vocab = vocab or default_vocab()
    payload = read_checkpoint(path, vocab)
    if payload.get("kind", "qanda") != "qanda":
        from .voicesep import QandAV  # noqa: PLC0415 - avoids an import cycle

        model = QandAV(ModelConfig.from_dict(payload["model_config"]), vocab, payload.get("voice_instruments"))
    else:
        model = QandA(ModelConfig.from_dict(payload["model_config"]), vocab)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return Checkpoint(model, ScheduleState(**payload["schedule"]), payload["epoch"], payload)


# --- training loop -------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    augment: bool = True
    grad_clip: float = 1.0
    schedule: ScheduleConfig = ScheduleConfig()
    model: ModelConfig = field(default_factory=ModelConfig)
    eval_batch_size: int = 64

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        sched = ScheduleConfig(**d.pop("schedule", {}))
        model = ModelConfig.from_dict(d.pop("model", {}))
        return cls(schedule=sched, model=model, **d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TrainResult:
    best_path: Path
    last_path: Path
    history: list[dict]
    model: QandA


def evaluate_loss(model, segments, batch_size=64, seed=0, function_posterior=None, cfg: ScheduleConfig = ScheduleConfig()) -> float:
    """Mean total loss, fully teacher-forced with the final KL weights (comparable across epochs)."""
    if not segments:
        return float("nan")
    was_training = model.training
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    sched = replace(schedule_at(1.0, cfg), tf_rate=1.0)
    total, count = 0.0, 0
    with torch.no_grad():
        for idx in group_batches(index_groups(segments), batch_size, None):
            batch = make_batch([segments[i] for i in idx], model.vocab, model.cfg.max_simu_notes, dtype=model.dtype)
            loss = elbo_loss(model, batch, sched, gen, function_posterior)
            total += float(loss.total) * len(idx)
            count += len(idx)
    model.train(was_training)
    return total / count


def teacher_forced_accuracy(model: QandA, segments, batch_size: int = 64) -> float:
    """Fraction of note pitch tokens predicted correctly when the decoder reads ground-truth tokens and aux features.

    Posterior means are used throughout; EOS tokens are not counted.
    """
    was_training = model.training
    model.eval()
    correct = total = 0
    with torch.no_grad():
        for idx in group_batches(index_groups(segments), batch_size, None):
            batch = make_batch([segments[i] for i in idx], model.vocab, model.cfg.max_simu_notes, dtype=model.dtype)
            b, n = batch.size
            z_mix = model.mixture_encoder(batch.mix_tokens).mean
            q_p, q_t = model.function_encoder(batch.pitch_fn, batch.time_fn)
            z_tr = model.separator(z_mix, torch.cat([q_p.mean, q_t.mean], -1), batch.instruments).mean
            dec = model.track_decoder(z_tr.reshape(b * n, -1), batch.aux, batch.track_tokens, 1.0)
            tok = batch.track_tokens
            notes = torch.arange(tok.pitch.shape[-1]) < tok.n_notes.unsqueeze(-1)
            correct += int(((dec.pitch_logits.argmax(-1) == tok.pitch) & notes).sum())
            total += int(notes.sum())
    model.train(was_training)
    return correct / total if total else float("nan")


def _rng_state(gen: torch.Generator, rng: np.random.Generator) -> dict:
    return {"torch": gen.get_state(), "torch_global": torch.get_rng_state(), "numpy": rng.bit_generator.state}


def _restore_rng(state: dict, gen: torch.Generator, rng: np.random.Generator):
    gen.set_state(state["torch"])
    torch.set_rng_state(state["torch_global"])
    rng.bit_generator.state = state["numpy"]


def train(
    corpus: Corpus | str | Path,
    cfg: TrainConfig,
    out_dir: str | Path,
    resume: str | Path | None = None,
    model: QandA | None = None,
    function_posterior: FunctionPosterior | None = None,
    max_epochs: int | None = None,
    log_file: str | Path | None = None,
    on_step: Callable[[int, LossBreakdown], None] | None = None,
) -> TrainResult:
    """Adam training with per-epoch schedules; keeps `best.pt` (validation) and `last.pt`.

    `max_epochs` stops early without changing the schedule horizon (used for
    resume tests).
    """
    if not isinstance(corpus, Corpus):
        corpus = load_corpus(corpus)
    train_segs = corpus.split("train")
    if not train_segs:
        raise ConfigurationError("the training split is empty")
    train_corpora = [c for c, sp in zip(corpus.corpora, corpus.splits) if sp == "train"]
    val_segs = corpus.split("validation")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = Path(log_file) if log_file else out_dir / "train_log.jsonl"

    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = QandA(cfg.model)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.schedule.lr_start)
    start_epoch, best_val, history = 0, math.inf, []
    if resume is not None:
        payload = read_checkpoint(resume, model.vocab)
        model.load_state_dict(payload["state_dict"])
        optimizer.load_state_dict(payload["optimizer"])
        _restore_rng(payload["rng"], gen, rng)
        start_epoch = payload["epoch"] + 1
        best_val = payload.get("best_val", math.inf)
        history = list(payload.get("history", []))
    elif log_path.exists():
        log_path.unlink()

    groups = index_groups(train_segs, train_corpora)
    last_epoch = cfg.epochs if max_epochs is None else min(cfg.epochs, max_epochs)
    best_path, last_path = out_dir / "best.pt", out_dir / "last.pt"
    for epoch in range(start_epoch, last_epoch):
        sched = step_schedule(None, epoch, cfg.epochs, cfg.schedule)
        for g in optimizer.param_groups:
            g["lr"] = sched.lr
        model.train()
        sums, steps = defaultdict(float), 0
        for idx in group_batches(groups, cfg.batch_size, rng):
            offset = draw_key_offset(rng) if cfg.augment else 0
            batch = make_batch([train_segs[i] for i in idx], model.vocab, model.cfg.max_simu_notes, offset, model.dtype)
            loss = elbo_loss(model, batch, sched, gen, function_posterior)
            optimizer.zero_grad()
            loss.total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            for k, v in loss.as_dict().items():
                sums[k] += v
            steps += 1
            if on_step is not None:
                on_step(steps, loss)
        val = evaluate_loss(model, val_segs, cfg.eval_batch_size, cfg.seed, function_posterior, cfg.schedule)
        record = {
            "epoch": epoch,
            **{k: v / steps for k, v in sums.items()},
            "val_total": val,
            "lr": sched.lr,
            "beta_f": sched.beta_f,
            "beta_o": sched.beta_o,
            "tf_rate": sched.tf_rate,
        }
        history.append(record)
        with log_path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")
        log.info("epoch %d total %.4f val %.4f", epoch, record["total"], val)
        score = val if not math.isnan(val) else record["total"]
        if score < best_val:
            best_val = score
            save_checkpoint(best_path, model, sched, epoch)
        extra = {
            "optimizer": optimizer.state_dict(),
            "rng": _rng_state(gen, rng),
            "best_val": best_val,
            "history": history,
            "train_config": cfg.to_dict(),
        }
        save_checkpoint(last_path, model, sched, epoch, extra)
    if not best_path.exists():
        save_checkpoint(best_path, model, step_schedule(None, 0, cfg.epochs, cfg.schedule), 0)
    return TrainResult(best_path, last_path, history, model)
