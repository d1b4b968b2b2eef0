"""Learnable components: mixture encoder, function query-net, track separator and track decoder.

The encoder/decoder pair follows the hierarchical note -> simultaneous-notes ->
time layout: notes at one step are read (or written) in ascending pitch order by
a pitch-wise GRU, and steps are chained by a time-wise GRU.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F
from torch.nn.utils.rnn import pack_padded_sequence

from .features import aux_features_batch, track_function_batch
from .instruments import InstrumentVocab, VocabularyError, default_vocab
from .score import N_PITCH, N_STEP, Mixture, TrackRoll

PITCH_SOS = 128
PITCH_EOS = 129
N_PITCH_TOKENS = 130
N_DUR = N_STEP


@dataclass
class ModelConfig:
    z_dim: int = 256
    fn_dim: int = 128
    fn_channels: int = 4
    fn_dec_hidden: int = 256
    d_model: int = 512
    d_ff: int = 1024
    n_heads: int = 8
    n_layers: int = 2
    dropout: float = 0.1
    note_emb: int = 128
    enc_pitch_hidden: int = 256
    enc_time_hidden: int = 512
    dec_summary_hidden: int = 256
    dec_time_hidden: int = 1024
    dec_pitch_hidden: int = 512
    aux_hidden: int = 256
    max_simu_notes: int = 16
    voice_hidden: int = 512
    log_var_init: float = 0.0  # bias of every log-variance head; negative starts posteriors narrow

    @classmethod
    def desk(cls) -> "ModelConfig":
        """Reduced widths for single-CPU training runs; same topology."""
        return cls(
            z_dim=128,
            fn_dim=64,
            fn_dec_hidden=128,
            d_model=128,
            d_ff=256,
            note_emb=48,
            enc_pitch_hidden=64,
            enc_time_hidden=128,
            dec_summary_hidden=64,
            dec_time_hidden=256,
            dec_pitch_hidden=128,
            aux_hidden=64,
            voice_hidden=128,
            log_var_init=-4.0,
        )

    @classmethod
    def tiny(cls) -> "ModelConfig":
        return cls(
            z_dim=8, fn_dim=4, fn_dec_hidden=8, d_model=16, d_ff=16, n_heads=2, n_layers=1,
            note_emb=6, enc_pitch_hidden=5, enc_time_hidden=6, dec_summary_hidden=5,
            dec_time_hidden=7, dec_pitch_hidden=6, aux_hidden=5, max_simu_notes=6, voice_hidden=6,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def config_hash(cfg: ModelConfig, vocab_names) -> str:
    blob = json.dumps({"model": cfg.to_dict(), "vocab": list(vocab_names)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class LatentGaussian:
    mean: torch.Tensor
    log_var: torch.Tensor

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def sample(self, generator: torch.Generator | None = None, eps: torch.Tensor | None = None) -> torch.Tensor:
        if eps is None:
            eps = torch.randn(self.mean.shape, generator=generator, dtype=self.mean.dtype, device=self.mean.device)
        return self.mean + torch.exp(0.5 * self.log_var) * eps

    def kl(self) -> torch.Tensor:
        """Per-dimension KL divergence to the standard normal."""
        return kl_standard_normal(self.mean, self.log_var)

    def __getitem__(self, idx) -> "LatentGaussian":
        return LatentGaussian(self.mean[idx], self.log_var[idx])


def init_log_var_heads(module: nn.Module, value: float) -> None:
    """Set the bias of every Linear whose attribute name ends in `log_var`."""
    if value == 0.0:
        return
    for sub in module.modules():
        for name, child in sub.named_children():
            if name.endswith("log_var") and isinstance(child, nn.Linear):
                nn.init.constant_(child.bias, value)


def kl_standard_normal(mean: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    return 0.5 * (mean.pow(2) + torch.expm1(log_var) - log_var)


# --- tokenisation ------------------------------------------------------------

@dataclass
class NoteTokens:
    pitch: torch.Tensor  # (B, T, K) long, EOS-padded
    dur: torch.Tensor  # (B, T, K) long, 1..32 for notes, 0 otherwise
    n_notes: torch.Tensor  # (B, T) long

    @property
    def lengths(self) -> torch.Tensor:
        return self.n_notes + 1


def grids_to_tokens(grids, max_notes: int) -> NoteTokens:
    """Stack of (128, 32) grids -> ascending-pitch note tokens, at most `max_notes` per step."""
    grids = np.asarray(grids)
    on = grids.transpose(0, 2, 1) > 0  # (B, T, P)
    n = on.sum(-1)
    k = int(min(max(n.max(initial=0), 0), max_notes)) + 1
    keys = np.where(on, np.arange(N_PITCH), 10_000)
    srt = np.sort(keys, axis=-1)[..., :k]
    n = np.minimum(n, k - 1)
    is_note = np.arange(k) < n[..., None]
    pitch = np.where(is_note, srt, PITCH_EOS)
    durs = np.take_along_axis(grids.transpose(0, 2, 1), np.minimum(pitch, N_PITCH - 1), axis=-1)
    dur = np.where(is_note, durs, 0)
    return NoteTokens(
        torch.as_tensor(pitch, dtype=torch.long),
        torch.as_tensor(dur, dtype=torch.long),
        torch.as_tensor(n, dtype=torch.long),
    )


def tokens_to_grids(pitch: torch.Tensor, dur: torch.Tensor) -> np.ndarray:
    """Inverse of grids_to_tokens for decoded tokens; anything after EOS is ignored."""
    pitch = pitch.cpu().numpy()
    dur = dur.cpu().numpy()
    b, t, k = pitch.shape
    out = np.zeros((b, N_PITCH, N_STEP), dtype=np.int16)
    ended = np.cumsum(pitch >= N_PITCH, axis=-1) > 0
    limit = (N_STEP - np.arange(t))[None, :, None]
    d = np.clip(dur, 1, None)
    d = np.minimum(d, limit)
    bi, ti, ki = np.nonzero(~ended)
    out[bi, pitch[bi, ti, ki], ti] = d[bi, ti, ki]
    return out


def _as_grids(items) -> np.ndarray:
    if isinstance(items, np.ndarray):
        return items[None] if items.ndim == 2 else items
    return np.stack([it.grid if isinstance(it, (TrackRoll, Mixture)) else np.asarray(it) for it in items])


def grammar_mask(prev: torch.Tensor) -> torch.Tensor:
    """Allowed next pitch tokens given the previous token at the same step.

    Pitches must rise strictly; SOS never appears; after EOS only EOS follows.
    """
    ar = torch.arange(N_PITCH_TOKENS, device=prev.device)
    prev = prev.unsqueeze(-1)
    return ((ar > prev) & (ar < N_PITCH)) | (ar == PITCH_EOS)


# --- components --------------------------------------------------------------

class NoteEmbedding(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.pitch = nn.Embedding(N_PITCH_TOKENS, dim)
        self.dur = nn.Embedding(N_DUR + 1, dim)

    def forward(self, pitch, dur):
        return self.pitch(pitch) + self.dur(dur)


class MixtureEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = NoteEmbedding(cfg.note_emb)
        self.pitch_gru = nn.GRU(cfg.note_emb, cfg.enc_pitch_hidden, batch_first=True, bidirectional=True)
        self.time_gru = nn.GRU(2 * cfg.enc_pitch_hidden, cfg.enc_time_hidden, batch_first=True, bidirectional=True)
        self.mean = nn.Linear(2 * cfg.enc_time_hidden, cfg.z_dim)
        self.log_var = nn.Linear(2 * cfg.enc_time_hidden, cfg.z_dim)

    def forward(self, tokens: NoteTokens) -> LatentGaussian:
        b, t, k = tokens.pitch.shape
        x = self.embed(tokens.pitch, tokens.dur).reshape(b * t, k, -1)
        packed = pack_padded_sequence(x, tokens.lengths.reshape(-1).cpu(), batch_first=True, enforce_sorted=False)
        _, h = self.pitch_gru(packed)
        simu_note = torch.cat([h[0], h[1]], dim=-1).reshape(b, t, -1)
        _, h = self.time_gru(simu_note)
        h = torch.cat([h[0], h[1]], dim=-1)
        return LatentGaussian(self.mean(h), self.log_var(h))


def _conv_out(length, kernel, pool=4):
    return (length - kernel + 1) // pool


class FunctionEncoder(nn.Module):
    """Pitch branch: conv(k=12); time branch: conv(k=4); each ReLU + maxpool(4, 4)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.fn_channels
        self.pitch_conv = nn.Conv1d(1, c, kernel_size=12)
        self.time_conv = nn.Conv1d(1, c, kernel_size=4)
        self.pool = nn.MaxPool1d(kernel_size=4, stride=4)
        p_flat = c * _conv_out(N_PITCH, 12)
        t_flat = c * _conv_out(N_STEP, 4)
        self.pitch_mean = nn.Linear(p_flat, cfg.fn_dim)
        self.pitch_log_var = nn.Linear(p_flat, cfg.fn_dim)
        self.time_mean = nn.Linear(t_flat, cfg.fn_dim)
        self.time_log_var = nn.Linear(t_flat, cfg.fn_dim)

    def _branch(self, x, conv):
        shape = x.shape[:-1]
        h = self.pool(F.relu(conv(x.reshape(-1, 1, x.shape[-1]))))
        return h.flatten(1).reshape(*shape, -1)

    def forward(self, pitch_fn, time_fn) -> tuple[LatentGaussian, LatentGaussian]:
        # functions are onset counts divided by 32 and 128; undo that so the convs see unit-scale inputs
        hp = self._branch(pitch_fn * N_STEP, self.pitch_conv)
        ht = self._branch(time_fn * N_PITCH, self.time_conv)
        return (
            LatentGaussian(self.pitch_mean(hp), self.pitch_log_var(hp)),
            LatentGaussian(self.time_mean(ht), self.time_log_var(ht)),
        )


class FunctionDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h = cfg.fn_dec_hidden
        self.pitch = nn.Sequential(nn.Linear(cfg.fn_dim, h), nn.ReLU(), nn.Linear(h, N_PITCH))
        self.time = nn.Sequential(nn.Linear(cfg.fn_dim, h), nn.ReLU(), nn.Linear(h, N_STEP))

    def forward(self, z_p, z_t):
        return torch.sigmoid(self.pitch(z_p)), torch.sigmoid(self.time(z_t))


class TrackSeparator(nn.Module):
    """Transformer encoder over [mixture token; query tokens] with no positional encoding."""

    def __init__(self, cfg: ModelConfig, n_instruments: int):
        super().__init__()
        d = cfg.d_model
        self.n_instruments = n_instruments
        self.mix_in = nn.Linear(cfg.z_dim, d)
        self.query_in = nn.Linear(2 * cfg.fn_dim, d)
        self.mix_type = nn.Parameter(torch.zeros(d))
        self.instrument = nn.Embedding(n_instruments, d)
        layer = nn.TransformerEncoderLayer(
            d, cfg.n_heads, cfg.d_ff, cfg.dropout, activation="gelu", batch_first=True
        )
        self.encoder = nn.TransformerEncoder(layer, cfg.n_layers, enable_nested_tensor=False)
        self.mean = nn.Linear(d, cfg.z_dim)
        self.log_var = nn.Linear(d, cfg.z_dim)
        nn.init.normal_(self.mix_type, std=0.02)

    def forward(self, z_mix, z_f, instruments) -> LatentGaussian:
        """z_mix (B, z), z_f (B, N, 2*fn), instruments (B, N) long -> (B, N, z) posteriors."""
        if instruments.numel() and (instruments.min() < 0 or instruments.max() >= self.n_instruments):
            raise VocabularyError("instrument id outside the vocabulary")
        mix_tok = (self.mix_in(z_mix) + self.mix_type).unsqueeze(1)
        queries = self.query_in(z_f) + self.instrument(instruments)
        h = self.encoder(torch.cat([mix_tok, queries], dim=1))[:, 1:]
        return LatentGaussian(self.mean(h), self.log_var(h))


class AuxPredictor(nn.Module):
    """Uni-directional GRU from a track latent to per-step (pitch centre, voice intensity, rhythm)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.init = nn.Linear(cfg.z_dim, cfg.aux_hidden)
        self.gru = nn.GRU(cfg.z_dim, cfg.aux_hidden, batch_first=True)
        self.out = nn.Linear(cfg.aux_hidden, 3)

    def forward(self, z):
        """Returns raw outputs (..., 32, 3): sigmoid for all three gives the feature estimate."""
        shape = z.shape[:-1]
        z = z.reshape(-1, z.shape[-1])
        h0 = torch.tanh(self.init(z)).unsqueeze(0)
        out, _ = self.gru(z.unsqueeze(1).expand(-1, N_STEP, -1), h0)
        return self.out(out).reshape(*shape, N_STEP, 3)


@dataclass
class DecoderOutput:
    pitch_logits: torch.Tensor  # (B, T, K, 130)
    dur_logits: torch.Tensor  # (B, T, K, 32)
    pitch: torch.Tensor  # (B, T, K) tokens actually fed forward
    dur: torch.Tensor  # (B, T, K)

    def grids(self) -> np.ndarray:
        return tokens_to_grids(self.pitch, self.dur)


class TrackDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        e = cfg.note_emb
        self.max_notes = cfg.max_simu_notes
        self.embed = NoteEmbedding(e)
        self.summary_gru = nn.GRU(e, cfg.dec_summary_hidden, batch_first=True)
        self.z2time = nn.Linear(cfg.z_dim, cfg.dec_time_hidden)
        self.time_gru = nn.GRU(cfg.z_dim + cfg.dec_summary_hidden + 3, cfg.dec_time_hidden, batch_first=True)
        self.time2pitch = nn.Linear(cfg.dec_time_hidden, cfg.dec_pitch_hidden)
        self.pitch_gru = nn.GRU(e + cfg.dec_time_hidden, cfg.dec_pitch_hidden, batch_first=True)
        self.pitch_out = nn.Linear(cfg.dec_pitch_hidden, N_PITCH_TOKENS)
        self.dur_out = nn.Linear(cfg.dec_pitch_hidden + e, N_DUR)

    def _summarise(self, pitch, dur):
        """Encode the notes of one step (B', K) -> (B', H) for the next time step."""
        lengths = (pitch != PITCH_EOS).long().cumprod(-1).sum(-1) + 1
        lengths = lengths.clamp(max=pitch.shape[-1])
        x = self.embed(pitch, dur)
        packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        _, h = self.summary_gru(packed)
        return h[0]

    def _start_summary(self, b, like):
        tok = torch.full((b, 1), PITCH_SOS, dtype=torch.long, device=like.device)
        return self._summarise(tok, torch.zeros_like(tok))

    @staticmethod
    def _shift_right(pitch, dur):
        sos_p = torch.full_like(pitch[..., :1], PITCH_SOS)
        return torch.cat([sos_p, pitch[..., :-1]], -1), torch.cat([torch.zeros_like(dur[..., :1]), dur[..., :-1]], -1)

    def _pitch_step_forced(self, h_time, pitch, dur):
        """Teacher-forced pitch-wise pass for one or many steps. h_time (M, Ht); tokens (M, K)."""
        m, k = pitch.shape
        in_p, in_d = self._shift_right(pitch, dur)
        x = torch.cat([self.embed(in_p, in_d), h_time.unsqueeze(1).expand(-1, k, -1)], -1)
        h0 = torch.tanh(self.time2pitch(h_time)).unsqueeze(0)
        out, _ = self.pitch_gru(x, h0)
        p_logits = self.pitch_out(out)
        d_logits = self.dur_out(torch.cat([out, self.embed.pitch(pitch)], -1))
        return p_logits, d_logits

    def _pitch_step_free(self, h_time, k):
        """Greedy pitch-wise decoding for one step. Returns logits and chosen tokens, each (M, K, ...)."""
        m = h_time.shape[0]
        h = torch.tanh(self.time2pitch(h_time)).unsqueeze(0)
        prev_p = torch.full((m,), PITCH_SOS, dtype=torch.long, device=h_time.device)
        prev_d = torch.zeros_like(prev_p)
        mask_prev = torch.full_like(prev_p, -1)
        p_logits, d_logits, ps, ds = [], [], [], []
        for _ in range(k):
            x = torch.cat([self.embed(prev_p, prev_d), h_time], -1).unsqueeze(1)
            out, h = self.pitch_gru(x, h)
            out = out[:, 0]
            pl = self.pitch_out(out)
            allowed = grammar_mask(mask_prev)
            p = pl.detach().masked_fill(~allowed, float("-inf")).argmax(-1)
            dl = self.dur_out(torch.cat([out, self.embed.pitch(p)], -1))
            d = torch.where(p < N_PITCH, dl.detach().argmax(-1) + 1, torch.zeros_like(p))
            p_logits.append(pl)
            d_logits.append(dl)
            ps.append(p)
            ds.append(d)
            prev_p, prev_d = p, d
            mask_prev = torch.where(p == PITCH_EOS, torch.full_like(p, PITCH_EOS), p)
        return torch.stack(p_logits, 1), torch.stack(d_logits, 1), torch.stack(ps, 1), torch.stack(ds, 1)

    def forward(
        self,
        z: torch.Tensor,
        aux: torch.Tensor,
        target: NoteTokens | None = None,
        tf_rate: float = 0.0,
        generator: torch.Generator | None = None,
    ) -> DecoderOutput:
        """z (M, z), aux (M, 32, 3) feature values in [0, 1]."""
        m = z.shape[0]
        if target is not None:
            k = target.pitch.shape[-1]
            coins = torch.rand(N_STEP, generator=generator) < tf_rate
        else:
            k = self.max_notes + 1
            coins = torch.zeros(N_STEP, dtype=torch.bool)
        h_time = torch.tanh(self.z2time(z)).unsqueeze(0)
        start = self._start_summary(m, z)

        if target is not None and bool(coins.all()):
            flat_p = target.pitch.reshape(m * N_STEP, k)
            flat_d = target.dur.reshape(m * N_STEP, k)
            summ = self._summarise(flat_p, flat_d).reshape(m, N_STEP, -1)
            summ = torch.cat([start.unsqueeze(1), summ[:, :-1]], 1)
            x = torch.cat([z.unsqueeze(1).expand(-1, N_STEP, -1), summ, aux], -1)
            out, _ = self.time_gru(x, h_time)
            pl, dl = self._pitch_step_forced(out.reshape(m * N_STEP, -1), flat_p, flat_d)
            return DecoderOutput(
                pl.reshape(m, N_STEP, k, -1), dl.reshape(m, N_STEP, k, -1), target.pitch, target.dur
            )

        summ = start
        p_logits, d_logits, ps, ds = [], [], [], []
        for t in range(N_STEP):
            x = torch.cat([z, summ, aux[:, t]], -1).unsqueeze(1)
            out, h_time = self.time_gru(x, h_time)
            out = out[:, 0]
            if coins[t]:
                p, d = target.pitch[:, t], target.dur[:, t]
                pl, dl = self._pitch_step_forced(out, p, d)
            else:
                pl, dl, p, d = self._pitch_step_free(out, k)
            p_logits.append(pl)
            d_logits.append(dl)
            ps.append(p)
            ds.append(d)
            summ = self._summarise(p, d)
        return DecoderOutput(torch.stack(p_logits, 1), torch.stack(d_logits, 1), torch.stack(ps, 1), torch.stack(ds, 1))


class QandA(nn.Module):
    """Mixture encoder, function query-net, separator, aux predictor and track decoder."""

    kind = "qanda"

    def __init__(self, cfg: ModelConfig | None = None, vocab: InstrumentVocab | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.vocab = vocab or default_vocab()
        self.mixture_encoder = MixtureEncoder(self.cfg)
        self.function_encoder = FunctionEncoder(self.cfg)
        self.function_decoder = FunctionDecoder(self.cfg)
        self.separator = TrackSeparator(self.cfg, len(self.vocab))
        self.aux_predictor = AuxPredictor(self.cfg)
        self.track_decoder = TrackDecoder(self.cfg)
        init_log_var_heads(self, self.cfg.log_var_init)

    @property
    def config_hash(self) -> str:
        return config_hash(self.cfg, self.vocab.names)

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "phi1_mixture_encoder": list(self.mixture_encoder.parameters()),
            "phi2_function_encoder": list(self.function_encoder.parameters()),
            "phi3_separator": list(self.separator.parameters()),
            "theta1_function_decoder": list(self.function_decoder.parameters()),
            "theta2_aux_predictor": list(self.aux_predictor.parameters()),
            "theta3_track_decoder": list(self.track_decoder.parameters()),
        }

    def instrument_ids(self, names) -> torch.Tensor:
        return torch.tensor([self.vocab.index(n) for n in names], dtype=torch.long)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    # Domain-level entry points. Each accepts numpy grids or score objects.

    def encode_mixture(self, mixtures) -> LatentGaussian:
        tokens = grids_to_tokens(_as_grids(mixtures), self.cfg.max_simu_notes)
        return self.mixture_encoder(tokens)

    def encode_function(self, pitch_fn, time_fn) -> tuple[LatentGaussian, LatentGaussian]:
        pitch_fn = torch.as_tensor(np.asarray(pitch_fn), dtype=self.dtype)
        time_fn = torch.as_tensor(np.asarray(time_fn), dtype=self.dtype)
        return self.function_encoder(pitch_fn, time_fn)

    def encode_tracks(self, tracks) -> tuple[LatentGaussian, LatentGaussian]:
        pf, tf = track_function_batch(_as_grids(tracks))
        return self.encode_function(pf, tf)

    def decode_function(self, z_p, z_t):
        return self.function_decoder(z_p, z_t)

    def separate(self, z_mix, z_f, instruments) -> LatentGaussian:
        """z_mix (B, z) or (z,); z_f (B, N, 2fn) or (N, 2fn); instruments as names or ids."""
        single = z_mix.dim() == 1
        if single:
            z_mix, z_f = z_mix.unsqueeze(0), z_f.unsqueeze(0)
        if not torch.is_tensor(instruments):
            instruments = self.instrument_ids(instruments)
        if instruments.dim() == 1:
            instruments = instruments.unsqueeze(0).expand(z_mix.shape[0], -1)
        out = self.separator(z_mix, z_f, instruments)
        return out[0] if single else out

    def predict_aux(self, z_track) -> torch.Tensor:
        """Feature estimates in [0, 1], shape (..., 32, 3)."""
        return torch.sigmoid(self.aux_predictor(z_track))

    def decode_track(self, z_track, aux=None, teacher: NoteTokens | None = None, tf_rate=0.0, generator=None) -> DecoderOutput:
        if aux is None:
            aux = self.predict_aux(z_track)
        return self.track_decoder(z_track, aux, teacher, tf_rate, generator)


def ground_truth_aux(grids) -> torch.Tensor:
    return torch.as_tensor(aux_features_batch(np.asarray(grids)))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
