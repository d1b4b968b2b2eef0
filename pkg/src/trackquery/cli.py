"""`trackquery` command line: corpus preparation, training, rearrangement tasks and voice separation."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import plotting
from .instruments import VocabularyError
from .rearrange import (
    EmptyDatabaseError,
    MissingMelodyError,
    RearrangeOptions,
    ReferenceDB,
    ReferenceLengthError,
    rearrange_long,
)
from .score import (
    MidiParseError,
    QuantizeConfig,
    assign_splits,
    condense_mixture,
    ingest_midi_file,
    load_corpus,
    save_corpus,
    segments_to_midi,
)
from .synthetic import chorale_corpus, piano_corpus, pop_corpus
from .training import (
    ConfigurationError,
    IncompatibleCheckpointError,
    TrainConfig,
    load_checkpoint,
    train,
)
from .voicesep import (
    N_VOICES,
    QandAV,
    accuracy_on,
    entry_hints,
    evaluate_voicesep,
    ground_truth_voices,
    separate_voices,
    voice_function_posterior,
)

CHECKPOINT_ENV = "TRACKQUERY_CHECKPOINT_DIR"
SYNTHETIC = {"pop": pop_corpus, "piano": piano_corpus, "chorale": chorale_corpus}

log = logging.getLogger("trackquery")


class CommandError(Exception):
    """Reported on stderr with exit status 1."""


def _seed_all(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed)


def _checkpoint_path(arg: str | None, default_name: str = "best.pt") -> Path:
    if arg:
        return Path(arg)
    base = os.environ.get(CHECKPOINT_ENV)
    if not base:
        raise CommandError(f"no checkpoint given (use --checkpoint or set {CHECKPOINT_ENV})")
    return Path(base) / default_name


def _load_model(arg: str | None, default_name: str = "best.pt"):
    path = _checkpoint_path(arg, default_name)
    try:
        return load_checkpoint(path).model
    except FileNotFoundError as exc:
        raise CommandError(str(exc)) from exc
    except IncompatibleCheckpointError as exc:
        raise CommandError(f"incompatible checkpoint {path}: {exc}") from exc


def _read_midi(path: Path, strict: bool = True):
    try:
        return ingest_midi_file(path, QuantizeConfig(keep_empty_segments=True))
    except (MidiParseError, OSError) as exc:
        if strict:
            raise CommandError(f"{path}: {exc}") from exc
        warnings.warn(f"skipping {path}: {exc}", stacklevel=2)
        return None


def _write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    print(f"wrote {path}")


def _write_json(path: Path, obj) -> None:
    _write_bytes(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode())


# --- subcommands -------------------------------------------------------------

def cmd_prepare(args) -> None:
    corpus_name = args.corpus or (args.synthetic or "midi")
    if args.synthetic:
        segments = SYNTHETIC[args.synthetic](args.n, seed=args.seed)
    else:
        if not args.midi_dir:
            raise CommandError("prepare needs a MIDI directory or --synthetic")
        files = sorted(p for p in Path(args.midi_dir).rglob("*") if p.suffix.lower() in (".mid", ".midi"))
        if not files:
            raise CommandError(f"no MIDI files under {args.midi_dir}")
        segments = []
        for f in files:
            segs = _read_midi(f, strict=False)
            segments += [s for s in segs or [] if s.tracks and any(t.n_notes for t in s.tracks)]
    if not segments:
        raise CommandError("no segments extracted")
    split_of = assign_splits([s.source_id for s in segments], seed=args.seed)
    splits = [split_of[s.source_id] for s in segments]
    path = save_corpus(args.out, segments, splits, [corpus_name] * len(segments))
    counts = {k: splits.count(k) for k in ("train", "validation", "test")}
    print(f"wrote {path} ({len(segments)} segments: {counts})")


def cmd_train(args) -> None:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {k: getattr(args, k) for k in ("epochs", "batch_size", "seed") if getattr(args, k) is not None}
    cfg = replace(cfg, **overrides)
    _seed_all(cfg.seed)
    corpus = load_corpus(args.corpus)
    out = Path(args.out)
    model, posterior = None, None
    if args.voicesep:
        base = _load_model(args.base)
        voices = tuple(corpus.segments[0].instruments[:N_VOICES])
        model = QandAV.from_base(base, voices)
        posterior = voice_function_posterior(args.hint_rate)
    elif args.base:
        model = _load_model(args.base)
    try:
        result = train(corpus, cfg, out, resume=args.resume, model=model, function_posterior=posterior)
    except (ConfigurationError, IncompatibleCheckpointError) as exc:
        raise CommandError(str(exc)) from exc
    plotting.plot_loss_curves(result.history, out / "loss_curves.png")
    print(f"wrote {result.best_path}, {result.last_path}, {out / 'train_log.jsonl'}, {out / 'loss_curves.png'}")


def cmd_build_refdb(args) -> None:
    corpus = load_corpus(args.corpus)
    segments = corpus.segments if args.split == "all" else corpus.split(args.split)
    if not segments:
        raise CommandError(f"split {args.split!r} is empty")
    path = ReferenceDB(segments).save(args.out)
    print(f"wrote {path} ({len(segments)} entries)")


def _rearrange_task(args, preserve_melody: bool) -> None:
    _seed_all(args.seed)
    model = _load_model(args.checkpoint)
    source = _read_midi(Path(args.source))
    if not source:
        raise CommandError(f"{args.source}: no 4/4 content")
    opts = RearrangeOptions(preserve_melody=preserve_melody, sample_melody_posterior=args.sample_melody, alpha=args.alpha, seed=args.seed)
    try:
        if args.reference:
            reference = _read_midi(Path(args.reference))
            out = rearrange_long(source, model, opts, reference=reference)
        elif args.refdb:
            out = rearrange_long(source, model, opts, db=ReferenceDB.load(args.refdb))
        else:
            raise CommandError("give --reference or --refdb")
    except (EmptyDatabaseError, MissingMelodyError, ReferenceLengthError, VocabularyError) as exc:
        raise CommandError(str(exc)) from exc
    _write_bytes(Path(args.out), segments_to_midi(out, model.vocab, tempo=source[0].tempo))
    if args.figure:
        plotting.plot_segment(out[0], args.figure, title="first segment")
        print(f"wrote {args.figure}")


def cmd_reinstrument(args) -> None:
    _rearrange_task(args, preserve_melody=False)


def cmd_pianocover(args) -> None:
    _rearrange_task(args, preserve_melody=False)


def cmd_orchestrate(args) -> None:
    _rearrange_task(args, preserve_melody=args.preserve_melody)


def cmd_voicesep(args) -> None:
    _seed_all(args.seed)
    model = _load_model(args.checkpoint, "voicesep.pt")
    if not isinstance(model, QandAV):
        raise CommandError("voicesep needs a checkpoint fine-tuned for voice separation (train --voicesep)")
    source = _read_midi(Path(args.input))
    if not source:
        raise CommandError(f"{args.input}: no 4/4 content")
    out, flagged = [], 0
    for seg in source:
        hints = None
        if args.hints:
            if seg.n_tracks != N_VOICES:
                raise CommandError(f"--hints needs a {N_VOICES}-track input (window {seg.index} has {seg.n_tracks})")
            hints = entry_hints(ground_truth_voices(seg, ordered=False))
        sep = separate_voices(condense_mixture(seg), model, hints)
        flagged += sep.assignment.flagged
        out.append(replace(seg, tracks=tuple(sep.tracks)))
    _write_bytes(Path(args.out), segments_to_midi(out, model.vocab, tempo=source[0].tempo))
    if flagged:
        print(f"warning: {flagged} window(s) kept unresolved voice conflicts", file=sys.stderr)


def cmd_eval_voicesep(args) -> None:
    _seed_all(args.seed)
    base = _load_model(args.checkpoint)
    corpus = load_corpus(args.corpus)
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig(epochs=10, batch_size=8)
    cfg = replace(cfg, seed=args.seed, model=base.cfg, augment=False)
    out = Path(args.out)
    try:
        report = evaluate_voicesep(corpus, base, cfg, out / "folds", folds=args.folds, seed=args.seed)
    except ConfigurationError as exc:
        raise CommandError(str(exc)) from exc
    baseline = accuracy_on(corpus.segments, None, rng=np.random.default_rng(args.seed))
    payload = {**report.to_dict(), "random_baseline": baseline}
    _write_json(out / "voicesep_report.json", payload)
    _write_bytes(out / "voicesep_report.csv", report.to_csv().encode())
    plotting.plot_fold_accuracy(report.folds, out / "fold_accuracy.png", baseline)
    print(f"wrote {out / 'fold_accuracy.png'}")
    sys.stdout.write(report.to_csv())


# --- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trackquery", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="MIDI directory (or synthetic corpus) -> manifest")
    s.add_argument("midi_dir", nargs="?")
    s.add_argument("--out", required=True)
    s.add_argument("--synthetic", choices=sorted(SYNTHETIC))
    s.add_argument("--n", type=int, default=64, help="segments for --synthetic")
    s.add_argument("--corpus", help="corpus label used for batch grouping")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="manifest + config -> checkpoints, log, loss figure")
    s.add_argument("corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="JSON TrainConfig")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume")
    s.add_argument("--base", help="start from this checkpoint")
    s.add_argument("--voicesep", action="store_true", help="fine-tune --base for voice separation")
    s.add_argument("--hint-rate", type=float, default=0.5)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("build-refdb", help="manifest -> reference database")
    s.add_argument("corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="all", choices=("all", "train", "validation", "test"))
    s.set_defaults(func=cmd_build_refdb)

    for name, func, helptext in (
        ("reinstrument", cmd_reinstrument, "re-instrumentation"),
        ("pianocover", cmd_pianocover, "piano cover arrangement"),
        ("orchestrate", cmd_orchestrate, "orchestration from a piano source"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--source", required=True)
        s.add_argument("--reference", help="fixed reference MIDI")
        s.add_argument("--refdb", help="reference database directory")
        s.add_argument("--checkpoint")
        s.add_argument("--out", required=True)
        s.add_argument("--alpha", type=float, default=0.2)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--figure", help="piano-roll PNG of the first output segment")
        s.add_argument("--sample-melody", action="store_true", help="sample the melody track latent")
        if name == "orchestrate":
            s.add_argument("--preserve-melody", action="store_true")
        s.set_defaults(func=func)

    s = sub.add_parser("voicesep", help="mixture MIDI -> 4-voice MIDI")
    s.add_argument("--input", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--out", required=True)
    s.add_argument("--hints", action="store_true", help="use entry notes of the input's tracks")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_voicesep)

    s = sub.add_parser("eval-voicesep", help="k-fold voice separation report")
    s.add_argument("corpus")
    s.add_argument("--checkpoint")
    s.add_argument("--out", required=True)
    s.add_argument("--folds", type=int, default=10)
    s.add_argument("--config", help="JSON TrainConfig for per-fold fine-tuning")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval_voicesep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    warnings.simplefilter("default")
    try:
        args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
