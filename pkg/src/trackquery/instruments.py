"""Instrument vocabulary: 34 Slakh-style classes plus the three POP909 piano parts."""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path


class VocabularyError(KeyError):
    """Raised for instrument names that are not in the vocabulary."""


@dataclass(frozen=True)
class InstrumentVocab:
    names: tuple[str, ...]
    programs: tuple[int, ...]
    program_to_class: tuple[str, ...]
    track_name_parts: dict
    roles: dict
    melody_fallback: str

    def __len__(self):
        return len(self.names)

    def __contains__(self, name):
        return name in self.names

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise VocabularyError(f"unknown instrument {name!r}") from None

    def name(self, idx: int) -> str:
        return self.names[idx]

    def gm_program(self, name: str) -> int:
        return self.programs[self.index(name)]

    def from_program(self, program: int) -> str:
        return self.program_to_class[program]

    def from_track(self, track_name: str | None, program: int) -> tuple[str, str | None]:
        """Resolve (instrument, role) for a MIDI track.

        A track name that is itself a vocabulary entry wins, then POP909 part
        names, then the GM program.
        """
        label = (track_name or "").strip()
        if label.endswith("(melody)"):
            base, _ = self.from_track(label[: -len("(melody)")], program)
            return base, "melody"
        if label in self.names:
            return label, self.roles.get(label)
        part = self.track_name_parts.get(label.upper())
        if part is not None:
            return part, self.roles[part]
        role = "melody" if "melody" in label.lower() else None
        return self.from_program(program), role

    def as_list(self) -> list[str]:
        return list(self.names)


def load_vocab(path: str | Path | None = None) -> InstrumentVocab:
    if path is None:
        text = resources.files("trackquery").joinpath("data/instruments.json").read_text()
    else:
        text = Path(path).read_text()
    table = json.loads(text)
    names, programs = [], []
    program_to_class = [""] * 128
    for entry in table["classes"]:
        names.append(entry["name"])
        programs.append(entry["program"])
        for p in entry["programs"]:
            program_to_class[p] = entry["name"]
    missing = [p for p, c in enumerate(program_to_class) if not c]
    if missing:
        raise ValueError(f"instrument table leaves programs unmapped: {missing}")
    parts, roles = {}, {}
    for entry in table.get("piano_parts", []):
        names.append(entry["name"])
        programs.append(entry["program"])
        roles[entry["name"]] = entry.get("role")
        for tn in entry.get("track_names", []):
            parts[tn.upper()] = entry["name"]
    return InstrumentVocab(
        names=tuple(names),
        programs=tuple(programs),
        program_to_class=tuple(program_to_class),
        track_name_parts=parts,
        roles=roles,
        melody_fallback=table.get("melody_fallback", "Pipe"),
    )


@lru_cache(maxsize=1)
def default_vocab() -> InstrumentVocab:
    return load_vocab()
