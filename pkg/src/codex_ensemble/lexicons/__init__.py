"""Lexicon files shipped with the package and a loader for user overrides.

Every lexicon is UTF-8 text, one entry per line, ``#`` starts a comment.
Two-column lexicons separate their columns with a tab.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from importlib import resources
from pathlib import Path


def read_entries(text: str) -> list[str]:
    out = []
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append(line)
    return out


def _pairs(text: str) -> dict[str, str]:
    pairs = {}
    for entry in read_entries(text):
        key, value = entry.split("\t", 1)
        pairs[key.strip().lower()] = value.strip()
    return pairs


@dataclass(frozen=True)
class Lexicons:
    categories: dict[str, str]
    category_scores: dict[str, float]
    units: frozenset[str]
    stopwords: frozenset[str]
    cancellation: frozenset[str]
    locations: tuple[str, ...]
    positions: tuple[str, ...]

    @classmethod
    def from_dir(cls, directory: str | Path | None = None) -> "Lexicons":
        """Load all lexicons; files missing from ``directory`` fall back to the packaged ones."""

        def load(name: str) -> str:
            if directory is not None:
                path = Path(directory) / name
                if path.exists():
                    return path.read_text(encoding="utf-8")
            return resources.files(__package__).joinpath(name).read_text(encoding="utf-8")

        return cls(
            categories=_pairs(load("categories.txt")),
            category_scores={k: float(v) for k, v in _pairs(load("category_scores.txt")).items()},
            units=frozenset(e.lower() for e in read_entries(load("units.txt"))),
            stopwords=frozenset(e.lower() for e in read_entries(load("stopwords.txt"))),
            cancellation=frozenset(e.lower() for e in read_entries(load("cancellation.txt"))),
            locations=tuple(sorted({e.lower() for e in read_entries(load("locations.txt"))})),
            positions=tuple(sorted({e.lower() for e in read_entries(load("positions.txt"))})),
        )


@functools.lru_cache(maxsize=None)
def default_lexicons() -> Lexicons:
    return Lexicons.from_dir(None)
