"""Closed caption grammar shared by the tokenizer, rule parser, and dataset.

The grammar lives in a versioned JSON asset so every consumer (vocabulary
construction, caption templating, rule-based graph extraction) agrees on
the word lists.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .errors import ConfigError

_REQUIRED_KEYS = ("version", "nouns", "colors", "sizes", "determiners", "connectors")


@dataclass(frozen=True)
class Grammar:
    version: int
    nouns: tuple[str, ...]
    colors: tuple[str, ...]
    sizes: tuple[str, ...]
    determiners: tuple[str, ...]
    connectors: tuple[str, ...]

    @property
    def adjectives(self) -> tuple[str, ...]:
        return self.colors + self.sizes

    def words(self) -> tuple[str, ...]:
        """All grammar words in a stable order."""
        return self.determiners + self.connectors + self.colors + self.sizes + self.nouns


def _from_payload(payload: dict) -> Grammar:
    missing = [k for k in _REQUIRED_KEYS if k not in payload]
    if missing:
        raise ConfigError(f"grammar payload missing keys: {missing}")
    return Grammar(
        version=int(payload["version"]),
        nouns=tuple(payload["nouns"]),
        colors=tuple(payload["colors"]),
        sizes=tuple(payload["sizes"]),
        determiners=tuple(payload["determiners"]),
        connectors=tuple(payload["connectors"]),
    )


def load_grammar(path: str | Path | None = None) -> Grammar:
    """Load the packaged grammar, or a user-supplied JSON override."""
    if path is None:
        text = resources.files("dynaguide.assets").joinpath("grammar.json").read_text()
    else:
        text = Path(path).read_text()
    return _from_payload(json.loads(text))
