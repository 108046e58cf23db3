"""Tokenizer and vocabulary for the closed caption grammar."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import torch

from ..grammar import Grammar

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_WORD_RE = re.compile(r"[a-z0-9']+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split into word tokens, dropping punctuation."""
    return _WORD_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    """Stable word → id mapping with reserved pad/unk slots."""

    words: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "index", {w: i for i, w in enumerate(self.words)})

    @property
    def pad_id(self) -> int:
        return self.index[PAD_TOKEN]

    @property
    def unk_id(self) -> int:
        return self.index[UNK_TOKEN]

    def __len__(self) -> int:
        return len(self.words)

    def id_of(self, word: str) -> int:
        return self.index.get(word, self.unk_id)

    @classmethod
    def from_grammar(cls, grammar: Grammar) -> "Vocabulary":
        seen: list[str] = [PAD_TOKEN, UNK_TOKEN]
        for w in grammar.words():
            if w not in seen:
                seen.append(w)
        return cls(words=tuple(seen))


@dataclass
class TextEncoding:
    """A tokenized prompt.

    ``words`` keeps the surface forms (so out-of-vocabulary words survive
    for graph binding), ``token_ids`` the vocabulary ids aligned with them.
    ``embeddings`` is filled lazily by whichever model embeds the text.
    """

    prompt: str
    words: tuple[str, ...]
    token_ids: torch.Tensor  # (n,) long
    vocab: Vocabulary
    embeddings: torch.Tensor | None = None
    truncated: bool = False

    @property
    def tokens(self) -> list[int]:
        return self.token_ids.tolist()

    @property
    def vocab_index(self) -> dict[str, int]:
        return self.vocab.index

    def __len__(self) -> int:
        return len(self.words)


def empty_encoding(vocab: Vocabulary) -> TextEncoding:
    """A prompt-free encoding: one padding token, no surface words.

    Models treat an all-padding context as the learned null condition, so
    this is how unconditional sampling is requested.
    """
    return TextEncoding(
        prompt="",
        words=(),
        token_ids=torch.tensor([vocab.pad_id], dtype=torch.long),
        vocab=vocab,
    )


def encode_text(prompt: str, vocab: Vocabulary, max_tokens: int = 32) -> TextEncoding:
    """Tokenize a prompt against the vocabulary.

    Deterministic; unknown words map to the UNK id but keep their surface
    form. Prompts longer than max_tokens are truncated and flagged. An
    empty prompt is rejected here; unconditional sampling goes through
    empty_encoding instead.
    """
    if not isinstance(prompt, str) or not prompt.strip():
        raise ValueError("prompt must be a nonempty string")
    words = tokenize(prompt)
    if not words:
        raise ValueError(f"prompt contains no tokens: {prompt!r}")
    truncated = len(words) > max_tokens
    words = words[:max_tokens]
    ids = torch.tensor([vocab.id_of(w) for w in words], dtype=torch.long)
    return TextEncoding(
        prompt=prompt,
        words=tuple(words),
        token_ids=ids,
        vocab=vocab,
        truncated=truncated,
    )
