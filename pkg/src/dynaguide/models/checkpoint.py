"""Self-describing checkpoint container for the toy models."""

from __future__ import annotations

from pathlib import Path

import torch

from ..errors import CheckpointError
from .denoiser import ToyDenoiser, ToyDenoiserConfig
from .scorer import PreferenceScorer, PreferenceScorerConfig
from .text import Vocabulary

CHECKPOINT_FORMAT_VERSION = 1

_KINDS = {
    "denoiser": (ToyDenoiser, ToyDenoiserConfig),
    "scorer": (PreferenceScorer, PreferenceScorerConfig),
}


def save_checkpoint(
    model: ToyDenoiser | PreferenceScorer,
    vocab: Vocabulary,
    path: str | Path,
    extra: dict | None = None,
) -> Path:
    if isinstance(model, ToyDenoiser):
        kind = "denoiser"
    elif isinstance(model, PreferenceScorer):
        kind = "scorer"
    else:
        raise CheckpointError(f"unsupported model type {type(model).__name__}")
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": kind,
        "config": model.config.to_dict(),
        "vocab_words": list(vocab.words),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(
    path: str | Path, expected_kind: str | None = None
) -> tuple[ToyDenoiser | PreferenceScorer, Vocabulary]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unpickling error types
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    for key in ("format_version", "kind", "config", "vocab_words", "state_dict"):
        if key not in payload:
            raise CheckpointError(f"checkpoint {path} missing field {key!r}")
    if payload["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format version {payload['format_version']}, "
            f"this build reads {CHECKPOINT_FORMAT_VERSION}"
        )
    kind = payload["kind"]
    if kind not in _KINDS:
        raise CheckpointError(f"checkpoint {path} has unknown kind {kind!r}")
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(f"expected a {expected_kind} checkpoint, found {kind}")
    model_cls, config_cls = _KINDS[kind]
    model = model_cls(config_cls(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    vocab = Vocabulary(words=tuple(payload["vocab_words"]))
    return model, vocab
