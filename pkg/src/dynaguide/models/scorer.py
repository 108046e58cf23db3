"""Two-tower step-aware preference scorer.

A vision tower embeds (image, t/T) and a text tower embeds the prompt,
both to unit vectors; the raw preference score is exp(tau * cosine).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..diffusion import NoiseSchedule
from .denoiser import time_features
from .text import TextEncoding, Vocabulary, encode_text

SCORER_FORMAT_VERSION = 1


@dataclass(frozen=True)
class PreferenceScorerConfig:
    vocab_size: int
    image_size: int = 32
    channels: int = 3
    embed_dim: int = 64
    text_dim: int = 64
    max_tokens: int = 32
    time_dim: int = 64
    tau: float = 2.0
    version: int = SCORER_FORMAT_VERSION

    def to_dict(self) -> dict:
        return asdict(self)


class PreferenceScorer(nn.Module):
    def __init__(self, config: PreferenceScorerConfig):
        super().__init__()
        if config.tau <= 0:
            raise ValueError(f"tau must be positive, got {config.tau}")
        self.config = config
        d = config.embed_dim

        self.vision_convs = nn.Sequential(
            nn.Conv2d(config.channels, 16, 3, stride=2, padding=1),  # 16x16
            nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),  # 8x8
            nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),  # 4x4
            nn.SiLU(),
        )
        self.time_mlp = nn.Sequential(
            nn.Linear(config.time_dim, config.time_dim), nn.SiLU()
        )
        self.vision_head = nn.Sequential(
            nn.Linear(64 + config.time_dim, 2 * d), nn.SiLU(), nn.Linear(2 * d, d)
        )
        self.tok_emb = nn.Embedding(config.vocab_size, config.text_dim)
        self.pos_emb = nn.Embedding(config.max_tokens, config.text_dim)
        self.text_head = nn.Sequential(
            nn.Linear(config.text_dim, 2 * d), nn.SiLU(), nn.Linear(2 * d, d)
        )

    @property
    def tau(self) -> float:
        return self.config.tau

    def vision_embed(self, image: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) images + (B,) normalized steps -> unit vectors (B, d)."""
        feats = self.vision_convs(image).mean(dim=(2, 3))
        tfeat = self.time_mlp(time_features(u.to(image.dtype), self.config.time_dim))
        out = self.vision_head(torch.cat([feats, tfeat], dim=-1))
        return F.normalize(out, dim=-1, eps=1e-12)

    def text_embed(
        self, token_ids: torch.Tensor, pad_mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        """(B, n) ids -> unit vectors (B, d); padding excluded from pooling."""
        n = token_ids.shape[-1]
        pos = torch.arange(n, device=token_ids.device)
        emb = self.tok_emb(token_ids) + self.pos_emb(pos)[None, :, :]
        if pad_mask is not None:
            keep = (~pad_mask).to(emb.dtype)[:, :, None]
            pooled = (emb * keep).sum(dim=1) / keep.sum(dim=1).clamp_min(1e-12)
        else:
            pooled = emb.mean(dim=1)
        return F.normalize(self.text_head(pooled), dim=-1, eps=1e-12)

    def cosine(
        self,
        image: torch.Tensor,
        u: torch.Tensor,
        token_ids: torch.Tensor,
        pad_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        fv = self.vision_embed(image, u)
        ft = self.text_embed(token_ids, pad_mask)
        return (fv * ft).sum(dim=-1)


def scorer_cosine(
    image: torch.Tensor,
    text: TextEncoding,
    t: int,
    scorer: PreferenceScorer,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Vision-text cosine for one unbatched (C, H, W) image; differentiable."""
    if image.ndim != 3:
        raise ValueError(f"expected (C, H, W) image, got shape {tuple(image.shape)}")
    t = schedule._check_step(t)
    u = torch.tensor([t / schedule.T], dtype=image.dtype, device=image.device)
    return scorer.cosine(image[None], u, text.token_ids[None].to(image.device))[0]


def preference_score(
    image: torch.Tensor,
    prompt: str | TextEncoding,
    t: int,
    scorer: PreferenceScorer,
    schedule: NoiseSchedule,
    vocab: Vocabulary | None = None,
) -> float:
    """Raw preference score exp(tau * cos(f_V(image, t), f_T(prompt)))."""
    if isinstance(prompt, TextEncoding):
        text = prompt
    else:
        if vocab is None:
            raise ValueError("pass a vocab when prompt is a raw string")
        text = encode_text(prompt, vocab, scorer.config.max_tokens)
    with torch.no_grad():
        cos = scorer_cosine(image, text, t, scorer, schedule)
    return float(torch.exp(scorer.tau * cos))
