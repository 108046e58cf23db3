"""Small conditional UNet denoiser with observable cross-attention.

The network predicts the forward noise eps from (z_t, t/T, caption).
Text enters only through two cross-attention blocks at the 16x16
resolution (one on the down path, one on the up path); their logits
QK^T/sqrt(d_head) are exposed so the sampler can build per-token spatial
attention maps.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..diffusion import NoiseSchedule
from .text import TextEncoding

DENOISER_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ToyDenoiserConfig:
    vocab_size: int
    image_size: int = 32
    channels: int = 3
    base_channels: int = 16
    mid_channels: int = 32
    attn_dim: int = 64
    text_dim: int = 64
    heads: int = 4
    max_tokens: int = 32
    time_dim: int = 64
    version: int = DENOISER_FORMAT_VERSION

    def to_dict(self) -> dict:
        return asdict(self)


def time_features(u: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of normalized time u in (0, 1]."""
    half = dim // 2
    freqs = torch.exp(
        torch.arange(half, dtype=u.dtype, device=u.device)
        * (-math.log(10_000.0) / max(half - 1, 1))
    )
    args = u[:, None] * 1000.0 * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        groups = math.gcd(8, c_in)
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(math.gcd(8, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Multi-head cross-attention from image features to text tokens.

    Returns the residual-updated features together with the raw per-head
    logits (B, heads, HW, n) so callers can derive attention maps.
    """

    def __init__(self, channels: int, text_dim: int, attn_dim: int, heads: int):
        super().__init__()
        if attn_dim % heads != 0:
            raise ValueError(f"attn_dim {attn_dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = attn_dim // heads
        self.norm = nn.GroupNorm(math.gcd(8, channels), channels)
        self.to_q = nn.Conv2d(channels, attn_dim, 1)
        self.to_k = nn.Linear(text_dim, attn_dim)
        self.to_v = nn.Linear(text_dim, attn_dim)
        self.proj = nn.Conv2d(attn_dim, channels, 1)

    def forward(
        self,
        x: torch.Tensor,
        context: torch.Tensor,
        pad_mask: torch.Tensor | None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        b, _, hgt, wid = x.shape
        n = context.shape[1]
        q = self.to_q(self.norm(x)).reshape(b, self.heads, self.head_dim, hgt * wid)
        q = q.permute(0, 1, 3, 2)  # (B, heads, HW, dh)
        k = self.to_k(context).reshape(b, n, self.heads, self.head_dim).permute(0, 2, 1, 3)
        v = self.to_v(context).reshape(b, n, self.heads, self.head_dim).permute(0, 2, 1, 3)
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)  # (B, heads, HW, n)

        feat_logits = logits
        if pad_mask is not None:
            mask = pad_mask
            all_pad = mask.all(dim=-1)
            if all_pad.any():
                # fully padded prompt = unconditional: attend uniformly over
                # the pad embedding as a learned null context instead of
                # producing an all -inf softmax row
                mask = mask & ~all_pad[:, None]
            feat_logits = logits.masked_fill(mask[:, None, None, :], float("-inf"))
        attn = feat_logits.softmax(dim=-1)
        out = (attn @ v).permute(0, 1, 3, 2).reshape(b, -1, hgt, wid)
        return x + self.proj(out), logits


class Downsample(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.conv = nn.Conv2d(c, c, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.conv = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class ToyDenoiser(nn.Module):
    """Noise predictor; forward returns (eps_hat, [per-layer attention logits])."""

    attention_layer_ids = ("down.16", "up.16")

    def __init__(self, config: ToyDenoiserConfig):
        super().__init__()
        self.config = config
        c0, c1 = config.base_channels, config.mid_channels
        td = config.time_dim

        self.time_mlp = nn.Sequential(
            nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td)
        )
        self.tok_emb = nn.Embedding(config.vocab_size, config.text_dim)
        self.pos_emb = nn.Embedding(config.max_tokens, config.text_dim)
        self.text_mlp = nn.Sequential(
            nn.Linear(config.text_dim, config.text_dim),
            nn.SiLU(),
            nn.Linear(config.text_dim, config.text_dim),
        )

        self.conv_in = nn.Conv2d(config.channels, c0, 3, padding=1)
        self.down1 = ResBlock(c0, c0, td)          # 32x32
        self.downsample1 = Downsample(c0)          # -> 16x16
        self.down2 = ResBlock(c0, c1, td)
        self.attn_down = CrossAttention(c1, config.text_dim, config.attn_dim, config.heads)
        self.downsample2 = Downsample(c1)          # -> 8x8
        self.mid = ResBlock(c1, c1, td)
        self.upsample1 = Upsample(c1)              # -> 16x16
        self.up1 = ResBlock(c1 + c1, c1, td)
        self.attn_up = CrossAttention(c1, config.text_dim, config.attn_dim, config.heads)
        self.upsample2 = Upsample(c1)              # -> 32x32
        self.up2 = ResBlock(c1 + c0, c0, td)
        self.norm_out = nn.GroupNorm(math.gcd(8, c0), c0)
        self.conv_out = nn.Conv2d(c0, config.channels, 3, padding=1)

    def embed_text(self, token_ids: torch.Tensor) -> torch.Tensor:
        """(B, n) long ids -> (B, n, text_dim) context vectors."""
        n = token_ids.shape[-1]
        if n > self.config.max_tokens:
            raise ValueError(
                f"{n} tokens exceeds the model's max_tokens {self.config.max_tokens}"
            )
        pos = torch.arange(n, device=token_ids.device)
        emb = self.tok_emb(token_ids) + self.pos_emb(pos)[None, :, :]
        return self.text_mlp(emb)

    def forward(
        self,
        z: torch.Tensor,
        u: torch.Tensor,
        token_ids: torch.Tensor,
        pad_mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        if z.ndim != 4 or z.shape[1] != self.config.channels:
            raise ValueError(f"latent shape {tuple(z.shape)} incompatible with config")
        temb = self.time_mlp(time_features(u.to(z.dtype), self.config.time_dim))
        context = self.embed_text(token_ids).to(z.dtype)

        h1 = self.down1(self.conv_in(z), temb)
        h2 = self.down2(self.downsample1(h1), temb)
        h2, logits_down = self.attn_down(h2, context, pad_mask)
        h3 = self.mid(self.downsample2(h2), temb)
        h = self.up1(torch.cat([self.upsample1(h3), h2], dim=1), temb)
        h, logits_up = self.attn_up(h, context, pad_mask)
        h = self.up2(torch.cat([self.upsample2(h), h1], dim=1), temb)
        eps = self.conv_out(F.silu(self.norm_out(h)))
        return eps, [logits_down, logits_up]


@dataclass
class AttentionBundle:
    """Aggregated per-token spatial attention maps.

    maps[u] is the token-u map, nonnegative and summing to 1 over spatial
    positions: softmax over positions is applied to each head's logits,
    then heads and layers are averaged (the mean of normalized maps is
    still normalized). Maps exist for every token index; ``pad_mask``
    marks entries that must be excluded from losses.
    """

    maps: torch.Tensor  # (n_tokens, H, W)
    layer_ids: tuple[str, ...]
    head_count: int
    pad_mask: torch.Tensor | None = None  # (n_tokens,) bool, True = padding

    @property
    def n_tokens(self) -> int:
        return self.maps.shape[0]


def aggregate_attention(
    logits_list: list[torch.Tensor],
    layer_ids: tuple[str, ...],
    pad_mask: torch.Tensor | None = None,
) -> AttentionBundle:
    """Turn per-layer logits (1, heads, HW, n) into an AttentionBundle."""
    if not logits_list:
        raise ValueError("no attention logits to aggregate")
    per_layer = []
    heads = logits_list[0].shape[1]
    for logits in logits_list:
        if logits.shape[0] != 1:
            raise ValueError("attention aggregation expects a single sample")
        hw = logits.shape[2]
        side = int(math.isqrt(hw))
        if side * side != hw:
            raise ValueError(f"non-square spatial size {hw}")
        probs = logits.softmax(dim=2)  # normalize over spatial positions
        probs = probs.mean(dim=1)  # mean over heads -> (1, HW, n)
        per_layer.append(probs[0].T.reshape(-1, side, side))  # (n, H, W)
    maps = torch.stack(per_layer).mean(dim=0)
    mask = pad_mask[0] if pad_mask is not None and pad_mask.ndim == 2 else pad_mask
    return AttentionBundle(maps=maps, layer_ids=layer_ids, head_count=heads, pad_mask=mask)


@dataclass
class ScoreOutput:
    """Score estimate of grad log p(z_t) plus the attention observed en route."""

    score: torch.Tensor
    attention: AttentionBundle
    noise_pred: torch.Tensor


def denoise(
    z_t: torch.Tensor,
    t: int,
    text: TextEncoding,
    model: ToyDenoiser,
    schedule: NoiseSchedule,
) -> ScoreOutput:
    """Run the denoiser at step t and convert to score form.

    The model predicts noise; score = -eps_hat / sigma_t. Accepts an
    unbatched (C, H, W) latent and keeps any autograd graph intact so
    objectives can differentiate through the call.
    """
    if z_t.ndim != 3:
        raise ValueError(f"expected (C, H, W) latent, got shape {tuple(z_t.shape)}")
    t = schedule._check_step(t)
    if t == 0:
        raise IndexError("denoise needs t >= 1")
    u = torch.tensor([t / schedule.T], dtype=z_t.dtype, device=z_t.device)
    eps, logits = model(z_t[None], u, text.token_ids[None].to(z_t.device))
    bundle = aggregate_attention(logits, model.attention_layer_ids)
    score = -eps[0] / schedule.sigma(t)
    return ScoreOutput(score=score, attention=bundle, noise_pred=eps[0])


def token_attention_map(bundle: AttentionBundle, token_indices: list[int]) -> torch.Tensor:
    """Mean of the selected tokens' maps, renormalized to sum 1."""
    if len(token_indices) == 0:
        raise ValueError("token_indices must be nonempty")
    n = bundle.n_tokens
    bad = [i for i in token_indices if not 0 <= i < n]
    if bad:
        raise IndexError(f"token indices {bad} outside 0..{n - 1}")
    if bundle.pad_mask is not None:
        padding = [i for i in token_indices if bool(bundle.pad_mask[i])]
        if padding:
            raise ValueError(f"token indices {padding} select padding positions")
    m = bundle.maps[list(token_indices)].mean(dim=0)
    return m / m.sum()


def decode(z0_pred: torch.Tensor) -> torch.Tensor:
    """Latent -> image: identity with clamp to [-1, 1].

    Subgradient is 1 strictly inside the range and 0 outside.
    """
    return torch.clamp(z0_pred, -1.0, 1.0)
