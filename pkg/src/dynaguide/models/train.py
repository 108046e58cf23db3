"""Training loops for the toy denoiser and the preference scorer.

Both trainers are deterministic given their seed, persist loss curves as
CSV when an output directory is set, abort on non-finite losses, and
write versioned checkpoints.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..diffusion import NoiseSchedule, default_schedule
from ..errors import ConfigError, NumericsError
from ..grammar import load_grammar
from ..pairs import PreferencePair
from ..shapes import ShapeDataset
from .checkpoint import save_checkpoint
from .denoiser import ToyDenoiser, ToyDenoiserConfig
from .scorer import PreferenceScorer, PreferenceScorerConfig
from .text import Vocabulary, encode_text


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    lr: float = 2e-3
    min_lr_factor: float = 0.05  # cosine decay floor as a fraction of lr
    seed: int = 0
    caption_dropout: float = 0.1  # fraction of captions blanked per batch
    grad_clip: float = 1.0
    out_dir: str | Path | None = None

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.caption_dropout <= 1.0:
            raise ConfigError("caption_dropout must lie in [0, 1]")


@dataclass
class TrainReport:
    step_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    checkpoint_path: Path | None = None
    curve_path: Path | None = None

    @property
    def initial_loss(self) -> float:
        return self.step_losses[0] if self.step_losses else math.nan

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1] if self.epoch_losses else math.nan


def _write_curve(path: Path, losses: list[float], label: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", label])
        for i, v in enumerate(losses):
            writer.writerow([i, f"{v:.6f}"])


def _check_finite(loss: torch.Tensor, step: int, history: list[float]) -> None:
    if not torch.isfinite(loss):
        tail = ", ".join(f"{v:.4f}" for v in history[-5:])
        raise NumericsError(
            f"training loss became non-finite at step {step}; last losses: [{tail}]"
        )


def _encode_captions(
    captions: list[str], vocab: Vocabulary, max_tokens: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack prompts into (N, L) token ids plus a boolean pad mask."""
    encs = [encode_text(c, vocab, max_tokens) for c in captions]
    width = max(max(len(e.token_ids) for e in encs), 1)
    ids = torch.full((len(encs), width), vocab.pad_id, dtype=torch.long)
    for i, e in enumerate(encs):
        ids[i, : len(e.token_ids)] = e.token_ids
    return ids, ids.eq(vocab.pad_id)


def train_toy_denoiser(
    dataset: ShapeDataset,
    config: TrainConfig | None = None,
    model_config: ToyDenoiserConfig | None = None,
    schedule: NoiseSchedule | None = None,
    vocab: Vocabulary | None = None,
) -> tuple[ToyDenoiser, TrainReport]:
    """Noise-prediction regression on (image, caption) pairs.

    Each step draws a uniform timestep per image, diffuses the clean
    render, and regresses the predicted noise to the true noise in mean
    squared error. A fraction of captions is blanked so the model can
    also sample without a prompt.
    """
    if not dataset.scenes:
        raise ConfigError("dataset is empty")
    config = config or TrainConfig()
    vocab = vocab or Vocabulary.from_grammar(load_grammar())
    model_config = model_config or ToyDenoiserConfig(vocab_size=len(vocab.words))
    schedule = schedule or default_schedule()
    torch.manual_seed(config.seed)
    model = ToyDenoiser(model_config)
    report = TrainReport()
    if config.epochs == 0:
        return model, report

    images = torch.from_numpy(
        np.stack([s.image for s in dataset.scenes])
    ).to(torch.float32)
    ids, pad = _encode_captions(
        [s.caption for s in dataset.scenes], vocab, model_config.max_tokens
    )
    # a blanked caption is all padding (prompt-free conditioning)
    blank_ids = torch.full_like(ids, vocab.pad_id)

    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = torch.Generator().manual_seed(config.seed)
    n = images.shape[0]
    steps_per_epoch = max(1, math.ceil(n / config.batch_size))
    total_steps = config.epochs * steps_per_epoch
    step = 0
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=rng)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            z0 = images[idx]
            b = z0.shape[0]
            t = torch.randint(1, schedule.T + 1, (b,), generator=rng)
            eps = torch.randn(z0.shape, generator=rng)
            a_bar = torch.tensor(
                [schedule.alpha_bar(int(ti)) for ti in t], dtype=torch.float32
            )
            sigma = torch.tensor(
                [schedule.sigma(int(ti)) for ti in t], dtype=torch.float32
            )
            z_t = (
                a_bar.sqrt()[:, None, None, None] * z0
                + sigma[:, None, None, None] * eps
            )
            drop = torch.rand(b, generator=rng) < config.caption_dropout
            tok = torch.where(drop[:, None], blank_ids[idx], ids[idx])
            mask = tok.eq(vocab.pad_id)
            u = t.to(torch.float32) / schedule.T

            # cosine learning-rate decay
            progress = step / max(total_steps - 1, 1)
            floor = config.min_lr_factor
            scale = floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * progress))
            for group in opt.param_groups:
                group["lr"] = config.lr * scale

            opt.zero_grad()
            eps_hat, _ = model(z_t, u, tok, mask)
            loss = torch.mean((eps_hat - eps) ** 2)
            _check_finite(loss, step, report.step_losses)
            loss_value = float(loss.detach())
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            report.step_losses.append(loss_value)
            epoch_losses.append(loss_value)
            step += 1
        report.epoch_losses.append(float(np.mean(epoch_losses)))

    model.eval()
    if config.out_dir is not None:
        out = Path(config.out_dir)
        report.curve_path = out / "denoiser_loss.csv"
        _write_curve(report.curve_path, report.step_losses, "mse")
        report.checkpoint_path = out / "denoiser.pt"
        save_checkpoint(
            model, vocab, report.checkpoint_path,
            extra={"final_loss": report.final_loss},
        )
    return model, report


def split_pairs(
    pairs: list[PreferencePair], holdout_fraction: float, seed: int
) -> tuple[list[PreferencePair], list[PreferencePair]]:
    """Deterministic train/held-out split."""
    if not 0.0 < holdout_fraction < 1.0:
        raise ConfigError("holdout_fraction must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(pairs))
    n_hold = max(1, int(round(len(pairs) * holdout_fraction)))
    hold = [pairs[i] for i in order[:n_hold]]
    train = [pairs[i] for i in order[n_hold:]]
    return train, hold


def ranking_accuracy(
    scorer: PreferenceScorer,
    pairs: list[PreferencePair],
    schedule: NoiseSchedule,
    vocab: Vocabulary,
    seed: int = 0,
) -> float:
    """Fraction of pairs where the preferred member scores higher.

    Each pair is evaluated at one random timestep shared by both members,
    mirroring how the scorer is queried along a sampling trajectory.
    """
    if not pairs:
        raise ConfigError("no pairs to evaluate")
    rng = np.random.default_rng(seed)
    ids, pad = _encode_captions(
        [p.prompt for p in pairs], vocab, scorer.config.max_tokens
    )
    wins = 0
    scorer.eval()
    with torch.no_grad():
        for i, pair in enumerate(pairs):
            t = int(rng.integers(1, schedule.T + 1))
            u = torch.tensor([t / schedule.T], dtype=torch.float32)
            tok = ids[i : i + 1]
            both = torch.from_numpy(
                np.stack([pair.preferred, pair.dispreferred])
            ).to(torch.float32)
            cos = scorer.cosine(both, u.expand(2), tok.expand(2, -1))
            wins += int(cos[0] > cos[1])
    return wins / len(pairs)


def train_preference_scorer(
    pairs: list[PreferencePair],
    config: TrainConfig | None = None,
    scorer_config: PreferenceScorerConfig | None = None,
    schedule: NoiseSchedule | None = None,
    vocab: Vocabulary | None = None,
) -> tuple[PreferenceScorer, TrainReport]:
    """Pairwise ranking on (preferred, dispreferred, prompt) triples.

    Loss is logistic on the scaled cosine difference. Both members of a
    pair share one uniformly drawn timestep, and inputs get light
    timestep-scaled noise so ranking stays stable on the imperfect clean
    predictions seen during guided sampling.
    """
    if not pairs:
        raise ConfigError("no preference pairs given")
    config = config or TrainConfig(epochs=30, batch_size=32)
    vocab = vocab or Vocabulary.from_grammar(load_grammar())
    scorer_config = scorer_config or PreferenceScorerConfig(vocab_size=len(vocab.words))
    schedule = schedule or default_schedule()
    torch.manual_seed(config.seed)
    scorer = PreferenceScorer(scorer_config)
    report = TrainReport()
    if config.epochs == 0:
        return scorer, report

    preferred = torch.from_numpy(
        np.stack([p.preferred for p in pairs])
    ).to(torch.float32)
    dispreferred = torch.from_numpy(
        np.stack([p.dispreferred for p in pairs])
    ).to(torch.float32)
    ids, _ = _encode_captions(
        [p.prompt for p in pairs], vocab, scorer_config.max_tokens
    )

    opt = torch.optim.Adam(scorer.parameters(), lr=config.lr)
    rng = torch.Generator().manual_seed(config.seed)
    n = len(pairs)
    step = 0
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=rng)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            b = len(idx)
            t = torch.randint(1, schedule.T + 1, (b,), generator=rng)
            u = t.to(torch.float32) / schedule.T
            noise_scale = 0.25 * u[:, None, None, None]
            img_p = preferred[idx] + noise_scale * torch.randn(
                preferred[idx].shape, generator=rng
            )
            img_d = dispreferred[idx] + noise_scale * torch.randn(
                dispreferred[idx].shape, generator=rng
            )
            tok = ids[idx]

            opt.zero_grad()
            cos_p = scorer.cosine(img_p, u, tok)
            cos_d = scorer.cosine(img_d, u, tok)
            margin = scorer_config.tau * (cos_p - cos_d)
            loss = torch.nn.functional.softplus(-margin).mean()
            _check_finite(loss, step, report.step_losses)
            loss_value = float(loss.detach())
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(scorer.parameters(), config.grad_clip)
            opt.step()
            report.step_losses.append(loss_value)
            epoch_losses.append(loss_value)
            step += 1
        report.epoch_losses.append(float(np.mean(epoch_losses)))

    scorer.eval()
    if config.out_dir is not None:
        out = Path(config.out_dir)
        report.curve_path = out / "scorer_loss.csv"
        _write_curve(report.curve_path, report.step_losses, "ranking_loss")
        report.checkpoint_path = out / "scorer.pt"
        save_checkpoint(
            scorer, vocab, report.checkpoint_path,
            extra={"final_loss": report.final_loss},
        )
    return scorer, report
