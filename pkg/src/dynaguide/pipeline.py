"""Guided and baseline reverse-diffusion sampling with full run records.

One loop core serves both entry points, so a guided run with every
guidance feature disabled is bit-identical to the baseline sampler under
the same seed. Random draws come from three independent streams (init
noise, per-step transition noise, recurrence noise) so toggling the
recurrence never perturbs the other draws.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .diffusion import (
    DEFAULT_BETA_END,
    DEFAULT_BETA_START,
    DEFAULT_T,
    NoiseSchedule,
    guided_update,
    make_linear_schedule,
    predict_clean,
    renoise,
    reverse_step,
)
from .errors import ConfigError, DegenerateGradientError, SamplingDivergedError
from .grammar import Grammar, load_grammar
from .models.checkpoint import load_checkpoint
from .models.denoiser import ToyDenoiser, decode, denoise
from .models.scorer import PreferenceScorer
from .models.text import TextEncoding, Vocabulary, empty_encoding, encode_text
from .objectives import combined_loss_from_forward, gradient
from .records import RunRecord, StepRecord
from .scheduling import Stage, StageConfig, recurrence_count, stage_of, stage_weights
from .semantics.graph import SemanticGraph, bind_tokens, extract_graph_rules, graph_from_payload
from .semantics.llm import ResponseCache, StubLLMClient, client_from_env, extract_graph_llm

GRAD_SKIP_FLOOR = 1e-12  # below this the guidance direction is meaningless
RECURRENCE_MODES = ("dynamic", "fixed", "off")
GRAPH_SOURCES = ("rules", "llm", "file")


@dataclass(frozen=True)
class SamplerConfig:
    T: int = DEFAULT_T
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END
    stages: StageConfig = field(default_factory=StageConfig)
    seed: int = 0
    guidance: bool = True
    use_semantic: bool = True
    use_preference: bool = True
    adaptive_weights: bool = True
    use_polyak: bool = True
    recurrence: str = "dynamic"  # dynamic | fixed | off
    fixed_recurrence: int = 0
    preference_form: str = "neg_cosine"
    graph_source: str = "rules"  # rules | llm | file
    graph_file: str | Path | None = None
    denoiser_path: str | Path | None = None
    scorer_path: str | Path | None = None
    out_dir: str | Path | None = None
    channels: int = 3
    image_size: int = 32
    snapshot_count: int = 0

    def __post_init__(self) -> None:
        if self.recurrence not in RECURRENCE_MODES:
            raise ConfigError(
                f"recurrence must be one of {RECURRENCE_MODES}, got {self.recurrence!r}"
            )
        if self.snapshot_count < 0:
            raise ConfigError(
                f"snapshot_count must be >= 0, got {self.snapshot_count}"
            )
        if self.graph_source not in GRAPH_SOURCES:
            raise ConfigError(
                f"graph_source must be one of {GRAPH_SOURCES}, got {self.graph_source!r}"
            )
        if self.fixed_recurrence < 0:
            raise ConfigError(
                f"fixed_recurrence must be >= 0, got {self.fixed_recurrence}"
            )
        if self.graph_source == "file" and self.graph_file is None:
            raise ConfigError("graph_source 'file' needs graph_file")

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        stages = self.stages
        return {
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "seed": self.seed,
            "guidance": self.guidance,
            "use_semantic": self.use_semantic,
            "use_preference": self.use_preference,
            "adaptive_weights": self.adaptive_weights,
            "use_polyak": self.use_polyak,
            "recurrence": self.recurrence,
            "fixed_recurrence": self.fixed_recurrence,
            "preference_form": self.preference_form,
            "graph_source": self.graph_source,
            "graph_file": str(self.graph_file) if self.graph_file else None,
            "denoiser_path": str(self.denoiser_path) if self.denoiser_path else None,
            "scorer_path": str(self.scorer_path) if self.scorer_path else None,
            "channels": self.channels,
            "image_size": self.image_size,
            "snapshot_count": self.snapshot_count,
            "stages": {
                "t1_frac": stages.t1_frac,
                "t2_frac": stages.t2_frac,
                "k": stages.k,
                "eta": {s.value: v for s, v in stages.eta.items()},
                "h": stages.h,
                "r_max": stages.r_max,
                "blend_baseline": stages.blend_baseline,
            },
        }


@dataclass
class ModelBundle:
    denoiser: ToyDenoiser
    scorer: PreferenceScorer
    vocab: Vocabulary

    @classmethod
    def from_paths(
        cls, denoiser_path: str | Path, scorer_path: str | Path
    ) -> "ModelBundle":
        denoiser, vocab_d = load_checkpoint(denoiser_path, expected_kind="denoiser")
        scorer, vocab_s = load_checkpoint(scorer_path, expected_kind="scorer")
        if vocab_d.words != vocab_s.words:
            raise ConfigError("denoiser and scorer checkpoints use different vocabularies")
        denoiser.eval()
        scorer.eval()
        return cls(denoiser=denoiser, scorer=scorer, vocab=vocab_d)


def load_models(config: SamplerConfig) -> ModelBundle:
    if config.denoiser_path is None or config.scorer_path is None:
        raise ConfigError("config needs denoiser_path and scorer_path to load models")
    return ModelBundle.from_paths(config.denoiser_path, config.scorer_path)


def stream_generator(seed: int, name: str) -> torch.Generator:
    """Independent named random stream derived from the run seed."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    gen = torch.Generator()
    gen.manual_seed(int.from_bytes(digest[:8], "little") % (2**63))
    return gen


def resolve_graph(
    prompt: str,
    text: TextEncoding,
    config: SamplerConfig,
    grammar: Grammar | None = None,
    llm_client=None,
    llm_cache: ResponseCache | None = None,
) -> SemanticGraph | None:
    """Produce the bound semantic graph the run will optimize against."""
    if not (config.guidance and config.use_semantic) or not prompt.strip():
        return None
    grammar = grammar or load_grammar()
    if config.graph_source == "rules":
        return extract_graph_rules(prompt, grammar)
    if config.graph_source == "llm":
        client = llm_client or client_from_env() or StubLLMClient({})
        graph = extract_graph_llm(prompt, client, grammar, cache=llm_cache)
        return graph if graph.bound else bind_tokens(graph, text)
    payload = json.loads(Path(config.graph_file).read_text())
    graph = graph_from_payload(payload)
    if graph.prompt and graph.prompt != prompt:
        raise ConfigError(
            f"graph file is for prompt {graph.prompt!r}, not {prompt!r}"
        )
    return bind_tokens(graph, text)


def snapshot_times(count: int, T: int) -> frozenset[int]:
    """Evenly spaced timesteps (both ends included) for clean-prediction snapshots."""
    if count <= 0:
        return frozenset()
    return frozenset(int(round(v)) for v in np.linspace(T, 1, min(count, T)))


def _encode_prompt(prompt: str, models: ModelBundle) -> TextEncoding:
    """Tokenize, or fall back to the null condition for an empty prompt."""
    if prompt.strip():
        return encode_text(prompt, models.vocab, models.denoiser.config.max_tokens)
    return empty_encoding(models.vocab)


def save_image(image: np.ndarray, path: str | Path) -> Path:
    """Write a [-1, 1] float image as lossless 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip((image.transpose(1, 2, 0) + 1.0) * 127.5, 0, 255)
    Image.fromarray(np.round(arr).astype(np.uint8)).save(path, format="PNG")
    return path


def save_outputs(
    image: np.ndarray, record: RunRecord, out_dir: str | Path, stem: str
) -> tuple[Path, Path]:
    out = Path(out_dir)
    img_path = save_image(image, out / f"{stem}.png")
    record.image_path = str(img_path)
    rec_path = record.save(out / f"{stem}.json")
    return img_path, rec_path


def guided_sample(
    prompt: str,
    config: SamplerConfig,
    models: ModelBundle | None = None,
    graph: SemanticGraph | None = None,
    llm_client=None,
    llm_cache: ResponseCache | None = None,
) -> tuple[np.ndarray, RunRecord]:
    """Full guided sampling run; honors every toggle in the config."""
    models = models or load_models(config)
    schedule = config.schedule()
    text = _encode_prompt(prompt, models)
    if graph is None:
        graph = resolve_graph(prompt, text, config, llm_client=llm_client, llm_cache=llm_cache)
    return _sample_loop(prompt, text, config, models, schedule, graph)


def baseline_sample(
    prompt: str,
    config: SamplerConfig,
    models: ModelBundle | None = None,
) -> tuple[np.ndarray, RunRecord]:
    """Plain reverse sampling: no guidance, no recurrence, NFE = T."""
    config = replace(config, guidance=False, recurrence="off", fixed_recurrence=0)
    models = models or load_models(config)
    schedule = config.schedule()
    text = _encode_prompt(prompt, models)
    return _sample_loop(prompt, text, config, models, schedule, graph=None)


def _decide_weights(
    t: int,
    z0_now: torch.Tensor,
    z0_prev: torch.Tensor | None,
    config: SamplerConfig,
    schedule: NoiseSchedule,
):
    """Stage weights plus the config's ablation toggles."""
    stage = stage_of(t, schedule.T, config.stages)
    if stage is Stage.BLENDED and not config.adaptive_weights:
        decision_w = (0.5, 0.5)
        rel = None
        event = None
    else:
        prev = z0_prev if z0_prev is not None else z0_now
        decision = stage_weights(t, schedule.T, z0_now, prev, config.stages)
        decision_w = (decision.w_a, decision.w_r)
        rel = decision.rel_change
        event = decision.event
    w_a, w_r = decision_w
    if not config.use_semantic:
        w_a = 0.0
    if not config.use_preference:
        w_r = 0.0
    return stage, w_a, w_r, rel, event


def _sample_loop(
    prompt: str,
    text: TextEncoding,
    config: SamplerConfig,
    models: ModelBundle,
    schedule: NoiseSchedule,
    graph: SemanticGraph | None,
) -> tuple[np.ndarray, RunRecord]:
    record = RunRecord(
        prompt=prompt,
        seed=config.seed,
        config=config.to_dict(),
        graph=graph.to_payload() if graph is not None else None,
    )
    start = time.perf_counter()
    gen_init = stream_generator(config.seed, "init")
    gen_step = stream_generator(config.seed, "step")
    gen_recur = stream_generator(config.seed, "recur")
    shape = (config.channels, config.image_size, config.image_size)

    denoiser, scorer = models.denoiser, models.scorer
    denoiser.eval()
    scorer.eval()

    z = torch.randn(shape, generator=gen_init)
    z0_prev: torch.Tensor | None = None
    snap_ts = snapshot_times(config.snapshot_count, schedule.T)

    def fail(message: str, t: int) -> SamplingDivergedError:
        record.status = "diverged"
        record.error = message
        record.wall_time_s = time.perf_counter() - start
        if config.out_dir is not None:
            record.save(Path(config.out_dir) / f"diverged_seed{config.seed}.json")
        return SamplingDivergedError(message, step=t, record=record)

    for t in range(schedule.T, 0, -1):
        step_rec = StepRecord(
            t=t,
            stage=stage_of(t, schedule.T, config.stages).value,
            w_semantic=0.0,
            w_preference=0.0,
        )
        r_t: int | None = None
        cycle = 0
        while True:
            guidance_cycle = config.guidance
            step_events: list[str] = []

            if guidance_cycle:
                holder: dict = {}

                def closure(z_leaf: torch.Tensor) -> torch.Tensor:
                    out = denoise(z_leaf, t, text, denoiser, schedule)
                    z0 = predict_clean(z_leaf, out.score, t, schedule)
                    stage, w_a, w_r, rel, event = _decide_weights(
                        t, z0.detach(), z0_prev, config, schedule
                    )
                    res = combined_loss_from_forward(
                        out, z0, t, text, graph, scorer, schedule,
                        w_a, w_r, config.preference_form,
                    )
                    holder.update(res=res, w_a=w_a, w_r=w_r, rel=rel, event=event)
                    return res.total

                grad = gradient(closure, z)
                res = holder["res"]
                record.denoiser_calls += 1
                record.scorer_calls += 1
                score = res.score_output.score.detach()
                z0_now = res.z0_pred.detach()
                w_a, w_r = holder["w_a"], holder["w_r"]
                if holder["event"]:
                    step_events.append(holder["event"])
            else:
                with torch.no_grad():
                    out = denoise(z, t, text, denoiser, schedule)
                    score = out.score
                    z0_now = predict_clean(z, score, t, schedule)
                record.denoiser_calls += 1
                grad = None
                w_a = w_r = 0.0

            eps1 = (
                torch.randn(shape, generator=gen_step if cycle == 0 else gen_recur)
                if t > 1
                else None
            )
            z_next = reverse_step(z, score, t, eps1, schedule)

            step_magnitude = None
            if guidance_cycle and grad is not None:
                if grad.norm < GRAD_SKIP_FLOOR:
                    step_events.append("degenerate-gradient-skip")
                else:
                    mean = reverse_step(z, score, t, None, schedule)
                    eta = config.stages.eta[stage_of(t, schedule.T, config.stages)]
                    if config.use_polyak:
                        score_norm = float(torch.linalg.vector_norm(score))
                        z_next = guided_update(
                            mean, grad.g, eta, score_norm, grad.norm
                        )
                    else:
                        z_next = mean - eta * grad.g
                    step_magnitude = float(torch.linalg.vector_norm(z_next - mean))

            if not torch.isfinite(z_next).all():
                record.steps.append(step_rec)
                raise fail(f"non-finite state after update at t={t}", t)

            if r_t is None:
                # the budget is decided once per outer step, from the first
                # pass, and frozen for the recurrence cycles that follow
                if config.recurrence == "off" or not config.guidance:
                    r_t = 0
                elif config.recurrence == "fixed":
                    r_t = config.fixed_recurrence
                else:
                    gn = grad.norm if grad is not None else 0.0
                    r_t = recurrence_count(
                        config.stages.h, gn, config.stages.r_max
                    )
                step_rec.r_t = r_t
                step_rec.w_semantic = w_a
                step_rec.w_preference = w_r
                if guidance_cycle:
                    step_rec.l_semantic = res.value.l_a
                    step_rec.l_preference = res.value.l_r
                    step_rec.grad_norm = grad.norm
                    step_rec.rel_change = holder["rel"]
                step_rec.step_magnitude = step_magnitude
                step_rec.events.extend(step_events)
                if t in snap_ts:
                    snap = decode(z0_now).numpy()
                    record.snapshots.append(
                        {"t": t, "image": np.round(snap, 4).astype(float).tolist()}
                    )
            elif cycle == 0:
                raise RuntimeError("recurrence budget recomputed within one step")

            if config.stages.blend_baseline == "latest" or cycle == 0:
                z0_prev = z0_now

            if cycle >= r_t:
                z = z_next
                break
            eps2 = torch.randn(shape, generator=gen_recur)
            z = renoise(z_next, t, eps2, schedule)
            if not torch.isfinite(z).all():
                record.steps.append(step_rec)
                raise fail(f"non-finite state after renoise at t={t}", t)
            cycle += 1

        record.steps.append(step_rec)

    image_t = decode(z)
    record.wall_time_s = time.perf_counter() - start
    record.status = "completed"
    expected = record.expected_denoiser_calls()
    if record.denoiser_calls != expected:
        raise RuntimeError(
            f"model-call accounting broken: {record.denoiser_calls} calls, "
            f"expected {expected}"
        )
    image = image_t.numpy().astype(np.float32)
    return image, record
