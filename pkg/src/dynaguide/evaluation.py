"""Evaluation harness: ablations, recurrence budgets, sensitivity sweeps.

Every table is a pure function of stored run records, so reports can be
regenerated exactly from disk. Comparisons are directional and paired:
identical (prompt, seed) lists across variants, sign tests on per-run
deltas.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from .detector import detect_semantics
from .errors import ConfigError
from .grammar import Grammar, load_grammar
from .models.scorer import preference_score
from .pipeline import ModelBundle, SamplerConfig, baseline_sample, guided_sample
from .records import RunRecord, image_hash

METRICS = ("preference_score", "detector_pass_rate", "semantic_loss_final", "nfe", "wall_time")
HIGHER_IS_BETTER = {
    "preference_score": True,
    "detector_pass_rate": True,
    "semantic_loss_final": False,
    "nfe": False,
    "wall_time": False,
}
BASE_VARIANTS = (
    "full",
    "baseline",
    "no_semantic",
    "no_preference",
    "no_adaptive_weight",
    "no_polyak",
    "dynamic_recurrence",
)


def parse_variant(variant: str) -> tuple[str, int | None]:
    """Split 'fixed_recurrence:<r>' into its name and budget."""
    if variant.startswith("fixed_recurrence:"):
        raw = variant.split(":", 1)[1]
        try:
            r = int(raw)
        except ValueError as exc:
            raise ConfigError(f"bad recurrence budget in {variant!r}") from exc
        if r < 0:
            raise ConfigError(f"recurrence budget must be >= 0, got {r}")
        return "fixed_recurrence", r
    if variant in BASE_VARIANTS:
        return variant, None
    raise ConfigError(f"unknown variant {variant!r}")


def apply_variant(config: SamplerConfig, variant: str) -> SamplerConfig:
    """Derive a variant's config by flipping exactly one toggle off full."""
    name, budget = parse_variant(variant)
    if name == "full" or name == "dynamic_recurrence":
        return replace(config, guidance=True, recurrence="dynamic")
    if name == "baseline":
        return replace(config, guidance=False, recurrence="off")
    if name == "no_semantic":
        return replace(config, use_semantic=False)
    if name == "no_preference":
        return replace(config, use_preference=False)
    if name == "no_adaptive_weight":
        return replace(config, adaptive_weights=False)
    if name == "no_polyak":
        return replace(config, use_polyak=False)
    return replace(config, recurrence="fixed", fixed_recurrence=budget)


@dataclass(frozen=True)
class AblationSpec:
    variants: tuple[str, ...]
    prompts: tuple[str, ...]
    seeds: tuple[int, ...]
    metrics: tuple[str, ...] = METRICS

    def __post_init__(self) -> None:
        if len(set(self.variants)) != len(self.variants):
            raise ConfigError("duplicate variants in ablation spec")
        if not self.variants or not self.prompts or not self.seeds:
            raise ConfigError("variants, prompts, and seeds must be nonempty")
        for v in self.variants:
            parse_variant(v)
        unknown = set(self.metrics) - set(METRICS)
        if unknown:
            raise ConfigError(f"unknown metrics: {sorted(unknown)}")


@dataclass
class RunResult:
    variant: str
    prompt: str
    seed: int
    metrics: dict[str, float | None]
    record_hash: str
    image_sha: str
    record_path: str | None = None
    error: str | None = None


@dataclass
class EvalReport:
    spec: dict
    runs: list[RunResult] = field(default_factory=list)
    variant_stats: dict = field(default_factory=dict)
    paired: dict = field(default_factory=dict)
    incomplete: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "spec": self.spec,
            "variant_stats": self.variant_stats,
            "paired": self.paired,
            "incomplete": self.incomplete,
            "runs": [
                {
                    "variant": r.variant,
                    "prompt": r.prompt,
                    "seed": r.seed,
                    "metrics": r.metrics,
                    "record_hash": r.record_hash,
                    "image_sha": r.image_sha,
                    "record_path": r.record_path,
                    "error": r.error,
                }
                for r in self.runs
            ],
        }

    def save(self, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        json_path = out / f"{stem}.json"
        json_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        csv_path = out / f"{stem}.csv"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["variant", "prompt", "seed", *METRICS, "record_hash", "error"]
            writer.writerow(header)
            for r in self.runs:
                writer.writerow(
                    [
                        r.variant,
                        r.prompt,
                        r.seed,
                        *[r.metrics.get(m) for m in METRICS],
                        r.record_hash,
                        r.error or "",
                    ]
                )
        return json_path, csv_path


def run_metrics(
    image: np.ndarray,
    record: RunRecord,
    models: ModelBundle,
    schedule,
    grammar: Grammar,
) -> dict[str, float | None]:
    """Per-run scalar metrics, computed from the final image and record."""
    import torch

    prompt = record.prompt
    if prompt.strip():
        score = preference_score(
            torch.from_numpy(image), prompt, 1, models.scorer, schedule,
            vocab=models.vocab,
        )
        pass_rate = detect_semantics(image, prompt, grammar).pass_fraction
    else:
        score = None
        pass_rate = None
    l_a_final = None
    for step in reversed(record.steps):
        if step.l_semantic is not None:
            l_a_final = step.l_semantic
            break
    return {
        "preference_score": score,
        "detector_pass_rate": pass_rate,
        "semantic_loss_final": l_a_final,
        "nfe": float(record.denoiser_calls),
        "wall_time": record.wall_time_s,
    }


def _mean_std(values: list[float]) -> dict:
    if not values:
        return {"mean": None, "std": None, "n": 0}
    arr = np.asarray(values, dtype=np.float64)
    return {
        "mean": float(arr.mean()),
        "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0,
        "n": int(len(arr)),
    }


def _sign_test(deltas: list[float]) -> dict:
    """Paired sign test: is the first series greater than the second?"""
    wins = sum(1 for d in deltas if d > 0)
    losses = sum(1 for d in deltas if d < 0)
    ties = len(deltas) - wins - losses
    if wins + losses == 0:
        p = 1.0
    else:
        p = float(binomtest(wins, wins + losses, alternative="greater").pvalue)
    return {
        "mean_delta": float(np.mean(deltas)) if deltas else None,
        "wins": wins,
        "losses": losses,
        "ties": ties,
        "p_greater": p,
    }


def report_from_results(spec: AblationSpec, results: list[RunResult]) -> EvalReport:
    """Assemble the report tables; pure function of the per-run results."""
    report = EvalReport(
        spec={
            "variants": list(spec.variants),
            "prompts": list(spec.prompts),
            "seeds": list(spec.seeds),
            "metrics": list(spec.metrics),
        },
        runs=sorted(results, key=lambda r: (r.variant, r.prompt, r.seed)),
    )
    by_variant: dict[str, dict[tuple[str, int], RunResult]] = {}
    for r in report.runs:
        by_variant.setdefault(r.variant, {})[(r.prompt, r.seed)] = r
        if r.error:
            report.incomplete.append(
                {"variant": r.variant, "prompt": r.prompt, "seed": r.seed, "error": r.error}
            )

    for variant, runs in by_variant.items():
        stats = {}
        for metric in spec.metrics:
            vals = [
                r.metrics[metric]
                for r in runs.values()
                if r.error is None and r.metrics.get(metric) is not None
            ]
            stats[metric] = _mean_std(vals)
        report.variant_stats[variant] = stats

    references = [v for v in ("full", "baseline") if v in by_variant]
    for ref in references:
        ref_runs = by_variant[ref]
        for variant, runs in by_variant.items():
            if variant == ref:
                continue
            comparison = {}
            for metric in spec.metrics:
                deltas = []
                for key, ref_run in ref_runs.items():
                    other = runs.get(key)
                    if other is None or ref_run.error or other.error:
                        continue
                    a, b = ref_run.metrics.get(metric), other.metrics.get(metric)
                    if a is None or b is None:
                        continue
                    deltas.append(a - b)
                comparison[metric] = _sign_test(deltas)
            report.paired[f"{ref}_vs_{variant}"] = comparison
    return report


def run_ablation(
    spec: AblationSpec,
    config: SamplerConfig,
    models: ModelBundle,
    out_dir: str | Path | None = None,
    grammar: Grammar | None = None,
    progress: bool = False,
) -> EvalReport:
    """Run every (variant, prompt, seed) cell and build the report."""
    grammar = grammar or load_grammar()
    schedule = config.schedule()
    results: list[RunResult] = []
    record_dir = Path(out_dir) / "records" if out_dir is not None else None
    for variant in spec.variants:
        variant_config = apply_variant(config, variant)
        for p_idx, prompt in enumerate(spec.prompts):
            for seed in spec.seeds:
                run_config = replace(variant_config, seed=seed)
                try:
                    if variant == "baseline":
                        image, record = baseline_sample(prompt, run_config, models=models)
                    else:
                        image, record = guided_sample(prompt, run_config, models=models)
                    metrics = run_metrics(image, record, models, schedule, grammar)
                    result = RunResult(
                        variant=variant,
                        prompt=prompt,
                        seed=seed,
                        metrics=metrics,
                        record_hash=record.content_hash(),
                        image_sha=image_hash(image),
                    )
                    if record_dir is not None:
                        stem = f"{variant}_p{p_idx}_s{seed}"
                        path = record.save(record_dir / f"{stem}.json")
                        result.record_path = str(path)
                except Exception as exc:  # noqa: BLE001 - failures are data
                    result = RunResult(
                        variant=variant,
                        prompt=prompt,
                        seed=seed,
                        metrics={m: None for m in spec.metrics},
                        record_hash="",
                        image_sha="",
                        error=f"{type(exc).__name__}: {exc}",
                    )
                results.append(result)
        if progress:
            print(f"[eval] finished variant {variant}", flush=True)
    report = report_from_results(spec, results)
    if out_dir is not None:
        report.save(out_dir)
    return report


def run_recurrence_study(
    budgets: list[int],
    prompts: tuple[str, ...],
    seeds: tuple[int, ...],
    config: SamplerConfig,
    models: ModelBundle,
    out_dir: str | Path | None = None,
    grammar: Grammar | None = None,
) -> EvalReport:
    """Fixed budgets vs the dynamic rule on the same prompt/seed grid."""
    if len(set(budgets)) != len(budgets):
        raise ConfigError("duplicate budgets in recurrence study")
    variants = tuple(f"fixed_recurrence:{r}" for r in budgets) + ("dynamic_recurrence",)
    spec = AblationSpec(variants=variants, prompts=prompts, seeds=seeds)
    return run_ablation(spec, config, models, out_dir=out_dir, grammar=grammar)


def run_sensitivity(
    param: str,
    grid: list,
    prompts: tuple[str, ...],
    seeds: tuple[int, ...],
    config: SamplerConfig,
    models: ModelBundle,
    out_dir: str | Path | None = None,
    grammar: Grammar | None = None,
) -> dict:
    """Sweep a scheduling parameter; invalid cells are reported, not run.

    param 'stage_boundaries' takes (t1_frac, t2_frac) pairs; param 'k'
    takes positive reals. Returns per-cell stats plus the relative
    variation range of each metric across valid cells.
    """
    if param not in ("stage_boundaries", "k"):
        raise ConfigError(f"unknown sensitivity parameter {param!r}")
    grammar = grammar or load_grammar()
    cells = []
    for value in grid:
        label = str(value)
        try:
            if param == "stage_boundaries":
                t1, t2 = value
                stages = replace(config.stages, t1_frac=float(t1), t2_frac=float(t2))
            else:
                stages = replace(config.stages, k=float(value))
            cell_config = replace(config, stages=stages)
        except (ConfigError, TypeError, ValueError) as exc:
            cells.append({"value": label, "error": f"{type(exc).__name__}: {exc}"})
            continue
        spec = AblationSpec(variants=("full",), prompts=prompts, seeds=seeds)
        report = run_ablation(spec, cell_config, models, grammar=grammar)
        cells.append({"value": label, "stats": report.variant_stats["full"]})

    variation: dict[str, float | None] = {}
    for metric in ("preference_score", "detector_pass_rate"):
        means = [
            c["stats"][metric]["mean"]
            for c in cells
            if "stats" in c and c["stats"][metric]["mean"] is not None
        ]
        if len(means) >= 2 and not math.isclose(max(np.abs(means)), 0.0):
            variation[metric] = float(
                (max(means) - min(means)) / max(abs(m) for m in means)
            )
        else:
            variation[metric] = None
    result = {"param": param, "cells": cells, "relative_variation": variation}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"sensitivity_{param}.json").write_text(
            json.dumps(result, indent=2, sort_keys=True)
        )
    return result
