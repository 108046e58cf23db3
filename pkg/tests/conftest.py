"""Shared fixtures: one trained model pair, cached across test sessions.

Training the toy stack takes minutes, so the checkpoints are built once
under .test_cache/<recipe-hash>/ and reused until the recipe changes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import pytest

from dynaguide.diffusion import default_schedule
from dynaguide.grammar import load_grammar
from dynaguide.models.text import Vocabulary
from dynaguide.models.train import (
    TrainConfig,
    split_pairs,
    train_preference_scorer,
    train_toy_denoiser,
)
from dynaguide.pairs import make_preference_pairs
from dynaguide.pipeline import ModelBundle
from dynaguide.shapes import make_dataset

CACHE_ROOT = Path(__file__).resolve().parent.parent / ".test_cache"

RECIPE = {
    "version": 3,
    "dataset_n": 2500,
    "dataset_seed": 100,
    "denoiser": {"epochs": 35, "batch_size": 64, "lr": 2e-3, "seed": 1},
    "pairs_seed": 7,
    "per_scene": 2,
    "holdout_fraction": 0.2,
    "holdout_seed": 3,
    "scorer": {"epochs": 20, "batch_size": 32, "lr": 2e-3, "seed": 2},
}


def recipe_dir() -> Path:
    key = hashlib.sha256(
        json.dumps(RECIPE, sort_keys=True).encode()
    ).hexdigest()[:12]
    return CACHE_ROOT / key


def ensure_models() -> Path:
    """Train (or reuse) the shared checkpoints; returns their directory."""
    root = recipe_dir()
    denoiser_path = root / "denoiser.pt"
    scorer_path = root / "scorer.pt"
    if denoiser_path.exists() and scorer_path.exists():
        return root
    dataset = make_dataset(RECIPE["dataset_n"], seed=RECIPE["dataset_seed"])
    train_toy_denoiser(
        dataset, TrainConfig(out_dir=root, **RECIPE["denoiser"])
    )
    pairs = make_preference_pairs(
        dataset, seed=RECIPE["pairs_seed"], per_scene=RECIPE["per_scene"]
    )
    train_split, _ = split_pairs(
        pairs, RECIPE["holdout_fraction"], seed=RECIPE["holdout_seed"]
    )
    train_preference_scorer(
        train_split, TrainConfig(out_dir=root, **RECIPE["scorer"])
    )
    return root


@pytest.fixture(scope="session")
def model_dir() -> Path:
    return ensure_models()


@pytest.fixture(scope="session")
def trained_bundle(model_dir: Path) -> ModelBundle:
    return ModelBundle.from_paths(model_dir / "denoiser.pt", model_dir / "scorer.pt")


@pytest.fixture(scope="session")
def heldout_pairs():
    dataset = make_dataset(RECIPE["dataset_n"], seed=RECIPE["dataset_seed"])
    pairs = make_preference_pairs(
        dataset, seed=RECIPE["pairs_seed"], per_scene=RECIPE["per_scene"]
    )
    _, heldout = split_pairs(
        pairs, RECIPE["holdout_fraction"], seed=RECIPE["holdout_seed"]
    )
    return heldout


@pytest.fixture(scope="session")
def schedule():
    return default_schedule()


@pytest.fixture(scope="session")
def grammar():
    return load_grammar()


@pytest.fixture(scope="session")
def vocab(grammar):
    return Vocabulary.from_grammar(grammar)
