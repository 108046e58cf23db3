"""Synthetic preference pairs from a programmatic quality proxy.

Each pair holds an original render (preferred) and a degraded copy
(dispreferred): blurred, desaturated, or re-rendered with a captioned
shape dropped. The proxy score combines color saturation, edge
sharpness, and caption consistency; every emitted pair is verified to
rank preferred above dispreferred under the proxy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .detector import detect_semantics
from .errors import ConfigError
from .grammar import Grammar, load_grammar
from .shapes import ShapeDataset, ShapeScene, render_scene

PROXY_WEIGHTS = {"saturation": 1.0, "sharpness": 2.0, "consistency": 1.0}
DEGRADATIONS = ("blur", "desaturate", "drop_shape")


@dataclass
class PreferencePair:
    prompt: str
    preferred: np.ndarray  # (3, 32, 32) float32
    dispreferred: np.ndarray
    degradation: str
    proxy_gap: float


def saturation(image: np.ndarray) -> float:
    """Mean channel range per pixel; pure palette colors score ~2, gray 0."""
    return float((image.max(axis=0) - image.min(axis=0)).mean())


def sharpness(image: np.ndarray) -> float:
    """Mean squared spatial gradient across channels.

    Squared (not absolute) differences: blurring spreads an edge without
    changing its total variation, so only the quadratic form drops.
    """
    gx = np.square(np.diff(image, axis=2)).mean()
    gy = np.square(np.diff(image, axis=1)).mean()
    return float(gx + gy)


def quality_proxy(image: np.ndarray, caption: str, grammar: Grammar | None = None) -> float:
    grammar = grammar or load_grammar()
    consistency = detect_semantics(image, caption, grammar).pass_fraction
    return (
        PROXY_WEIGHTS["saturation"] * saturation(image)
        + PROXY_WEIGHTS["sharpness"] * sharpness(image)
        + PROXY_WEIGHTS["consistency"] * consistency
    )


def degrade(
    scene: ShapeScene, kind: str, rng: np.random.Generator
) -> np.ndarray:
    if kind == "blur":
        sig = float(rng.uniform(0.8, 1.6))
        return gaussian_filter(scene.image, sigma=(0, sig, sig)).astype(np.float32)
    if kind == "desaturate":
        amount = float(rng.uniform(0.5, 0.9))
        gray = scene.image.mean(axis=0, keepdims=True)
        return ((1 - amount) * scene.image + amount * gray).astype(np.float32)
    if kind == "drop_shape":
        if len(scene.shapes) < 2:
            return gaussian_filter(scene.image, sigma=(0, 1.2, 1.2)).astype(np.float32)
        keep = list(range(len(scene.shapes)))
        keep.remove(int(rng.integers(len(scene.shapes))))
        image, _ = render_scene([scene.shapes[i] for i in keep])
        return image
    raise ConfigError(f"unknown degradation {kind!r}")


def make_preference_pairs(
    dataset: ShapeDataset,
    seed: int,
    per_scene: int = 1,
    grammar: Grammar | None = None,
) -> list[PreferencePair]:
    """Deterministic pair set; pairs violating the proxy order are dropped."""
    grammar = grammar or load_grammar()
    rng = np.random.default_rng(seed)
    pairs: list[PreferencePair] = []
    for scene in dataset.scenes:
        base = quality_proxy(scene.image, scene.caption, grammar)
        for _ in range(per_scene):
            kind = str(rng.choice(DEGRADATIONS))
            worse = degrade(scene, kind, rng)
            gap = base - quality_proxy(worse, scene.caption, grammar)
            if gap <= 0:
                continue  # degradation failed to lower the proxy; skip pair
            pairs.append(
                PreferencePair(
                    prompt=scene.caption,
                    preferred=scene.image,
                    dispreferred=worse,
                    degradation=kind,
                    proxy_gap=gap,
                )
            )
    return pairs
