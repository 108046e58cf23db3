"""Procedural shapes dataset: rendered scenes with template captions.

Scenes hold 1-3 colored shapes on a dark background, rendered at 32x32
with 4x supersampling so edges are soft but positions exact. Generation
is a pure function of (n, seed, grammar version); the on-disk container
is an index.json plus one npz per scene (image float32 in [-1, 1],
per-shape visibility masks).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .grammar import Grammar, load_grammar

DATASET_FORMAT_VERSION = 1
SUPERSAMPLE = 4
IMAGE_SIZE = 32
BACKGROUND = np.array([-0.9, -0.9, -0.9], dtype=np.float32)

# 6 well-separated colors in [-1, 1] RGB; pairwise L2 distance >= 2.
PALETTE: dict[str, np.ndarray] = {
    "red": np.array([1.0, -1.0, -1.0], dtype=np.float32),
    "green": np.array([-1.0, 1.0, -1.0], dtype=np.float32),
    "blue": np.array([-1.0, -1.0, 1.0], dtype=np.float32),
    "yellow": np.array([1.0, 1.0, -1.0], dtype=np.float32),
    "purple": np.array([1.0, -1.0, 1.0], dtype=np.float32),
    "orange": np.array([1.0, 0.0, -1.0], dtype=np.float32),
}

SHAPE_KINDS = ("circle", "square", "triangle")

# size classes as radius ranges in pixels (circumradius-like scale)
SIZE_RANGES = {"small": (3.5, 5.0), None: (5.0, 6.5), "large": (6.5, 8.0)}
MIN_SIZE_PX = 3.0


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    color: str
    cx: float
    cy: float
    size: float
    size_class: str | None = None

    def bounding_radius(self) -> float:
        if self.kind == "square":
            return self.size * float(np.sqrt(2.0))
        return self.size


@dataclass
class ShapeScene:
    shapes: list[ShapeSpec]
    image: np.ndarray  # (3, 32, 32) float32 in [-1, 1]
    caption: str
    masks: np.ndarray  # (n_shapes, 32, 32) bool, visible region per shape
    overlap: bool = False
    scene_id: str = ""


def _grid(side: int) -> tuple[np.ndarray, np.ndarray]:
    coords = (np.arange(side * SUPERSAMPLE, dtype=np.float64) + 0.5) / SUPERSAMPLE
    return np.meshgrid(coords, coords, indexing="xy")


def shape_alpha(spec: ShapeSpec, side: int = IMAGE_SIZE) -> np.ndarray:
    """Soft coverage mask in [0, 1], shape (side, side)."""
    xs, ys = _grid(side)
    dx, dy = xs - spec.cx, ys - spec.cy
    r = spec.size
    if spec.kind == "circle":
        hit = dx * dx + dy * dy <= r * r
    elif spec.kind == "square":
        hit = np.maximum(np.abs(dx), np.abs(dy)) <= r
    elif spec.kind == "triangle":
        # equilateral, apex up: inside all three edge half-planes
        s = 0.8660254037844386  # sin 60
        slanted = dy >= -r + (np.abs(dx) / s) * 1.5  # both slanted edges at once
        hit = (dy <= 0.5 * r) & slanted
    else:
        raise ConfigError(f"unknown shape kind {spec.kind!r}")
    big = hit.astype(np.float32)
    h = big.reshape(side, SUPERSAMPLE, side, SUPERSAMPLE)
    return h.mean(axis=(1, 3))


def render_scene(shapes: list[ShapeSpec]) -> tuple[np.ndarray, np.ndarray]:
    """Composite shapes in order; returns (image (3,H,W), visible masks)."""
    img = np.ones((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32) * BACKGROUND
    alphas = [shape_alpha(s) for s in shapes]
    for spec, a in zip(shapes, alphas):
        img = img * (1.0 - a[:, :, None]) + PALETTE[spec.color][None, None, :] * a[:, :, None]
    masks = []
    for i, a in enumerate(alphas):
        vis = a > 0.5
        for j in range(i + 1, len(alphas)):
            vis &= ~(alphas[j] > 0.5)
        masks.append(vis)
    mask_arr = np.stack(masks) if masks else np.zeros((0, IMAGE_SIZE, IMAGE_SIZE), bool)
    return np.ascontiguousarray(img.transpose(2, 0, 1)), mask_arr


def caption_for(shapes: list[ShapeSpec]) -> str:
    phrases = []
    for s in shapes:
        size_word = f"{s.size_class} " if s.size_class else ""
        phrases.append(f"a {size_word}{s.color} {s.kind}")
    return " and ".join(phrases)


def _separation_ratio(cand: ShapeSpec, placed: list[ShapeSpec]) -> float:
    """Min center distance relative to summed bounding radii; >= 1 is clear."""
    if not placed:
        return np.inf
    return min(
        np.hypot(cand.cx - o.cx, cand.cy - o.cy)
        / (cand.bounding_radius() + o.bounding_radius())
        for o in placed
    )


def sample_scene(rng: np.random.Generator, grammar: Grammar) -> ShapeScene:
    n = int(rng.integers(1, 4))
    colors = list(rng.choice(grammar.colors, size=n, replace=False))
    shapes: list[ShapeSpec] = []
    overlap = False
    for i in range(n):
        kind = str(rng.choice(SHAPE_KINDS))
        size_class = rng.choice(["small", None, None, "large"])
        size_class = None if size_class is None else str(size_class)
        lo, hi = SIZE_RANGES[size_class]
        size = float(rng.uniform(lo, hi))
        # place clear of others; shrink within the size class before giving
        # up and accepting a flagged (mild) overlap
        best: tuple[float, ShapeSpec] | None = None
        for shrink in (1.0, 0.93, 0.86):
            sz = max(size * shrink, lo if size_class else MIN_SIZE_PX)
            for _ in range(60):
                margin = sz * (1.5 if kind == "square" else 1.05) + 0.5
                cx = float(rng.uniform(margin, IMAGE_SIZE - margin))
                cy = float(rng.uniform(margin, IMAGE_SIZE - margin))
                cand = ShapeSpec(kind, colors[i], cx, cy, sz, size_class)
                ratio = _separation_ratio(cand, shapes)
                if best is None or ratio > best[0]:
                    best = (ratio, cand)
                if ratio >= 0.95:
                    break
            if best[0] >= 0.95:
                break
        if best[0] < 0.95:
            overlap = True
        shapes.append(best[1])
    image, masks = render_scene(shapes)
    return ShapeScene(
        shapes=shapes, image=image, caption=caption_for(shapes), masks=masks, overlap=overlap
    )


@dataclass
class ShapeDataset:
    scenes: list[ShapeScene]
    seed: int
    grammar_version: int
    format_version: int = DATASET_FORMAT_VERSION

    def __len__(self) -> int:
        return len(self.scenes)

    def save(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        (out / "scenes").mkdir(parents=True, exist_ok=True)
        entries = []
        for scene in self.scenes:
            rel = f"scenes/{scene.scene_id}.npz"
            np.savez(out / rel, image=scene.image, masks=scene.masks)
            entries.append(
                {
                    "id": scene.scene_id,
                    "caption": scene.caption,
                    "overlap": scene.overlap,
                    "file": rel,
                    "shapes": [
                        {
                            "kind": s.kind,
                            "color": s.color,
                            "cx": s.cx,
                            "cy": s.cy,
                            "size": s.size,
                            "size_class": s.size_class,
                        }
                        for s in scene.shapes
                    ],
                }
            )
        index = {
            "format_version": self.format_version,
            "n": len(self.scenes),
            "seed": self.seed,
            "grammar_version": self.grammar_version,
            "scenes": entries,
        }
        (out / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
        return out

    @classmethod
    def load(cls, in_dir: str | Path) -> "ShapeDataset":
        root = Path(in_dir)
        index = json.loads((root / "index.json").read_text())
        if index.get("format_version") != DATASET_FORMAT_VERSION:
            raise ConfigError(
                f"dataset format version {index.get('format_version')} unsupported"
            )
        scenes = []
        for e in index["scenes"]:
            with np.load(root / e["file"]) as z:
                image, masks = z["image"], z["masks"]
            shapes = [ShapeSpec(**s) for s in e["shapes"]]
            scenes.append(
                ShapeScene(
                    shapes=shapes,
                    image=image,
                    caption=e["caption"],
                    masks=masks,
                    overlap=e["overlap"],
                    scene_id=e["id"],
                )
            )
        return cls(
            scenes=scenes, seed=index["seed"], grammar_version=index["grammar_version"]
        )


def make_dataset(n: int, seed: int, grammar: Grammar | None = None) -> ShapeDataset:
    """Generate n scenes deterministically from the seed."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    grammar = grammar or load_grammar()
    rng = np.random.default_rng(seed)
    scenes = []
    for i in range(n):
        scene = sample_scene(rng, grammar)
        scene.scene_id = f"{i:06d}"
        scenes.append(scene)
    return ShapeDataset(scenes=scenes, seed=seed, grammar_version=grammar.version)
