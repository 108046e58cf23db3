"""Programmatic semantics detector for rendered or generated images.

For each object the caption asks for, the detector extracts the pixels
near that object's palette color and template-matches them against
rendered shape masks over a size grid (maximum intersection-over-union
across all displacements, via FFT cross-correlation). An object counts as
detected when its color mask clears the IoU threshold for its shape kind
and that kind beats the other shape templates (thresholding alone cannot
tell a square from a circle); shape presence in any palette color is
reported separately.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.signal import fftconvolve

from .grammar import Grammar, load_grammar
from .semantics.graph import extract_graph_rules
from .shapes import BACKGROUND, IMAGE_SIZE, PALETTE, SHAPE_KINDS, ShapeSpec, shape_alpha

COLOR_DISTANCE_MAX = 1.2  # beyond this a pixel belongs to no palette color
MIN_AREA_PX = 6
IOU_THRESHOLD = 0.45
KIND_MARGIN = 0.06  # how far behind the best template a kind may trail
TEMPLATE_SIZES = tuple(np.arange(3.0, 8.26, 0.25))


@dataclass
class ObjectReport:
    kind: str
    color: str
    detected: bool  # right kind in the right color
    shape_present: bool  # right kind in any palette color
    color_iou: float
    best_color_kind: str | None  # kind the color blob resembles most
    best_any: tuple[str, str, float] | None = None  # (kind, color, iou)


@dataclass
class SemanticsReport:
    caption: str
    objects: list[ObjectReport] = field(default_factory=list)

    @property
    def all_detected(self) -> bool:
        return all(o.detected for o in self.objects) if self.objects else False

    @property
    def pass_fraction(self) -> float:
        if not self.objects:
            return 0.0
        return sum(o.detected for o in self.objects) / len(self.objects)


@lru_cache(maxsize=None)
def _templates(kind: str) -> tuple[np.ndarray, ...]:
    out = []
    for r in TEMPLATE_SIZES:
        side = int(np.ceil(2 * r)) + 3
        spec = ShapeSpec(kind=kind, color="red", cx=side / 2, cy=side / 2, size=float(r))
        out.append(shape_alpha(spec, side=side) > 0.5)
    return tuple(out)


def _best_iou(mask: np.ndarray, kind: str) -> float:
    """Max IoU of the mask against the kind's templates over all shifts."""
    area_m = int(mask.sum())
    if area_m < MIN_AREA_PX:
        return 0.0
    m = mask.astype(np.float32)
    best = 0.0
    for tmpl in _templates(kind):
        area_t = int(tmpl.sum())
        # upper bound on IoU for this template cannot beat current best
        bound = min(area_m, area_t) / max(area_m, area_t)
        if bound <= best:
            continue
        inter = fftconvolve(m, tmpl[::-1, ::-1].astype(np.float32), mode="full")
        inter = np.clip(np.rint(inter), 0, min(area_m, area_t))
        union = area_m + area_t - inter
        iou = float((inter / union).max())
        best = max(best, iou)
    return best


def color_masks(image: np.ndarray, grammar: Grammar) -> dict[str, np.ndarray]:
    """Assign each pixel to its nearest palette color (background competes).

    Palette entries are not equidistant (orange neighbors red and yellow),
    so nearest-color assignment is the unambiguous rule; a distance cap
    keeps washed-out pixels out of every mask. Pixel blend math puts the
    decision boundary against background at coverage 0.5, matching the
    template binarization.
    """
    names = list(grammar.colors)
    targets = np.stack([PALETTE[c] for c in names] + [BACKGROUND])  # (k+1, 3)
    dist = np.sqrt(
        ((image[None, :, :, :] - targets[:, :, None, None]) ** 2).sum(axis=1)
    )  # (k+1, H, W)
    nearest = dist.argmin(axis=0)
    return {
        c: (nearest == i) & (dist[i] < COLOR_DISTANCE_MAX)
        for i, c in enumerate(names)
    }


def expected_objects(caption: str, grammar: Grammar) -> list[tuple[str, str | None]]:
    """(kind, color) pairs the caption asks for; color None when unstated."""
    graph = extract_graph_rules(caption, grammar)
    colors = set(grammar.colors)
    out = []
    for entity, attrs in zip(graph.entities, graph.attributes):
        stated = [a for a in attrs if a in colors]
        out.append((entity, stated[0] if stated else None))
    return out


def _iou_table(
    masks: dict[str, np.ndarray]
) -> dict[str, dict[str, float]]:
    """Best template IoU for every (color, kind) pair."""
    return {
        c: {k: _best_iou(mask, k) for k in SHAPE_KINDS}
        for c, mask in masks.items()
    }


def _kind_matches(ious: dict[str, float], kind: str) -> bool:
    """The blob must clear the threshold AND look most like this kind.

    Thresholding alone is not discriminative: a filled square also
    overlaps a circle template well above threshold, so the requested
    kind must be (near-)best across all shape templates. The margin
    absorbs pixelization noise: at a few pixels across, binarized
    circles, squares, and triangles differ by only a handful of corner
    pixels, and sub-pixel placement can flip the strict argmax.
    """
    iou = ious[kind]
    return iou >= IOU_THRESHOLD and iou >= max(ious.values()) - KIND_MARGIN


def detect_semantics(
    image: np.ndarray, caption: str, grammar: Grammar | None = None
) -> SemanticsReport:
    """Check every captioned object for presence and color correctness."""
    grammar = grammar or load_grammar()
    if image.shape != (3, IMAGE_SIZE, IMAGE_SIZE):
        raise ValueError(f"expected (3, {IMAGE_SIZE}, {IMAGE_SIZE}) image, got {image.shape}")
    image = np.asarray(image, dtype=np.float32)
    report = SemanticsReport(caption=caption)
    table = _iou_table(color_masks(image, grammar))
    for kind, color in expected_objects(caption, grammar):
        if kind not in SHAPE_KINDS:
            report.objects.append(
                ObjectReport(kind, color or "", False, False, 0.0, None)
            )
            continue
        matching = {c for c in grammar.colors if _kind_matches(table[c], kind)}
        shape_present = bool(matching)
        if color is None:
            # no color stated: any palette color counts as detected
            detected = shape_present
            best_c = max(grammar.colors, key=lambda c: table[c][kind])
            c_iou = table[best_c][kind]
        else:
            best_c = color
            c_iou = table[color][kind]
            detected = color in matching
        blob_kind = max(SHAPE_KINDS, key=lambda k: table[best_c][k])
        report.objects.append(
            ObjectReport(
                kind=kind,
                color=color or best_c,
                detected=detected,
                shape_present=shape_present,
                color_iou=c_iou,
                best_color_kind=blob_kind,
            )
        )
    return report


def contains_any_shape(image: np.ndarray, grammar: Grammar | None = None) -> bool:
    """True when some palette color region matches some shape template."""
    grammar = grammar or load_grammar()
    image = np.asarray(image, dtype=np.float32)
    for color, mask in color_masks(image, grammar).items():
        if int(mask.sum()) < MIN_AREA_PX:
            continue
        for kind in SHAPE_KINDS:
            if _best_iou(mask, kind) >= IOU_THRESHOLD:
                return True
    return False
