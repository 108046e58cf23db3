"""Guidance objectives: attention-map alignment and preference alignment.

The semantic term scores a prompt's graph against the denoiser's
attention maps: positive edges (entity, own attribute) want high cosine
similarity between their maps, negative edges (entity pairs) want low,

    L_A = -(1/|S_pos|) sum_pos cos(M_s, M_l) + (1/|S_neg|) sum_neg cos(M_s, M_l).

The preference term descends -tau * cos(f_V(x, t), f_T(c)) by default
(the negative log of the scorer's raw exp(tau*cos) score); a config
switch selects the raw exponential form instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .diffusion import NoiseSchedule, predict_clean
from .errors import NumericsError
from .models.denoiser import (
    AttentionBundle,
    ScoreOutput,
    ToyDenoiser,
    decode,
    denoise,
    token_attention_map,
)
from .models.scorer import PreferenceScorer, scorer_cosine
from .models.text import TextEncoding
from .semantics.graph import SemanticGraph

COSINE_EPS = 1e-12


@dataclass
class ObjectiveValue:
    total: float
    l_a: float
    l_r: float
    w_a: float
    w_r: float
    per_edge: dict[str, float] = field(default_factory=dict)
    events: list[str] = field(default_factory=list)


@dataclass
class GuidanceGradient:
    g: torch.Tensor
    norm: float
    provenance: tuple[str, ...]


def _flat_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    a = a.reshape(-1)
    b = b.reshape(-1)
    denom = torch.linalg.vector_norm(a) * torch.linalg.vector_norm(b) + COSINE_EPS
    return (a * b).sum() / denom


def _node_map(bundle: AttentionBundle, bindings: list[int]) -> torch.Tensor:
    return token_attention_map(bundle, bindings)


def semantic_alignment_loss(
    bundle: AttentionBundle,
    graph: SemanticGraph,
    with_diagnostics: bool = False,
) -> torch.Tensor | tuple[torch.Tensor, dict[str, float]]:
    """Differentiable semantic alignment loss over the bundle's maps.

    Empty edge sets contribute 0 to their term; a graph with no bound
    nodes yields an exact 0 (callers record the "no-graph" event).
    """
    if not graph.bound:
        raise ValueError("graph must be token-bound before scoring")
    dtype = bundle.maps.dtype
    per_edge: dict[str, float] = {}
    if graph.n_entities == 0:
        zero = torch.zeros((), dtype=dtype, device=bundle.maps.device)
        return (zero, per_edge) if with_diagnostics else zero

    entity_maps = [_node_map(bundle, b) for b in graph.entity_bindings]
    pos_terms = []
    for i, binds in enumerate(graph.attribute_bindings):
        for j, attr_bind in enumerate(binds):
            cos = _flat_cosine(entity_maps[i], _node_map(bundle, attr_bind))
            pos_terms.append(cos)
            per_edge[f"pos:{graph.entities[i]}[{i}]~{graph.attributes[i][j]}"] = float(
                cos.detach()
            )
    neg_terms = []
    for i in range(graph.n_entities):
        for m in range(i + 1, graph.n_entities):
            cos = _flat_cosine(entity_maps[i], entity_maps[m])
            neg_terms.append(cos)
            per_edge[f"neg:{graph.entities[i]}[{i}]~{graph.entities[m]}[{m}]"] = float(
                cos.detach()
            )

    loss = torch.zeros((), dtype=dtype, device=bundle.maps.device)
    if pos_terms:
        loss = loss - torch.stack(pos_terms).mean()
    if neg_terms:
        loss = loss + torch.stack(neg_terms).mean()
    return (loss, per_edge) if with_diagnostics else loss


def preference_loss(
    image: torch.Tensor,
    text: TextEncoding,
    t: int,
    scorer: PreferenceScorer,
    schedule: NoiseSchedule,
    form: str = "neg_cosine",
) -> torch.Tensor:
    """Differentiable preference objective (lower = more preferred).

    form "neg_cosine": -tau * cos, the negative log of the raw score.
    form "neg_exp":    -exp(tau * cos), the raw reward negated.
    """
    if form not in ("neg_cosine", "neg_exp"):
        raise ValueError(f"unknown preference loss form {form!r}")
    cos = scorer_cosine(image, text, t, scorer, schedule)
    if form == "neg_cosine":
        return -scorer.tau * cos
    return -torch.exp(scorer.tau * cos)


@dataclass
class CombinedLossResult:
    total: torch.Tensor  # differentiable scalar
    value: ObjectiveValue
    score_output: ScoreOutput
    z0_pred: torch.Tensor


def combined_loss(
    z_t: torch.Tensor,
    t: int,
    text: TextEncoding,
    graph: SemanticGraph | None,
    denoiser: ToyDenoiser,
    scorer: PreferenceScorer,
    schedule: NoiseSchedule,
    w_a: float,
    w_r: float,
    preference_form: str = "neg_cosine",
    compute_unweighted: bool = True,
) -> CombinedLossResult:
    """Alg-style composite: denoise, predict clean, decode, score both terms.

    total = w_a * l_a + w_r * l_r as an exact float identity. Zero-weight
    terms are still evaluated (under no_grad) for diagnostics unless
    compute_unweighted is False.
    """
    out = denoise(z_t, t, text, denoiser, schedule)
    z0 = predict_clean(z_t, out.score, t, schedule)
    return combined_loss_from_forward(
        out,
        z0,
        t,
        text,
        graph,
        scorer,
        schedule,
        w_a,
        w_r,
        preference_form,
        compute_unweighted,
    )


def combined_loss_from_forward(
    out: ScoreOutput,
    z0: torch.Tensor,
    t: int,
    text: TextEncoding,
    graph: SemanticGraph | None,
    scorer: PreferenceScorer,
    schedule: NoiseSchedule,
    w_a: float,
    w_r: float,
    preference_form: str = "neg_cosine",
    compute_unweighted: bool = True,
) -> CombinedLossResult:
    """Assemble the composite loss from an already-run denoiser pass.

    Sampling decides the stage weights from the clean prediction of the
    same forward pass, so the loss assembly must be callable after the
    fact without re-running the model.
    """
    if w_a < 0 or w_r < 0:
        raise ValueError(f"weights must be >= 0, got ({w_a}, {w_r})")
    z_t = z0  # reference tensor for dtype/device of zero placeholders
    events: list[str] = []
    image = decode(z0)

    def eval_l_a() -> tuple[torch.Tensor, dict[str, float]]:
        if graph is None or graph.n_entities == 0:
            events.append("no-graph")
            return torch.zeros((), dtype=z_t.dtype, device=z_t.device), {}
        return semantic_alignment_loss(out.attention, graph, with_diagnostics=True)

    def eval_l_r() -> torch.Tensor:
        return preference_loss(image, text, t, scorer, schedule, form=preference_form)

    per_edge: dict[str, float] = {}
    if w_a > 0:
        l_a, per_edge = eval_l_a()
    elif compute_unweighted:
        with torch.no_grad():
            l_a, per_edge = eval_l_a()
    else:
        l_a = torch.zeros((), dtype=z_t.dtype, device=z_t.device)

    if w_r > 0:
        l_r = eval_l_r()
    elif compute_unweighted:
        with torch.no_grad():
            l_r = eval_l_r()
    else:
        l_r = torch.zeros((), dtype=z_t.dtype, device=z_t.device)

    total = w_a * l_a + w_r * l_r
    value = ObjectiveValue(
        total=w_a * float(l_a.detach()) + w_r * float(l_r.detach()),
        l_a=float(l_a.detach()),
        l_r=float(l_r.detach()),
        w_a=w_a,
        w_r=w_r,
        per_edge=per_edge,
        events=events,
    )
    return CombinedLossResult(total=total, value=value, score_output=out, z0_pred=z0)


def gradient(closure, z_t: torch.Tensor) -> GuidanceGradient:
    """Exact gradient of closure(z) at z_t via autograd.

    The closure receives a leaf copy of z_t and must return a scalar
    tensor connected to it (a constant objective yields a zero gradient).
    """
    z = z_t.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        loss = closure(z)
        if not torch.is_tensor(loss) or loss.dim() != 0:
            raise ValueError("objective closure must return a scalar tensor")
        if loss.requires_grad:
            (g,) = torch.autograd.grad(loss, z, allow_unused=True)
        else:
            g = None  # objective constant in z
    if g is None:
        g = torch.zeros_like(z_t)
    if not torch.isfinite(g).all():
        raise NumericsError("gradient contains non-finite entries")
    return GuidanceGradient(
        g=g.detach(), norm=float(torch.linalg.vector_norm(g)), provenance=("closure",)
    )
