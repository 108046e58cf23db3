"""Alignment and preference objectives, their combination, and the gradient op."""

import numpy as np
import pytest
import torch

from dynaguide.diffusion import forward_diffuse, make_linear_schedule
from dynaguide.errors import NumericsError
from dynaguide.grammar import load_grammar
from dynaguide.models.denoiser import AttentionBundle, ToyDenoiser, ToyDenoiserConfig
from dynaguide.models.scorer import PreferenceScorer, PreferenceScorerConfig, scorer_cosine
from dynaguide.models.text import Vocabulary, encode_text
from dynaguide.objectives import (
    combined_loss,
    gradient,
    preference_loss,
    semantic_alignment_loss,
)
from dynaguide.semantics.graph import SemanticGraph, extract_graph_rules

GRAMMAR = load_grammar()
VOCAB = Vocabulary.from_grammar(GRAMMAR)
SCHED = make_linear_schedule(50, 0.02, 0.30)


def bundle_from_maps(maps: torch.Tensor) -> AttentionBundle:
    return AttentionBundle(maps=maps, layer_ids=("synthetic",), head_count=1)


def graph_with(entities, attributes, entity_bindings, attribute_bindings) -> SemanticGraph:
    return SemanticGraph(
        prompt="synthetic",
        entities=entities,
        attributes=attributes,
        entity_bindings=entity_bindings,
        attribute_bindings=attribute_bindings,
    )


def basis_map(idx: int, side: int = 4) -> torch.Tensor:
    m = torch.zeros(side * side, dtype=torch.float64)
    m[idx] = 1.0
    return m.reshape(side, side)


class TestSemanticAlignmentLoss:
    def test_identical_positive_pair_gives_minus_one(self):
        m = torch.rand(4, 4, dtype=torch.float64) + 0.1
        maps = torch.stack([m, m.clone()])
        g = graph_with(["e"], [["a"]], [[0]], [[[1]]])
        loss = semantic_alignment_loss(bundle_from_maps(maps), g)
        assert float(loss) == pytest.approx(-1.0, abs=1e-9)

    def test_disjoint_negative_pair_gives_zero(self):
        maps = torch.stack([basis_map(0), basis_map(7)])
        g = graph_with(["e1", "e2"], [[], []], [[0]], [[], []])
        g.entity_bindings = [[0], [1]]
        loss = semantic_alignment_loss(bundle_from_maps(maps), g)
        assert float(loss) == pytest.approx(0.0, abs=1e-12)

    def test_constructed_cosines_arithmetic(self):
        # pos cosines 0.9 and 0.8, neg cosine 0.3 -> -0.85 + 0.3 = -0.55
        b0, b1, b2, b3 = (basis_map(i).reshape(-1) for i in range(4))
        e1 = b0
        e2 = 0.3 * b0 + float(np.sqrt(1 - 0.09)) * b1
        a1 = 0.9 * b0 + float(np.sqrt(1 - 0.81)) * b2
        a2 = 0.8 * e2 + 0.6 * b3
        maps = torch.stack([m.reshape(4, 4) for m in (e1, a1, e2, a2)])
        g = graph_with(
            ["x", "y"], [["p"], ["q"]], [[0], [2]], [[[1]], [[3]]]
        )
        loss, per_edge = semantic_alignment_loss(
            bundle_from_maps(maps), g, with_diagnostics=True
        )
        assert per_edge["pos:x[0]~p"] == pytest.approx(0.9, abs=1e-9)
        assert per_edge["pos:y[1]~q"] == pytest.approx(0.8, abs=1e-9)
        assert per_edge["neg:x[0]~y[1]"] == pytest.approx(0.3, abs=1e-9)
        assert float(loss) == pytest.approx(-0.55, abs=1e-9)

    def test_empty_edge_sets_contribute_zero(self):
        maps = torch.stack([basis_map(0)])
        g = graph_with(["only"], [[]], [[0]], [[]])
        assert float(semantic_alignment_loss(bundle_from_maps(maps), g)) == 0.0

    def test_zero_entity_graph_returns_zero(self):
        maps = torch.stack([basis_map(0)])
        g = graph_with([], [], [], [])
        assert float(semantic_alignment_loss(bundle_from_maps(maps), g)) == 0.0

    def test_entity_permutation_invariance(self):
        rng = torch.Generator().manual_seed(0)
        maps = torch.rand(6, 4, 4, generator=rng, dtype=torch.float64) + 0.05
        g = graph_with(
            ["a", "b", "c"],
            [["p"], ["q"], []],
            [[0], [2], [4]],
            [[[1]], [[3]], []],
        )
        perm = graph_with(
            ["c", "a", "b"],
            [[], ["p"], ["q"]],
            [[4], [0], [2]],
            [[], [[1]], [[3]]],
        )
        la = semantic_alignment_loss(bundle_from_maps(maps), g)
        lb = semantic_alignment_loss(bundle_from_maps(maps), perm)
        assert float(la) == pytest.approx(float(lb), abs=1e-12)

    def test_single_map_rescaling_invariance(self):
        rng = torch.Generator().manual_seed(1)
        maps = torch.rand(4, 4, 4, generator=rng, dtype=torch.float64) + 0.05
        g = graph_with(["a", "b"], [["p"], ["q"]], [[0], [2]], [[[1]], [[3]]])
        base = float(semantic_alignment_loss(bundle_from_maps(maps), g))
        scaled = maps.clone()
        scaled[2] = scaled[2] * 37.5
        after = float(semantic_alignment_loss(bundle_from_maps(scaled), g))
        assert after == pytest.approx(base, abs=1e-12)

    def test_l_a_within_bounds(self):
        rng = torch.Generator().manual_seed(2)
        for _ in range(25):
            maps = torch.rand(5, 4, 4, generator=rng, dtype=torch.float64) + 1e-3
            g = graph_with(
                ["a", "b"], [["p"], ["q", "r"]], [[0], [1]], [[[2]], [[3], [4]]]
            )
            v = float(semantic_alignment_loss(bundle_from_maps(maps), g))
            assert -2.0 <= v <= 2.0

    def test_descent_on_controllable_maps_improves_separation(self):
        # differentiable generator: maps are softmax over spatial positions
        torch.manual_seed(3)
        logits = torch.randn(4, 16, dtype=torch.float64, requires_grad=True)
        g = graph_with(["a", "b"], [["p"], ["q"]], [[0], [2]], [[[1]], [[3]]])

        def stats():
            with torch.no_grad():
                maps = logits.softmax(dim=1).reshape(4, 4, 4)
                _, edges = semantic_alignment_loss(
                    bundle_from_maps(maps), g, with_diagnostics=True
                )
            pos = np.mean([v for k, v in edges.items() if k.startswith("pos")])
            neg = np.mean([v for k, v in edges.items() if k.startswith("neg")])
            return pos, neg

        pos0, neg0 = stats()
        opt = torch.optim.SGD([logits], lr=0.5)
        losses = []
        for _ in range(100):
            opt.zero_grad()
            maps = logits.softmax(dim=1).reshape(4, 4, 4)
            loss = semantic_alignment_loss(bundle_from_maps(maps), g)
            loss.backward()
            losses.append(float(loss))
            opt.step()
        pos1, neg1 = stats()
        assert pos1 > pos0
        assert neg1 < neg0
        assert losses[-1] < losses[0]

    def test_unbound_graph_rejected(self):
        g = SemanticGraph(prompt="x", entities=["circle"], attributes=[[]])
        with pytest.raises(ValueError, match="token-bound"):
            semantic_alignment_loss(bundle_from_maps(torch.rand(1, 4, 4)), g)


def tiny_models(dtype=torch.float64, image_size=8):
    torch.manual_seed(7)
    den = ToyDenoiser(ToyDenoiserConfig(vocab_size=len(VOCAB), image_size=image_size))
    sco = PreferenceScorer(PreferenceScorerConfig(vocab_size=len(VOCAB), image_size=image_size))
    if dtype is torch.float64:
        den.double()
        sco.double()
    den.eval()
    sco.eval()
    return den, sco


class TestPreferenceLoss:
    def test_neg_cosine_matches_scaled_cosine(self):
        _, sco = tiny_models()
        text = encode_text("a red circle", VOCAB)
        img = torch.rand(3, 8, 8, dtype=torch.float64) * 2 - 1
        loss = preference_loss(img, text, 10, sco, SCHED)
        cos = scorer_cosine(img, text, 10, sco, SCHED)
        assert float(loss) == pytest.approx(-sco.tau * float(cos), rel=1e-12)

    def test_gradient_proportional_to_cosine_gradient(self):
        # d(loss)/dz must equal -tau * d(cos)/dz everywhere
        _, sco = tiny_models()
        text = encode_text("a blue square", VOCAB)
        img = (torch.rand(3, 8, 8, dtype=torch.float64) * 2 - 1).requires_grad_(True)
        loss = preference_loss(img, text, 5, sco, SCHED)
        (g_loss,) = torch.autograd.grad(loss, img)
        img2 = img.detach().clone().requires_grad_(True)
        cos = scorer_cosine(img2, text, 5, sco, SCHED)
        (g_cos,) = torch.autograd.grad(cos, img2)
        assert torch.allclose(g_loss, -sco.tau * g_cos, atol=1e-12)

    def test_strictly_decreasing_in_cosine(self):
        taus = torch.linspace(-1, 1, 21, dtype=torch.float64)
        vals = [-2.0 * float(c) for c in taus]  # tau = 2 fixed in config
        assert all(b < a for a, b in zip(vals, vals[1:]))

    def test_unit_norm_towers(self):
        _, sco = tiny_models()
        img = torch.randn(5, 3, 8, 8, dtype=torch.float64)
        u = torch.rand(5, dtype=torch.float64)
        fv = sco.vision_embed(img, u)
        assert torch.allclose(
            torch.linalg.vector_norm(fv, dim=-1),
            torch.ones(5, dtype=torch.float64),
            atol=1e-6,
        )
        ids = encode_text("a small green triangle", VOCAB).token_ids[None]
        ft = sco.text_embed(ids)
        assert float(torch.linalg.vector_norm(ft)) == pytest.approx(1.0, abs=1e-6)

    def test_raw_exponential_form(self):
        _, sco = tiny_models()
        text = encode_text("a red circle", VOCAB)
        img = torch.rand(3, 8, 8, dtype=torch.float64)
        cos = float(scorer_cosine(img, text, 3, sco, SCHED))
        loss = preference_loss(img, text, 3, sco, SCHED, form="neg_exp")
        assert float(loss) == pytest.approx(-np.exp(sco.tau * cos), rel=1e-9)

    def test_unknown_form_rejected(self):
        _, sco = tiny_models()
        text = encode_text("a red circle", VOCAB)
        img = torch.rand(3, 8, 8, dtype=torch.float64)
        with pytest.raises(ValueError, match="form"):
            preference_loss(img, text, 3, sco, SCHED, form="bogus")


class TestCombinedLoss:
    def setup_method(self):
        self.den, self.sco = tiny_models()
        self.text = encode_text("a red circle and a blue square", VOCAB)
        self.graph = extract_graph_rules(self.text.prompt, GRAMMAR)
        torch.manual_seed(11)
        self.z = torch.randn(3, 8, 8, dtype=torch.float64)

    def _run(self, w_a, w_r, **kw):
        return combined_loss(
            self.z, 25, self.text, self.graph, self.den, self.sco, SCHED, w_a, w_r, **kw
        )

    def test_weight_identity_bit_exact(self):
        for w_a, w_r in [(1.0, 0.0), (0.0, 1.0), (0.6, 0.4), (0.25, 0.75)]:
            r = self._run(w_a, w_r)
            assert r.value.total == w_a * r.value.l_a + w_r * r.value.l_r

    def test_pure_semantic_configuration(self):
        r = self._run(1.0, 0.0)
        assert r.value.total == r.value.l_a
        # the unweighted preference term is still reported
        assert r.value.l_r != 0.0

    def test_pure_preference_configuration(self):
        r = self._run(0.0, 1.0)
        assert r.value.total == r.value.l_r

    def test_disable_unweighted_diagnostics(self):
        r = self._run(1.0, 0.0, compute_unweighted=False)
        assert r.value.l_r == 0.0

    def test_no_graph_event(self):
        r = combined_loss(
            self.z, 25, self.text, None, self.den, self.sco, SCHED, 1.0, 0.0
        )
        assert "no-graph" in r.value.events
        assert r.value.l_a == 0.0

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            self._run(-0.1, 0.5)


class TestGradient:
    def test_constant_objective_gives_zero(self):
        z = torch.randn(3, 4, 4, dtype=torch.float64)
        g = gradient(lambda _: torch.tensor(3.14, dtype=torch.float64), z)
        assert float(torch.linalg.vector_norm(g.g)) == 0.0

    def test_quadratic_gradient_is_identity(self):
        z = torch.randn(3, 4, 4, dtype=torch.float64)
        g = gradient(lambda x: 0.5 * (x**2).sum(), z)
        assert torch.allclose(g.g, z, atol=1e-12)
        assert g.norm == pytest.approx(float(torch.linalg.vector_norm(z)), rel=1e-9)

    def test_nan_gradient_raises(self):
        z = torch.zeros(2, dtype=torch.float64)

        def bad(x):
            return (x / x.sum()).sum()  # 0/0 at this z

        with pytest.raises(NumericsError):
            gradient(bad, z)

    def test_combined_loss_matches_finite_differences(self):
        den, sco = tiny_models()
        text = encode_text("a red circle and a blue square", VOCAB)
        graph = extract_graph_rules(text.prompt, GRAMMAR)
        rng = torch.Generator().manual_seed(21)
        base = torch.rand(3, 8, 8, generator=rng, dtype=torch.float64) * 2 - 1
        for t, (w_a, w_r) in [(45, (1.0, 0.0)), (30, (0.6, 0.4)), (10, (0.0, 1.0))]:
            eps = torch.randn(base.shape, generator=rng, dtype=torch.float64)
            z = forward_diffuse(base, t, eps, SCHED)

            def f(x):
                return combined_loss(
                    x, t, text, graph, den, sco, SCHED, w_a, w_r,
                    compute_unweighted=False,
                ).total

            g = gradient(f, z).g
            h = 1e-6
            for k in range(4):
                v = torch.randn(z.shape, generator=rng, dtype=torch.float64)
                v = v / torch.linalg.vector_norm(v)
                fd = (float(f(z + h * v)) - float(f(z - h * v))) / (2 * h)
                an = float((g * v).sum())
                assert an == pytest.approx(fd, rel=1e-4, abs=1e-10)
