"""Graph extraction (rules and stubbed LLM), edge sets, and token binding."""

import json

import pytest

from dynaguide.errors import GraphExtractionError
from dynaguide.grammar import load_grammar
from dynaguide.models.text import Vocabulary, encode_text
from dynaguide.semantics.graph import (
    SemanticGraph,
    bind_tokens,
    build_edges,
    extract_graph_rules,
    graph_from_payload,
)
from dynaguide.semantics.llm import (
    ResponseCache,
    StubLLMClient,
    extract_graph_llm,
    parse_llm_response,
)

GRAMMAR = load_grammar()
VOCAB = Vocabulary.from_grammar(GRAMMAR)

FROG_PROMPT = "a photo of a frog holding an apple while smiling in the forest"
FROG_GRAPH = {
    "prompt": FROG_PROMPT,
    "Graph": [{"frog": ["smiling"]}, {"apple": []}, {"forest": []}],
}
BEAR_PROMPT = "a white polar bear cub wearing sunglasses sits in a meadow with flowers."
BEAR_GRAPH = {
    "prompt": BEAR_PROMPT,
    "Graph": [
        {"bear": ["white", "cub"]},
        {"sunglasses": []},
        {"meadow": []},
        {"flowers": []},
    ],
}


class TestBuildEdges:
    def test_counting_two_entities(self):
        s_pos, s_neg = build_edges(["circle", "square"], [["red"], []])
        assert len(s_pos) == 1 and len(s_neg) == 1

    def test_three_bare_entities(self):
        s_pos, s_neg = build_edges(["a", "b", "c"], [[], [], []])
        assert len(s_pos) == 0 and len(s_neg) == 3

    def test_four_entities_two_attrs_each(self):
        ents = ["a", "b", "c", "d"]
        attrs = [["x", "y"]] * 4
        s_pos, s_neg = build_edges(ents, attrs)
        assert len(s_pos) == 8 and len(s_neg) == 6

    def test_permutation_leaves_sets_unchanged(self):
        ents = ["circle", "square", "triangle"]
        attrs = [["red"], ["blue"], []]
        ref_pos, ref_neg = build_edges(ents, attrs)
        perm = [2, 0, 1]
        p_pos, p_neg = build_edges([ents[i] for i in perm], [attrs[i] for i in perm])
        # index sets relabel but cardinalities and pair structure agree
        assert len(p_pos) == len(ref_pos) and len(p_neg) == len(ref_neg)
        named = {(ents[i], attrs[i][j]) for i, j in ref_pos}
        ents_p = [ents[i] for i in perm]
        attrs_p = [attrs[i] for i in perm]
        named_p = {(ents_p[i], attrs_p[i][j]) for i, j in p_pos}
        assert named == named_p

    def test_mismatched_lengths_rejected(self):
        with pytest.raises(ValueError, match="indexed by entity"):
            build_edges(["a"], [])


class TestRuleParser:
    def test_two_object_caption(self):
        g = extract_graph_rules("a red circle and a blue square", GRAMMAR)
        assert g.entities == ["circle", "square"]
        assert g.attributes == [["red"], ["blue"]]
        assert g.s_pos == {(0, 0), (1, 0)}
        assert g.s_neg == {(0, 1)}
        assert g.entity_bindings == [[2], [6]]
        assert g.attribute_bindings == [[[1]], [[5]]]

    def test_single_entity(self):
        g = extract_graph_rules("a circle", GRAMMAR)
        assert g.n_entities == 1
        assert g.s_pos == set() and g.s_neg == set()

    def test_no_grammar_nouns(self):
        g = extract_graph_rules("hello world", GRAMMAR)
        assert g.n_entities == 0

    def test_size_and_color_attach(self):
        g = extract_graph_rules("a small red circle", GRAMMAR)
        assert g.attributes == [["small", "red"]]

    def test_window_does_not_leak_between_objects(self):
        g = extract_graph_rules("a red circle and a square", GRAMMAR)
        assert g.attributes == [["red"], []]

    def test_repeated_word_yields_distinct_instances(self):
        g = extract_graph_rules("a circle near a circle", GRAMMAR)
        assert g.entities == ["circle", "circle"]
        assert g.entity_bindings == [[1], [4]]
        assert len(g.s_neg) == 1

    def test_deterministic_serialization(self):
        a = extract_graph_rules("a red circle and a blue square", GRAMMAR).to_json()
        b = extract_graph_rules("a red circle and a blue square", GRAMMAR).to_json()
        assert a == b

    def test_edge_counts_on_random_grammar_prompts(self):
        # formula check over a large prompt sample
        import numpy as np

        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(1, 4))
            phrases = []
            want_attrs = 0
            for _ in range(n):
                words = ["a"]
                if rng.random() < 0.5:
                    words.append(str(rng.choice(GRAMMAR.sizes)))
                    want_attrs += 1
                if rng.random() < 0.9:
                    words.append(str(rng.choice(GRAMMAR.colors)))
                    want_attrs += 1
                words.append(str(rng.choice(GRAMMAR.nouns)))
                phrases.append(" ".join(words))
            g = extract_graph_rules(" and ".join(phrases), GRAMMAR)
            assert g.n_entities == n
            assert len(g.s_pos) == want_attrs == sum(len(a) for a in g.attributes)
            assert len(g.s_neg) == n * (n - 1) // 2


class TestPayloadValidation:
    def test_appendix_shape_round_trip(self):
        g = graph_from_payload(FROG_GRAPH)
        assert g.entities == ["frog", "apple", "forest"]
        assert g.attributes == [["smiling"], [], []]
        payload = g.to_payload()
        assert payload["Graph"] == FROG_GRAPH["Graph"]

    @pytest.mark.parametrize(
        "bad",
        [
            {"Graph": []},
            {"prompt": "x", "Graph": {"a": []}},
            {"prompt": "x", "Graph": [{"a": [], "b": []}]},
            {"prompt": "x", "Graph": [{"a": "red"}]},
            {"prompt": "x", "Graph": [{"": []}]},
        ],
    )
    def test_malformed_payloads_rejected(self, bad):
        with pytest.raises(GraphExtractionError):
            graph_from_payload(bad)


class TestStubbedLLMPath:
    def test_frog_graph_reproduced_exactly(self):
        client = StubLLMClient({FROG_PROMPT: json.dumps(FROG_GRAPH)})
        g = extract_graph_llm(FROG_PROMPT, client, GRAMMAR)
        assert g.entities == ["frog", "apple", "forest"]
        assert g.attributes == [["smiling"], [], []]
        assert g.source == "llm"

    def test_bear_graph_reproduced_exactly(self):
        client = StubLLMClient({BEAR_PROMPT: json.dumps(BEAR_GRAPH)})
        g = extract_graph_llm(BEAR_PROMPT, client, GRAMMAR)
        assert g.entities == ["bear", "sunglasses", "meadow", "flowers"]
        assert g.attributes == [["white", "cub"], [], [], []]

    def test_json_inside_prose_is_found(self):
        raw = "Sure! Here is the graph:\n" + json.dumps(FROG_GRAPH) + "\nDone."
        g = parse_llm_response(raw, FROG_PROMPT)
        assert g.entities == ["frog", "apple", "forest"]

    def test_invalid_json_falls_back_to_rules(self):
        prompt = "a red circle and a blue square"
        client = StubLLMClient({prompt: "not json at all"})
        g = extract_graph_llm(prompt, client, GRAMMAR)
        assert g.source == "rules-fallback"
        assert g.entities == ["circle", "square"]
        assert any("malformed" in e for e in g.events)

    def test_dead_client_falls_back_with_warning(self):
        g = extract_graph_llm("a red circle", StubLLMClient({}), GRAMMAR)
        assert g.source == "rules-fallback"
        assert any("llm client failed" in e for e in g.events)

    def test_cache_replays_without_client_calls(self, tmp_path):
        prompt = FROG_PROMPT
        cache = ResponseCache(tmp_path)
        client = StubLLMClient({prompt: json.dumps(FROG_GRAPH)})
        g1 = extract_graph_llm(prompt, client, GRAMMAR, cache=cache)
        dead = StubLLMClient({})
        g2 = extract_graph_llm(prompt, dead, GRAMMAR, cache=cache)
        assert g1.to_json() == g2.to_json()
        assert dead.calls == []


class TestBindTokens:
    def test_frog_bindings(self):
        text = encode_text(FROG_PROMPT, VOCAB)
        g = bind_tokens(graph_from_payload(FROG_GRAPH), text)
        assert g.entities == ["frog", "apple", "forest"]
        words = list(text.words)
        assert g.entity_bindings == [
            [words.index("frog")],
            [words.index("apple")],
            [words.index("forest")],
        ]
        assert g.attribute_bindings[0] == [[words.index("smiling")]]
        g.validate()

    def test_multiword_entity_binds_both_positions(self):
        text = encode_text(BEAR_PROMPT, VOCAB)
        payload = {"prompt": BEAR_PROMPT, "Graph": [{"polar bear": ["white"]}]}
        g = bind_tokens(graph_from_payload(payload), text)
        words = list(text.words)
        assert g.entity_bindings == [sorted([words.index("polar"), words.index("bear")])]

    def test_duplicate_entities_claim_distinct_occurrences(self):
        text = encode_text("a circle near a circle", VOCAB)
        payload = {"prompt": text.prompt, "Graph": [{"circle": []}, {"circle": []}]}
        g = bind_tokens(graph_from_payload(payload), text)
        assert g.entity_bindings == [[1], [4]]

    def test_hallucinated_node_dropped_with_warning(self):
        text = encode_text("a red circle", VOCAB)
        payload = {
            "prompt": text.prompt,
            "Graph": [{"circle": ["red"]}, {"dragon": []}],
        }
        g = bind_tokens(graph_from_payload(payload), text)
        assert g.entities == ["circle"]
        assert any("dropped unbindable entity" in e for e in g.events)
        assert len(g.s_neg) == 0  # edges recomputed after the drop

    def test_unbindable_attribute_dropped(self):
        text = encode_text("a circle", VOCAB)
        payload = {"prompt": text.prompt, "Graph": [{"circle": ["red"]}]}
        g = bind_tokens(graph_from_payload(payload), text)
        assert g.attributes == [[]]
        assert any("dropped unbindable attribute" in e for e in g.events)

    def test_attribute_never_binds_entity_tokens(self):
        # "circle" as both entity and (nonsense) attribute of square
        text = encode_text("a circle and a square", VOCAB)
        payload = {
            "prompt": text.prompt,
            "Graph": [{"circle": []}, {"square": ["circle"]}],
        }
        g = bind_tokens(graph_from_payload(payload), text)
        assert g.attributes == [[], []]  # the attribute could not bind elsewhere


class TestTextEncoding:
    def test_basic_tokenization(self):
        enc = encode_text("a red circle", VOCAB)
        assert enc.words == ("a", "red", "circle")
        assert len(enc.tokens) == 3

    def test_case_and_punctuation_folding(self):
        a = encode_text("a red circle", VOCAB)
        b = encode_text("A Red Circle!", VOCAB)
        assert a.tokens == b.tokens

    def test_oov_maps_to_unk_but_keeps_word(self):
        enc = encode_text("a xylophone", VOCAB)
        assert enc.token_ids[1] == VOCAB.unk_id
        assert enc.words[1] == "xylophone"

    def test_empty_prompt_rejected(self):
        with pytest.raises(ValueError):
            encode_text("", VOCAB)
        with pytest.raises(ValueError):
            encode_text("?!.", VOCAB)

    def test_truncation_flagged(self):
        enc = encode_text("red " * 40 + "circle", VOCAB, max_tokens=8)
        assert enc.truncated and len(enc) == 8
