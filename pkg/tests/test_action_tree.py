import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manipwm.action_tree import (
    ActionSequence, CapacityError, CompositionError, EmbeddingTable, Lexicon, LexiconConflict,
    build_lexicon, build_tree, corpus_n_max, decompose_primitives, embed_instruction,
    load_lexicon, parse_instruction, save_lexicon,
)
from manipwm.spriteworld import PREPOSITIONS, VERBS, enumerate_templates, instruction_corpus

APPLE = "pick the apple from the table and place it in the top drawer"


@pytest.fixture(scope="module")
def sprite_lexicon():
    return build_lexicon(instruction_corpus(), VERBS, PREPOSITIONS)


def test_lexicon_keeps_corpus_tokens_in_given_order():
    lex = build_lexicon([APPLE], ["pick", "place", "close"], ["from", "in", "on"])
    assert lex.verbs == ("pick", "place")
    assert lex.prepositions == ("from", "in")


def test_empty_corpus_gives_empty_lexicon():
    lex = build_lexicon([], ["pick"], ["in"])
    assert lex.verbs == () and lex.prepositions == ()


def test_lexicon_conflict_names_token():
    with pytest.raises(LexiconConflict, match="'on'"):
        build_lexicon([APPLE], ["pick", "on"], ["on"])
    with pytest.raises(ValueError):
        Lexicon(("Pick",), ())


def test_lexicon_matches_token_scan():
    corpus = instruction_corpus(enumerate_templates()[::22][:10])
    lex = build_lexicon(corpus, VERBS, PREPOSITIONS)
    scanned = {w.strip(".,") for line in corpus for w in line.lower().split()}
    assert set(lex.verbs) == {v for v in VERBS if v in scanned}
    assert set(lex.prepositions) == {p for p in PREPOSITIONS if p in scanned}


def test_tree_paths_for_examples():
    lex = Lexicon(("pick", "place", "close"), ("from", "in"))
    tree = build_tree([APPLE, "close the box"], lex)
    assert tree.has_path(["pick", "from", "place", "in"])
    assert tree.to_dict()["close"] == {}
    close_node = tree.root.children["close"]
    assert close_node.layer == 0


def test_tree_rejects_verbless_instruction():
    lex = Lexicon(("pick",), ("from",))
    with pytest.raises(CompositionError, match="look at the cat"):
        build_tree(["look at the cat"], lex)


def test_tree_layers_alternate(sprite_lexicon):
    tree = build_tree(instruction_corpus(), sprite_lexicon)
    for node in tree.nodes():
        expected = "verb" if node.layer % 2 == 0 else "prep"
        assert sprite_lexicon.kind(node.token) == expected


def _trie_size(sequences):
    prefixes = set()
    for seq in sequences:
        for i in range(1, len(seq) + 1):
            prefixes.add(tuple(seq[:i]))
    return len(prefixes)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 218), min_size=1, max_size=50))
def test_tree_matches_trie_oracle(picks):
    templates = enumerate_templates()
    corpus = [templates[i].instruction for i in picks]
    lex = build_lexicon(corpus, VERBS, PREPOSITIONS)
    tree = build_tree(corpus, lex)
    seqs = [[w for pair in templates[i].action_pairs for w in pair if w] for i in picks]
    assert all(tree.has_path(s) for s in seqs)
    assert tree.node_count == _trie_size(seqs)


def test_parse_examples():
    lex = Lexicon(("pick", "place", "close"), ("from", "in"))
    tree = build_tree([APPLE, "close the drawer"], lex)
    assert parse_instruction(APPLE, tree).pairs == (("pick", "from"), ("place", "in"))
    assert parse_instruction("close the drawer", tree).pairs == (("close", None),)


def test_parse_unknown_composition_reports_prefix():
    lex = Lexicon(("pick", "place"), ("from", "in"))
    tree = build_tree(["pick the cup from the shelf"], lex)
    with pytest.raises(CompositionError) as err:
        parse_instruction("pick the cup from the shelf and place it in the sink", tree)
    assert err.value.prefix == ["pick", "from"]
    with pytest.raises(CompositionError, match="before any verb"):
        parse_instruction("from the shelf pick it", tree)


def test_parse_generate_roundtrip_all_templates(sprite_lexicon):
    tree = build_tree(instruction_corpus(), sprite_lexicon)
    for tpl in enumerate_templates():
        assert list(parse_instruction(tpl.instruction, tree).pairs) == tpl.action_pairs


def test_embedding_slot_layout():
    table = EmbeddingTable(dim=8, seed=3)
    full = embed_instruction(ActionSequence((("pick", "from"), ("place", "in"))), table, 2)
    np.testing.assert_array_equal(full.flat, np.concatenate([table[w] for w in ("pick", "from", "place", "in")]))

    close = embed_instruction(ActionSequence((("close", None),)), table, 2)
    oracle = np.zeros((4, 8))
    oracle[0] = table["close"]
    np.testing.assert_array_equal(close.slots, oracle)

    empty = embed_instruction(ActionSequence(), table, 2)
    assert empty.width == 32 and not empty.flat.any()


def test_embedding_capacity_error():
    seq = ActionSequence((("pick", "from"), ("place", "in")))
    with pytest.raises(CapacityError):
        embed_instruction(seq, EmbeddingTable(4), 1)


def test_embedding_width_constant_and_injective(sprite_lexicon):
    corpus = instruction_corpus()
    tree = build_tree(corpus, sprite_lexicon)
    n_max = corpus_n_max(corpus, sprite_lexicon)
    table = EmbeddingTable(dim=16)
    seen = {}
    for line in corpus:
        seq = parse_instruction(line, tree)
        emb = embed_instruction(seq, table, n_max)
        assert emb.width == 2 * n_max * 16
        seen.setdefault(seq.pairs, emb.flat.tobytes())
    assert len(set(seen.values())) == len(seen)


def test_embedding_table_deterministic():
    a, b = EmbeddingTable(8, seed=1), EmbeddingTable(8, seed=1)
    np.testing.assert_array_equal(a["pick"], b["pick"])
    assert not np.array_equal(a["pick"], a["place"])
    assert not np.array_equal(a["pick"], EmbeddingTable(8, seed=2)["pick"])


def test_decompose_examples():
    lex = Lexicon(("pick", "place"), ("from", "in"))
    assert decompose_primitives(APPLE, lex) == ["pick the apple from the table", "place it in the top drawer"]
    assert decompose_primitives("pick the cup from the shelf", lex) == ["pick the cup from the shelf"]


def test_decompose_count_equals_pairs(sprite_lexicon):
    tree = build_tree(instruction_corpus(), sprite_lexicon)
    for line in instruction_corpus():
        prims = decompose_primitives(line, sprite_lexicon)
        assert len(prims) == parse_instruction(line, tree).n


def test_lexicon_file_roundtrip(tmp_path):
    lex = Lexicon(("pick",), ("from",))
    save_lexicon(tmp_path / "lex.json", lex, n_max=2, embed_dim=32, seed=5)
    back, doc = load_lexicon(tmp_path / "lex.json")
    assert back == lex and doc["n_max"] == 2 and doc["embed_dim"] == 32 and doc["seed"] == 5
