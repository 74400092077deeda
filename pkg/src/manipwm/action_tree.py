"""Verb/preposition action trees for manipulation instructions.

Instructions are lowercased and whitespace-split; tokens that appear in the
lexicon are the action words. Their order gives a path down a trie whose
layers alternate verbs (even depth) and prepositions (odd depth). An
instruction is encoded as the concatenated embeddings of the words on its
path, zero-padded to a corpus-wide width.
"""
from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

_STRIP = ".,;:!?\"'()"
_CONNECTORS = {"and", "then"}


class LexiconConflict(ValueError):
    pass


class CompositionError(ValueError):
    """Action words do not form a path of the tree (or are malformed)."""

    def __init__(self, message: str, prefix: Sequence[str] = ()):
        super().__init__(message)
        self.prefix = list(prefix)


class CapacityError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    out = []
    for raw in text.lower().split():
        tok = raw.strip(_STRIP)
        if tok:
            out.append(tok)
    return out


@dataclass(frozen=True)
class Lexicon:
    verbs: tuple[str, ...] = ()
    prepositions: tuple[str, ...] = ()

    def __post_init__(self):
        for tok in self.verbs + self.prepositions:
            if not tok or tok != tok.lower() or any(ch.isspace() for ch in tok):
                raise ValueError(f"lexicon token {tok!r} must be lowercase, non-empty, whitespace-free")
        both = set(self.verbs) & set(self.prepositions)
        if both:
            raise LexiconConflict(f"token {sorted(both)[0]!r} is both a verb and a preposition")

    def kind(self, token: str) -> str | None:
        if token in self.verbs:
            return "verb"
        if token in self.prepositions:
            return "prep"
        return None

    @property
    def tokens(self) -> tuple[str, ...]:
        return self.verbs + self.prepositions


def build_lexicon(corpus: Iterable[str], verb_list: Sequence[str], prep_list: Sequence[str]) -> Lexicon:
    """Keep the provided tokens that occur in ``corpus``, in provided order."""
    verb_list = [v.lower() for v in verb_list]
    prep_list = [p.lower() for p in prep_list]
    if not verb_list or not prep_list:
        raise ValueError("verb and preposition lists must be non-empty")
    for v in verb_list:
        if v in prep_list:
            raise LexiconConflict(f"token {v!r} is both a verb and a preposition")
    seen: set[str] = set()
    for line in corpus:
        seen.update(tokenize(line))
    return Lexicon(tuple(v for v in verb_list if v in seen),
                   tuple(p for p in prep_list if p in seen))


def action_words(instruction: str, lexicon: Lexicon) -> list[str]:
    return [tok for tok in tokenize(instruction) if lexicon.kind(tok)]


@dataclass(frozen=True)
class ActionSequence:
    pairs: tuple[tuple[str, str | None], ...] = ()

    @property
    def n(self) -> int:
        return len(self.pairs)

    def words(self) -> list[str]:
        out = []
        for verb, prep in self.pairs:
            out.append(verb)
            if prep is not None:
                out.append(prep)
        return out


def pair_words(words: Sequence[str], lexicon: Lexicon) -> ActionSequence:
    pairs: list[list] = []
    for w in words:
        if lexicon.kind(w) == "verb":
            pairs.append([w, None])
        else:
            if not pairs:
                raise CompositionError(f"preposition {w!r} occurs before any verb")
            if pairs[-1][1] is not None:
                raise CompositionError(f"two prepositions in a row ({pairs[-1][1]!r}, {w!r})",
                                       prefix=words)
            pairs[-1][1] = w
    return ActionSequence(tuple((v, p) for v, p in pairs))


@dataclass
class TreeNode:
    token: str | None
    layer: int
    children: dict[str, "TreeNode"] = field(default_factory=dict)


class ActionTree:
    """Trie over action-word sequences; the root is a sentinel at layer -1."""

    def __init__(self, lexicon: Lexicon):
        self.lexicon = lexicon
        self.root = TreeNode(None, -1)

    def insert(self, words: Sequence[str]) -> None:
        node = self.root
        for w in words:
            child = node.children.get(w)
            if child is None:
                child = TreeNode(w, node.layer + 1)
                node.children[w] = child
            node = child

    def has_path(self, words: Sequence[str]) -> bool:
        node = self.root
        for w in words:
            node = node.children.get(w)
            if node is None:
                return False
        return True

    def nodes(self) -> list[TreeNode]:
        out, stack = [], list(reversed(self.root.children.values()))
        while stack:
            node = stack.pop()
            out.append(node)
            stack.extend(reversed(node.children.values()))
        return out

    @property
    def node_count(self) -> int:
        return len(self.nodes())

    def depth(self) -> int:
        return max((n.layer + 1 for n in self.nodes()), default=0)

    def paths(self) -> list[list[str]]:
        out: list[list[str]] = []

        def rec(node, prefix):
            for tok, child in node.children.items():
                path = prefix + [tok]
                out.append(path)
                rec(child, path)

        rec(self.root, [])
        return out

    def to_dict(self) -> dict:
        def rec(node):
            return {tok: rec(child) for tok, child in node.children.items()}
        return rec(self.root)


def _check_alternation(words: Sequence[str], lexicon: Lexicon, instruction: str) -> None:
    for i, w in enumerate(words):
        expected = "verb" if i % 2 == 0 else "prep"
        if lexicon.kind(w) != expected:
            raise CompositionError(
                f"action words {list(words)} break verb/preposition alternation at {w!r} "
                f"in instruction {instruction!r}", prefix=words[:i])


def build_tree(corpus: Iterable[str], lexicon: Lexicon) -> ActionTree:
    tree = ActionTree(lexicon)
    for instruction in corpus:
        words = action_words(instruction, lexicon)
        if not any(lexicon.kind(w) == "verb" for w in words):
            raise CompositionError(f"instruction has no lexicon verb: {instruction!r}")
        _check_alternation(words, lexicon, instruction)
        tree.insert(words)
    return tree


def parse_instruction(instruction: str, tree: ActionTree) -> ActionSequence:
    words = action_words(instruction, tree.lexicon)
    if not words:
        raise CompositionError(f"no action words in {instruction!r}")
    if tree.lexicon.kind(words[0]) == "prep":
        raise CompositionError(f"preposition {words[0]!r} occurs before any verb")
    node, matched = tree.root, []
    for w in words:
        node = node.children.get(w)
        if node is None:
            raise CompositionError(
                f"unknown composition {words}; longest matched prefix {matched}", prefix=matched)
        matched.append(w)
    return pair_words(words, tree.lexicon)


class EmbeddingTable:
    """Seeded token -> vector map; a stand-in for a frozen text encoder."""

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def __getitem__(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            rng = np.random.default_rng([self.seed, zlib.crc32(token.encode("utf-8"))])
            vec = rng.standard_normal(self.dim)
            vec.setflags(write=False)
            self._cache[token] = vec
        return vec

    def matrix(self, tokens: Sequence[str]) -> np.ndarray:
        return np.stack([self[t] for t in tokens]) if tokens else np.zeros((0, self.dim))


@dataclass(frozen=True)
class ActionTreeEmbedding:
    slots: np.ndarray  # [2 * n_max, d]
    n_max: int

    @property
    def flat(self) -> np.ndarray:
        return self.slots.reshape(-1)

    @property
    def width(self) -> int:
        return self.slots.size


def slot_tokens(seq: ActionSequence, n_max: int) -> list[str | None]:
    """Token per slot (verb1, prep1, verb2, ...); ``None`` marks padding."""
    if seq.n > n_max:
        raise CapacityError(f"{seq.n} action pairs exceed capacity n_max={n_max}")
    out: list[str | None] = [None] * (2 * n_max)
    for i, (verb, prep) in enumerate(seq.pairs):
        out[2 * i] = verb
        out[2 * i + 1] = prep
    return out


def embed_instruction(seq: ActionSequence, table: EmbeddingTable, n_max: int) -> ActionTreeEmbedding:
    slots = np.zeros((2 * n_max, table.dim))
    for i, tok in enumerate(slot_tokens(seq, n_max)):
        if tok is not None:
            slots[i] = table[tok]
    return ActionTreeEmbedding(slots, n_max)


def decompose_primitives(instruction: str, lexicon: Lexicon) -> list[str]:
    """Split an instruction into one clause per (verb, preposition) pair.

    Clause ``i`` runs from verb ``i`` up to verb ``i + 1``; words before the
    first verb stay with the first clause and trailing connectors are dropped.
    """
    spans = [(m.start(), m.end(), m.group()) for m in re.finditer(r"\S+", instruction)]
    toks = [s[2].lower().strip(_STRIP) for s in spans]
    words = [t for t in toks if lexicon.kind(t)]
    if not any(lexicon.kind(w) == "verb" for w in words):
        raise CompositionError(f"no action words in {instruction!r}")
    seq = pair_words(words, lexicon)
    if seq.n == 1:
        return [instruction.strip()]
    starts = [spans[i][0] for i, t in enumerate(toks) if lexicon.kind(t) == "verb"]
    starts[0] = 0
    bounds = starts[1:] + [len(instruction)]
    out = []
    for lo, hi in zip(starts, bounds):
        parts = instruction[lo:hi].split()
        while parts and parts[-1].lower().strip(_STRIP) in _CONNECTORS:
            parts.pop()
        out.append(" ".join(parts).rstrip(",;"))
    return out


# -- lexicon files ----------------------------------------------------------

def save_lexicon(path, lexicon: Lexicon, n_max: int, embed_dim: int = 64, seed: int = 0) -> None:
    doc = {"verbs": list(lexicon.verbs), "prepositions": list(lexicon.prepositions),
           "n_max": int(n_max), "embed_dim": int(embed_dim), "seed": int(seed)}
    Path(path).write_text(json.dumps(doc, indent=2), encoding="utf-8")


def load_lexicon(path) -> tuple[Lexicon, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return Lexicon(tuple(doc["verbs"]), tuple(doc["prepositions"])), doc


def corpus_n_max(corpus: Iterable[str], lexicon: Lexicon) -> int:
    return max((pair_words(action_words(c, lexicon), lexicon).n for c in corpus), default=0)
