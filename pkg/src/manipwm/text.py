"""Instruction conditioning: word tokens and optional action-tree tokens."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .action_tree import (
    ActionSequence, EmbeddingTable, Lexicon, build_tree, parse_instruction, slot_tokens, tokenize,
)
from .core.nn import Module, Parameter
from .core.tensor import Tensor, concat, take_rows

PAD, UNK = "<pad>", "<unk>"


def build_vocab(corpus: Sequence[str]) -> tuple[str, ...]:
    words = sorted({w for line in corpus for w in tokenize(line)})
    return (PAD, UNK, *words)


class TextConditioner(Module):
    """Maps instructions to a ``[B, L, d]`` context for cross-attention.

    Word rows and action-word rows start from the seeded stand-in table
    and are trained. Tree slots that hold no word stay exactly zero before
    the learned slot embedding is added.
    """

    def __init__(self, vocab: Sequence[str], lexicon: Lexicon, tree_corpus: Sequence[str],
                 dim: int, max_words: int, n_max: int, use_tree: bool, rng: np.random.Generator,
                 seed: int = 0, dtype=np.float32):
        self.vocab = tuple(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.dim = dim
        self.max_words = max_words
        self.n_max = n_max
        self.use_tree = use_tree
        self.lexicon = lexicon
        table = EmbeddingTable(dim, seed)
        scale = 1.0 / np.sqrt(dim)
        words = table.matrix(list(self.vocab)) * scale
        words[0] = 0.0
        self.words = Parameter(words.astype(dtype))
        self.word_pos = Parameter((rng.standard_normal((max_words, dim)) * 0.1).astype(dtype))
        self.tree = build_tree(tree_corpus, lexicon) if use_tree else None
        if use_tree:
            self.lex_tokens = lexicon.tokens
            self.lex_index = {w: i for i, w in enumerate(self.lex_tokens)}
            self.actions = Parameter((table.matrix(list(self.lex_tokens)) * scale).astype(dtype))
            self.slot_pos = Parameter((rng.standard_normal((2 * n_max, dim)) * 0.1).astype(dtype))
        self._dtype = dtype

    @property
    def length(self) -> int:
        return self.max_words + (2 * self.n_max if self.use_tree else 0)

    def word_ids(self, instruction: str) -> np.ndarray:
        toks = tokenize(instruction)[: self.max_words]
        ids = np.zeros(self.max_words, dtype=np.int64)
        ids[: len(toks)] = [self.index.get(w, 1) for w in toks]
        return ids

    def parse(self, instruction: str) -> ActionSequence:
        return parse_instruction(instruction, self.tree)

    def tree_ids(self, instruction: str) -> tuple[np.ndarray, np.ndarray]:
        slots = slot_tokens(self.parse(instruction), self.n_max)
        ids = np.array([self.lex_index[s] if s is not None else 0 for s in slots], dtype=np.int64)
        live = np.array([s is not None for s in slots], dtype=self._dtype)
        return ids, live

    def forward(self, instructions: Sequence[str], use_tree: bool | None = None) -> Tensor:
        use_tree = self.use_tree if use_tree is None else use_tree
        b = len(instructions)
        ids = np.stack([self.word_ids(s) for s in instructions])
        ctx = take_rows(self.words, ids) + self.word_pos  # [B, L, d]
        if not use_tree:
            return ctx
        if self.tree is None:
            raise ValueError("this conditioner was built without action-tree tokens")
        pairs = [self.tree_ids(s) for s in instructions]
        tids = np.stack([p[0] for p in pairs])
        live = np.stack([p[1] for p in pairs]).reshape(b, 2 * self.n_max, 1)
        tree_tok = take_rows(self.actions, tids) * Tensor(live) + self.slot_pos
        return concat([ctx, tree_tok], axis=1)
