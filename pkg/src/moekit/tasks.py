"""Synthetic desk-scale corpora and verifiable toy tasks.

Pre-training uses a copy task: each sequence is a random pattern repeated
twice, so the second half is predictable from the first and the main CE
has obvious headroom. Categories map to disjoint byte alphabets so stage
mixtures are observable in the data.

Post-training uses two instruction domains with deterministic templates:
single-digit addition ("math") and word echoing ("general"). Each task
yields paired responses: a reasoning span with worked steps, and a direct
answer. Answers are verifiable by exact match, which is what the RL
reward needs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tokenizer import CLOSE_TAG, OPEN_TAG

# byte alphabets per corpus category (ids < 256 so any tokenizer fits)
CATEGORY_ALPHABETS: dict[str, np.ndarray] = {
    "web": np.arange(ord("a"), ord("k")),
    "code": np.arange(ord("0"), ord("9") + 1),
    "mathematics": np.arange(ord("A"), ord("K")),
    "default": np.arange(ord("a"), ord("z") + 1),
}


def copy_task_corpus(category: str | None, batch: int, seq_len: int,
                     rng: np.random.Generator) -> np.ndarray:
    """(batch, seq_len) int tokens: a random half-length pattern, twice."""
    alphabet = CATEGORY_ALPHABETS.get(category or "default",
                                      CATEGORY_ALPHABETS["default"])
    half = max(1, seq_len // 2)
    pattern = rng.choice(alphabet, size=(batch, half))
    seq = np.concatenate([pattern, pattern], axis=1)[:, :seq_len]
    if seq.shape[1] < seq_len:
        pad = np.tile(pattern, (1, seq_len // half + 1))
        seq = pad[:, :seq_len]
    return seq.astype(np.int64)


def finite_corpus(base, n_batches: int):
    """Wrap a corpus so it raises StopIteration after `n_batches` draws."""
    remaining = [n_batches]

    def draw(category, batch, seq_len, rng):
        if remaining[0] <= 0:
            raise StopIteration
        remaining[0] -= 1
        return base(category, batch, seq_len, rng)

    return draw


@dataclass(frozen=True)
class ToyInstruction:
    """A verifiable instruction with both response styles."""

    domain: str
    instruction: str
    gold: str
    think_body: str  # worked steps, without tags

    @property
    def y_think(self) -> str:
        return f"{OPEN_TAG}{self.think_body}{CLOSE_TAG}{self.gold}"

    @property
    def y_nonthink(self) -> str:
        return f"{CLOSE_TAG}{self.gold}"


def arithmetic_instruction(rng: np.random.Generator) -> ToyInstruction:
    a, b = int(rng.integers(0, 10)), int(rng.integers(0, 10))
    return ToyInstruction(
        domain="math",
        instruction=f"{a}+{b}=",
        gold=str(a + b),
        think_body=f"{a} and {b} make {a + b}.",
    )


def small_sum_instruction(rng: np.random.Generator) -> ToyInstruction:
    """Addition restricted to single-digit sums; answers are one character."""
    a = int(rng.integers(0, 10))
    b = int(rng.integers(0, 10 - a))
    return ToyInstruction(
        domain="math",
        instruction=f"{a}+{b}=",
        gold=str(a + b),
        think_body=f"{a} and {b} make {a + b}.",
    )


_ECHO_WORDS = ("sun", "map", "ink", "fox", "oak", "bee", "sky", "gem")


def echo_instruction(rng: np.random.Generator) -> ToyInstruction:
    word = _ECHO_WORDS[int(rng.integers(0, len(_ECHO_WORDS)))]
    return ToyInstruction(
        domain="general",
        instruction=f"say {word}:",
        gold=word,
        think_body=f"the word is {word}.",
    )


TASK_GENERATORS = {
    "math": arithmetic_instruction,
    "general": echo_instruction,
}
