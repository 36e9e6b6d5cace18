"""The attribute word bank: trainable (key, prompt) pairs with top-C selection.

Keys live in the image-embedding space and are matched against image
embeddings by cosine distance; each key owns a prompt of M learnable tokens.
Selection is a hard top-C over distances and happens outside the gradient
tape: key gradients arrive only through the key-matching loss, prompt
gradients only through the losses that consume the composed text input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoders import TokenSequence
from .util import keyed_rng

_CTX_KEYS, _CTX_PROMPTS = 21, 22

# Keys must keep a nonzero norm for cosine distances to stay meaningful.
KEY_NORM_FLOOR = 1e-9

PROMPT_INIT_STD = 0.02


@dataclass
class AttributeBank:
    """n (key, prompt) pairs; keys are (d,) tensors, prompts are (m, d) tensors.

    Keys and prompts are stored row-per-tensor so that a training step only
    ever touches the selected entries; unselected parameters stay bit-identical.
    """

    keys: list
    prompts: list
    n: int
    m: int
    d: int

    def key_matrix(self) -> np.ndarray:
        return np.stack([k.values for k in self.keys])

    def trainable_parameters(self) -> list:
        return [*self.keys, *self.prompts]

    def frozen_view(self) -> "AttributeBank":
        """Read-only snapshot sharing the same value buffers (for evaluation)."""
        return AttributeBank(
            keys=[ad.constant(k.values) for k in self.keys],
            prompts=[ad.constant(p.values) for p in self.prompts],
            n=self.n, m=self.m, d=self.d,
        )

    def min_key_norm(self) -> float:
        return min(float(np.linalg.norm(k.values)) for k in self.keys)


@dataclass
class Selection:
    """Top-C match for one image: bank indices ordered by ascending distance."""

    indices: list
    distances: list

    def __post_init__(self):
        if len(self.indices) != len(set(self.indices)):
            raise ValueError("selection indices must be distinct")

    @property
    def index_tuple(self) -> tuple:
        return tuple(self.indices)


def init_bank(n: int, m: int, d: int, seed: int) -> AttributeBank:
    """Seeded bank: keys ~ N(0, 1/d) per entry, prompt tokens ~ N(0, 0.02^2)."""
    if n < 1 or m < 1 or d < 1:
        raise ValueError(f"bank dimensions must be positive, got n={n} m={m} d={d}")
    key_rows = keyed_rng(seed, _CTX_KEYS).standard_normal((n, d)) / np.sqrt(d)
    prompt_rows = keyed_rng(seed, _CTX_PROMPTS).standard_normal((n, m, d)) * PROMPT_INIT_STD
    keys = [ad.parameter(key_rows[i]) for i in range(n)]
    prompts = [ad.parameter(prompt_rows[i]) for i in range(n)]
    bank = AttributeBank(keys=keys, prompts=prompts, n=n, m=m, d=d)
    if bank.min_key_norm() < KEY_NORM_FLOOR:
        raise ad.NumericError("degenerate key norm at init")
    return bank


def score(z: np.ndarray, key: np.ndarray) -> float:
    """Cosine distance 1 - cos(z, key), in [0, 2]."""
    z = np.asarray(z, dtype=np.float64)
    key = np.asarray(key, dtype=np.float64)
    if not (np.isfinite(z).all() and np.isfinite(key).all()):
        raise ad.NumericError("score: non-finite input")
    return 1.0 - ad.cosine_value(z, key)


def select_top_c(z: np.ndarray, bank: AttributeBank, c: int) -> Selection:
    """The c keys with smallest cosine distance to z; ties break on low index.

    Runs on raw values, outside the tape: selection is a hard, non-differentiable
    routing decision.
    """
    if not 1 <= c <= bank.n:
        raise ValueError(f"select_top_c: c={c} out of range for bank of {bank.n}")
    distances = np.array([score(z, k.values) for k in bank.keys])
    order = np.argsort(distances, kind="stable")[:c]
    return Selection(indices=[int(i) for i in order],
                     distances=[float(distances[i]) for i in order])


def compose_text_input(sel: Selection, bank: AttributeBank,
                       class_token: TokenSequence) -> TokenSequence:
    """Concatenate the selected prompts, in selection order, then the class tokens.

    Prompt tokens keep their trainable status through the concat; class tokens
    contribute no gradient.
    """
    for i in sel.indices:
        if not 0 <= i < bank.n:
            raise ValueError(f"selection index {i} outside bank of {bank.n}")
    if class_token.dim != bank.d:
        raise ad.ShapeError(
            f"compose_text_input: class token dim {class_token.dim} != bank dim {bank.d}")
    parts = [bank.prompts[i] for i in sel.indices]
    parts.append(class_token.tokens)
    return TokenSequence(ad.concat(parts))
