"""768-dimensional sentence embeddings for captions.

The built-in encoder is a deterministic stand-in with the same output contract
as a BERT-base sentence vector. It embeds the parsed attribute content of a
caption (one seeded direction per attribute, plus gender and age offsets that
also encode the *absence* of those traits) and adds a small hashed bag of
tokens so that wording differences are not invisible. Embeddings computed
elsewhere can be loaded from vector files instead.
"""

from __future__ import annotations

import functools
import hashlib
import os
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .captions import ATTRIBUTES, parse_caption
from .errors import DataError
from .vectors import read_vectors, write_vectors

EMBED_DIM = 768


@dataclass(frozen=True, eq=False)
class Embedding:
    values: np.ndarray
    source: str = "builtin"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if values.shape != (EMBED_DIM,):
            raise DataError(f"embedding must have {EMBED_DIM} values, got {values.size}")
        if not np.all(np.isfinite(values)):
            raise DataError("embedding has non-finite values")
        object.__setattr__(self, "values", values)

    def __eq__(self, other):
        return isinstance(other, Embedding) and np.array_equal(self.values, other.values)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


class TextEncoder:
    """Seeded caption encoder.

    Args:
        seed: selects every direction vector.
        token_weight: weight of the hashed token bag relative to one attribute.
        offset_weight: weight of the signed gender and age offsets.
    """

    def __init__(self, seed: int = 0, token_weight: float = 0.15, offset_weight: float = 0.5):
        self.seed = seed
        self.token_weight = token_weight
        self.offset_weight = offset_weight
        rng = np.random.default_rng([seed, 768])
        self.base = _unit(rng.standard_normal(EMBED_DIM))
        self.attribute_dirs = np.stack([_unit(rng.standard_normal(EMBED_DIM)) for _ in ATTRIBUTES])
        self.gender_dir = _unit(rng.standard_normal(EMBED_DIM))
        self.age_dir = _unit(rng.standard_normal(EMBED_DIM))
        self._token_cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        vec = self._token_cache.get(token)
        if vec is None:
            digest = hashlib.blake2b(f"{self.seed}:{token}".encode(), digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            vec = _unit(rng.standard_normal(EMBED_DIM))
            self._token_cache[token] = vec
        return vec

    def encode(self, text) -> Embedding:
        attrs = parse_caption(text)
        flags = attrs.as_array()
        v = self.base + flags @ self.attribute_dirs
        v = v + self.offset_weight * ((1.0 if attrs["Male"] else -1.0) * self.gender_dir
                                      + (1.0 if attrs["Young"] else -1.0) * self.age_dir)
        tokens = re.findall(r"[a-z0-9']+", str(text).lower())
        if tokens:
            bag = np.sum([self._token_vector(t) for t in tokens], axis=0) / np.sqrt(len(tokens))
            v = v + self.token_weight * bag
        return Embedding(_unit(v), source="builtin")

    def encode_batch(self, texts: Sequence) -> np.ndarray:
        return np.stack([self.encode(t).values for t in texts])


@functools.lru_cache(maxsize=8)
def default_encoder(seed: int = 0) -> TextEncoder:
    return TextEncoder(seed)


def encode(text, seed: int = 0) -> Embedding:
    return default_encoder(seed).encode(text)


def load_embeddings(path: str | os.PathLike) -> dict[str, Embedding]:
    return {k: Embedding(v, source="file") for k, v in read_vectors(path, dim=EMBED_DIM).items()}


def write_embeddings(path: str | os.PathLike, table: Mapping[str, Embedding | np.ndarray]) -> None:
    write_vectors(path, {k: getattr(v, "values", v) for k, v in table.items()})
