"""Clinical text prompts and their vector encodings.

A prompt is the fixed template "<location> <system> <series>". The default
encoder maps each whitespace token to a deterministic seeded pseudo-random
unit vector (sentence mode averages the token vectors and renormalizes), so
runs are exactly reproducible without any pretrained weights. Precomputed
embeddings can be swapped in through a one-record-per-line table file.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import derive_seed

DEFAULT_TEXT_WIDTH = 512


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class TextPrompt:
    location: str
    system: str
    series: str

    def __post_init__(self):
        for field_name in ("location", "system", "series"):
            value = getattr(self, field_name)
            if not isinstance(value, str) or not value.strip():
                raise PromptError(f"prompt field '{field_name}' must be a non-empty string")

    @property
    def rendered(self) -> str:
        return f"{self.location} {self.system} {self.series}"


def render_prompt(location: str, system: str, series: str) -> TextPrompt:
    return TextPrompt(location=location, system=system, series=series)


@dataclass
class TextEmbedding:
    vectors: np.ndarray  # (t, c): t=1 in sentence mode, one row per token otherwise

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise PromptError(f"embedding must be (t, c) with t >= 1, got {v.shape}")
        if not np.isfinite(v).all():
            raise PromptError("embedding contains non-finite values")
        self.vectors = v

    @property
    def token_count(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]


class HashTextEncoder:
    """Deterministic token-hash embedder standing in for a pretrained model."""

    kind = "hash"

    def __init__(self, width: int = DEFAULT_TEXT_WIDTH, seed: int = 0):
        if width < 1:
            raise ValueError("width must be positive")
        self.width = width
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            rng = np.random.default_rng(derive_seed("text-token", self.seed, token))
            vec = rng.standard_normal(self.width)
            vec /= np.linalg.norm(vec)
            self._cache[token] = vec
        return vec

    def encode(self, prompt: TextPrompt, mode: str = "sentence") -> TextEmbedding:
        tokens = prompt.rendered.split()
        if mode == "tokens":
            return TextEmbedding(np.stack([self._token_vector(t) for t in tokens]))
        if mode == "sentence":
            avg = np.mean([self._token_vector(t) for t in tokens], axis=0)
            norm = np.linalg.norm(avg)
            if norm > 0:
                avg = avg / norm
            return TextEmbedding(avg[None, :])
        raise PromptError(f"unknown encoding mode '{mode}' (expected 'sentence' or 'tokens')")


class FileTextEncoder:
    """Sentence embeddings read from a table of precomputed vectors.

    File format: one record per line, the rendered prompt string and its
    floats separated by a tab.
    """

    kind = "file"

    def __init__(self, path):
        self.path = str(path)
        self._table: dict[str, np.ndarray] = {}
        width = None
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.rstrip("\n")
                if not line.strip():
                    continue
                try:
                    key, values = line.split("\t", 1)
                except ValueError:
                    raise PromptError(
                        f"{path}:{lineno}: expected '<prompt>\\t<floats>'"
                    ) from None
                vec = np.array([float(x) for x in values.split()], dtype=np.float64)
                if width is None:
                    width = vec.size
                elif vec.size != width:
                    raise PromptError(
                        f"{path}:{lineno}: embedding width {vec.size} != {width}"
                    )
                self._table[key] = vec
        if not self._table:
            raise PromptError(f"{path}: no embedding records")
        self.width = int(width)

    def encode(self, prompt: TextPrompt, mode: str = "sentence") -> TextEmbedding:
        if mode != "sentence":
            raise PromptError("file-backed encoder only supports sentence mode")
        vec = self._table.get(prompt.rendered)
        if vec is None:
            raise PromptError(f"no embedding on file for prompt '{prompt.rendered}'")
        return TextEmbedding(vec[None, :])


def write_embedding_table(path, table: dict[str, np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, vec in table.items():
            floats = " ".join(f"{x:.9g}" for x in np.asarray(vec).ravel())
            fh.write(f"{key}\t{floats}\n")


def encode_text(
    prompt: TextPrompt, mode: str = "sentence", encoder=None
) -> TextEmbedding:
    """Encode with the given encoder, defaulting to the seeded hash embedder."""
    enc = encoder if encoder is not None else HashTextEncoder()
    return enc.encode(prompt, mode=mode)
