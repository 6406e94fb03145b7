"""Deterministic toy text encoder.

Stands in for a large pretrained text encoder: tokens map to fixed unit
vectors drawn from a counter-based generator keyed on (token hash, seed),
so the same token always embeds identically across runs and platforms.
Also hosts verb extraction, the box-position MLP, and the construction of
position-augmented instance embeddings.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import numpy as np

from .errors import ShapeMismatch
from .layout import BBox

EMPTY_TOKEN = "⟨empty⟩"  # sentinel for empty input

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)


def load_verb_lexicon(path) -> frozenset[str]:
    """Read a lexicon file: one lowercase verb stem per line, '#' comments."""
    stems = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                stems.add(line.lower())
    return frozenset(stems)


def default_verb_lexicon() -> frozenset[str]:
    """Lexicon shipped with the package (~60 common relation verbs)."""
    text = resources.files("radl").joinpath("data/verbs.txt").read_text("utf-8")
    stems = set()
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            stems.add(line.lower())
    return frozenset(stems)


@dataclass(frozen=True)
class EmbedderConfig:
    """Toy embedder settings: width, seed, and the relation-verb lexicon."""

    dim: int = 8
    seed: int = 0
    verb_lexicon: frozenset[str] = field(default_factory=default_verb_lexicon)

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError(f"embedding dim must be >= 2, got {self.dim}")
        if not self.verb_lexicon:
            raise ValueError("verb lexicon must be non-empty")


@dataclass(frozen=True)
class EmbeddingSeq:
    """L x d sequence of token embeddings."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ShapeMismatch(f"embedding sequence must be (L>=1, d), got {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace/punctuation, drop empties.

    Empty input yields the single sentinel token so downstream attention
    always has at least one key.
    """
    tokens = _TOKEN_RE.findall(text.lower())
    return tokens if tokens else [EMPTY_TOKEN]


def _hash64(token: str) -> int:
    return int.from_bytes(
        hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little"
    )


@lru_cache(maxsize=65536)
def _token_vector(token: str, dim: int, seed: int) -> np.ndarray:
    # Philox is counter-based: the (token hash, seed) key fully determines
    # the stream, independent of call order.  Cached vectors are never
    # mutated (embed_tokens stacks copies).
    key = (_hash64(token) << 64) | (seed & 0xFFFFFFFFFFFFFFFF)
    rng = np.random.Generator(np.random.Philox(key=key))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def embed_tokens(tokens: list[str], cfg: EmbedderConfig) -> EmbeddingSeq:
    """Embed tokens as deterministic pseudorandom unit vectors."""
    if not tokens:
        raise ShapeMismatch("embed_tokens requires at least one token")
    rows = np.stack([_token_vector(t, cfg.dim, cfg.seed) for t in tokens])
    return EmbeddingSeq(rows)


def embed_text(text: str, cfg: EmbedderConfig) -> EmbeddingSeq:
    """Convenience: tokenize then embed."""
    return embed_tokens(tokenize(text), cfg)


def _ing_stems(token: str) -> list[str]:
    # "leaning" -> lean; "riding" -> rid/ride; "sitting" -> sitt/sit
    if not token.endswith("ing") or len(token) <= 3:
        return []
    stem = token[:-3]
    candidates = [stem, stem + "e"]
    if len(stem) >= 2 and stem[-1] == stem[-2]:
        candidates.append(stem[:-1])
    return candidates


def extract_verbs(prompt: str, cfg: EmbedderConfig) -> list[str]:
    """Tokens of the prompt that name relation verbs, in order, dups kept.

    A token matches if it is in the lexicon, or ends in "ing" with a stem
    in the lexicon.  An empty result is legal (relation branch disabled).
    """
    out = []
    for tok in tokenize(prompt):
        if tok == EMPTY_TOKEN:
            continue
        if tok in cfg.verb_lexicon:
            out.append(tok)
        elif any(s in cfg.verb_lexicon for s in _ing_stems(tok)):
            out.append(tok)
    return out


@dataclass
class PositionMLPParams:
    """One-hidden-layer relu MLP mapping a box [x1,y1,x2,y2] to d_pos dims."""

    w1: np.ndarray  # (4, h)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h, d_pos)
    b2: np.ndarray  # (d_pos,)

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def d_pos(self) -> int:
        return self.w2.shape[1]

    @staticmethod
    def init(rng: np.random.Generator, hidden: int = 16, d_pos: int = 8) -> "PositionMLPParams":
        return PositionMLPParams(
            w1=rng.standard_normal((4, hidden)) / np.sqrt(4.0),
            b1=np.zeros(hidden),
            w2=rng.standard_normal((hidden, d_pos)) / np.sqrt(hidden),
            b2=np.zeros(d_pos),
        )


@dataclass(frozen=True)
class PositionEmbedCache:
    box: np.ndarray
    pre: np.ndarray   # hidden pre-activation
    hid: np.ndarray   # relu output


def position_embed_forward(
    bbox: BBox, params: PositionMLPParams
) -> tuple[np.ndarray, PositionEmbedCache]:
    box = bbox.as_array()
    pre = box @ params.w1 + params.b1
    hid = np.maximum(pre, 0.0)
    out = hid @ params.w2 + params.b2
    return out, PositionEmbedCache(box=box, pre=pre, hid=hid)


def position_embed(bbox: BBox, params: PositionMLPParams) -> np.ndarray:
    """out = W2' relu(W1' [x1,y1,x2,y2] + b1) + b2."""
    return position_embed_forward(bbox, params)[0]


def position_embed_backward(
    d_out: np.ndarray, cache: PositionEmbedCache, params: PositionMLPParams
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. the MLP parameters."""
    d_hid = d_out @ params.w2.T
    d_pre = d_hid * (cache.pre > 0.0)
    return {
        "w2": np.outer(cache.hid, d_out),
        "b2": d_out.copy(),
        "w1": np.outer(cache.box, d_pre),
        "b1": d_pre,
    }


@dataclass(frozen=True)
class InstanceEmbedCache:
    concat: np.ndarray  # (L, d + d_pos)
    d: int
    d_pos: int


def build_instance_embedding_forward(
    label_emb: EmbeddingSeq, pos: np.ndarray, proj: np.ndarray
) -> tuple[EmbeddingSeq, InstanceEmbedCache]:
    d = label_emb.dim
    d_pos = pos.shape[0]
    if proj.shape != (d + d_pos, d):
        raise ShapeMismatch(
            f"instance-embedding projection must be ({d + d_pos}, {d}), got {proj.shape}"
        )
    concat = np.concatenate(
        [label_emb.values, np.broadcast_to(pos, (label_emb.length, d_pos))], axis=1
    )
    out = concat @ proj
    return EmbeddingSeq(out), InstanceEmbedCache(concat=concat, d=d, d_pos=d_pos)


def build_instance_embedding(
    label_emb: EmbeddingSeq, pos: np.ndarray, proj: np.ndarray
) -> EmbeddingSeq:
    """Concat the position embedding onto every token row, project back to d.

    Output token count equals the label's, so two instances of the same
    class at different boxes get distinguishable embeddings.
    """
    return build_instance_embedding_forward(label_emb, pos, proj)[0]


def build_instance_embedding_backward(
    d_out: np.ndarray, cache: InstanceEmbedCache, proj: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradients w.r.t. the projection, the position vector, and label rows."""
    d_concat = d_out @ proj.T
    return {
        "proj": cache.concat.T @ d_out,
        "pos": d_concat[:, cache.d :].sum(axis=0),
        "label": d_concat[:, : cache.d],
    }
