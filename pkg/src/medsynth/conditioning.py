"""Clinical condition descriptors, structured prompts, and their encoders.

A `ConditionSpec` holds the closed-vocabulary acquisition descriptors of one
sample: the uterine orientation class, scanner field strength, and pulse
sequence, plus optional extra keywords.  `build_prompt` renders it as a
canonical keyword sequence; the encoders turn it into the dense class vector
and token matrix consumed by the denoiser.  The keyword vocabulary is fixed
and published as a JSON data file.
"""

from __future__ import annotations

import importlib.resources
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .nn import autodiff as ad
from .nn.autodiff import Tensor, no_grad
from .nn.layers import Linear, Module

ORIENTATION_CLASSES = ("AF&AV", "RF&AV", "AF&RV", "RF&RV")
FIELD_STRENGTHS = (0.55, 1.5, 3.0)
SEQUENCES = ("TSE", "HASTE")


def _load_vocab_file() -> dict:
    with importlib.resources.files("medsynth.data").joinpath("vocabulary.json").open() as fh:
        return json.load(fh)


class Vocabulary:
    """The fixed keyword vocabulary and its token ids."""

    def __init__(self, raw: dict | None = None):
        raw = raw if raw is not None else _load_vocab_file()
        self.orientation_keywords: dict[str, list[str]] = raw["orientation_keywords"]
        self.field_strength_tokens: dict[str, str] = raw["field_strength_tokens"]
        self.sequence_tokens: list[str] = raw["sequence_tokens"]
        self.extra_keywords: list[str] = raw["extra_keywords"]
        self.max_tokens: int = int(raw["max_tokens"])
        ordered: list[str] = []
        for words in self.orientation_keywords.values():
            for w in words:
                if w not in ordered:
                    ordered.append(w)
        ordered += list(self.field_strength_tokens.values())
        ordered += [t for t in self.sequence_tokens if t not in ordered]
        ordered += [t for t in self.extra_keywords if t not in ordered]
        self.tokens = tuple(ordered)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def ids(self, tokens: list[str]) -> np.ndarray:
        unknown = [t for t in tokens if t not in self.index]
        if unknown:
            raise ValidationError(f"tokens not in vocabulary: {unknown}")
        return np.array([self.index[t] for t in tokens], dtype=np.int64)


_DEFAULT_VOCAB: Vocabulary | None = None


def default_vocabulary() -> Vocabulary:
    global _DEFAULT_VOCAB
    if _DEFAULT_VOCAB is None:
        _DEFAULT_VOCAB = Vocabulary()
    return _DEFAULT_VOCAB


def field_strength_token(value: float, vocab: Vocabulary | None = None) -> str:
    vocab = vocab or default_vocabulary()
    for key, tok in vocab.field_strength_tokens.items():
        if float(key) == float(value):
            return tok
    raise ValidationError(f"field strength {value} not one of {FIELD_STRENGTHS}")


@dataclass
class ConditionSpec:
    """Structured clinical descriptors for one sample."""

    orientation_class: str
    field_strength_tesla: float = 1.5
    sequence: str = "TSE"
    extra_keywords: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.orientation_class not in ORIENTATION_CLASSES:
            raise ValidationError(
                f"unknown orientation class {self.orientation_class!r}, "
                f"expected one of {ORIENTATION_CLASSES}"
            )
        if float(self.field_strength_tesla) not in FIELD_STRENGTHS:
            raise ValidationError(
                f"field strength {self.field_strength_tesla} not one of {FIELD_STRENGTHS}"
            )
        if self.sequence not in SEQUENCES:
            raise ValidationError(f"unknown sequence {self.sequence!r}, expected one of {SEQUENCES}")
        self.field_strength_tesla = float(self.field_strength_tesla)
        self.extra_keywords = list(self.extra_keywords)
        vocab = default_vocabulary()
        unknown = [t for t in self.extra_keywords if t not in vocab.index]
        if unknown:
            raise ValidationError(f"extra keywords not in vocabulary: {unknown}")

    @property
    def class_index(self) -> int:
        return ORIENTATION_CLASSES.index(self.orientation_class)

    def to_dict(self) -> dict:
        return {
            "orientation_class": self.orientation_class,
            "field_strength_tesla": self.field_strength_tesla,
            "sequence": self.sequence,
            "extra_keywords": list(self.extra_keywords),
        }

    @staticmethod
    def from_dict(d: dict) -> "ConditionSpec":
        return ConditionSpec(**d)


def build_prompt(spec: ConditionSpec, vocab: Vocabulary | None = None) -> list[str]:
    """Canonical keyword sequence: orientation words, field, sequence, extras."""
    vocab = vocab or default_vocabulary()
    words = list(vocab.orientation_keywords[spec.orientation_class])
    words.append(field_strength_token(spec.field_strength_tesla, vocab))
    words.append(spec.sequence)
    words.extend(spec.extra_keywords)
    if len(words) > vocab.max_tokens:
        raise ValidationError(f"prompt longer than {vocab.max_tokens} tokens")
    return words


@dataclass
class CondEmbedding:
    """Encoded condition: a class vector plus a token matrix for cross-attention."""

    class_vector: np.ndarray
    token_matrix: np.ndarray
    is_null: bool = False

    def __post_init__(self):
        self.class_vector = np.asarray(self.class_vector)
        self.token_matrix = np.asarray(self.token_matrix)
        if self.token_matrix.ndim != 2:
            raise ValidationError("token_matrix must be 2D (tokens x dim)")
        if not (np.all(np.isfinite(self.class_vector)) and np.all(np.isfinite(self.token_matrix))):
            raise ValidationError("condition embedding contains non-finite values")


class TextEncoder(Module):
    """Token embeddings with positions and one self-attention layer."""

    def __init__(self, rng, vocab_size: int, dim: int, max_len: int, dtype=np.float32):
        scale = 1.0 / np.sqrt(dim)
        self.tok_embed = Tensor(rng.normal(0, scale, (vocab_size, dim)).astype(dtype), requires_grad=True)
        self.pos_embed = Tensor(rng.normal(0, scale, (max_len, dim)).astype(dtype), requires_grad=True)
        self.wq = Linear(rng, dim, dim, dtype=dtype, bias=False)
        self.wk = Linear(rng, dim, dim, dtype=dtype, bias=False)
        self.wv = Linear(rng, dim, dim, dtype=dtype, bias=False)
        self.wo = Linear(rng, dim, dim, dtype=dtype)
        self.scale = 1.0 / np.sqrt(dim)
        self.max_len = max_len

    def __call__(self, ids: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
        """ids: (n, L) int; mask: (n, L) with 1 = real token. Returns (n, L, dim)."""
        n, L = ids.shape
        if L > self.max_len:
            raise ValidationError(f"token sequence length {L} exceeds max {self.max_len}")
        h = ad.gather_rows(self.tok_embed, ids) + ad.getitem(self.pos_embed, slice(0, L))
        q, k, v = self.wq(h), self.wk(h), self.wv(h)
        logits = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * self.scale
        if mask is not None:
            bias = np.where(mask[:, None, :] > 0, 0.0, -1e4).astype(logits.dtype)
            logits = logits + bias
        attn = ad.softmax(logits, axis=-1)
        return h + self.wo(ad.matmul(attn, v))


class ConditionEncoder(Module):
    """Class-embedding table, text encoder, and the learned null condition."""

    def __init__(self, rng, cond_embed_dim: int, vocab: Vocabulary | None = None, dtype=np.float32):
        self.vocab = vocab or default_vocabulary()
        k = len(ORIENTATION_CLASSES)
        scale = 1.0 / np.sqrt(cond_embed_dim)
        # one row per class plus one null row
        self.class_table = Tensor(
            rng.normal(0, scale, (k + 1, cond_embed_dim)).astype(dtype), requires_grad=True
        )
        self.text = TextEncoder(rng, len(self.vocab), cond_embed_dim, self.vocab.max_tokens, dtype=dtype)
        self.null_token = Tensor(rng.normal(0, scale, (1, cond_embed_dim)).astype(dtype), requires_grad=True)
        self.dim = cond_embed_dim

    @property
    def null_class_index(self) -> int:
        return len(ORIENTATION_CLASSES)

    def encode_spec(self, spec: ConditionSpec) -> CondEmbedding:
        with no_grad():
            cls = self.class_table.data[spec.class_index].copy()
            ids = self.vocab.ids(build_prompt(spec, self.vocab))[None, :]
            toks = self.text(ids).data[0].copy()
        return CondEmbedding(class_vector=cls, token_matrix=toks, is_null=False)

    def null_embedding(self) -> CondEmbedding:
        with no_grad():
            cls = self.class_table.data[self.null_class_index].copy()
            toks = self.null_token.data.copy()
        return CondEmbedding(class_vector=cls, token_matrix=toks, is_null=True)

    def embed_batch(self, class_idx: np.ndarray, token_ids: np.ndarray,
                    token_mask: np.ndarray, null_mask: np.ndarray) -> tuple[Tensor, Tensor, np.ndarray]:
        """Differentiable batched encoding mixing real and null conditions.

        class_idx already has null rows remapped to the null class row.  The
        token tensor gets a leading slot holding the null token; the returned
        attention mask exposes slot 0 exactly for null rows and the real
        tokens for the rest.
        """
        n = class_idx.shape[0]
        class_vecs = ad.gather_rows(self.class_table, class_idx)
        text_toks = self.text(token_ids, token_mask)
        null_row = ad.reshape(self.null_token, (1, 1, self.dim))
        null_tiled = null_row + Tensor(np.zeros((n, 1, 1), dtype=self.null_token.dtype))
        tokens_full = ad.concat([null_tiled, text_toks], axis=1)
        full_mask = np.concatenate(
            [null_mask[:, None].astype(np.float64), token_mask * (1.0 - null_mask[:, None])], axis=1
        )
        return class_vecs, tokens_full, full_mask

    def prepare_batch_arrays(self, specs: list[ConditionSpec | None]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Pack a list of specs (None = null condition) into index arrays."""
        n = len(specs)
        lmax = self.vocab.max_tokens
        class_idx = np.full(n, self.null_class_index, dtype=np.int64)
        token_ids = np.zeros((n, lmax), dtype=np.int64)
        token_mask = np.zeros((n, lmax), dtype=np.float64)
        null_mask = np.ones(n, dtype=np.float64)
        for i, spec in enumerate(specs):
            if spec is None:
                continue
            null_mask[i] = 0.0
            class_idx[i] = spec.class_index
            ids = self.vocab.ids(build_prompt(spec, self.vocab))
            token_ids[i, : ids.size] = ids
            token_mask[i, : ids.size] = 1.0
        return class_idx, token_ids, token_mask, null_mask


# -- functional surfaces -------------------------------------------------------


def encode_class(orientation_class: str, encoder: ConditionEncoder) -> np.ndarray:
    """The learned embedding row for one orientation class."""
    if orientation_class not in ORIENTATION_CLASSES:
        raise ValidationError(
            f"unknown orientation class {orientation_class!r}, expected one of {ORIENTATION_CLASSES}"
        )
    return encoder.class_table.data[ORIENTATION_CLASSES.index(orientation_class)].copy()


def encode_text(tokens: list[str], encoder: ConditionEncoder) -> np.ndarray:
    """Token matrix (one row per token) for a keyword sequence."""
    ids = encoder.vocab.ids(list(tokens))[None, :]
    with no_grad():
        return encoder.text(ids).data[0].copy()


def apply_cond_dropout(emb: CondEmbedding, p: float, rng: np.random.Generator,
                       encoder: ConditionEncoder) -> CondEmbedding:
    """Replace `emb` with the learned null embedding with probability p.

    Consumes exactly one RNG draw; never mutates its input.
    """
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"dropout probability {p} outside [0, 1]")
    if rng.random() < p:
        return encoder.null_embedding()
    return CondEmbedding(
        class_vector=emb.class_vector.copy(),
        token_matrix=emb.token_matrix.copy(),
        is_null=emb.is_null,
    )
