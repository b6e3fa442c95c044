"""Tokenization, the trainable sequence encoder, and cosine similarity.

The encoder is deliberately small (transformer layers over a corpus-built
whitespace-and-punctuation vocabulary) and is used strictly through its
CLS-position output vector. Anything exposing ``embed_programs`` can replace
it in the retrieval paths.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import torch
from torch import nn

from .corpus import Program
from .errors import ConfigError, ContractError, NumericError

PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
PAD_ID, UNK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3
_SPECIALS = (PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

_NORM_EPS = 1e-12


def split_code(text: str) -> list[str]:
    """Split source text into word and single-punctuation tokens."""
    return _TOKEN_RE.findall(text)


@dataclass(frozen=True)
class Vocabulary:
    """Token-to-id table with fixed special tokens at ids 0..3."""

    tokens: tuple[str, ...]
    index: dict = field(repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != _SPECIALS:
            raise ContractError("vocabulary must start with the special tokens")
        object.__setattr__(
            self, "index", {tok: i for i, tok in enumerate(self.tokens)}
        )

    @classmethod
    def from_programs(cls, programs: Iterable[Program]) -> "Vocabulary":
        seen: set[str] = set()
        for program in programs:
            seen.update(split_code(program.code))
            for snippet in program.snippets:
                seen.update(split_code(snippet.text))
        return cls(tokens=_SPECIALS + tuple(sorted(seen)))

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def __len__(self) -> int:
        return len(self.tokens)


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> list[int]:
    """Map text to ids framed by CLS/SEP, truncating to ``max_len``.

    Truncation keeps CLS first and SEP last; blank text yields [CLS, SEP].
    """
    if max_len < 2:
        raise ConfigError(f"max_len must be >= 2, got {max_len}")
    body = [vocab.id_of(tok) for tok in split_code(text)]
    return [CLS_ID] + body[: max_len - 2] + [SEP_ID]


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 512
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.max_len < 8:
            raise ConfigError(f"max_len must be >= 8, got {self.max_len}")
        if self.vocab_size < len(_SPECIALS):
            raise ConfigError("vocab_size smaller than the special-token set")


class SnippetEncoder(nn.Module):
    """Transformer encoder whose CLS-position output is the embedding.

    Token and learned position embeddings feed ``n_layers`` standard
    encoder layers; the position-0 hidden vector of the final layer is
    returned. Dropout is active only in train mode.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.token_embedding = nn.Embedding(
            config.vocab_size, config.d_model, padding_idx=PAD_ID
        )
        self.position_embedding = nn.Embedding(config.max_len, config.d_model)
        layer = nn.TransformerEncoderLayer(
            d_model=config.d_model,
            nhead=config.n_heads,
            dim_feedforward=4 * config.d_model,
            dropout=config.dropout,
            batch_first=True,
        )
        self.layers = nn.TransformerEncoder(
            layer, num_layers=config.n_layers, enable_nested_tensor=False
        )
        self.input_dropout = nn.Dropout(config.dropout)

    def forward(
        self, token_ids: torch.Tensor, padding_mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        if token_ids.dim() != 2:
            raise ContractError(f"expected (batch, length) ids, got {tuple(token_ids.shape)}")
        length = token_ids.size(1)
        if length > self.config.max_len:
            raise ContractError(
                f"sequence length {length} exceeds max_len {self.config.max_len}"
            )
        positions = torch.arange(length, device=token_ids.device)
        hidden = self.token_embedding(token_ids) + self.position_embedding(positions)
        hidden = self.input_dropout(hidden)
        hidden = self.layers(hidden, src_key_padding_mask=padding_mask)
        return hidden[:, 0]


def build_encoder(
    config: EncoderConfig, dtype: torch.dtype = torch.float32
) -> SnippetEncoder:
    """Construct a seeded encoder; identical config and dtype give identical weights.

    Embeddings get the usual small-transformer init (std 0.02), and the CLS
    token / position-0 rows start at zero so the aggregate position carries
    attention-gathered content rather than a shared constant from step one.
    """
    torch.manual_seed(config.seed)
    encoder = SnippetEncoder(config)
    with torch.no_grad():
        encoder.token_embedding.weight.mul_(0.02)
        encoder.position_embedding.weight.mul_(0.02)
        encoder.token_embedding.weight[CLS_ID].zero_()
        encoder.position_embedding.weight[0].zero_()
    return encoder.to(dtype)


def encode_batch(encoder: SnippetEncoder, sequences: Sequence[Sequence[int]]) -> torch.Tensor:
    """Pad token sequences, run the encoder, and return the CLS rows."""
    if not sequences:
        raise ContractError("encode_batch requires at least one sequence")
    for seq in sequences:
        if len(seq) < 2:
            raise ContractError("token sequences must contain at least CLS and SEP")
        if len(seq) > encoder.config.max_len:
            raise ContractError(
                f"sequence length {len(seq)} exceeds max_len {encoder.config.max_len}"
            )
    width = max(len(seq) for seq in sequences)
    ids = torch.full((len(sequences), width), PAD_ID, dtype=torch.long)
    mask = torch.ones((len(sequences), width), dtype=torch.bool)
    for row, seq in enumerate(sequences):
        ids[row, : len(seq)] = torch.tensor(seq, dtype=torch.long)
        mask[row, : len(seq)] = False
    return encoder(ids, padding_mask=mask)


def encode_one(encoder: SnippetEncoder, sequence: Sequence[int]) -> torch.Tensor:
    return encode_batch(encoder, [sequence])[0]


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of two vectors; raises on (near-)zero norms."""
    if a.shape != b.shape or a.dim() != 1:
        raise ContractError(f"cosine expects equal-shape vectors, got {a.shape} vs {b.shape}")
    norm_a = torch.linalg.vector_norm(a)
    norm_b = torch.linalg.vector_norm(b)
    if float(norm_a.detach()) <= _NORM_EPS or float(norm_b.detach()) <= _NORM_EPS:
        raise NumericError("cosine of a degenerate (zero-norm) vector")
    return (a @ b) / (norm_a * norm_b)


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """All-pairs cosine similarities between the rows of ``a`` and ``b``."""
    if a.dim() != 2 or b.dim() != 2 or a.size(1) != b.size(1):
        raise ContractError(
            f"cosine_matrix expects (n,d) and (m,d), got {tuple(a.shape)} vs {tuple(b.shape)}"
        )
    norm_a = torch.linalg.vector_norm(a, dim=1)
    norm_b = torch.linalg.vector_norm(b, dim=1)
    if (
        float(norm_a.detach().min()) <= _NORM_EPS
        or float(norm_b.detach().min()) <= _NORM_EPS
    ):
        raise NumericError("cosine_matrix given a degenerate (zero-norm) row")
    return (a / norm_a[:, None]) @ (b / norm_b[:, None]).T
