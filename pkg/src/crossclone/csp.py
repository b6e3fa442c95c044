"""Snippet-contrast pre-training: language-specific FIFO negative queues and
the temperature-scaled contrastive loss over center/functional snippet pairs.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import torch

from .encoder import cosine_matrix
from .errors import ConfigError, ContractError

# Minimum fill before a queue is trusted as a negative pool; below this the
# training loop falls back to in-batch negatives only.
WARMUP_MIN_ENTRIES = 16


@dataclass(frozen=True)
class QueueEntry:
    embedding: torch.Tensor  # detached
    source_id: str


@dataclass
class LanguageQueue:
    """Bounded FIFO of detached snippet embeddings for one language."""

    language: str
    capacity: int = 128
    entries: list[QueueEntry] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ConfigError(f"queue capacity must be >= 1, got {self.capacity}")

    def fill(self) -> int:
        return len(self.entries)


def queue_push(
    queue: LanguageQueue,
    embeddings: torch.Tensor,
    source_ids,
) -> LanguageQueue:
    """Append a batch of embeddings, evicting the oldest beyond capacity.

    ``source_ids`` is one id per row (or a single id for the whole batch);
    it tags where each embedding came from so negative sampling can exclude
    the query's own program. Embeddings are detached on entry.
    """
    if embeddings.dim() == 1:
        embeddings = embeddings.unsqueeze(0)
    if embeddings.dim() != 2:
        raise ContractError(f"expected (n, d) embeddings, got {tuple(embeddings.shape)}")
    if isinstance(source_ids, str):
        source_ids = [source_ids] * embeddings.size(0)
    if len(source_ids) != embeddings.size(0):
        raise ContractError("one source id per embedding row is required")
    if queue.entries and queue.entries[0].embedding.numel() != embeddings.size(1):
        raise ContractError(
            f"dimension mismatch: queue holds d={queue.entries[0].embedding.numel()}, "
            f"push has d={embeddings.size(1)}"
        )
    for row, source_id in zip(embeddings.detach(), source_ids):
        queue.entries.append(QueueEntry(embedding=row, source_id=str(source_id)))
    overflow = len(queue.entries) - queue.capacity
    if overflow > 0:
        del queue.entries[:overflow]
    return queue


def sample_negatives(
    queue: LanguageQueue,
    k: int,
    exclude: str,
    rng: random.Random,
) -> tuple[list[torch.Tensor], bool]:
    """Draw up to ``k`` negatives uniformly without replacement.

    Entries whose source id equals ``exclude`` are never eligible (the
    query's own program cannot supply negatives). Returns the drawn
    embeddings and a short-fall flag set when fewer than ``k`` were
    available.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    eligible = [e for e in queue.entries if e.source_id != exclude]
    if len(eligible) <= k:
        return [e.embedding for e in eligible], len(eligible) < k
    chosen = rng.sample(eligible, k)
    return [e.embedding for e in chosen], False


@dataclass
class CspBatch:
    """Aligned center/positive embedding rows plus their language tags.

    ``source_ids`` identifies each center's program; positives come from the
    center's own window.
    """

    centers: torch.Tensor
    positives: torch.Tensor
    languages: list[str]
    source_ids: list[str]
    temperature: float = 0.05

    def __post_init__(self):
        if self.centers.shape != self.positives.shape:
            raise ContractError("centers and positives must align row-for-row")
        n = self.centers.size(0)
        if len(self.languages) != n or len(self.source_ids) != n:
            raise ContractError("languages and source_ids must have one entry per row")


def csp_loss(batch: CspBatch, negatives: list[list[torch.Tensor]]) -> torch.Tensor:
    """Mean InfoNCE-style loss over centers.

    Per center: -log softmax of cosine similarities (positive first,
    negatives after) at the batch temperature, with the positive term in the
    denominator. Negatives are detached, so gradients flow only through the
    center and positive rows.
    """
    if batch.temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {batch.temperature}")
    n = batch.centers.size(0)
    if len(negatives) != n:
        raise ContractError("one negative list per center is required")
    losses = []
    for i in range(n):
        negs = negatives[i]
        if not negs:
            raise ContractError(f"center {i} has no negatives")
        candidates = torch.stack([batch.positives[i]] + [t.detach() for t in negs])
        sims = cosine_matrix(batch.centers[i].unsqueeze(0), candidates)[0]
        losses.append(-torch.log_softmax(sims / batch.temperature, dim=0)[0])
    return torch.stack(losses).mean()
