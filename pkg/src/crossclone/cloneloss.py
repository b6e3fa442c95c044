"""Clone-detection objective and the weighted total loss for fine-tuning.

The clone objective is an in-batch softmax retrieval loss: each query scores
every candidate by temperature-scaled cosine and pays the negative log
probability of its labeled clone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch

from .encoder import cosine_matrix
from .errors import ConfigError, ContractError, NumericError


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    tau_clone: float = 0.05

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")
        if self.tau_clone <= 0:
            raise ConfigError(f"tau_clone must be > 0, got {self.tau_clone}")


def clone_loss(
    queries: torch.Tensor,
    candidates: torch.Tensor,
    positive_index: Sequence[int],
    tau: float = 0.05,
) -> torch.Tensor:
    """Mean -log softmax probability of each query's labeled clone.

    ``candidates`` is a shared pool; ``positive_index[i]`` names which row is
    query i's clone, every other row acts as an in-batch negative. Gradients
    flow through both queries and candidates.
    """
    if tau <= 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    n = queries.size(0)
    if len(positive_index) != n:
        raise ContractError("one positive index per query is required")
    k = candidates.size(0)
    for i, idx in enumerate(positive_index):
        if not 0 <= idx < k:
            raise ContractError(f"query {i}: positive index {idx} outside candidate pool")
    sims = cosine_matrix(queries, candidates) / tau
    log_probs = torch.log_softmax(sims, dim=1)
    picked = log_probs[torch.arange(n), torch.as_tensor(list(positive_index))]
    return -picked.mean()


def total_loss(l_clone, l_domain, l_cycle, weights: LossWeights):
    """l_clone + alpha * l_domain + beta * l_cycle, guarding non-finite inputs."""
    for name, value in (("clone", l_clone), ("domain", l_domain), ("cycle", l_cycle)):
        scalar = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(scalar):
            raise NumericError(f"non-finite {name} loss component: {scalar}")
    return l_clone + weights.alpha * l_domain + weights.beta * l_cycle
