"""Cycle-consistency mappers between the two language embedding spaces.

H maps source-language embeddings toward the target space and P maps back;
both are the same two-stage affine composition but share no parameters.
Round trips through both should return close to where they started, measured
with a per-row L1 penalty.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import ContractError


class CycleMapper(nn.Module):
    """w2 (w1 x + b1) + b2 — two composed affine maps, no activation between."""

    def __init__(self, dim: int):
        super().__init__()
        self.inner = nn.Linear(dim, dim)
        self.outer = nn.Linear(dim, dim)

    @property
    def dim(self) -> int:
        return self.inner.in_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.outer(self.inner(x))


def build_mapper(
    dim: int, seed: int = 0, init_noise: float = 0.01, dtype: torch.dtype = torch.float32
) -> CycleMapper:
    """Near-identity initialization so the cycle penalty starts close to zero."""
    torch.manual_seed(seed)
    mapper = CycleMapper(dim)
    with torch.no_grad():
        for linear in (mapper.inner, mapper.outer):
            linear.weight.copy_(torch.eye(dim) + init_noise * torch.randn(dim, dim))
            linear.bias.zero_()
    return mapper.to(dtype)


def map_apply(mapper: CycleMapper, x: torch.Tensor) -> torch.Tensor:
    batch = x.unsqueeze(0) if x.dim() == 1 else x
    if batch.dim() != 2 or batch.size(1) != mapper.dim:
        raise ContractError(
            f"dimension mismatch: input {tuple(x.shape)}, mapper expects d={mapper.dim}"
        )
    out = mapper(batch)
    return out[0] if x.dim() == 1 else out


def forward_cycle_term(
    h: CycleMapper, p: CycleMapper, source: torch.Tensor
) -> torch.Tensor:
    """Mean per-row L1 distance between P(H(s)) and s."""
    if source.size(0) == 0:
        raise ContractError("forward cycle term requires a non-empty batch")
    return (map_apply(p, map_apply(h, source)) - source).abs().sum(dim=1).mean()


def backward_cycle_term(
    h: CycleMapper, p: CycleMapper, target: torch.Tensor
) -> torch.Tensor:
    """Mean per-row L1 distance between H(P(t)) and t."""
    if target.size(0) == 0:
        raise ContractError("backward cycle term requires a non-empty batch")
    return (map_apply(h, map_apply(p, target)) - target).abs().sum(dim=1).mean()


def cycle_loss(
    h: CycleMapper, p: CycleMapper, source: torch.Tensor, target: torch.Tensor
) -> torch.Tensor:
    """Sum of forward and backward round-trip penalties.

    Both batches must be non-empty; when one language has no rows the caller
    should skip the term entirely rather than pass an empty batch.
    """
    return forward_cycle_term(h, p, source) + backward_cycle_term(h, p, target)
