"""Domain-adversarial pieces: gradient reversal with its ramp schedule, the
domain classifier head, and the domain cross-entropy loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError, ContractError

_PROB_FLOOR = 1e-12


@dataclass
class GrlConfig:
    """Reversal-strength schedule state: strength mu over steps 0..total_steps."""

    mu: float = 0.01
    total_steps: int = 1
    step: int = 0

    def __post_init__(self):
        if self.mu <= 0:
            raise ConfigError(f"mu must be > 0, got {self.mu}")


def grl_lambda(config: GrlConfig) -> float:
    """Reversal coefficient 2 / (1 + exp(-mu * t / T)).

    Equals 1.0 exactly at t = 0 and is nondecreasing in t.
    """
    if config.total_steps <= 0:
        raise ConfigError(f"total_steps must be > 0, got {config.total_steps}")
    if not 0 <= config.step <= config.total_steps:
        raise ContractError(
            f"step {config.step} outside [0, {config.total_steps}]"
        )
    return 2.0 / (1.0 + math.exp(-config.mu * config.step / config.total_steps))


class _ReverseGrad(torch.autograd.Function):
    """Identity forward; backward multiplies the incoming gradient by -lambda."""

    @staticmethod
    def forward(ctx, x: torch.Tensor, lam: float):
        ctx.lam = float(lam)
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        return -ctx.lam * grad_output, None


def grl_apply(x: torch.Tensor, lam: float) -> torch.Tensor:
    return _ReverseGrad.apply(x, lam)


class DomainHead(nn.Module):
    """Affine map to per-language logits; softmax happens in domain_logits."""

    def __init__(self, d_model: int, n_domains: int = 2):
        if n_domains < 2:
            raise ConfigError(f"n_domains must be >= 2, got {n_domains}")
        super().__init__()
        self.linear = nn.Linear(d_model, n_domains)

    @property
    def n_domains(self) -> int:
        return self.linear.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.linear(x)


def build_domain_head(
    d_model: int, n_domains: int = 2, seed: int = 0, dtype: torch.dtype = torch.float32
) -> DomainHead:
    torch.manual_seed(seed)
    return DomainHead(d_model, n_domains).to(dtype)


def domain_logits(x: torch.Tensor, head: DomainHead) -> torch.Tensor:
    """Per-row language probabilities: softmax(W x + b). Rows sum to 1."""
    if x.dim() != 2:
        raise ContractError(f"expected (batch, d) input, got {tuple(x.shape)}")
    if x.size(1) != head.linear.in_features:
        raise ContractError(
            f"dimension mismatch: input d={x.size(1)}, head expects {head.linear.in_features}"
        )
    return torch.softmax(head(x), dim=1)


def domain_loss(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of the true language label.

    For two domains this is exactly the binary form
    -(1/N) sum [y log p1 + (1-y) log p0]; probabilities are clamped to
    [1e-12, 1 - 1e-12] so the log stays finite.
    """
    if probs.dim() != 2 or probs.size(0) == 0:
        raise ContractError("domain_loss requires a non-empty (batch, n_domains) matrix")
    if labels.dim() != 1 or labels.size(0) != probs.size(0):
        raise ContractError("one label per probability row is required")
    if labels.numel() and (labels.min() < 0 or labels.max() >= probs.size(1)):
        raise ContractError("labels out of range for the probability rows")
    clamped = probs.clamp(_PROB_FLOOR, 1.0 - _PROB_FLOOR)
    picked = clamped[torch.arange(probs.size(0)), labels]
    return -torch.log(picked).mean()
