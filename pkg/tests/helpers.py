"""Shared test utilities: high-precision references and finite differences."""

from __future__ import annotations

import math

import torch


def kahan_sum(values) -> float:
    """Compensated summation; the independent reference for dot/norm math."""
    total = 0.0
    comp = 0.0
    for v in values:
        y = float(v) - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total


def reference_cosine(a, b) -> float:
    dot = kahan_sum(x * y for x, y in zip(a, b))
    na = math.sqrt(kahan_sum(x * x for x in a))
    nb = math.sqrt(kahan_sum(y * y for y in b))
    return dot / (na * nb)


def central_diff_grad(loss_fn, tensor: torch.Tensor, index, h: float = 1e-4) -> float:
    """Central finite difference of a scalar function w.r.t. one coordinate."""
    with torch.no_grad():
        original = tensor.view(-1)[index].item()
        tensor.view(-1)[index] = original + h
        up = float(loss_fn())
        tensor.view(-1)[index] = original - h
        down = float(loss_fn())
        tensor.view(-1)[index] = original
    return (up - down) / (2.0 * h)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_param_grads(
    loss_fn,
    parameters,
    rng: torch.Generator | None = None,
    coords_per_tensor: int = 6,
    h: float = 1e-4,
    rel_tol: float = 1e-3,
    grad_floor: float = 1e-6,
):
    """Compare analytic gradients against central differences on sampled coords.

    ``loss_fn`` must be a deterministic closure over ``parameters``. Returns
    the number of coordinates actually compared (near-zero gradients are
    skipped: the relative-error criterion is meaningless there).
    """
    params = [p for p in parameters if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    if rng is None:
        rng = torch.Generator().manual_seed(0)
    checked = 0
    for p in params:
        if p.grad is None:
            continue
        flat_grad = p.grad.detach().view(-1)
        n = flat_grad.numel()
        count = min(coords_per_tensor, n)
        idxs = torch.randperm(n, generator=rng)[:count]
        for index in idxs.tolist():
            analytic = float(flat_grad[index])
            if abs(analytic) < grad_floor:
                continue
            numeric = central_diff_grad(lambda: loss_fn().detach(), p, index, h=h)
            err = relative_error(analytic, numeric)
            assert err <= rel_tol, (
                f"grad mismatch at {tuple(p.shape)}[{index}]: "
                f"analytic={analytic:.6g} numeric={numeric:.6g} rel={err:.3g}"
            )
            checked += 1
    return checked
