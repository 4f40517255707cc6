"""Differentiable histogram filter over latent cursor positions.

Each cursor carries a categorical distribution over ``P`` relative positions.
One step of the filter mixes a reset branch (re-anchor at the origin), a
no-reset branch (shift right / left / stay, clamped at the boundaries), an
optional copy branch (jump straight to an earlier position) and finally
power-sharpens the result.

All functions operate on tensors whose last dimension is the position axis;
any leading dimensions (cursor, batch, ...) are batch axes and the gate
tensors must broadcast against ``h[..., 0]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

DEFAULT_EPS = 1e-9


@dataclass
class GateProbs:
    """Gate probabilities for one filter step.

    ``reset`` is a Bernoulli probability independent of the 3-way action gate
    ``(incr, decr, keep)``. ``copy``, when given, has ``P + 1`` entries on the
    last axis: ``P`` copy targets followed by the no-copy slot.
    """

    reset: torch.Tensor
    incr: torch.Tensor
    decr: torch.Tensor
    keep: torch.Tensor
    copy: Optional[torch.Tensor] = None

    @classmethod
    def from_scalars(cls, p_reset, p_incr, p_decr, p_keep, copy=None, dtype=torch.float64):
        t = lambda v: torch.as_tensor(v, dtype=dtype)  # noqa: E731
        return cls(t(p_reset), t(p_incr), t(p_decr), t(p_keep), None if copy is None else t(copy))

    def check(self, atol: float = 1e-6) -> None:
        for name in ("reset", "incr", "decr", "keep"):
            v = getattr(self, name)
            if torch.isnan(v).any() or (v < 0).any() or (v > 1 + atol).any():
                raise ValueError(f"gate {name!r} outside [0, 1] or NaN")
        total = self.incr + self.decr + self.keep
        if (total - 1).abs().max() > atol:
            raise ValueError("action gate probabilities must sum to 1")
        if self.copy is not None:
            if torch.isnan(self.copy).any() or (self.copy < 0).any():
                raise ValueError("copy distribution has NaN or negative entries")
            if (self.copy.sum(-1) - 1).abs().max() > atol:
                raise ValueError("copy distribution must sum to 1")


@dataclass
class SharpenParams:
    gamma: torch.Tensor | float
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be non-negative")


def _check_histogram(h: torch.Tensor) -> None:
    if h.dim() < 1 or h.shape[-1] < 2:
        raise ValueError(f"histogram needs a position axis of size >= 2, got shape {tuple(h.shape)}")
    if torch.isnan(h).any():
        raise ValueError("histogram contains NaN")
    if (h < 0).any():
        raise ValueError("histogram contains negative mass")


def transition(h: torch.Tensor, gates: GateProbs, validate: bool = True) -> torch.Tensor:
    """Pre-sharpen update: reset, shift/keep and optional copy branches.

    Conserves total mass. Cost is O(P) per histogram.
    """
    if validate:
        _check_histogram(h)
        gates.check()
        if gates.copy is not None and gates.copy.shape[-1] != h.shape[-1] + 1:
            raise ValueError(
                f"copy distribution needs P+1={h.shape[-1] + 1} entries, got {gates.copy.shape[-1]}"
            )
    r = gates.reset.unsqueeze(-1)
    inc = gates.incr.unsqueeze(-1)
    dec = gates.decr.unsqueeze(-1)
    keep = gates.keep.unsqueeze(-1)

    total = h.sum(-1, keepdim=True)
    zero = torch.zeros_like(h[..., :1])

    # shift right, the last cell keeps its own overflow
    right = torch.cat([zero, h[..., :-2], h[..., -2:-1] + h[..., -1:]], dim=-1)
    # shift left, cell 0 absorbs the underflow
    left = torch.cat([h[..., :1] + h[..., 1:2], h[..., 2:], zero], dim=-1)
    out = (1 - r) * (keep * h + inc * right + dec * left)

    reset_inc = total * r * inc
    reset_rest = total * r * (dec + keep)
    head = torch.cat([reset_rest, reset_inc], dim=-1)
    out = torch.cat([out[..., :2] + head, out[..., 2:]], dim=-1)

    if gates.copy is not None:
        p_pos, p_none = gates.copy[..., :-1], gates.copy[..., -1:]
        out = out * p_none + total * p_pos
    return out


def sharpen(h: torch.Tensor, gamma, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Normalized power ``(h + eps)**gamma``; ``gamma`` broadcasts over ``h[..., 0]``.

    Evaluated as a softmax of ``gamma * log(h + eps)``, which is the same map
    but does not underflow for small masses.
    """
    gamma = torch.as_tensor(gamma, dtype=h.dtype, device=h.device)
    if gamma.dim() > 0:
        gamma = gamma.unsqueeze(-1)
    return torch.softmax(gamma * torch.log(h + eps), dim=-1)


def update_step(
    h: torch.Tensor,
    gates: GateProbs,
    params: SharpenParams,
    validate: bool = True,
    return_pre: bool = False,
):
    """One full filter step: :func:`transition` followed by :func:`sharpen`.

    With ``return_pre`` the pre-sharpen intermediate is returned as well, as
    ``(h_next, pre)``.
    """
    pre = transition(h, gates, validate=validate)
    out = sharpen(pre, params.gamma, params.eps)
    if return_pre:
        return out, pre
    return out


def transition_matrix(gates: GateProbs, P: int) -> torch.Tensor:
    """Dense row-stochastic ``M`` with ``h_next = h @ M`` (no copy branch).

    Test oracle only; O(P^2) memory. Gates must be scalars.
    """
    if gates.copy is not None:
        raise ValueError("the dense transition matrix is defined without the copy branch")
    r, inc, dec, keep = (torch.as_tensor(g, dtype=torch.float64) for g in
                         (gates.reset, gates.incr, gates.decr, gates.keep))
    M = torch.zeros(P, P, dtype=torch.float64)
    for i in range(P):
        M[i, 1] += r * inc
        M[i, 0] += r * (dec + keep)
        M[i, i] += (1 - r) * keep
        M[i, min(i + 1, P - 1)] += (1 - r) * inc
        M[i, max(i - 1, 0)] += (1 - r) * dec
    return M


def apply_transition_matrix(h: torch.Tensor, gates: GateProbs) -> torch.Tensor:
    M = transition_matrix(gates, h.shape[-1]).to(h.dtype)
    return h @ M


def run_filter(
    gates_seq: list[GateProbs],
    params: SharpenParams,
    P: int,
    start: int = 0,
    dtype=torch.float64,
) -> list[torch.Tensor]:
    """Iterate :func:`update_step` from a one-hot at ``start``; returns every marginal.

    The returned list has ``len(gates_seq) + 1`` entries, the first being the
    initial one-hot.
    """
    h = torch.zeros(P, dtype=dtype)
    h[start] = 1.0
    out = [h]
    for g in gates_seq:
        h = update_step(h, g, params)
        out.append(h)
    return out
