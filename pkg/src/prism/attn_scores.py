"""Position-stream attention scores and the per-head content/position mix."""

from __future__ import annotations

import math

import torch
from torch import nn


class ScoreParams(nn.Module):
    """Per-(head, cursor) coefficients and per-head mixing weight.

    ``alpha`` is stored unconstrained and used as ``|alpha|``. ``mu`` lives in
    ``[0, 1]`` through a sigmoid of ``mu_logit``; ``+inf`` gives exactly 1.
    """

    def __init__(self, heads: int, cursors: int, alpha_init: float = 1.0, mu_init: float = 0.5):
        super().__init__()
        self.alpha = nn.Parameter(torch.full((heads, cursors), float(alpha_init)))
        self.mu_logit = nn.Parameter(torch.full((heads,), math.log(mu_init / (1 - mu_init))))

    @property
    def beta(self) -> torch.Tensor:
        return self.alpha.abs()

    @property
    def mu(self) -> torch.Tensor:
        return torch.sigmoid(self.mu_logit)


def position_scores(enc_q: torch.Tensor, enc_k: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """``sum_c |alpha[h, c]| <q[b,h,c,i], k[b,h,c,j]> / sqrt(C * d)``, shape ``(B, H, S, S)``."""
    if enc_q.shape[:3] != enc_k.shape[:3] or enc_q.shape[-1] != enc_k.shape[-1]:
        raise ValueError(f"query/key streams disagree: {tuple(enc_q.shape)} vs {tuple(enc_k.shape)}")
    B, H, C, S, d = enc_q.shape
    if alpha.shape != (H, C):
        raise ValueError(f"alpha must be ({H}, {C}), got {tuple(alpha.shape)}")
    scaled_q = enc_q * alpha.abs()[None, :, :, None, None]
    scores = torch.einsum("bhcid,bhcjd->bhij", scaled_q, enc_k)
    return scores / math.sqrt(C * d)


def hybrid_scores(content: torch.Tensor, position: torch.Tensor, mu: torch.Tensor) -> torch.Tensor:
    if content.shape != position.shape:
        raise ValueError("content and position scores must have the same shape")
    m = mu.to(content.dtype)[None, :, None, None]
    return m * content + (1 - m) * position
