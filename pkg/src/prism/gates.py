"""GRU gate network that turns token features into per-cursor gate probabilities."""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn.utils import parametrizations

from .histfilter import GateProbs


def _uniform_(w: torch.Tensor, fan_in: int) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    nn.init.uniform_(w, -bound, bound)


class GRU(nn.Module):
    """Single-layer GRU with three separate square recurrent matrices.

    Keeping ``W_hr``, ``W_hz`` and ``W_hn`` apart lets each one be regularized
    (or parametrized) to be orthogonal on its own.
    """

    def __init__(self, input_size: int, hidden_size: int = 100, orthogonal: bool = False):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.x2h = nn.Linear(input_size, 3 * hidden_size)
        self.hr = nn.Linear(hidden_size, hidden_size)
        self.hz = nn.Linear(hidden_size, hidden_size)
        self.hn = nn.Linear(hidden_size, hidden_size)
        for lin in (self.x2h, self.hr, self.hz, self.hn):
            _uniform_(lin.weight, hidden_size)
            _uniform_(lin.bias, hidden_size)
        if orthogonal:
            for lin in (self.hr, self.hz, self.hn):
                parametrizations.orthogonal(lin, "weight")

    def recurrent_weights(self) -> list[torch.Tensor]:
        return [self.hr.weight, self.hz.weight, self.hn.weight]

    def forward(self, x: torch.Tensor, h0: torch.Tensor | None = None) -> torch.Tensor:
        """``x`` is ``(B, S, input_size)``; returns hidden states ``(B, S, hidden)``."""
        B, S, _ = x.shape
        h = x.new_zeros(B, self.hidden_size) if h0 is None else h0
        xr, xz, xn = self.x2h(x).chunk(3, dim=-1)
        # materialize parametrized weights once per call
        w_r, w_z, w_n = self.recurrent_weights()
        b_r, b_z, b_n = self.hr.bias, self.hz.bias, self.hn.bias
        out = []
        for t in range(S):
            r = torch.sigmoid(xr[:, t] + h @ w_r.T + b_r)
            z = torch.sigmoid(xz[:, t] + h @ w_z.T + b_z)
            n = torch.tanh(xn[:, t] + r * (h @ w_n.T + b_n))
            h = (1 - z) * n + z * h
            out.append(h)
        return torch.stack(out, dim=1)


def orthogonality_penalty(w: torch.Tensor, weight: float = 1e-3) -> torch.Tensor:
    """``weight * ||W^T W - I||_F^2`` for a square matrix."""
    if w.dim() != 2 or w.shape[0] != w.shape[1]:
        raise ValueError(f"expected a square matrix, got {tuple(w.shape)}")
    eye = torch.eye(w.shape[0], dtype=w.dtype, device=w.device)
    return weight * (w.T @ w - eye).pow(2).sum()


def copy_attention(queries: torch.Tensor, keys: torch.Tensor, no_copy_logit: torch.Tensor) -> torch.Tensor:
    """Causal copy distribution over earlier token positions plus a no-copy slot.

    ``queries``/``keys`` are ``(..., S, d)`` and ``no_copy_logit`` is ``(..., S)``.
    Returns ``(..., S, S + 1)``: entry ``[t, s]`` for ``s <= t`` is the
    probability of copying the position of token ``s``; the last column is
    the no-copy slot.
    """
    S, d = queries.shape[-2:]
    logits = queries @ keys.transpose(-1, -2) / math.sqrt(d)
    future = torch.ones(S, S, dtype=torch.bool, device=queries.device).triu(1)
    logits = logits.masked_fill(future, float("-inf"))
    logits = torch.cat([logits, no_copy_logit.unsqueeze(-1)], dim=-1)
    return torch.softmax(logits, dim=-1)


class GateNetwork(nn.Module):
    """GRU over token features with per-cursor reset / action / copy heads.

    Produces, for every cursor, a reset probability (sigmoid) and a 3-way
    ``(incr, decr, keep)`` distribution (softmax). Cursors listed in
    ``copy_cursors`` additionally get copy query/key vectors and a no-copy
    logit.
    """

    def __init__(
        self,
        input_size: int,
        n_cursors: int,
        hidden_size: int = 100,
        copy_cursors: tuple[int, ...] = (),
        d_copy: int = 16,
        orthogonal: bool = False,
    ):
        super().__init__()
        self.n_cursors = n_cursors
        self.copy_cursors = tuple(copy_cursors)
        self.d_copy = d_copy
        self.gru = GRU(input_size, hidden_size, orthogonal=orthogonal)
        self.reset_head = nn.Linear(hidden_size, n_cursors)
        self.action_head = nn.Linear(hidden_size, 3 * n_cursors)
        heads = [self.reset_head, self.action_head]
        n_copy = len(self.copy_cursors)
        if n_copy:
            self.copy_q = nn.Linear(hidden_size, n_copy * d_copy)
            self.copy_k = nn.Linear(hidden_size, n_copy * d_copy)
            self.no_copy_head = nn.Linear(hidden_size, n_copy)
            heads += [self.copy_q, self.copy_k, self.no_copy_head]
        for lin in heads:
            _uniform_(lin.weight, hidden_size)
            nn.init.zeros_(lin.bias)

    def forward(self, x: torch.Tensor):
        """Returns ``(gates, copy_attn)``.

        ``gates`` holds ``(C, B, S)`` tensors; ``copy_attn`` is
        ``(n_copy, B, S, S + 1)`` or ``None``.
        """
        B, S, _ = x.shape
        C = self.n_cursors
        hid = self.gru(x)
        reset = torch.sigmoid(self.reset_head(hid)).permute(2, 0, 1)
        actions = torch.softmax(self.action_head(hid).view(B, S, C, 3), dim=-1).permute(2, 0, 1, 3)
        gates = GateProbs(reset, actions[..., 0], actions[..., 1], actions[..., 2])
        copy_attn = None
        if self.copy_cursors:
            n = len(self.copy_cursors)
            q = self.copy_q(hid).view(B, S, n, self.d_copy).permute(2, 0, 1, 3)
            k = self.copy_k(hid).view(B, S, n, self.d_copy).permute(2, 0, 1, 3)
            none = self.no_copy_head(hid).permute(2, 0, 1)
            copy_attn = copy_attention(q, k, none)
        return gates, copy_attn
