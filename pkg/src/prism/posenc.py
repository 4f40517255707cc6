"""Sinusoidal tables and per-cursor superposition position streams."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

BASE = 10000.0


@dataclass
class HierarchicalConfig:
    heads: int
    cursors_per_head: int = 4
    concat_abs: bool = False
    custom_ln: bool = False
    ablate_abs: bool = False

    @property
    def relative_cursors(self) -> int:
        return self.heads * self.cursors_per_head

    @property
    def total_cursors(self) -> int:
        """Cursor branches per stream, counting the appended absolute branch."""
        return self.heads * self.branches_per_head

    @property
    def branches_per_head(self) -> int:
        return self.cursors_per_head + int(self.concat_abs)


def frequencies(d_pe: int, base: float = BASE, dtype=torch.float64) -> torch.Tensor:
    i = torch.arange(0, d_pe, 2, dtype=torch.float64)
    return torch.exp(-math.log(base) * i / d_pe).to(dtype)


def build_sin_table(P: int, d_pe: int, base: float = BASE, dtype=torch.float64) -> torch.Tensor:
    """Rows ``f(k)`` with ``f[2i] = sin(k w_i)``, ``f[2i+1] = cos(k w_i)``, shape ``(P, d_pe)``.

    Always computed in float64 and cast, so tables are bit-identical across
    calls.
    """
    if d_pe % 2:
        raise ValueError(f"d_pe must be even, got {d_pe}")
    if P < 1:
        raise ValueError("P must be >= 1")
    pos = torch.arange(P, dtype=torch.float64)[:, None]
    angle = pos * frequencies(d_pe, base)[None, :]
    table = torch.empty(P, d_pe, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle)
    return table.to(dtype)


def sin_row_norm(d_pe: int) -> float:
    """Norm of every sinusoidal row; each sin/cos pair contributes 1."""
    return math.sqrt(d_pe / 2)


def superpose(h_all: torch.Tensor, table: torch.Tensor, heads: int) -> torch.Tensor:
    """Histogram-weighted sum of table rows for every cursor.

    ``h_all`` is ``(C, B, S, P)`` with ``C = heads * O`` cursors laid out head
    major. Returns ``(B, H, O, S, d)``.
    """
    C, B, S, P = h_all.shape
    if table.shape[0] != P:
        raise ValueError(f"table has {table.shape[0]} rows but histograms have support {P}")
    if C % heads:
        raise ValueError(f"{C} cursors do not split evenly over {heads} heads")
    d = table.shape[1]
    z = h_all.reshape(C * B * S, P) @ table
    return z.reshape(heads, C // heads, B, S, d).permute(2, 0, 1, 3, 4)


def concat_and_normalize(
    enc_q: torch.Tensor,
    enc_k: torch.Tensor,
    cfg: HierarchicalConfig,
    abs_table: torch.Tensor | None = None,
):
    """Optionally append an absolute-position branch, then rescale.

    ``custom_ln`` applies one global factor so a stream of one-hot branches has
    joint norm ``sqrt(d)``; otherwise every ``(b, h, s)`` block is divided by
    its own norm over ``(cursor, d)`` and multiplied by ``sqrt(d)``.
    """
    B, H, C, S, d = enc_q.shape
    if cfg.concat_abs:
        if abs_table is None or abs_table.shape[0] < S:
            raise ValueError("absolute table is missing or shorter than the sequence")
        abs_pe = abs_table[:S].to(enc_q.dtype).reshape(1, 1, 1, S, d).expand(B, H, 1, S, d)
        if cfg.ablate_abs:
            abs_pe = torch.zeros_like(abs_pe)
        enc_q = torch.cat([enc_q, abs_pe], dim=2)
        enc_k = torch.cat([enc_k, abs_pe], dim=2)
        C += 1
    if cfg.custom_ln:
        alpha = sin_row_norm(d)
        scale = math.sqrt(d) / math.sqrt(C * alpha ** 2)
        return enc_q * scale, enc_k * scale

    def _norm(x):
        n = x.pow(2).sum(dim=(2, 4), keepdim=True).sqrt().clamp_min(1e-12)
        return x / n * math.sqrt(d)

    return _norm(enc_q), _norm(enc_k)
