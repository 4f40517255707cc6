"""Transformer models: APE baseline and the position-stream (PRISM) variant."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import posenc
from .attn_scores import ScoreParams, hybrid_scores, position_scores
from .gates import GateNetwork, orthogonality_penalty
from .histfilter import DEFAULT_EPS, GateProbs, update_step, SharpenParams
from .tasks.tokenizer import VOCAB_SIZE

COPY_POLICIES = ("off", "every_5th")
KINDS = ("prism", "baseline", "content")


@dataclass
class ModelConfig:
    kind: str = "prism"
    vocab_size: int = VOCAB_SIZE
    layers: int = 2
    heads: int = 4
    d_model: int = 128
    d_embed: int | None = None
    d_ff: int | None = None
    d_pe: int = 64
    cursors_per_head: int = 4
    P: int = 256
    gru_hidden: int = 100
    prism_layers: tuple[int, ...] = (0,)
    copy_branch: str = "off"
    d_copy: int = 16
    concat_abs: bool = False
    custom_ln: bool = False
    eps: float = DEFAULT_EPS
    gamma_init: float = 2.0
    alpha_init: float = 1.0
    mu_init: float = 0.5
    regularizer: str = "frobenius"
    ortho_weight: float = 1e-3
    tie_embeddings: bool = True
    max_len: int = 2048
    # run the filter on the reachable cells [0, S] only; cells past S never
    # hold more than O(P * eps**gamma) mass
    truncate_support: bool = True

    def __post_init__(self):
        self.prism_layers = tuple(self.prism_layers)
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.vocab_size != VOCAB_SIZE:
            raise ValueError(f"vocab is fixed at {VOCAB_SIZE}")
        if self.copy_branch not in COPY_POLICIES:
            raise ValueError(f"copy_branch must be one of {COPY_POLICIES}")
        if self.regularizer not in ("frobenius", "orthogonal", "none"):
            raise ValueError("regularizer must be frobenius, orthogonal or none")
        if self.d_model % self.heads:
            raise ValueError("d_model must divide evenly over heads")
        if self.d_pe % 2:
            raise ValueError("d_pe must be even")
        if any(not 0 <= p < self.layers for p in self.prism_layers):
            raise ValueError("prism_layers must index existing layers")
        if self.kind == "prism" and not self.prism_layers:
            raise ValueError("a prism model needs at least one PRISM layer")
        if self.gamma_init <= 1:
            raise ValueError("gamma_init must exceed 1")

    @property
    def embed_dim(self) -> int:
        return self.d_embed or self.d_model

    @property
    def ff_dim(self) -> int:
        return self.d_ff or 4 * self.d_model

    @property
    def hierarchical(self) -> posenc.HierarchicalConfig:
        return posenc.HierarchicalConfig(self.heads, self.cursors_per_head, self.concat_abs, self.custom_ln)

    def cursor_counts(self) -> dict:
        h = self.hierarchical
        n = len(self.prism_layers) if self.kind == "prism" else 0
        return {
            "query_cursors_per_layer": h.relative_cursors,
            "key_cursors_per_layer": h.relative_cursors,
            "branches_per_stream": h.total_cursors,
            "prism_layers": n,
            "histograms_total": 2 * h.relative_cursors * n,
        }

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["prism_layers"] = list(self.prism_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def full(cls, **kw) -> "ModelConfig":
        base = dict(layers=5, heads=8, d_model=512, d_pe=340, d_embed=192, P=2048, cursors_per_head=4)
        base.update(kw)
        return cls(**base)


def copy_cursor_indices(heads: int, cursors_per_head: int, policy: str) -> tuple[int, ...]:
    """Query cursors (head-major flat index) that carry a copy branch."""
    if policy == "off":
        return ()
    return tuple(range(0, heads * cursors_per_head, 5))


class PrismLayer(nn.Module):
    """Gate network + histogram filters + superposed position streams.

    Owns ``2 * H * C`` cursors: the first ``H * C`` feed attention queries,
    the rest feed keys, paired by index.
    """

    def __init__(self, cfg: ModelConfig, input_size: int):
        super().__init__()
        self.cfg = cfg
        self.n_query = cfg.heads * cfg.cursors_per_head
        self.copy_idx = copy_cursor_indices(cfg.heads, cfg.cursors_per_head, cfg.copy_branch)
        self.gates = GateNetwork(
            input_size,
            2 * self.n_query,
            cfg.gru_hidden,
            copy_cursors=self.copy_idx,
            d_copy=cfg.d_copy,
            orthogonal=cfg.regularizer == "orthogonal",
        )
        # gamma = exp(log_gamma) + 1 > 1
        self.log_gamma = nn.Parameter(torch.full((2 * self.n_query,), math.log(cfg.gamma_init - 1)))
        self.register_buffer("sin_table", posenc.build_sin_table(cfg.P, cfg.d_pe).float(), persistent=False)

    @property
    def gamma(self) -> torch.Tensor:
        return torch.exp(self.log_gamma) + 1

    def key_cursor_indices(self) -> list[int]:
        return [self.n_query + i for i in self.copy_idx]

    def support(self, S: int) -> int:
        P = self.cfg.P
        return min(P, S + 1) if self.cfg.truncate_support else P

    def run_filters(self, x: torch.Tensor):
        """Histograms ``(N, B, S, W)`` over the first ``W = support(S)`` cells, plus gates."""
        cfg = self.cfg
        B, S, _ = x.shape
        W = self.support(S)
        gates, copy_attn = self.gates(x)
        N = gates.reset.shape[0]
        frozen = self.key_cursor_indices()
        if frozen:
            keep_mask = torch.ones(N, 1, 1, dtype=x.dtype, device=x.device)
            keep_mask[frozen] = 0
            on = 1 - keep_mask
            gates = GateProbs(
                gates.reset * keep_mask,
                gates.incr * keep_mask + on,
                gates.decr * keep_mask,
                gates.keep * keep_mask,
            )
        copy = None
        if copy_attn is not None:
            # increment-only key cursors sit at cell min(s + 1, P - 1) after token s
            key_pos = torch.clamp(torch.arange(S, device=x.device) + 1, max=W - 1)
            onehot = F.one_hot(key_pos, W).to(x.dtype)
            p_pos = copy_attn[..., :S] @ onehot
            copy = torch.zeros(N, B, S, W + 1, dtype=x.dtype, device=x.device)
            copy[..., W] = 1.0
            copy = copy.index_put((torch.tensor(self.copy_idx, device=x.device),),
                                  torch.cat([p_pos, copy_attn[..., S:]], dim=-1))

        h = torch.zeros(N, B, W, dtype=x.dtype, device=x.device)
        h[..., 0] = 1.0
        params = SharpenParams(self.gamma.to(x.dtype)[:, None], cfg.eps)
        hist = []
        for t in range(S):
            g = GateProbs(
                gates.reset[..., t], gates.incr[..., t], gates.decr[..., t], gates.keep[..., t],
                None if copy is None else copy[:, :, t],
            )
            h = update_step(h, g, params, validate=False)
            hist.append(h)
        return torch.stack(hist, dim=2), gates, copy

    def forward(self, x: torch.Tensor, trace: dict | None = None):
        """Normalized ``(enc_q, enc_k)``, each ``(B, H, C', S, d_pe)``."""
        cfg = self.cfg
        hist, gates, copy = self.run_filters(x)
        table = self.sin_table.to(x.dtype)
        enc = posenc.superpose(hist, table[: hist.shape[-1]], cfg.heads * 2)
        enc_q, enc_k = enc[:, : cfg.heads], enc[:, cfg.heads:]
        if trace is not None:
            trace.setdefault("prism", []).append(
                {"gates": gates, "histograms": hist, "copy": copy, "gamma": self.gamma.detach(),
                 "superposed": enc.detach()}
            )
        enc_q, enc_k = posenc.concat_and_normalize(enc_q, enc_k, cfg.hierarchical, table)
        return enc_q, enc_k


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig, with_position: bool):
        super().__init__()
        d, H = cfg.d_model, cfg.heads
        self.heads = H
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, cfg.ff_dim), nn.GELU(), nn.Linear(cfg.ff_dim, d))
        self.score_params = None
        if with_position:
            branches = cfg.cursors_per_head + int(cfg.concat_abs)
            self.score_params = ScoreParams(H, branches, cfg.alpha_init, cfg.mu_init)

    def attention(self, x, pos=None, trace=None):
        B, S, d = x.shape
        H = self.heads
        q, k, v = self.qkv(x).view(B, S, 3, H, d // H).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // H)
        if pos is not None and self.score_params is not None:
            ps = position_scores(pos[0], pos[1], self.score_params.alpha)
            if trace is not None:
                trace.setdefault("position_scores", []).append(ps.detach())
            scores = hybrid_scores(scores, ps, self.score_params.mu)
        mask = torch.ones(S, S, dtype=torch.bool, device=x.device).triu(1)
        scores = scores.masked_fill(mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        if trace is not None:
            trace.setdefault("attention", []).append(attn.detach())
        out = (attn @ v).transpose(1, 2).reshape(B, S, d)
        return self.proj(out)

    def forward(self, x, pos=None, trace=None):
        x = x + self.attention(self.ln1(x), pos, trace)
        return x + self.ff(self.ln2(x))


class Transformer(nn.Module):
    """Causal decoder.

    ``kind="baseline"`` adds sinusoidal absolute positions to the token
    embeddings, randomly shifted per sequence during training.
    ``kind="prism"`` keeps the content stream position-free and feeds
    position streams into the attention scores of every layer at or after a
    PRISM layer. ``kind="content"`` has no position signal at all.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.embed_dim)
        nn.init.normal_(self.embed.weight, std=cfg.embed_dim ** -0.5)
        self.in_proj = self.out_proj = None
        if cfg.embed_dim != cfg.d_model:
            self.in_proj = nn.Linear(cfg.embed_dim, cfg.d_model)
            self.out_proj = nn.Linear(cfg.d_model, cfg.embed_dim)
        first = min(cfg.prism_layers) if cfg.kind == "prism" else cfg.layers
        self.blocks = nn.ModuleList(Block(cfg, i >= first) for i in range(cfg.layers))
        self.prism = nn.ModuleDict()
        if cfg.kind == "prism":
            for p in cfg.prism_layers:
                self.prism[str(p)] = PrismLayer(cfg, cfg.d_model)
        self.ln_f = nn.LayerNorm(cfg.d_model)
        if not cfg.tie_embeddings:
            self.unembed = nn.Linear(cfg.embed_dim, cfg.vocab_size, bias=False)
        if cfg.kind == "baseline":
            self.register_buffer("ape", posenc.build_sin_table(cfg.P, cfg.d_model).float(), persistent=False)

    def check_input(self, tokens: torch.Tensor) -> None:
        if tokens.dim() != 2:
            raise ValueError("tokens must be (batch, seq)")
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size):
            raise ValueError(f"token ids must lie in [0, {self.cfg.vocab_size})")
        S = tokens.shape[1]
        limit = self.cfg.max_len if self.cfg.kind != "baseline" else min(self.cfg.max_len, self.cfg.P)
        if S > limit:
            raise ValueError(f"sequence length {S} exceeds the model limit {limit}")

    def embed_tokens(self, tokens):
        x = self.embed(tokens)
        if self.in_proj is not None:
            x = self.in_proj(x)
        return x

    def forward(self, tokens: torch.Tensor, shift: torch.Tensor | None = None, trace: dict | None = None):
        """Next-token logits ``(B, S, vocab)``.

        ``shift`` overrides the baseline's absolute-position offsets; in
        training mode they are otherwise drawn uniformly from ``[0, P - S]``.
        """
        self.check_input(tokens)
        B, S = tokens.shape
        x = self.embed_tokens(tokens)
        if self.cfg.kind == "baseline":
            if shift is None:
                if self.training:
                    shift = torch.randint(0, self.cfg.P - S + 1, (B,), device=tokens.device)
                else:
                    shift = torch.zeros(B, dtype=torch.long, device=tokens.device)
            idx = shift[:, None] + torch.arange(S, device=tokens.device)[None, :]
            x = x + self.ape.to(x.dtype)[idx]
        pos = None
        for i, block in enumerate(self.blocks):
            if str(i) in self.prism:
                pos = self.prism[str(i)](x, trace)
            x = block(x, pos, trace)
        x = self.ln_f(x)
        if self.cfg.tie_embeddings:
            if self.out_proj is not None:
                x = self.out_proj(x)
            return x @ self.embed.weight.T
        return self.unembed(x if self.out_proj is None else self.out_proj(x))

    def regularization(self) -> torch.Tensor:
        total = torch.zeros((), dtype=self.ln_f.weight.dtype, device=self.ln_f.weight.device)
        if self.cfg.regularizer != "frobenius":
            return total
        for layer in self.prism.values():
            for w in layer.gates.gru.recurrent_weights():
                total = total + orthogonality_penalty(w, self.cfg.ortho_weight)
        return total

    def alpha_parameters(self) -> list[nn.Parameter]:
        return [b.score_params.alpha for b in self.blocks if b.score_params is not None]


def build_model(cfg: ModelConfig) -> Transformer:
    return Transformer(cfg)


# -- batching and loss ------------------------------------------------------

def collate(examples, pad_id: int = 0):
    """Right-padded ``tokens (B, S)`` and ``mask (B, S - 1)`` of supervised next-token targets."""
    S = max(len(e.tokens) for e in examples)
    tokens = torch.full((len(examples), S), pad_id, dtype=torch.long)
    mask = torch.zeros(len(examples), S, dtype=torch.bool)
    for b, e in enumerate(examples):
        n = len(e.tokens)
        tokens[b, :n] = torch.tensor(e.tokens)
        mask[b, e.supervised_from:n] = True
    return tokens, mask[:, 1:]


def sequence_loss(logits: torch.Tensor, tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over supervised positions (everything after ``=``, EOS included)."""
    pred = logits[:, :-1].reshape(-1, logits.shape[-1])
    tgt = tokens[:, 1:].reshape(-1)
    ce = F.cross_entropy(pred, tgt, reduction="none").view(mask.shape)
    m = mask.to(ce.dtype)
    return (ce * m).sum() / m.sum().clamp_min(1)


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_FORMAT = "prism-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: Transformer, optimizer=None, step: int = 0, extra: dict | None = None):
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "step": step,
        "model": model.state_dict(),
        "optimizer": None if optimizer is None else optimizer.state_dict(),
        "rng": {"torch": torch.get_rng_state(), "numpy": np.random.get_state()},
        "extra": extra or {},
    }
    torch.save(blob, path)


def load_checkpoint(path, optimizer=None):
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint written by this package")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
    model = build_model(ModelConfig.from_dict(blob["config"]))
    model.load_state_dict(blob["model"])
    if optimizer is not None and blob["optimizer"] is not None:
        optimizer.load_state_dict(blob["optimizer"])
    return model, blob
