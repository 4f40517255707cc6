"""Curriculum training and exact-match evaluation."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .model import Transformer, collate, save_checkpoint, sequence_loss
from .tasks.generators import TaskExample, generate
from .tasks.tokenizer import TOKENIZER

log = logging.getLogger(__name__)

METRICS_SCHEMA = 1
METRICS_COLUMNS = ["schema_version", "step", "task", "eval_length", "exact_match", "token_accuracy", "loss"]

# tasks whose maximum training length keeps growing after the warmup stages
GROWING_TASKS = ("stack", "reverse", "odds_first", "addition")

TEST_SEED_BASE = 1 << 62


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Curriculum:
    """Piecewise-constant maximum training length.

    ``stages`` holds ``(start_step, max_len)`` pairs. After the last stage,
    when ``grow_every`` is set, the cap rises by ``grow_by`` every
    ``grow_every`` steps until it reaches ``cap``.
    """

    stages: list[tuple[int, int]] = field(default_factory=lambda: [(0, 10)])
    grow_every: int | None = None
    grow_by: int = 10
    cap: int | None = None
    min_len: int = 1

    def __post_init__(self):
        self.stages = [tuple(s) for s in self.stages]
        starts = [s for s, _ in self.stages]
        lens = [n for _, n in self.stages]
        if starts != sorted(starts) or lens != sorted(lens) or starts[0] != 0:
            raise ValueError("curriculum stages must start at 0 with non-decreasing steps and lengths")

    def max_len_at(self, step: int) -> int:
        cur = self.stages[0][1]
        last_start = 0
        for start, n in self.stages:
            if step >= start:
                cur, last_start = n, start
        if self.grow_every and step >= self.stages[-1][0]:
            cur += self.grow_by * ((step - self.stages[-1][0]) // self.grow_every)
        if self.cap is not None:
            cur = min(cur, self.cap)
        return cur

    @classmethod
    def standard(cls, task: str, train_max: int = 10, scale: float = 1.0) -> "Curriculum":
        """Warm up at length <= 5, then <= 10, then grow by 10 per bucket for the growing tasks.

        ``scale`` multiplies every step count (1.0 = 5k / 5k / 10k steps).
        """
        w = int(round(5000 * scale))
        stages = [(0, min(5, train_max))]
        if train_max > 5:
            stages.append((w, min(10, train_max)))
        grow = task in GROWING_TASKS and train_max > 10
        if grow:
            stages.append((2 * w, 20))
        return cls(stages, grow_every=int(round(10000 * scale)) if grow else None, cap=train_max)


@dataclass
class TrainConfig:
    task: str = "copy"
    seed: int = 0
    max_steps: int = 30000
    batch_size: int = 32
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.98)
    weight_decay: float = 0.01
    alpha_lr: float = 0.03
    alpha_betas: tuple[float, float] = (0.8, 0.92)
    warmup_frac: float = 0.05
    grad_clip: float | None = 1.0
    curriculum: Curriculum = field(default_factory=Curriculum)
    eval_every: int = 1000
    eval_lengths: tuple[int, ...] = (10, 15, 20, 30, 40)
    n_eval: int = 1000
    eval_batch: int = 250
    loss_threshold: float = 0.1
    loss_window: int = 100
    final_eval: bool = True
    checkpoint_every: int | None = None
    out_dir: str | None = None
    log_every: int = 200

    @classmethod
    def desk(cls, task: str = "copy", train_max: int = 10, steps: int = 30000, **kw) -> "TrainConfig":
        scale = steps / 30000 * 0.5
        ladder = tuple(sorted({train_max, int(1.5 * train_max), 2 * train_max, 3 * train_max, 4 * train_max}))
        base = dict(task=task, max_steps=steps, curriculum=Curriculum.standard(task, train_max, scale),
                    eval_lengths=ladder)
        base.update(kw)
        return cls(**base)

    @classmethod
    def full(cls, task: str = "copy", train_max: int = 10, **kw) -> "TrainConfig":
        base = dict(task=task, max_steps=150000, batch_size=100, lr=9e-5,
                    curriculum=Curriculum.standard(task, train_max, 1.0))
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["curriculum"] = dataclasses.asdict(self.curriculum)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("curriculum"), dict):
            d["curriculum"] = Curriculum(**d["curriculum"])
        for k in ("betas", "alpha_betas", "eval_lengths"):
            if k in d and d[k] is not None:
                d[k] = tuple(d[k])
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class EvalRecord:
    step: int
    length: int
    exact_match: float
    token_accuracy: float
    loss: float


# -- optimizer ----------------------------------------------------------------

def build_optimizer(model: Transformer, cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW with the attention position coefficients in their own group."""
    alpha = model.alpha_parameters()
    alpha_ids = {id(p) for p in alpha}
    rest = [p for p in model.parameters() if id(p) not in alpha_ids]
    groups = [{"params": rest, "lr": cfg.lr, "betas": cfg.betas, "weight_decay": cfg.weight_decay,
               "name": "main"}]
    if alpha:
        groups.append({"params": alpha, "lr": cfg.alpha_lr, "betas": cfg.alpha_betas, "weight_decay": 0.0,
                       "name": "alpha"})
    return torch.optim.AdamW(groups)


def lr_factor(step: int, cfg: TrainConfig) -> float:
    """Linear warmup over the first ``warmup_frac`` of training, then constant."""
    warm = int(cfg.warmup_frac * cfg.max_steps)
    if warm <= 0:
        return 1.0
    return min(1.0, (step + 1) / warm)


# -- data -------------------------------------------------------------------

def train_batch(task: str, step: int, cfg: TrainConfig) -> list[TaskExample]:
    rng = np.random.default_rng([cfg.seed, step])
    max_len = cfg.curriculum.max_len_at(step)
    lengths = rng.integers(cfg.curriculum.min_len, max_len + 1, size=cfg.batch_size)
    seeds = rng.integers(0, TEST_SEED_BASE, size=cfg.batch_size)
    return [generate(task, int(n), int(s)) for n, s in zip(lengths, seeds)]


def held_out_set(task: str, length: int, n: int) -> list[TaskExample]:
    """Held-out examples drawn from a seed range disjoint from training."""
    base = TEST_SEED_BASE + length * 10_000_000
    return [generate(task, length, base + i) for i in range(n)]


# -- evaluation ---------------------------------------------------------------

def _batches(items: Sequence, size: int):
    for i in range(0, len(items), size):
        yield items[i:i + size]


@torch.no_grad()
def _predictions(model, examples: Sequence[TaskExample]):
    tokens, mask = collate(examples, TOKENIZER.pad_id)
    logits = model(tokens)
    pred = logits[:, :-1].argmax(-1)
    return pred, tokens[:, 1:], mask


@torch.no_grad()
def greedy_decode(model, prefix: Sequence[int], max_new: int, eos_id: int = TOKENIZER.eos_id) -> list[int]:
    """Autoregressive argmax decoding until EOS or ``max_new`` tokens."""
    seq = list(prefix)
    out = []
    for _ in range(max_new):
        logits = model(torch.tensor([seq]))
        nxt = int(logits[0, -1].argmax())
        out.append(nxt)
        seq.append(nxt)
        if nxt == eos_id:
            break
    return out


def evaluate_exact_match(model, examples: Sequence[TaskExample], batch_size: int = 250,
                         method: str = "teacher_forced") -> dict:
    """Exact-match and per-token accuracy grouped by example length.

    An example is correct only if every supervised token, EOS included, is
    reproduced. ``teacher_forced`` takes the argmax at every supervised
    position of the reference sequence in one pass; the greedy decode is
    correct exactly when all of those argmaxes are, because up to the first
    mismatch both see the same prefix. ``greedy`` decodes autoregressively.
    """
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    hits = defaultdict(list)
    tok_hits = defaultdict(lambda: [0, 0])
    try:
        if method == "teacher_forced":
            for chunk in _batches(list(examples), batch_size):
                pred, tgt, mask = _predictions(model, chunk)
                ok = (pred == tgt) | ~mask
                for b, e in enumerate(chunk):
                    hits[e.length].append(bool(ok[b].all()))
                    m = mask[b]
                    tok_hits[e.length][0] += int((pred[b][m] == tgt[b][m]).sum())
                    tok_hits[e.length][1] += int(m.sum())
        elif method == "greedy":
            for e in examples:
                out = greedy_decode(model, e.prefix, len(e.target) + 1)
                target = e.target
                hits[e.length].append(out == target)
                n = len(target)
                tok_hits[e.length][0] += sum(a == b for a, b in zip(out[:n], target))
                tok_hits[e.length][1] += n
        else:
            raise ValueError(f"unknown evaluation method {method!r}")
    finally:
        if was_training and hasattr(model, "train"):
            model.train()
    return {
        length: {
            "exact_match": float(np.mean(v)),
            "token_accuracy": tok_hits[length][0] / max(tok_hits[length][1], 1),
            "n": len(v),
        }
        for length, v in sorted(hits.items())
    }


def report_top3(records: Iterable[EvalRecord]) -> dict:
    """Per eval length, the mean of the three best exact-match scores.

    Lengths with fewer than three records average what exists and are
    flagged.
    """
    by_len = defaultdict(list)
    for r in records:
        by_len[r.length].append(r.exact_match)
    out = {}
    for length, accs in sorted(by_len.items()):
        top = sorted(accs, reverse=True)[:3]
        out[length] = {"top3_mean": float(np.mean(top)), "n_records": len(accs), "flagged": len(accs) < 3}
    return out


# -- metrics ------------------------------------------------------------------

class MetricsLog:
    """Append-only CSV of evaluation records."""

    def __init__(self, path: str | Path | None, task: str):
        self.path = Path(path) if path else None
        self.task = task
        if self.path and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as f:
                csv.writer(f).writerow(METRICS_COLUMNS)

    def append(self, r: EvalRecord) -> None:
        if not self.path:
            return
        with self.path.open("a", newline="") as f:
            csv.writer(f).writerow([METRICS_SCHEMA, r.step, self.task, r.length,
                                    f"{r.exact_match:.6f}", f"{r.token_accuracy:.6f}", f"{r.loss:.6f}"])


def read_metrics(path) -> list[EvalRecord]:
    with open(path, newline="") as f:
        return [EvalRecord(int(row["step"]), int(row["eval_length"]), float(row["exact_match"]),
                           float(row["token_accuracy"]), float(row["loss"])) for row in csv.DictReader(f)]


# -- training ---------------------------------------------------------------

@dataclass
class TrainResult:
    records: list[EvalRecord]
    losses: list[float]
    steps: int
    summary: dict
    checkpoint: str | None = None
    wall_seconds: float = 0.0


def gate_statistics(model: Transformer, tokens: torch.Tensor) -> dict:
    """Mean / min / max of every gate and any non-finite counts, for diagnostics."""
    trace: dict = {}
    with torch.no_grad():
        model(tokens, trace=trace)
    out = {}
    for i, layer in enumerate(trace.get("prism", [])):
        g = layer["gates"]
        for name in ("reset", "incr", "decr", "keep"):
            v = getattr(g, name)
            out[f"prism{i}.{name}"] = {
                "mean": float(v.nanmean()), "min": float(v.nan_to_num().min()),
                "max": float(v.nan_to_num().max()), "nonfinite": int((~torch.isfinite(v)).sum()),
            }
        h = layer["histograms"]
        out[f"prism{i}.histograms.nonfinite"] = int((~torch.isfinite(h)).sum())
    return out


def _evaluate_all(model, cfg: TrainConfig, step: int, loss: float, test_sets) -> list[EvalRecord]:
    recs = []
    for length, exs in test_sets.items():
        res = evaluate_exact_match(model, exs, cfg.eval_batch)[length]
        recs.append(EvalRecord(step, length, res["exact_match"], res["token_accuracy"], loss))
    return recs


def train(model: Transformer, task: str | None = None, cfg: TrainConfig | None = None,
          progress: Callable[[str], None] | None = None) -> TrainResult:
    """Run the curriculum; evaluate every ``eval_every`` steps once the loss is under threshold.

    Deterministic given ``cfg.seed`` and the model's initial weights.
    Evaluation draws no random numbers, so it never perturbs training.
    """
    cfg = cfg or TrainConfig()
    task = task or cfg.task
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(
            {"train": cfg.to_dict(), "model": model.cfg.to_dict(), "task": task}, indent=2))
    metrics = MetricsLog(out_dir / "metrics.csv" if out_dir else None, task)
    say = progress or log.info

    torch.manual_seed(cfg.seed)
    opt = build_optimizer(model, cfg)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: lr_factor(s, cfg))
    test_sets = {n: held_out_set(task, n, cfg.n_eval) for n in cfg.eval_lengths}

    records: list[EvalRecord] = []
    losses: list[float] = []
    window: deque = deque(maxlen=cfg.loss_window)
    t0 = time.time()
    model.train()
    step = 0
    for step in range(cfg.max_steps):
        batch = train_batch(task, step, cfg)
        tokens, mask = collate(batch, TOKENIZER.pad_id)
        logits = model(tokens)
        loss = sequence_loss(logits, tokens, mask)
        total = loss + model.regularization()
        if not torch.isfinite(total):
            stats = gate_statistics(model, tokens)
            if out_dir:
                (out_dir / "divergence.json").write_text(json.dumps({"step": step, "gates": stats}, indent=2))
            raise TrainingDiverged(f"non-finite loss at step {step}; gate statistics: {json.dumps(stats)}")
        opt.zero_grad(set_to_none=True)
        total.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        sched.step()
        lv = loss.item()
        losses.append(lv)
        window.append(lv)
        smooth = float(np.mean(window))
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            say(f"step {step + 1} loss {smooth:.4f} max_len {cfg.curriculum.max_len_at(step)} "
                f"{time.time() - t0:.0f}s")
        if (step + 1) % cfg.eval_every == 0 and smooth < cfg.loss_threshold:
            recs = _evaluate_all(model, cfg, step + 1, smooth, test_sets)
            for r in recs:
                metrics.append(r)
            records += recs
            say("eval " + " ".join(f"L{r.length}={r.exact_match:.3f}" for r in recs))
        if out_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"step{step + 1}.pt", model, opt, step + 1)
    n_steps = cfg.max_steps
    if cfg.final_eval and n_steps and not (records and records[-1].step == n_steps):
        smooth = float(np.mean(window)) if window else math.nan
        recs = _evaluate_all(model, cfg, n_steps, smooth, test_sets)
        for r in recs:
            metrics.append(r)
        records += recs
    summary = {
        "schema_version": METRICS_SCHEMA,
        "task": task,
        "kind": model.cfg.kind,
        "steps": n_steps,
        "final_loss": float(np.mean(window)) if window else None,
        "top3": {str(k): v for k, v in report_top3(records).items()},
        "wall_seconds": time.time() - t0,
    }
    ckpt = None
    if out_dir:
        ckpt = str(out_dir / "final.pt")
        save_checkpoint(ckpt, model, opt, n_steps, extra={"summary": summary})
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return TrainResult(records, losses, n_steps, summary, ckpt, time.time() - t0)
