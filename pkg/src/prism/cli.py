"""Command-line entry point: ``prism {gen,train,eval,oracle-check,inspect}``.

Exit codes: 0 success, 1 user error (bad flags, bad config, missing files),
2 internal error (including an oracle mismatch in ``oracle-check``).

``PRISM_DATA_ROOT`` sets the default location of external datasets; SCAN
is looked up under ``$PRISM_DATA_ROOT/SCAN``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import oracle
from .harness import (
    METRICS_SCHEMA,
    TEST_SEED_BASE,
    TrainConfig,
    evaluate_exact_match,
    held_out_set,
    train,
)
from .histfilter import GateProbs, SharpenParams, run_filter
from .model import ModelConfig, build_model, load_checkpoint
from .tasks import SYNTHETIC_TASKS, TOKENIZER, TaskExample, generate, ingest_scan_cot

SCHEMA_VERSION = METRICS_SCHEMA
DATA_ROOT_ENV = "PRISM_DATA_ROOT"

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2

log = logging.getLogger("prism")


class UserError(Exception):
    """Problems the caller can fix: bad flags, config values or paths."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; 2 is reserved for internal errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


# -- helpers ----------------------------------------------------------------

def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UserError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UserError(f"config {p} is not valid JSON: {e}") from None
    if not isinstance(cfg, dict) or not set(cfg) <= {"model", "train"}:
        raise UserError('config must be a JSON object with optional "model" and "train" sections')
    return cfg


def _model_config(file_cfg: dict, args) -> ModelConfig:
    d = dict(file_cfg.get("model", {}))
    if getattr(args, "kind", None):
        d["kind"] = args.kind
    try:
        return ModelConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise UserError(f"invalid model config: {e}") from None


def _read_jsonl(path: str) -> list[TaskExample]:
    p = Path(path)
    if not p.is_file():
        raise UserError(f"data file not found: {p}")
    out = []
    for i, line in enumerate(p.read_text().splitlines(), 1):
        if line.strip():
            try:
                out.append(TaskExample.from_json(json.loads(line)))
            except (KeyError, ValueError) as e:
                raise UserError(f"{p}:{i}: bad example line ({e})") from None
    return out


def _write_jsonl(examples, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        for e in examples:
            f.write(json.dumps({"schema_version": SCHEMA_VERSION, **e.to_json()}, ensure_ascii=False) + "\n")


def _check_task(task: str) -> None:
    if task not in SYNTHETIC_TASKS:
        raise UserError(f"unknown task {task!r}; expected one of {', '.join(SYNTHETIC_TASKS)}")


# -- gen --------------------------------------------------------------------

def cmd_gen(args) -> int:
    if args.task == "scan-cot":
        scan_dir = args.scan_dir or (Path(os.environ[DATA_ROOT_ENV]) / "SCAN" if DATA_ROOT_ENV in os.environ else None)
        if scan_dir is None:
            raise UserError(f"scan-cot needs --scan-dir or ${DATA_ROOT_ENV}")
        try:
            data, summary = ingest_scan_cot(scan_dir)
        except FileNotFoundError as e:
            raise UserError(str(e)) from None
        out = Path(args.out or "scan_cot")
        for split, exs in data.items():
            _write_jsonl(exs, out / f"{split}.jsonl")
        summary = {"schema_version": SCHEMA_VERSION, "task": "scan_cot", **summary}
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        print(json.dumps(summary, indent=2))
        return EXIT_OK
    _check_task(args.task)
    if not 1 <= args.min_len <= args.max_len:
        raise UserError("need 1 <= --min-len <= --max-len")
    rng = np.random.default_rng(args.seed)
    lengths = rng.integers(args.min_len, args.max_len + 1, size=args.n)
    # example seeds: train in [0, 2^62), test in [2^62, 2^63), as in the harness
    seeds = rng.integers(0, TEST_SEED_BASE, size=args.n) + (TEST_SEED_BASE if args.split == "test" else 0)
    exs = [generate(args.task, int(n), int(s)) for n, s in zip(lengths, seeds)]
    out = Path(args.out or f"{args.task}_{args.split}.jsonl")
    _write_jsonl(exs, out)
    print(json.dumps({"schema_version": SCHEMA_VERSION, "task": args.task, "split": args.split,
                      "count": len(exs), "path": str(out)}))
    return EXIT_OK


# -- train ------------------------------------------------------------------

def cmd_train(args) -> int:
    file_cfg = _load_config(args.config)
    mcfg = _model_config(file_cfg, args)
    tdict = dict(file_cfg.get("train", {}))
    task = args.task or tdict.get("task", "copy")
    _check_task(task)
    steps = args.steps if args.steps is not None else tdict.get("max_steps", 30000)
    max_len = args.max_len or 10
    preset = TrainConfig.full(task, max_len) if args.preset == "full" else TrainConfig.desk(task, max_len, steps)
    base = preset.to_dict()
    base.update(tdict)
    if args.max_len and "curriculum" in tdict:
        log.warning("--max-len overrides the curriculum from the config file")
        base["curriculum"] = preset.to_dict()["curriculum"]
    overrides = {"task": task, "max_steps": steps, "seed": args.seed, "out_dir": args.out,
                 "eval_lengths": args.eval_lengths, "n_eval": args.n_eval}
    base.update({k: v for k, v in overrides.items() if v is not None})
    try:
        tcfg = TrainConfig.from_dict(base)
    except (TypeError, ValueError) as e:
        raise UserError(f"invalid train config: {e}") from None
    torch.manual_seed(tcfg.seed)
    model = build_model(mcfg)
    result = train(model, task, tcfg, progress=print)
    print(json.dumps(result.summary, indent=2))
    return EXIT_OK


# -- eval -------------------------------------------------------------------

def cmd_eval(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise UserError(f"checkpoint not found: {args.checkpoint}")
    model, blob = load_checkpoint(args.checkpoint)
    if args.data:
        examples = _read_jsonl(args.data)
    else:
        task = args.task or "copy"
        _check_task(task)
        lengths = args.eval_lengths or (10, 15, 20, 30, 40)
        examples = [e for n in lengths for e in held_out_set(task, n, args.n)]
    res = evaluate_exact_match(model, examples, method=args.method)
    print(f"{'length':>8} {'exact_match':>12} {'token_acc':>10} {'n':>6}")
    for n, r in res.items():
        print(f"{n:>8} {r['exact_match']:>12.4f} {r['token_accuracy']:>10.4f} {r['n']:>6}")
    if args.out:
        obj = {"schema_version": SCHEMA_VERSION, "checkpoint": args.checkpoint, "step": blob["step"],
               "method": args.method, "results": {str(k): v for k, v in res.items()}}
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(obj, indent=2) + "\n")
    return EXIT_OK


# -- oracle-check -------------------------------------------------------------

def oracle_check(steps: int, trials: int, seed: int) -> dict:
    """Filter marginals vs. path enumeration (gamma = 1, eps = 0, no copy).

    Three comparisons per trial: absolute position from cell 0 with resets,
    signed displacement from a centred start without resets, and the
    cross-correlation of two marginals when the earlier one is a one-hot.
    """
    if not 0 <= steps <= oracle.MAX_STEPS:
        raise UserError(f"--steps must be in [0, {oracle.MAX_STEPS}]")
    rng = np.random.default_rng(seed)
    params = SharpenParams(1.0, 0.0)
    worst = {"position": 0.0, "displacement": 0.0, "crosscorr": 0.0}
    for _ in range(trials):
        g = oracle.random_gate_steps(rng, steps, with_resets=True)
        P = steps + 2
        marg = run_filter([GateProbs.from_scalars(s.reset, s.incr, s.decr, s.keep) for s in g], params, P)
        ref = oracle.position_pmf_bruteforce(g, P)
        worst["position"] = max(worst["position"], float(np.abs(marg[-1].numpy() - ref).max()))

        g0 = oracle.random_gate_steps(rng, steps, with_resets=False)
        P = 2 * steps + 1
        marg = run_filter([GateProbs.from_scalars(0.0, s.incr, s.decr, s.keep) for s in g0], params, P, start=steps)
        got = oracle.DisplacementPMF({d - steps: float(p) for d, p in enumerate(marg[-1].numpy()) if p})
        ref = oracle.displacement_pmf_bruteforce(g0, with_resets=False)
        worst["displacement"] = max(worst["displacement"], _pmf_gap(got, ref))
        cc = oracle.displacement_pmf_crosscorr(marg[0].numpy(), marg[-1].numpy())
        worst["crosscorr"] = max(worst["crosscorr"], _pmf_gap(cc, ref))
    return worst


def _pmf_gap(a: dict, b: dict) -> float:
    keys = set(a) | set(b)
    return max((abs(a.get(k, 0.0) - b.get(k, 0.0)) for k in keys), default=0.0)


def cmd_oracle_check(args) -> int:
    worst = oracle_check(args.steps, args.trials, args.seed)
    dev = max(worst.values())
    ok = dev < args.tol
    print(json.dumps({"schema_version": SCHEMA_VERSION, "steps": args.steps, "trials": args.trials,
                      "seed": args.seed, "max_abs_deviation": dev, "by_check": worst,
                      "tolerance": args.tol, "ok": ok}))
    return EXIT_OK if ok else EXIT_INTERNAL


# -- inspect ------------------------------------------------------------------

def _write_csv(path: Path, header: list[str], rows) -> int:
    n = 0
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["schema_version"] + header)
        for r in rows:
            w.writerow([SCHEMA_VERSION] + list(r))
            n += 1
    return n


def cmd_inspect(args) -> int:
    if args.checkpoint:
        if not Path(args.checkpoint).is_file():
            raise UserError(f"checkpoint not found: {args.checkpoint}")
        model, _ = load_checkpoint(args.checkpoint)
    else:
        torch.manual_seed(args.seed)
        model = build_model(_model_config(_load_config(args.config), args))
    if model.cfg.kind != "prism":
        raise UserError("inspect needs a prism model (gates and histograms exist only there)")
    if args.text:
        try:
            tokens = TOKENIZER.encode(args.text)
        except (KeyError, ValueError) as e:
            raise UserError(f"cannot tokenize --text: {e}") from None
    else:
        task = args.task or "copy"
        _check_task(task)
        tokens = generate(task, args.length, args.seed).tokens
    model.eval()
    trace: dict = {}
    with torch.no_grad():
        model(torch.tensor([tokens]), trace=trace)
    out = Path(args.out or "inspect")
    out.mkdir(parents=True, exist_ok=True)
    words = [TOKENIZER.symbols[t] for t in tokens]
    layers = sorted(int(k) for k in model.prism)
    n_query = model.cfg.heads * model.cfg.cursors_per_head

    def gate_rows():
        for layer, tr in zip(layers, trace["prism"]):
            g = tr["gates"]
            modes = tr["histograms"][:, 0].argmax(-1)
            for c in range(g.reset.shape[0]):
                role = "query" if c < n_query else "key"
                for t in range(len(tokens)):
                    yield (layer, t, words[t], c, role, c % n_query // model.cfg.cursors_per_head,
                           *(f"{float(getattr(g, k)[c, 0, t]):.6g}" for k in ("reset", "incr", "decr", "keep")),
                           int(modes[c, t]))

    def hist_rows():
        for layer, tr in zip(layers, trace["prism"]):
            h = tr["histograms"][:, 0]
            for c in range(h.shape[0]):
                for t in range(h.shape[1]):
                    for i, p in enumerate(h[c, t].tolist()):
                        yield layer, t, c, i, f"{p:.6g}"

    def embed_rows():
        # superposed (pre-normalization) embedding of every cursor, queries then keys
        for layer, tr in zip(layers, trace["prism"]):
            z = tr["superposed"][0].flatten(0, 1)
            for c in range(z.shape[0]):
                for t in range(z.shape[1]):
                    for k, v in enumerate(z[c, t].tolist()):
                        yield layer, t, c, k, f"{v:.6g}"

    def score_rows():
        pos_layers = [i for i, b in enumerate(model.blocks) if b.score_params is not None]
        for layer, s in zip(pos_layers, trace.get("position_scores", [])):
            for head in range(s.shape[1]):
                for i in range(s.shape[2]):
                    for j in range(i + 1):
                        yield layer, head, i, j, f"{float(s[0, head, i, j]):.6g}"

    def attn_rows():
        for layer, a in enumerate(trace["attention"]):
            for head in range(a.shape[1]):
                for i in range(a.shape[2]):
                    for j in range(i + 1):
                        yield layer, head, i, j, f"{float(a[0, head, i, j]):.6g}"

    counts = {
        "gates.csv": _write_csv(out / "gates.csv", ["layer", "t", "token", "cursor", "role", "head", "reset",
                                                    "incr", "decr", "keep", "mode"], gate_rows()),
        "histograms.csv": _write_csv(out / "histograms.csv", ["layer", "t", "cursor", "position", "mass"],
                                     hist_rows()),
        "embeddings.csv": _write_csv(out / "embeddings.csv", ["layer", "t", "cursor", "dim", "value"], embed_rows()),
        "position_scores.csv": _write_csv(out / "position_scores.csv", ["layer", "head", "query", "key", "score"],
                                          score_rows()),
        "attention.csv": _write_csv(out / "attention.csv", ["layer", "head", "query", "key", "prob"], attn_rows()),
    }
    print(json.dumps({"schema_version": SCHEMA_VERSION, "tokens": words, "out": str(out), "rows": counts}))
    return EXIT_OK


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="prism", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a JSONL dataset")
    g.add_argument("task", choices=SYNTHETIC_TASKS + ("scan-cot",))
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--min-len", type=int, default=1)
    g.add_argument("--max-len", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", choices=("train", "test"), default="train",
                   help="train and test draw example seeds from disjoint ranges")
    g.add_argument("--out", help="JSONL file (scan-cot: output directory)")
    g.add_argument("--scan-dir", help=f"SCAN checkout (default ${DATA_ROOT_ENV}/SCAN)")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="curriculum training with periodic exact-match evaluation")
    t.add_argument("--config", help='JSON with optional "model" and "train" sections; flags win')
    t.add_argument("--task")
    t.add_argument("--kind", choices=("prism", "baseline", "content"))
    t.add_argument("--preset", choices=("desk", "full"), default="desk")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--max-len", type=int, help="maximum training length")
    t.add_argument("--eval-lengths", type=_int_list)
    t.add_argument("--n-eval", type=int)
    t.add_argument("--out", help="run directory (config.json, metrics.csv, summary.json, final.pt)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="exact-match accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--task")
    e.add_argument("--data", help="JSONL file from 'gen' instead of the held-out generator")
    e.add_argument("--eval-lengths", type=_int_list)
    e.add_argument("--n", type=int, default=1000)
    e.add_argument("--method", choices=("teacher_forced", "greedy"), default="teacher_forced")
    e.add_argument("--seed", type=int, default=0, help="unused; evaluation is deterministic")
    e.add_argument("--out", help="write results JSON here")
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("oracle-check", help="compare the filter against path enumeration")
    o.add_argument("--steps", type=int, default=6)
    o.add_argument("--trials", type=int, default=20)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--tol", type=float, default=1e-9)
    o.set_defaults(func=cmd_oracle_check)

    i = sub.add_parser("inspect", help="CSV dumps of gates, histograms and attention for one input")
    i.add_argument("--checkpoint")
    i.add_argument("--config")
    i.add_argument("--kind", choices=("prism",))
    i.add_argument("--task")
    i.add_argument("--text", help="raw input text instead of a generated example")
    i.add_argument("--length", type=int, default=10)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", help="output directory")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER
    except Exception as e:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
