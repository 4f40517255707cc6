"""SCAN length-split ingestion and chain-of-thought expansion.

A SCAN command is at most two sub-commands joined by ``and`` / ``after``;
each sub-command is a primitive clause optionally repeated ``twice`` or
``thrice``. The expanded target is

    <clauses rewritten, repeats spelled out with "+"> → <clause : actions>... .

Sub-commands appear in execution order, so ``x after y`` is rewritten as
``y and x``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .generators import ARROW, TaskExample, make_example
from .tokenizer import EOS, SEP, SPACED

VERBS = {"walk": "I_WALK", "look": "I_LOOK", "run": "I_RUN", "jump": "I_JUMP"}
TURNS = {"left": "I_TURN_LEFT", "right": "I_TURN_RIGHT"}
REPEATS = {"twice": 2, "thrice": 3}

TRAIN_FILE = "tasks_train_length.txt"
TEST_FILE = "tasks_test_length.txt"


class ScanFormatError(ValueError):
    pass


def clause_actions(clause: list[str]) -> list[str]:
    """Actions for one primitive clause such as ``walk opposite left``."""
    if not clause:
        raise ScanFormatError("empty clause")
    verb, rest = clause[0], clause[1:]
    if verb == "turn":
        act = []
        if not rest or rest[-1] not in TURNS:
            raise ScanFormatError(f"'turn' needs a direction: {' '.join(clause)!r}")
    elif verb in VERBS:
        act = [VERBS[verb]]
    else:
        raise ScanFormatError(f"unknown verb {verb!r}")
    if not rest:
        return act
    turn = TURNS.get(rest[-1])
    if turn is None:
        raise ScanFormatError(f"bad clause {' '.join(clause)!r}")
    if len(rest) == 1:
        return [turn] + act if act else [turn]
    if len(rest) == 2 and rest[0] == "opposite":
        return [turn, turn] + act
    if len(rest) == 2 and rest[0] == "around":
        return ([turn] + act) * 4
    raise ScanFormatError(f"bad clause {' '.join(clause)!r}")


@dataclass
class SubCommand:
    clause: list[str]
    times: int


def _sub(words: list[str]) -> SubCommand:
    if words and words[-1] in REPEATS:
        return SubCommand(words[:-1], REPEATS[words[-1]])
    return SubCommand(words, 1)


def parse_command(command: str) -> list[SubCommand]:
    """Sub-commands in execution order."""
    words = command.split()
    for conj in ("and", "after"):
        if conj in words:
            i = words.index(conj)
            left, right = _sub(words[:i]), _sub(words[i + 1:])
            return [left, right] if conj == "and" else [right, left]
    return [_sub(words)]


def interpret(command: str) -> list[str]:
    out = []
    for sub in parse_command(command):
        out += clause_actions(sub.clause) * sub.times
    return out


def cot_symbols(command: str) -> tuple[list[str], list[str]]:
    """``(prefix, completion)`` symbol lists for one command."""
    subs = parse_command(command)
    rewrite, segments = [], []
    for k, sub in enumerate(subs):
        if k:
            rewrite.append("and")
        for r in range(sub.times):
            if r:
                rewrite.append("+")
            rewrite += sub.clause
            segments += sub.clause + [":"] + clause_actions(sub.clause)
    return command.split() + [SEP], rewrite + [ARROW] + segments + [EOS]


def expand(command: str, actions: list[str] | None = None) -> TaskExample:
    """Build the CoT example; if ``actions`` is given it must match the expansion."""
    prefix, completion = cot_symbols(command)
    if actions is not None:
        got = [s for s in completion if s.startswith("I_")]
        if got != list(actions):
            raise ScanFormatError(f"expansion of {command!r} disagrees with the reference actions")
    n_actions = sum(s.startswith("I_") for s in completion)
    return make_example(prefix + completion, SPACED, "scan_cot", n_actions)


def parse_line(line: str) -> tuple[str, list[str]]:
    """Either the upstream ``IN: ... OUT: ...`` form or ``command<TAB>actions``."""
    line = line.strip()
    if line.startswith("IN:"):
        if " OUT:" not in line:
            raise ScanFormatError(f"missing OUT: in {line!r}")
        cmd, out = line[3:].split(" OUT:", 1)
    elif "\t" in line:
        cmd, out = line.split("\t", 1)
    else:
        raise ScanFormatError(f"unrecognized SCAN line {line!r}")
    return cmd.strip(), out.split()


def read_scan_file(path: str | Path) -> list[TaskExample]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"SCAN file not found: {path}")
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            cmd, actions = parse_line(line)
            out.append(expand(cmd, actions))
        except ScanFormatError as e:
            raise ScanFormatError(f"{path}:{lineno}: {e}") from None
    return out


def find_split_files(scan_dir: str | Path) -> dict[str, Path]:
    root = Path(scan_dir)
    for base in (root, root / "length_split"):
        train, test = base / TRAIN_FILE, base / TEST_FILE
        if train.is_file() and test.is_file():
            return {"train": train, "test": test}
    raise FileNotFoundError(f"no {TRAIN_FILE}/{TEST_FILE} under {root}")


def length_summary(examples: list[TaskExample]) -> dict:
    """Histograms of full, prefix-only and completion-only token lengths."""
    full = Counter(len(e.tokens) for e in examples)
    inp = Counter(e.supervised_from for e in examples)
    out = Counter(len(e.tokens) - e.supervised_from for e in examples)
    hist = lambda c: {int(k): int(v) for k, v in sorted(c.items())}  # noqa: E731
    return {"count": len(examples), "full": hist(full), "input": hist(inp), "output": hist(out)}


def ingest_scan_cot(scan_dir: str | Path) -> tuple[dict[str, list[TaskExample]], dict]:
    files = find_split_files(scan_dir)
    data = {split: read_scan_file(p) for split, p in files.items()}
    summary = {split: length_summary(exs) for split, exs in data.items()}
    return data, summary
