"""Seeded generators for the algorithmic task suite.

Every generator is a pure function of its size arguments and ``seed``. The
prefix (left of ``=``) is the model input and everything after it, up to and
including the final ``.``, is supervised.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .tokenizer import COMPACT, EOS, SEP, SPACED, SPACED_GLUED_EOS, TOKENIZER, Layout

ARROW = "→"

STACK_POP, STACK_PUSH0, STACK_PUSH1 = 2, 3, 4


@dataclass
class TaskExample:
    tokens: list[int]
    supervised_from: int
    text: str
    task: str = ""
    length: int = 0
    eos_present: bool = field(init=False)

    def __post_init__(self):
        self.eos_present = bool(self.tokens) and self.tokens[-1] == TOKENIZER.eos_id

    @property
    def prefix(self) -> list[int]:
        return self.tokens[: self.supervised_from]

    @property
    def target(self) -> list[int]:
        return self.tokens[self.supervised_from:]

    def to_json(self) -> dict:
        return {"text": self.text, "tokens": list(self.tokens), "supervised_from": self.supervised_from,
                "task": self.task, "length": self.length}

    @classmethod
    def from_json(cls, obj: dict) -> "TaskExample":
        return cls(list(obj["tokens"]), int(obj["supervised_from"]), obj["text"],
                   obj.get("task", ""), int(obj.get("length", 0)))


def make_example(symbols: list[str], layout: Layout, task: str, length: int) -> TaskExample:
    if symbols.count(SEP) != 1:
        raise ValueError("an example needs exactly one '=' symbol")
    if symbols[-1] != EOS:
        raise ValueError("an example must end with the EOS symbol")
    tokens = [TOKENIZER.ids[s] for s in symbols]
    text = TOKENIZER.decode(tokens, layout)
    return TaskExample(tokens, symbols.index(SEP) + 1, text, task, length)


def _digits(rng: np.random.Generator, n: int, high: int = 10) -> list[int]:
    return [int(v) for v in rng.integers(0, high, size=n)]


def _number(rng: np.random.Generator, n: int) -> list[int]:
    """Digits of a canonical ``n``-digit integer, most significant first."""
    if n < 1:
        raise ValueError("operands need at least one digit")
    if n == 1:
        return _digits(rng, 1)
    return [int(rng.integers(1, 10))] + _digits(rng, n - 1)


# -- addition ---------------------------------------------------------------

def addition_symbols(a: int, b: int) -> list[str]:
    da = [int(c) for c in reversed(str(a))]
    db = [int(c) for c in reversed(str(b))]
    steps, carry = [], 0
    for i in range(max(len(da), len(db))):
        x = da[i] if i < len(da) else 0
        y = db[i] if i < len(db) else 0
        s = x + y + carry
        carry = s // 10
        steps.append([str(x), str(y), str(carry), str(s % 10)])
    out = [str(d) for d in da] + ["+"] + [str(d) for d in db] + [SEP]
    for i, step in enumerate(steps):
        if i:
            out.append(",")
        out += step
    out += [ARROW] + list(reversed(str(a + b))) + [EOS]
    return out


def gen_addition(len_a: int, len_b: int, seed: int) -> TaskExample:
    rng = np.random.default_rng(seed)
    a = int("".join(map(str, _number(rng, len_a))))
    b = int("".join(map(str, _number(rng, len_b))))
    return make_example(addition_symbols(a, b), SPACED, "addition", max(len_a, len_b))


# -- copy / reverse / odds first -------------------------------------------

def copy_symbols(s: str) -> list[str]:
    return list(s) + [SEP] + list(s) + [EOS]


def reverse_symbols(s: str) -> list[str]:
    return list(s) + [SEP] + list(reversed(s)) + [EOS]


def odds_first_symbols(s: str) -> list[str]:
    return list(s) + [SEP] + list(s[1::2]) + list(s[0::2]) + [EOS]


def gen_copy(length: int, seed: int) -> TaskExample:
    s = "".join(map(str, _digits(np.random.default_rng(seed), length)))
    return make_example(copy_symbols(s), COMPACT, "copy", length)


def gen_reverse(length: int, seed: int) -> TaskExample:
    s = "".join(map(str, _digits(np.random.default_rng(seed), length)))
    return make_example(reverse_symbols(s), COMPACT, "reverse", length)


def gen_odds_first(length: int, seed: int, vocab_cap: int = 10) -> TaskExample:
    if not 1 <= vocab_cap <= 10:
        raise ValueError("vocab_cap must be in [1, 10]")
    s = "".join(map(str, _digits(np.random.default_rng(seed), length, vocab_cap)))
    return make_example(odds_first_symbols(s), COMPACT, "odds_first", length)


# -- stack manipulation -----------------------------------------------------

def run_stack(stack: list[int], actions: list[int]) -> list[int]:
    """Final stack, bottom first. POP on an empty stack does nothing."""
    st = list(stack)
    for a in actions:
        if a == STACK_POP:
            if st:
                st.pop()
        elif a == STACK_PUSH0:
            st.append(0)
        elif a == STACK_PUSH1:
            st.append(1)
        else:
            raise ValueError(f"unknown stack action {a}")
    return st


def stack_symbols(stack: list[int], actions: list[int]) -> list[str]:
    ell = len(stack) + len(actions)
    final = run_stack(stack, actions)
    out = list(reversed(final)) + [2]
    out += [0] * (ell + 1 - len(out))
    return [str(v) for v in stack + actions] + [SEP] + [str(v) for v in out] + [EOS]


def gen_stack_manipulation(stack_len: int, action_len: int, seed: int) -> TaskExample:
    rng = np.random.default_rng(seed)
    stack = _digits(rng, stack_len, 2)
    actions = [int(v) for v in rng.integers(2, 5, size=action_len)]
    return make_example(stack_symbols(stack, actions), SPACED_GLUED_EOS, "stack", stack_len + action_len)


# -- dyn_str_cpy ----------------------------------------------------------

def dyn_str_cpy_symbols(s: str, start: int) -> list[str]:
    """``start`` is 1-based; ``s[start - 1]`` must occur exactly once."""
    d = s[start - 1]
    if s.count(d) != 1:
        raise ValueError(f"digit {d!r} is not unique in {s!r}")
    return list(s) + [",", d, SEP] + list(s[start - 1:]) + [EOS]


def gen_dyn_str_cpy(length: int, seed: int) -> TaskExample:
    if not 1 <= length:
        raise ValueError("length must be >= 1")
    rng = np.random.default_rng(seed)
    s = _digits(rng, length)
    t = int(rng.integers(1, length + 1))
    d = s[t - 1]
    others = [v for v in range(10) if v != d]
    for j in range(length):
        if j != t - 1 and s[j] == d:
            s[j] = int(rng.choice(others))
    return make_example(dyn_str_cpy_symbols("".join(map(str, s)), t), COMPACT, "dyn_str_cpy", length)


# -- multiplication CoT -----------------------------------------------------

def multiplication_cot(a: str, b: str) -> str:
    """``a x [ d_i*(d_i→1)(d_j→0)... + ... ]`` over the digits of ``b``."""
    terms = []
    for i, d in enumerate(b):
        ann = f"({d}{ARROW}1)" + "".join(f"({e}{ARROW}0)" for e in b[i + 1:])
        terms.append(f"{d}*{ann}")
    return f"{a}x[{'+'.join(terms)}]"


def multiplication_symbols(a: str, b: str) -> list[str]:
    return list(f"{a}x{b}") + [SEP] + list(multiplication_cot(a, b)) + [EOS]


_TERM = re.compile(r"(\d)\*((?:\(\d→[01]\))+)")
_ANN = re.compile(r"\((\d)→([01])\)")


def parse_multiplication(text: str) -> tuple[str, str]:
    """Inverse of the serializer: ``"axb=ax[...]."`` back to ``(a, b)``.

    Checks that the bracketed annotations are consistent with ``b``.
    """
    m = re.fullmatch(r"(\d+)x(\d+)=(\d+)x\[(.*)\]\.", text)
    if not m:
        raise ValueError(f"not a multiplication example: {text!r}")
    a, b, a2, body = m.groups()
    if a2 != a:
        raise ValueError("operand repeated after '=' differs")
    digits = []
    terms = body.split("+")
    for i, term in enumerate(terms):
        tm = _TERM.fullmatch(term)
        if not tm:
            raise ValueError(f"malformed term {term!r}")
        d, ann = tm.groups()
        pairs = _ANN.findall(ann)
        if pairs[0] != (d, "1") or any(flag != "0" for _, flag in pairs[1:]):
            raise ValueError(f"bad place annotation in {term!r}")
        if "".join(p[0] for p in pairs) != b[i:]:
            raise ValueError(f"term {term!r} does not annotate the multiplier suffix {b[i:]!r}")
        digits.append(d)
    if "".join(digits) != b:
        raise ValueError("term digits do not spell the multiplier")
    return a, b


def gen_multiplication_cot(len_a: int, len_b: int, seed: int) -> TaskExample:
    rng = np.random.default_rng(seed)
    a = "".join(map(str, _number(rng, len_a)))
    b = "".join(map(str, _number(rng, len_b)))
    return make_example(multiplication_symbols(a, b), COMPACT, "multiplication", max(len_a, len_b))


# -- dispatch -----------------------------------------------------------------

SYNTHETIC_TASKS = ("addition", "copy", "reverse", "odds_first", "stack", "dyn_str_cpy", "multiplication")


def generate(task: str, length: int, seed: int) -> TaskExample:
    """One example whose size knob is ``length``.

    Addition and multiplication use ``length``-digit operands; stack
    manipulation splits ``length`` between initial stack and actions.
    """
    if task == "addition":
        return gen_addition(length, length, seed)
    if task == "copy":
        return gen_copy(length, seed)
    if task == "reverse":
        return gen_reverse(length, seed)
    if task == "odds_first":
        return gen_odds_first(length, seed)
    if task == "stack":
        stack_len = int(np.random.default_rng([seed, 1]).integers(1, length + 1))
        return gen_stack_manipulation(stack_len, length - stack_len, seed)
    if task == "dyn_str_cpy":
        return gen_dyn_str_cpy(length, seed)
    if task == "multiplication":
        return gen_multiplication_cot(length, length, seed)
    raise ValueError(f"unknown task {task!r}; expected one of {SYNTHETIC_TASKS}")
