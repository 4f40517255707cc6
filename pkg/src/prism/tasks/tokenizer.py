"""Fixed 64-symbol vocabulary shared by every task.

Digit-string tasks tokenize per character. Space-delimited tasks (addition,
stack manipulation, SCAN) separate symbols with single spaces; spaces are
layout only and never become tokens, so each task carries a :class:`Layout`
that restores its canonical text.
"""

from __future__ import annotations

from dataclasses import dataclass

VOCAB_SIZE = 64

PAD = "<pad>"
EOS = "."
SEP = "="

_SYMBOLS = (
    [PAD]
    + [str(d) for d in range(10)]
    + ["=", "+", ",", ".", "→", "x", "*", "(", ")", "[", "]", ":"]
    + ["walk", "look", "run", "jump", "turn", "left", "right", "around",
       "opposite", "twice", "thrice", "and", "after"]
    + ["I_WALK", "I_LOOK", "I_RUN", "I_JUMP", "I_TURN_LEFT", "I_TURN_RIGHT"]
)


@dataclass(frozen=True)
class Layout:
    """How tokens join back into text.

    ``sep`` goes between consecutive symbols except before any symbol listed in
    ``glued``.
    """

    sep: str = ""
    glued: frozenset = frozenset()


COMPACT = Layout()
SPACED = Layout(" ")
SPACED_GLUED_EOS = Layout(" ", frozenset({EOS}))


class Tokenizer:
    def __init__(self):
        symbols = list(_SYMBOLS)
        symbols += [f"<unused{i}>" for i in range(VOCAB_SIZE - len(symbols))]
        assert len(symbols) == VOCAB_SIZE and len(set(symbols)) == VOCAB_SIZE
        self.symbols = symbols
        self.ids = {s: i for i, s in enumerate(symbols)}
        self._words = {s for s in symbols if len(s) > 1 and not s.startswith("<")}

    def __len__(self):
        return len(self.symbols)

    @property
    def pad_id(self) -> int:
        return self.ids[PAD]

    @property
    def eos_id(self) -> int:
        return self.ids[EOS]

    @property
    def sep_id(self) -> int:
        return self.ids[SEP]

    def split(self, text: str) -> list[str]:
        out = []
        for chunk in text.split():
            if chunk in self._words:
                out.append(chunk)
                continue
            for ch in chunk:
                if ch not in self.ids:
                    raise ValueError(f"symbol {ch!r} is not in the vocabulary")
                out.append(ch)
        return out

    def encode(self, text: str) -> list[int]:
        return [self.ids[s] for s in self.split(text)]

    def decode(self, ids, layout: Layout = COMPACT) -> str:
        parts = []
        for i, tok in enumerate(ids):
            sym = self.symbols[int(tok)]
            if i and sym not in layout.glued:
                parts.append(layout.sep)
            parts.append(sym)
        return "".join(parts)


TOKENIZER = Tokenizer()
