from .generators import (
    SYNTHETIC_TASKS,
    TaskExample,
    gen_addition,
    gen_copy,
    gen_dyn_str_cpy,
    gen_multiplication_cot,
    gen_odds_first,
    gen_reverse,
    gen_stack_manipulation,
    generate,
    parse_multiplication,
)
from .scan import ingest_scan_cot
from .tokenizer import TOKENIZER, VOCAB_SIZE, Tokenizer

__all__ = [
    "SYNTHETIC_TASKS", "TaskExample", "TOKENIZER", "Tokenizer", "VOCAB_SIZE",
    "gen_addition", "gen_copy", "gen_dyn_str_cpy", "gen_multiplication_cot", "gen_odds_first",
    "gen_reverse", "gen_stack_manipulation", "generate", "ingest_scan_cot", "parse_multiplication",
]
