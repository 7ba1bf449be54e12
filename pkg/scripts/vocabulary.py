#!/usr/bin/env python3
"""
Fixed 64-token vocabulary and the prompt layout shared by backbones and tasks.

Token map:
    0 PAD   1 BOS   2 SEP   3 ANSWER   4 ?   5-8 letters A-D
    9 TASK_MC   10 TASK_NUM   11 TASK_COPY   12 FLAG_OFF   13 FLAG_ON
    16-63 numbers 0..47

Task prompt (length L + 9 for an L-layer flag block):
    [BOS, TASK, FLAG x L, TARGET, OPT1, OPT2, OPT3, OPT4, SEP, ANSWER]

Numeric prompts fill the four option slots with PAD. The answer is read at
the ANSWER position; see Docs/formats.md for worked examples.
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

from errors import InputError

PAD = 0
BOS = 1
SEP = 2
ANSWER = 3
UNKNOWN = 4
LETTERS = ("A", "B", "C", "D")
LETTER_BASE = 5
TASK_MULTICHOICE = 9
TASK_NUMERIC = 10
TASK_COPY = 11
FLAG_OFF = 12            # one flag token per layer in the prompt
FLAG_ON = 13
NUMBER_BASE = 16        # numbers 0..47 sit at ids 16..63
NUM_NUMBERS = 48
VOCAB_SIZE = 64

NUM_OPTIONS = 4
MULTICHOICE = "multichoice"
NUMERIC = "numeric"


def number_token(value: int) -> int:
    if not 0 <= value < NUM_NUMBERS:
        raise InputError(f"number {value} outside the vocabulary range 0..{NUM_NUMBERS - 1}")
    return NUMBER_BASE + int(value)


def token_value(token: int) -> Optional[int]:
    """Numeric value of a number token, None for any other token."""
    if NUMBER_BASE <= token < NUMBER_BASE + NUM_NUMBERS:
        return token - NUMBER_BASE
    return None


def letter_token(letter: str) -> int:
    return LETTER_BASE + LETTERS.index(letter)


def token_letter(token: int) -> Optional[str]:
    if LETTER_BASE <= token < LETTER_BASE + len(LETTERS):
        return LETTERS[token - LETTER_BASE]
    return None


def answer_text(token: int) -> str:
    """Render an answer token the way a model would write it out."""
    letter = token_letter(token)
    if letter is not None:
        return f"Answer: {letter}"
    value = token_value(token)
    if value is not None:
        return f"\\boxed{{{value}}}"
    return "?"


def check_tokens(tokens: Sequence[int], vocab_size: int = VOCAB_SIZE):
    if len(tokens) == 0:
        raise InputError("token sequence is empty")
    for t in tokens:
        if not 0 <= int(t) < vocab_size:
            raise InputError(f"token {t} outside vocabulary of size {vocab_size}")


# ============================================================================
# PROMPT LAYOUT
# ============================================================================

@dataclass(frozen=True)
class PromptFields:
    kind: str
    flags: Tuple[int, ...]
    target: int
    options: Tuple[int, ...]     # empty for numeric prompts


def prompt_length(num_layers: int) -> int:
    return num_layers + 5 + NUM_OPTIONS


def target_position(num_layers: int) -> int:
    return 2 + num_layers


def encode_prompt(kind: str, flags: Sequence[int], target: int, options: Sequence[int] = ()) -> Tuple[int, ...]:
    """Lay out a task prompt; options are numeric values (multichoice only)."""
    if kind == MULTICHOICE:
        if len(options) != NUM_OPTIONS:
            raise InputError(f"multichoice prompts need {NUM_OPTIONS} options, got {len(options)}")
        tag, option_tokens = TASK_MULTICHOICE, [number_token(v) for v in options]
    elif kind == NUMERIC:
        tag, option_tokens = TASK_NUMERIC, [PAD] * NUM_OPTIONS
    else:
        raise InputError(f"unknown prompt kind: {kind!r}")
    flag_tokens = [FLAG_ON if f else FLAG_OFF for f in flags]
    return tuple([BOS, tag] + flag_tokens + [number_token(target)] + option_tokens + [SEP, ANSWER])


def decode_prompt(tokens: Sequence[int], num_layers: int) -> PromptFields:
    """Recover the fields of a task prompt laid out for `num_layers` flags."""
    tokens = [int(t) for t in tokens]
    if len(tokens) != prompt_length(num_layers):
        raise InputError(f"prompt has {len(tokens)} tokens, expected {prompt_length(num_layers)}")
    if tokens[0] != BOS or tokens[-2:] != [SEP, ANSWER]:
        raise InputError("prompt framing tokens are wrong")
    tag = tokens[1]
    if tag not in (TASK_MULTICHOICE, TASK_NUMERIC):
        raise InputError(f"unknown task tag {tag}")
    flag_tokens = tokens[2:2 + num_layers]
    if any(t not in (FLAG_OFF, FLAG_ON) for t in flag_tokens):
        raise InputError("flag block holds non-flag tokens")
    target = token_value(tokens[target_position(num_layers)])
    if target is None:
        raise InputError("target slot does not hold a number")
    option_tokens = tokens[3 + num_layers:3 + num_layers + NUM_OPTIONS]
    if tag == TASK_MULTICHOICE:
        options = tuple(token_value(t) for t in option_tokens)
        if any(v is None for v in options):
            raise InputError("option slots must hold numbers")
        kind = MULTICHOICE
    else:
        options = ()
        kind = NUMERIC
    return PromptFields(kind, tuple(int(t == FLAG_ON) for t in flag_tokens), target, options)


def encode_copy(values: Sequence[int]) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    """
    Copy-task sequence and its next-token targets (-1 = not scored).

    Layout: [BOS, TASK_COPY, x1..xk, SEP, x1..xk]; the model is scored on
    predicting each copied token from the one before it.
    """
    body = [number_token(v) for v in values]
    tokens = [BOS, TASK_COPY] + body + [SEP] + body
    targets = [-1] * len(tokens)
    start = 2 + len(body)          # SEP position predicts x1
    for i, tok in enumerate(body):
        targets[start + i] = tok
    return tuple(tokens), tuple(targets)
