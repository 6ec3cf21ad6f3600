"""Fixed token vocabulary shared by prompts and responses."""

from __future__ import annotations

from typing import Iterable, Sequence

SHAPES = ("circle", "square", "triangle", "star")
COLORS = ("red", "green", "blue", "yellow")
DIGITS = tuple(str(d) for d in range(10))
LETTERS = ("A", "B", "C", "D")

PAD = "<pad>"
NONE = "<none>"
THINK_OPEN, THINK_CLOSE = "<think>", "</think>"
ANSWER_OPEN, ANSWER_CLOSE = "<answer>", "</answer>"

STRUCTURE = ("<scene>", "</scene>", "<question>", "</question>", "<options>", "</options>")
QUESTION_TYPES = (
    "exists",    # binary detection: is there a <color> <shape> at <box>?
    "has",       # binary classification: is there a <shape>?
    "countis",   # binary counting: are there <n> objects?
    "which",     # choice detection: which box holds the <color> <shape>?
    "shapes",    # choice / open classification: which shapes appear?
    "howmany",   # choice / open counting: how many objects?
    "locate",    # open detection: where is the <color> <shape>?
    "plus",      # text arithmetic: a + b
    "greater",   # text comparison: is a greater than b?
)
FORMATS = ("fmtbinary", "fmtsingle", "fmtmulti", "fmtopen")

TOKENS: tuple[str, ...] = (
    PAD, NONE, *STRUCTURE, THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE,
    *DIGITS, ".", "[", "]", ",", *LETTERS, "yes", "no", *SHAPES, *COLORS,
    *QUESTION_TYPES, *FORMATS,
)
TOKEN_ID = {t: i for i, t in enumerate(TOKENS)}
VOCAB_SIZE = len(TOKENS)

PAD_ID = TOKEN_ID[PAD]
ANSWER_CLOSE_ID = TOKEN_ID[ANSWER_CLOSE]


def encode(tokens: Iterable[str]) -> list[int]:
    try:
        return [TOKEN_ID[t] for t in tokens]
    except KeyError as exc:
        raise ValueError(f"unknown token {exc.args[0]!r}") from None


def decode(ids: Iterable[int]) -> list[str]:
    return [TOKENS[i] for i in ids]


def _is_word(tok: str) -> bool:
    return tok.isalpha()


def render(tokens: Sequence[str]) -> str:
    """Join tokens into response text; adjacent word tokens get one space."""
    out: list[str] = []
    prev = None
    for tok in tokens:
        if prev is not None and _is_word(prev) and _is_word(tok):
            out.append(" ")
        out.append(tok)
        prev = tok
    return "".join(out)


def tokenize_number(value: int) -> list[str]:
    return list(str(int(value)))
