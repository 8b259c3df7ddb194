"""Tokenizer for the simulation DSL.

Alphanumeric runs are split at the digit/letter boundary (``10s`` becomes
``INT(10) UNIT(s)``); the parser glues adjacent pieces back together wherever
an identifier is expected, since identifiers may start with digits.
"""
from __future__ import annotations

from dataclasses import dataclass

from ..errors import LexError
from .ast import Span

KEYWORDS = frozenset(
    """
    Cloud IP port pubTopic subTopic Methods Record
    Simulator duration step simulationNodes
    SimulationNode platform offsetRange EdgeDevices
    Platform type userName username CPU memory
    EdgeDevice protocol speed cloud devices workload
    Device period payload
    MAX Native Docker VM UDP TCP MQTT
    """.split()
)
UNITS = frozenset({"ms", "s", "m", "h", "b", "kb", "mb", "G"})

PUNCT = {
    ":": "COLON",
    "{": "LBRACE",
    "}": "RBRACE",
    "[": "LBRACK",
    "]": "RBRACK",
    ",": "COMMA",
    ".": "DOT",
    "%": "PERCENT",
    "(": "LPAREN",
    ")": "RPAREN",
}
WORD_KINDS = frozenset({"KW", "ID", "UNIT"})


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int
    column: int
    offset: int
    end: int

    @property
    def span(self) -> Span:
        return Span(self.line, self.column)

    def __repr__(self) -> str:
        if self.kind in PUNCT.values() or self.kind == "EOF":
            return self.kind
        return f"{self.kind}({self.text})"


def _word_kind(text: str) -> str:
    if text in UNITS:
        return "UNIT"
    if text in KEYWORDS:
        return "KW"
    return "ID"


def tokenize(source: str) -> list[Token]:
    """Split ``source`` into tokens, ending with a single ``EOF`` token."""
    tokens: list[Token] = []
    i, line, col = 0, 1, 1
    n = len(source)

    def emit(kind, text, start, start_col, end=None):
        end = start + len(text) if end is None else end
        tokens.append(Token(kind, text, line, start_col, start, end))

    while i < n:
        ch = source[i]
        if ch == "\n":
            i += 1
            line += 1
            col = 1
            continue
        if ch in " \t\r\f\v﻿":
            i += 1
            col += 1
            continue
        if source.startswith("//", i):
            while i < n and source[i] != "\n":
                i += 1
            continue
        if ch in PUNCT:
            emit(PUNCT[ch], ch, i, col)
            i += 1
            col += 1
            continue
        if ch == '"':
            start, start_col = i, col
            i += 1
            col += 1
            chars = []
            while True:
                if i >= n or source[i] == "\n":
                    raise LexError("unterminated string literal", Span(line, start_col))
                c = source[i]
                if c == '"':
                    i += 1
                    col += 1
                    break
                if c == "\\":
                    nxt = source[i + 1] if i + 1 < n else ""
                    if nxt not in ('"', "\\"):
                        raise LexError(f"unsupported escape '\\{nxt}'", Span(line, col))
                    chars.append(nxt)
                    i += 2
                    col += 2
                    continue
                chars.append(c)
                i += 1
                col += 1
            emit("STRING", "".join(chars), start, start_col, end=i)
            continue
        if ch.isascii() and ch.isalnum():
            j = i
            if ch.isdigit():
                while j < n and source[j].isascii() and source[j].isdigit():
                    j += 1
                emit("INT", source[i:j], i, col)
                col += j - i
                i = j
                continue
            while j < n and source[j].isascii() and source[j].isalnum():
                j += 1
            text = source[i:j]
            emit(_word_kind(text), text, i, col)
            col += j - i
            i = j
            continue
        raise LexError(f"unexpected character {ch!r}", Span(line, col))

    tokens.append(Token("EOF", "", line, col, n, n))
    return tokens
