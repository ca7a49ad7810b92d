"""Greedy longest-match tokeniser with optional single-token angles (-180..180).

The base vocabulary holds the special ids, every single character of
``CHARS``, the space-prefixed letters of both cases (`` a``, `` B``, ...), and a short list
of prompt words in bare and space-prefixed form. Digits are never merged, so
without expansion a number is spelled one character at a time.
"""

from __future__ import annotations

import re
from typing import Sequence

PAD, BOS, SEP, EOS, UNK = range(5)
SPECIALS = ("<pad>", "<bos>", "<sep>", "<eos>", "<unk>")
CHARS = " abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789-?.,':"
WORDS = (
    "What", "is", "the", "azimuth", "elevation", "angle", "of", "sound", "Please",
    "transcribe", "speech", "on", "your", "left", "right", "into", "written", "format",
)

ANGLE_MIN, ANGLE_MAX = -180, 180
N_ANGLE_TOKENS = ANGLE_MAX - ANGLE_MIN + 1

_STANDALONE_INT = re.compile(r"(?<![0-9A-Za-z-])-?\d+(?![0-9A-Za-z])")


def _base_vocab() -> list[str]:
    pieces = list(SPECIALS) + list(CHARS)
    pieces += [" " + c for c in "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ"]
    for w in WORDS:
        for piece in (w, " " + w):
            if piece not in pieces:
                pieces.append(piece)
    return pieces


class Tokenizer:
    """Maps text to ids and back.

    With ``expanded=True`` every standalone signed integer in [-180, 180] is a
    single id in ``[n_base, n_base + 361)``, ordered from -180 upwards.
    """

    def __init__(self, expanded: bool = False) -> None:
        self.itos = _base_vocab()
        self.stoi = {c: i for i, c in enumerate(self.itos)}
        self.n_base = len(self.itos)
        self.expanded = expanded
        self._max_piece = max(len(p) for p in self.itos[len(SPECIALS) :])

    @property
    def vocab_size(self) -> int:
        return self.n_base + (N_ANGLE_TOKENS if self.expanded else 0)

    def angle_id(self, value: int) -> int:
        if not self.expanded:
            raise ValueError("angle tokens need an expanded vocabulary")
        if not ANGLE_MIN <= value <= ANGLE_MAX:
            raise ValueError(f"angle {value} outside [{ANGLE_MIN}, {ANGLE_MAX}]")
        return self.n_base + value - ANGLE_MIN

    def _pieces(self, text: str) -> list[int]:
        ids = []
        i = 0
        while i < len(text):
            for n in range(min(self._max_piece, len(text) - i), 0, -1):
                piece = text[i : i + n]
                # a merged word must end at a word boundary
                if n > 1 and (piece not in self.stoi or (i + n < len(text) and text[i + n].isalnum())):
                    continue
                ids.append(self.stoi.get(piece, UNK))
                i += n
                break
        return ids

    def encode(self, text: str) -> list[int]:
        if not self.expanded:
            return self._pieces(text)
        ids: list[int] = []
        pos = 0
        for m in _STANDALONE_INT.finditer(text):
            value = int(m.group())
            if not ANGLE_MIN <= value <= ANGLE_MAX:
                continue
            ids += self._pieces(text[pos : m.start()])
            ids.append(self.angle_id(value))
            pos = m.end()
        return ids + self._pieces(text[pos:])

    def decode(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i >= self.n_base:
                out.append(str(i - self.n_base + ANGLE_MIN))
            elif i >= len(SPECIALS):
                out.append(self.itos[i])
        return "".join(out)

    def prompt_ids(self, prompt: str, prefix: Sequence[int] = ()) -> list[int]:
        """``prefix`` + BOS + prompt + SEP; the answer follows SEP."""
        return list(prefix) + [BOS] + self.encode(prompt) + [SEP]
