"""Word error rate, angle parsing and the deterministic extraction judge."""

from __future__ import annotations

import re
from typing import Sequence

_INT = re.compile(r"-?\d+")


def edit_distance(ref: Sequence[str], hyp: Sequence[str]) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(reference: str, hypothesis: str) -> float:
    ref = reference.split()
    if not ref:
        raise ValueError("reference must contain at least one word")
    return edit_distance(ref, hypothesis.split()) / len(ref)


def parse_angle(text: str) -> int | None:
    """First signed integer in [-180, 180] found in ``text``; None if there is none."""
    for m in _INT.finditer(text):
        value = int(m.group())
        if -180 <= value <= 180:
            return value
    return None


def lse_judge(hypothesis: str, target_ref: str, distractor_ref: str) -> bool:
    """Success iff the hypothesis is strictly closer (by WER) to the target than to the distractor."""
    return wer(target_ref, hypothesis) < wer(distractor_ref, hypothesis)
