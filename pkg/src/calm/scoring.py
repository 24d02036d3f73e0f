"""Edit-distance alignment and WER/CER with unbiased/biased decomposition.

Substitutions and deletions are charged to the category of the reference
unit, insertions to the category of the inserted hypothesis unit.  Rates are
ratios of corpus-level sums.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

MATCH, SUB, DEL, INS = "match", "substitution", "deletion", "insertion"


@dataclass(frozen=True)
class AlignmentOp:
    kind: str
    ref: Optional[object] = None
    hyp: Optional[object] = None


def edit_table(ref: Sequence, hyp: Sequence) -> list:
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i][j] = min(d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]),
                          d[i - 1][j] + 1, d[i][j - 1] + 1)
    return d


def align(ref: Sequence, hyp: Sequence) -> list:
    """Minimum-edit alignment; backtrace prefers match > sub > del > ins."""
    d = edit_table(ref, hyp)
    i, j = len(ref), len(hyp)
    ops = []
    while i > 0 or j > 0:
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and d[i][j] == d[i - 1][j - 1]:
            ops.append(AlignmentOp(MATCH, ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + 1:
            ops.append(AlignmentOp(SUB, ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            ops.append(AlignmentOp(DEL, ref[i - 1], None))
            i -= 1
        else:
            ops.append(AlignmentOp(INS, None, hyp[j - 1]))
            j -= 1
    ops.reverse()
    return ops


def distance(ops: Iterable[AlignmentOp]) -> int:
    return sum(op.kind != MATCH for op in ops)


@dataclass
class ErrorCounts:
    sub: int = 0
    dele: int = 0
    ins: int = 0
    ref: int = 0

    @property
    def errors(self) -> int:
        return self.sub + self.dele + self.ins

    @property
    def rate(self) -> Optional[float]:
        return self.errors / self.ref if self.ref else None

    def __add__(self, other: "ErrorCounts") -> "ErrorCounts":
        return ErrorCounts(self.sub + other.sub, self.dele + other.dele,
                           self.ins + other.ins, self.ref + other.ref)

    def as_dict(self) -> dict:
        return {"sub": self.sub, "del": self.dele, "ins": self.ins,
                "errors": self.errors, "ref": self.ref, "rate": self.rate}


@dataclass
class ScoreReport:
    overall: ErrorCounts = field(default_factory=ErrorCounts)
    unbiased: ErrorCounts = field(default_factory=ErrorCounts)
    biased: ErrorCounts = field(default_factory=ErrorCounts)
    utterances: int = 0

    def __add__(self, other: "ScoreReport") -> "ScoreReport":
        return ScoreReport(self.overall + other.overall, self.unbiased + other.unbiased,
                           self.biased + other.biased, self.utterances + other.utterances)

    def as_dict(self) -> dict:
        return {"utterances": self.utterances, "overall": self.overall.as_dict(),
                "unbiased": self.unbiased.as_dict(), "biased": self.biased.as_dict()}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


def bias_units(phrases: Sequence, unit: str = "word") -> set:
    """Every unit of every phrase counts as biased."""
    out = set()
    for p in phrases:
        if isinstance(p, str):
            out.update(p.split() if unit == "word" else [c for c in p if not c.isspace()])
        else:
            out.update(p)
    return out


def score(ops: Sequence[AlignmentOp], biased: set) -> ScoreReport:
    rep = ScoreReport(utterances=1)
    for op in ops:
        key = op.hyp if op.kind == INS else op.ref
        cat = rep.biased if key in biased else rep.unbiased
        if op.kind != INS:
            cat.ref += 1
        if op.kind == SUB:
            cat.sub += 1
        elif op.kind == DEL:
            cat.dele += 1
        elif op.kind == INS:
            cat.ins += 1
    rep.overall = rep.unbiased + rep.biased
    return rep


_PUNCT = str.maketrans("", "", string.punctuation)


def normalise(text: str, casefold: bool = False, strip_punct: bool = False) -> str:
    if casefold:
        text = text.casefold()
    if strip_punct:
        text = text.translate(_PUNCT)
    return text


def score_corpus(refs: dict, hyps: dict, lists: dict, unit: str = "word",
                 casefold: bool = False, strip_punct: bool = False) -> ScoreReport:
    """Score ``id -> text`` maps; ``lists`` maps id -> phrases (missing = empty).

    Utterances absent from ``hyps`` are scored against an empty hypothesis.
    """
    from .biasing import units

    total = ScoreReport()
    for utt in sorted(refs):
        r = units(normalise(refs[utt], casefold, strip_punct), unit)
        h = units(normalise(hyps.get(utt, ""), casefold, strip_punct), unit)
        phrases = [normalise(p, casefold, strip_punct) for p in lists.get(utt, [])]
        total = total + score(align(r, h), bias_units(phrases, unit))
    return total


def read_text_map(path) -> dict:
    """Read ``id<TAB>text`` lines."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            utt, _, text = line.partition("\t")
            out[utt] = text
    return out
