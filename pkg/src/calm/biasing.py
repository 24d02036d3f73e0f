"""Biasing-list construction: common/rare split by training frequency,
reference rare units plus seeded distractors, per-speaker or per-utterance.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_COMMON_SIZE = {"word": 5000, "character": 1500, "conversational": 1000}


def units(text: str, unit: str = "word") -> list:
    if unit == "word":
        return text.split()
    if unit == "character":
        return [c for c in text if not c.isspace()]
    raise ValueError(f"unknown unit kind {unit!r}")


@dataclass
class FrequencyTable:
    counts: Counter
    unit: str = "word"

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def ranked(self) -> list:
        """Units by count descending, then lexicographically."""
        return sorted(self.counts, key=lambda u: (-self.counts[u], u))

    def common_set(self, k: int) -> set:
        if k < 1:
            raise ValueError("common set size must be >= 1")
        return set(self.ranked()[:k])

    def rare_set(self, k: int) -> list:
        return self.ranked()[k:]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for u in self.ranked():
                f.write(f"{u}\t{self.counts[u]}\n")

    @classmethod
    def load(cls, path, unit: str = "word") -> "FrequencyTable":
        counts = Counter()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line:
                u, c = line.rsplit("\t", 1)
                counts[u] = int(c)
        return cls(counts, unit)


def build_frequency_table(transcripts: Iterable[str], unit: str = "word") -> FrequencyTable:
    counts = Counter()
    n = 0
    for text in transcripts:
        n += 1
        counts.update(units(text, unit))
    if n == 0 or not counts:
        raise ValueError("cannot build a frequency table from an empty corpus")
    return FrequencyTable(counts, unit)


def extract_rare(reference, table: FrequencyTable, k: int) -> list:
    """Unique reference units outside the top-k, in first-occurrence order."""
    common = table.common_set(k)
    ref = units(reference, table.unit) if isinstance(reference, str) else list(reference)
    seen, out = set(), []
    for u in ref:
        if u not in common and u not in seen:
            seen.add(u)
            out.append(u)
    return out


def _sample_distractors(pool: Sequence, exclude: set, count: int, rng) -> list:
    if count <= 0:
        return []
    candidates = sorted(u for u in set(pool) if u not in exclude)
    if len(candidates) < count:
        raise ValueError(
            f"rare pool has {len(candidates)} usable distractors, {count} needed"
        )
    idx = rng.choice(len(candidates), size=count, replace=False)
    return [candidates[i] for i in idx]


def assemble_list(rare_per_speaker: Sequence[Sequence], rare_pool: Sequence, list_size: int,
                  scope: str = "per-speaker", seed: int = 0) -> list:
    """Reference rare units plus distractors drawn without replacement.

    per-speaker: one block of ``list_size`` per speaker, concatenated in
    speaker order.  per-utterance: a single block over all speakers' units.
    Reference units are never dropped; if they exceed ``list_size`` the block
    is longer than requested.
    """
    if list_size < 0:
        raise ValueError("list_size must be >= 0")
    if list_size == 0:
        return []
    rng = np.random.default_rng(seed)
    if scope == "per-speaker":
        blocks = [list(r) for r in rare_per_speaker]
    elif scope == "per-utterance":
        merged = []
        for r in rare_per_speaker:
            merged.extend(u for u in r if u not in merged)
        blocks = [merged]
    else:
        raise ValueError(f"unknown scope {scope!r}")

    all_refs = {u for r in rare_per_speaker for u in r}
    out: list = []
    for block in blocks:
        refs = [u for u in dict.fromkeys(block) if u not in out]
        if len(refs) > list_size:
            logger.warning("%d reference rare units exceed list size %d; keeping all",
                           len(refs), list_size)
        need = list_size - len(refs)
        distractors = _sample_distractors(rare_pool, all_refs | set(out), need, rng)
        out.extend(refs + distractors)
    return out


def training_list(reference_rare: Sequence, rare_pool: Sequence, size_range, rng) -> list:
    """Per-batch list: reference rare units plus distractors, size drawn
    uniformly from ``size_range`` and capped by what the pool can supply."""
    lo, hi = size_range
    n = int(rng.integers(lo, hi + 1))
    refs = list(dict.fromkeys(reference_rare))
    available = len(set(rare_pool) - set(refs))
    need = min(max(n - len(refs), 0), available)
    return refs + _sample_distractors(rare_pool, set(refs), need, rng)


def write_list(path, phrases: Sequence) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in phrases:
            f.write((p if isinstance(p, str) else " ".join(map(str, p))) + "\n")


def read_list(path) -> list:
    text = Path(path).read_text(encoding="utf-8")
    return [line for line in text.splitlines() if line.strip()]
