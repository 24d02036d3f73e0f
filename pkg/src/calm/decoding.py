"""CTC decoding over the extended (static + dynamic) vocabulary."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config import DecodeConfig, check_mu
from .ctc import BLANK


@dataclass
class Hypothesis:
    tokens: list
    score: float
    surface: list = field(default_factory=list)


def _probs(grid) -> np.ndarray:
    return np.asarray(getattr(grid, "probs", grid), dtype=np.float64)


def apply_biasing_weight(probs, static_size: int, mu: float) -> np.ndarray:
    """Rescale dynamic columns by mu and renormalise.

    Equivalent to adding ln(mu) to the dynamic scores before the joint
    softmax, so it can be applied to a grid produced at mu = 1.
    """
    check_mu(mu)
    probs = _probs(probs).copy()
    if mu == 1.0:
        return probs
    probs[:, static_size:] *= mu
    return probs / probs.sum(1, keepdims=True)


def expand_dynamic(tokens: Sequence[int], phrases: Sequence[Sequence[int]],
                   static_size: int) -> list:
    """Replace each dynamic index M + i by the tokens of phrase i."""
    out = []
    for tok in tokens:
        if tok >= static_size:
            i = tok - static_size
            if i >= len(phrases):
                raise ValueError(f"dynamic token {i} but only {len(phrases)} phrases")
            out.extend(phrases[i])
        else:
            out.append(tok)
    return out


def collapse(path: Sequence[int]) -> list:
    out, prev = [], None
    for tok in path:
        if tok != prev and tok != BLANK:
            out.append(int(tok))
        prev = tok
    return out


def greedy_decode(grid, phrases: Sequence[Sequence[int]] = (), static_size: Optional[int] = None
                  ) -> Hypothesis:
    """Best path: per-frame argmax (lowest index on ties), collapse, drop blanks."""
    probs = _probs(grid)
    static_size = getattr(grid, "static_size", static_size)
    if static_size is None:
        static_size = probs.shape[1] - len(phrases)
    path = probs.argmax(1)
    with np.errstate(divide="ignore"):
        score = float(np.log(probs[np.arange(len(path)), path]).sum()) if len(path) else 0.0
    tokens = collapse(path)
    return Hypothesis(tokens, min(score, 0.0), expand_dynamic(tokens, phrases, static_size))


def beam_decode(grid, cfg: DecodeConfig = DecodeConfig(mode="beam"),
                phrases: Sequence[Sequence[int]] = (), static_size: Optional[int] = None
                ) -> list:
    """CTC prefix beam search.

    Each prefix keeps log-probabilities of ending in blank / non-blank; the
    ranking key is their sum, ties broken by lexicographic token order.
    The grid is decoded as given (mu is applied by the output head).
    """
    probs = _probs(grid)
    static_size = getattr(grid, "static_size", static_size)
    if static_size is None:
        static_size = probs.shape[1] - len(phrases)
    T, V = probs.shape
    with np.errstate(divide="ignore"):
        logp = np.log(probs)
    beam = cfg.beam_size

    # prefix -> (log p ending in blank, log p ending in non-blank)
    beams = {(): (0.0, -np.inf)}
    for t in range(T):
        nxt: dict = {}

        def add(prefix, pb, pnb):
            ob, onb = nxt.get(prefix, (-np.inf, -np.inf))
            nxt[prefix] = (np.logaddexp(ob, pb), np.logaddexp(onb, pnb))

        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            add(prefix, total + logp[t, BLANK], -np.inf)
            last = prefix[-1] if prefix else None
            for k in range(1, V):
                lp = logp[t, k]
                if lp == -np.inf:
                    continue
                if k == last:
                    add(prefix, -np.inf, pnb + lp)
                    add(prefix + (k,), -np.inf, pb + lp)
                else:
                    add(prefix + (k,), -np.inf, total + lp)
        ranked = sorted(nxt.items(), key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
        beams = dict(ranked[:beam])

    ranked = sorted(beams.items(), key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
    return [
        Hypothesis(list(prefix), float(min(np.logaddexp(pb, pnb), 0.0)),
                   expand_dynamic(prefix, phrases, static_size))
        for prefix, (pb, pnb) in ranked[:beam]
    ]


def decode(grid, cfg: DecodeConfig, phrases=(), static_size=None) -> Hypothesis:
    if cfg.mode == "greedy":
        return greedy_decode(grid, phrases, static_size)
    return beam_decode(grid, cfg, phrases, static_size)[0]


def write_hypotheses(path, items) -> None:
    """``items``: iterable of (utterance id, surface words)."""
    with open(path, "w", encoding="utf-8") as f:
        for utt, words in items:
            f.write(f"{utt}\t{' '.join(words)}\n")
