"""Desk-scale training and evaluation on feature-domain mixtures."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .biasing import assemble_list, training_list
from .config import DecodeConfig, LossWeights, OptimConfig
from .decoding import apply_biasing_weight, collapse, decode
from .losses import Batch, model_losses
from .mixsim import SynthDataset
from .model import CalmModel
from .scoring import ScoreReport, align, score

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class Example:
    utt_id: str
    feats: np.ndarray            # T x D mixture features
    enrollment: np.ndarray       # target speaker
    reference: list              # static token ids
    vad: np.ndarray              # per encoder frame
    rare: list                   # unique reference rare tokens
    wrong_enrollment: Optional[np.ndarray] = None   # another speaker of the mixture


def utterance_id(mixture_index: int, speaker_slot: int) -> str:
    return f"mix{mixture_index:05d}-spk{speaker_slot}"


def examples_from_dataset(data: SynthDataset) -> list:
    rare = set(data.rare_tokens)
    out = []
    for rec in data.records:
        C = len(rec.transcripts)
        for c in range(C):
            ref = list(rec.transcripts[c])
            out.append(Example(
                utt_id=utterance_id(rec.seed, c),
                feats=rec.mixture,
                enrollment=rec.enrollments[c],
                reference=ref,
                vad=rec.vad[c],
                rare=list(dict.fromkeys(t for t in ref if t in rare)),
                wrong_enrollment=rec.enrollments[(c + 1) % C] if C > 1 else None,
            ))
    return out


def label_with_list(reference: Sequence[int], phrases: Sequence[Sequence[int]],
                    static_size: int) -> list:
    """Replace phrase occurrences in ``reference`` (longest match first) by
    their dynamic token index ``static_size + i``."""
    index = {tuple(p): i for i, p in enumerate(phrases)}
    longest = max((len(p) for p in phrases), default=0)
    out, pos = [], 0
    while pos < len(reference):
        for n in range(min(longest, len(reference) - pos), 0, -1):
            key = tuple(reference[pos:pos + n])
            if key in index:
                out.append(static_size + index[key])
                pos += n
                break
        else:
            out.append(int(reference[pos]))
            pos += 1
    return out


def oracle_list(example: Example, rare_pool: Sequence[int], size: int, seed: int) -> list:
    """Reference rare tokens of the target plus seeded distractors, as phrases."""
    units = assemble_list([example.rare], rare_pool, size, "per-speaker", seed)
    return [[u] for u in units]


def make_batch(examples: Sequence[Example], lists: Sequence, static_size: int,
               wrong_speaker: bool = False) -> Batch:
    T = max(len(e.feats) for e in examples)
    D = examples[0].feats.shape[1]
    feats = torch.zeros((len(examples), T, D), dtype=torch.float64)
    for b, e in enumerate(examples):
        feats[b, :len(e.feats)] = torch.from_numpy(e.feats)
    enroll = [e.wrong_enrollment if wrong_speaker else e.enrollment for e in examples]
    return Batch(
        feats=feats,
        feat_lengths=torch.tensor([len(e.feats) for e in examples]),
        enrollments=enroll,
        bias_lists=[list(l) for l in lists],
        labels=[label_with_list(e.reference, l, static_size) for e, l in zip(examples, lists)],
        vad_labels=[e.vad for e in examples],
        references=[e.reference for e in examples],
    )


def grad_norm(params) -> float:
    return math.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))


def sgd_step(params, step_size: float, clip_norm: Optional[float]) -> float:
    norm = grad_norm(params)
    scale = 1.0
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm
    with torch.no_grad():
        for p in params:
            if p.grad is not None:
                p -= step_size * scale * p.grad
    return norm


def step_size(optim: OptimConfig, step: int, total_steps: int) -> float:
    if optim.schedule == "linear":
        return optim.step_size * (1.0 - step / total_steps)
    return optim.step_size


def train(model: CalmModel, examples: Sequence[Example], rare_pool: Sequence[int],
          optim: OptimConfig, weights: LossWeights, list_range=(1, 8),
          log: Optional[Callable[[dict], None]] = None) -> list:
    """Plain SGD with norm clipping.  Returns the per-step log records."""
    rng = np.random.default_rng(optim.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    M = model.cfg.static_vocab
    history = []
    n_batches = max(1, math.ceil(len(examples) / optim.batch_size))
    total_steps = optim.steps if optim.steps is not None else optim.epochs * n_batches
    step = 0
    epoch = 0
    while step < total_steps:
        order = rng.permutation(len(examples))
        for start in range(0, len(examples), optim.batch_size):
            if step >= total_steps:
                break
            chunk = [examples[i] for i in order[start:start + optim.batch_size]]
            lists = []
            for e in chunk:
                if rng.random() < optim.no_bias_prob:
                    lists.append([])
                else:
                    units = training_list(e.rare, rare_pool, list_range, rng)
                    lists.append([[u] for u in units])
            batch = make_batch(chunk, lists, M)
            model.zero_grad()
            total, parts = model_losses(model, batch, weights)
            if not torch.isfinite(total):
                raise TrainingError(
                    f"non-finite loss at step {step}: "
                    f"ctc={parts.ctc_final.item()} inter={parts.interctc.item()} "
                    f"att={parts.attention.item()} vad={parts.vad.item()}"
                )
            total.backward()
            norm = sgd_step(params, step_size(optim, step, total_steps), optim.clip_norm)
            rec = {"step": step, "epoch": epoch, "total": total.item(),
                   "ctc_final": parts.ctc_final.item(), "interctc": parts.interctc.item(),
                   "attention": parts.attention.item(), "vad": parts.vad.item(),
                   "grad_norm": norm}
            history.append(rec)
            if log is not None:
                log(rec)
            step += 1
        epoch += 1
    return history


def epoch_means(history: Sequence[dict]) -> list:
    by_epoch: dict = {}
    for rec in history:
        by_epoch.setdefault(rec["epoch"], []).append(rec["total"])
    return [float(np.mean(by_epoch[k])) for k in sorted(by_epoch)]


@torch.no_grad()
def posterior_grids(model: CalmModel, examples: Sequence[Example], lists: Sequence,
                    mu: float = 1.0, wrong_speaker: bool = False, batch_size: int = 64) -> list:
    """Final-layer posterior grids (numpy, trimmed to each item's length and list)."""
    M = model.cfg.static_vocab
    grids = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        sub_lists = lists[start:start + batch_size]
        batch = make_batch(chunk, sub_lists, M, wrong_speaker)
        out = model(batch.feats, batch.feat_lengths, batch.enrollments, batch.bias_lists, mu=mu)
        for b in range(len(chunk)):
            T = int(out.enc_lengths[b])
            grids.append(out.final_grid[b, :T, :M + len(sub_lists[b])].numpy())
    return grids


def evaluate(model: CalmModel, examples: Sequence[Example], decode_lists: Sequence,
             score_lists: Sequence, mu: float = 1.0, wrong_speaker: bool = False,
             cfg: DecodeConfig = DecodeConfig()) -> ScoreReport:
    """Token error rates with the biased set taken from ``score_lists``."""
    M = model.cfg.static_vocab
    grids = posterior_grids(model, examples, decode_lists, mu, wrong_speaker)
    report = ScoreReport()
    for e, grid, dl, sl in zip(examples, grids, decode_lists, score_lists):
        hyp = decode(grid, cfg, dl, M)
        biased = {u for p in sl for u in p}
        report = report + score(align(e.reference, hyp.surface), biased)
    return report


def count_dynamic(grids: Sequence[np.ndarray], static_size: int, mu: float = 1.0) -> int:
    """Dynamic tokens in greedy hypotheses after reweighting mu=1 grids."""
    n = 0
    for g in grids:
        path = apply_biasing_weight(g, static_size, mu).argmax(1)
        n += sum(t >= static_size for t in collapse(path))
    return n
