"""Training objectives.

Per-utterance helpers take plain arrays (or tensors) and return floats or
tensors; :func:`model_losses` evaluates every head of a batch at once and is
what training and the gradient checks call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .config import LossWeights
from .ctc import ctc_loss, ctc_loss_torch
from .model import as_tensor


def interctc_loss(grids: Sequence, label: Sequence[int]) -> float:
    """Mean CTC loss over the intermediate tap grids."""
    if len(grids) == 0:
        raise ValueError("interCTC needs at least one tap grid")
    return float(np.mean([ctc_loss(g, label)[0] for g in grids]))


def attention_loss(rows, label: Sequence[int]):
    """Teacher-forced NLL: sum over steps of -log rows[j, label[j]].

    ``label`` already ends with the end symbol (index 0).
    """
    rows = as_tensor(rows)
    label = torch.as_tensor(list(label), dtype=torch.long)
    if label.shape[0] != rows.shape[-2]:
        raise ValueError("one decoder row per label token is required")
    if label.numel() and (label.min() < 0 or label.max() >= rows.shape[-1]):
        raise ValueError("label token outside the extended vocabulary")
    picked = rows.gather(-1, label[:, None])[:, 0]
    return -torch.log(picked).sum()


def vad_loss(track, labels):
    """Mean binary cross-entropy in nats."""
    p, y = as_tensor(track), as_tensor(labels)
    if p.shape != y.shape:
        raise ValueError(f"VAD track length {tuple(p.shape)} != labels {tuple(y.shape)}")
    bce = -(torch.xlogy(y, p) + torch.xlogy(1.0 - y, 1.0 - p))
    return bce.mean()


@dataclass
class LossParts:
    ctc_final: float
    interctc: float
    attention: float
    vad: float


def ctc_term(ctc_final, interctc, weights: LossWeights):
    return (1.0 - weights.interctc) * ctc_final + weights.interctc * interctc


def total_loss(parts: LossParts, weights: LossWeights):
    weights.validate()
    ctc = ctc_term(parts.ctc_final, parts.interctc, weights)
    return weights.ctc * ctc + weights.vad * parts.vad + weights.attention * parts.attention


@dataclass
class LossReport:
    ctc_final: float
    interctc: float
    attention: float
    vad: float
    total: float
    gradients: dict = field(default_factory=dict)


@dataclass
class Batch:
    """Padded model inputs and targets for one minibatch."""

    feats: torch.Tensor                  # (B, T, D)
    feat_lengths: torch.Tensor           # (B,)
    enrollments: list                    # B arrays, T_e x F
    bias_lists: list                     # B lists of phrases (static token lists)
    labels: list                         # B extended-vocab CTC labels
    vad_labels: list                     # B arrays of length T_enc
    references: list = field(default_factory=list)   # static token transcripts

    def __len__(self):
        return len(self.labels)


def decoder_io(labels: Sequence[Sequence[int]]):
    """Teacher-forcing inputs [sos, y...] and targets [y..., eos], padded with -1."""
    U = max(len(l) for l in labels) + 1
    inp = torch.zeros((len(labels), U), dtype=torch.long)
    tgt = torch.full((len(labels), U), -1, dtype=torch.long)
    for b, lab in enumerate(labels):
        inp[b, 1:len(lab) + 1] = torch.as_tensor(list(lab), dtype=torch.long)
        tgt[b, :len(lab)] = torch.as_tensor(list(lab), dtype=torch.long)
        tgt[b, len(lab)] = 0
    return inp, tgt


def model_losses(model, batch: Batch, weights: LossWeights):
    """Batch-mean losses of every head and the weighted total (a tensor)."""
    out = model(batch.feats, batch.feat_lengths, batch.enrollments, batch.bias_lists)
    lengths = out.enc_lengths.tolist()
    final = ctc_loss_torch(out.final_log_grid, batch.labels, lengths).mean()
    if out.tap_log_grids:
        inter = torch.stack([ctc_loss_torch(g, batch.labels, lengths).mean()
                             for g in out.tap_log_grids]).mean()
    else:
        inter = final

    inp, tgt = decoder_io(batch.labels)
    log_rows = model.decoder_rows(out, inp, log=True)
    valid = tgt >= 0
    picked = log_rows.gather(-1, tgt.clamp(min=0)[..., None])[..., 0]
    att = -(picked * valid).sum(1).mean()

    z = out.vad_logits
    T = z.shape[1]
    mask = torch.arange(T)[None, :] < out.enc_lengths[:, None]
    y = torch.zeros_like(z)
    for b, lab in enumerate(batch.vad_labels):
        if len(lab) != int(out.enc_lengths[b]):
            raise ValueError("VAD labels must have one entry per encoder frame")
        y[b, :len(lab)] = as_tensor(lab)
    # BCE on logits: y * softplus(-z) + (1 - y) * softplus(z)
    bce = y * torch.nn.functional.softplus(-z) + (1.0 - y) * torch.nn.functional.softplus(z)
    vad = ((bce * mask).sum(1) / mask.sum(1)).mean()

    parts = LossParts(final, inter, att, vad)
    total = total_loss(parts, weights)
    return total, parts
