"""CTC forward-backward in the log domain.

Blank is index 0.  Labels index the extended (static + dynamic) vocabulary,
so a dynamic phrase token is just another symbol.  Gradients are taken with
respect to the posterior probabilities, not the logits, so the kernel can
sit behind any normaliser (the weighted joint softmax in particular).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

BLANK = 0
NEG_INF = -np.inf


class CTCInfeasibleError(ValueError):
    """The label cannot be emitted in the available number of frames."""


def min_frames(label: Sequence[int]) -> int:
    """Frames needed for ``label``: one per token plus one blank per repeat."""
    label = list(label)
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    return len(label) + repeats


def check_label(label: Sequence[int], num_frames: int, vocab_size: int) -> None:
    for tok in label:
        if tok == BLANK:
            raise ValueError("blank index may not appear in a CTC label")
        if not 0 < tok < vocab_size:
            raise ValueError(f"label token {tok} outside vocabulary of size {vocab_size}")
    need = min_frames(label)
    if need > num_frames:
        raise CTCInfeasibleError(
            f"label of length {len(label)} needs {need} frames, only {num_frames} available"
        )


def _lse(*terms):
    stacked = np.stack(terms)
    top = np.max(stacked, axis=0)
    safe = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(np.sum(np.exp(stacked - safe), axis=0))


def _shift(x, k):
    """x[:, s - k] with -inf fill (k may be negative)."""
    out = np.full_like(x, NEG_INF)
    S = x.shape[1]
    if abs(k) >= S:
        return out
    if k > 0:
        out[:, k:] = x[:, :-k]
    else:
        out[:, :k] = x[:, -k:]
    return out


def ctc_forward_backward(log_probs: np.ndarray, labels: Sequence[Sequence[int]],
                         lengths: Sequence[int] | None = None, wrt: str = "probs"):
    """Batched CTC negative log-likelihood and its gradient.

    Parameters
    ----------
    log_probs : (B, T, V) array of log posteriors (may contain -inf).
    labels : B label sequences (no blanks).
    lengths : valid frame count per item (defaults to T).

    Returns
    -------
    losses : (B,) nats.
    grad : (B, T, V) derivative of each item's loss w.r.t. the posterior
        probabilities, or w.r.t. the log posteriors when ``wrt="log_probs"``
        (zero on padded frames).
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    B, T, V = log_probs.shape
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths, dtype=int)
    for b in range(B):
        check_label(labels[b], int(lengths[b]), V)

    S = 2 * max((len(lab) for lab in labels), default=0) + 1
    ext = np.zeros((B, S), dtype=int)
    n_states = np.zeros(B, dtype=int)
    skip = np.zeros((B, S), dtype=bool)
    for b, lab in enumerate(labels):
        n_states[b] = 2 * len(lab) + 1
        ext[b, 1:n_states[b]:2] = lab
        for s in range(3, n_states[b], 2):
            skip[b, s] = ext[b, s] != ext[b, s - 2]
    valid_state = np.arange(S)[None, :] < n_states[:, None]
    bidx = np.arange(B)[:, None]

    # emit[b, t, s] = log p_t(ext[b, s])
    emit = log_probs[bidx[:, :, None], np.arange(T)[None, :, None], ext[:, None, :]]
    emit = np.where(valid_state[:, None, :], emit, NEG_INF)

    # alpha_pre excludes the emission at t, beta_post excludes it too, so
    # dP/dp_t(k) = sum_{s: ext[s]=k} exp(alpha_pre + beta_post) stays finite at p=0.
    alpha_pre = np.full((B, T, S), NEG_INF)
    alpha_pre[:, 0, 0] = 0.0
    alpha_pre[:, 0, 1:2] = np.where(n_states[:, None] > 1, 0.0, NEG_INF)
    alpha = alpha_pre[:, 0] + emit[:, 0]
    for t in range(1, T):
        shift1 = _shift(alpha, 1)
        shift2 = np.where(skip, _shift(alpha, 2), NEG_INF)
        alpha_pre[:, t] = _lse(alpha, shift1, shift2)
        alpha = np.where((t < lengths)[:, None], alpha_pre[:, t] + emit[:, t], alpha)

    last = n_states - 1
    end_a = alpha[np.arange(B), last]
    end_b = np.where(last >= 1, alpha[np.arange(B), np.maximum(last - 1, 0)], NEG_INF)
    log_like = _lse(end_a, end_b)

    beta_post = np.full((B, T, S), NEG_INF)
    beta = np.full((B, S), NEG_INF)         # beta_post at t+1, plus emission at t+1
    skip_next = np.zeros_like(skip)
    skip_next[:, :-2] = skip[:, 2:]
    for t in range(T - 1, -1, -1):
        final = t == lengths - 1
        init = np.full((B, S), NEG_INF)
        init[np.arange(B), last] = 0.0
        has_prev = last >= 1
        init[np.arange(B)[has_prev], (last - 1)[has_prev]] = 0.0
        if t < T - 1:
            nxt1 = _shift(beta, -1)
            nxt2 = np.where(skip_next, _shift(beta, -2), NEG_INF)
            rec = _lse(beta, nxt1, nxt2)
        else:
            rec = np.full((B, S), NEG_INF)
        cur = np.where(final[:, None], init, np.where((t < lengths - 1)[:, None], rec, NEG_INF))
        beta_post[:, t] = cur
        beta = cur + emit[:, t]

    log_occ = alpha_pre + beta_post - log_like[:, None, None]
    if wrt == "log_probs":
        log_occ = log_occ + emit
    elif wrt != "probs":
        raise ValueError(f"unknown gradient target {wrt!r}")
    occ = np.exp(log_occ)
    occ = np.where(valid_state[:, None, :], occ, 0.0)
    grad = np.zeros((B, T, V))
    np.add.at(grad, (bidx[:, :, None], np.arange(T)[None, :, None], ext[:, None, :]), -occ)
    grad *= (np.arange(T)[None, :] < lengths[:, None])[:, :, None]
    return -log_like, grad


def ctc_loss(probs, label: Sequence[int]):
    """Loss and gradient for a single T x V posterior grid."""
    probs = getattr(probs, "probs", probs)
    probs = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore"):
        lp = np.log(probs)
    losses, grad = ctc_forward_backward(lp[None], [list(label)])
    return float(losses[0]) + 0.0, grad[0]


class _CTCFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, log_probs, labels, lengths):
        lp = log_probs.detach().cpu().numpy()
        losses, grad = ctc_forward_backward(lp, labels, lengths, wrt="log_probs")
        ctx.save_for_backward(torch.from_numpy(grad).to(log_probs))
        return torch.from_numpy(losses).to(log_probs)

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        return grad * grad_out[:, None, None], None, None


def ctc_loss_torch(log_probs: torch.Tensor, labels, lengths=None) -> torch.Tensor:
    """Differentiable per-item CTC loss for a (B, T, V) log-posterior tensor."""
    if lengths is None:
        lengths = [log_probs.shape[1]] * log_probs.shape[0]
    return _CTCFunction.apply(log_probs, [list(l) for l in labels], list(lengths))
