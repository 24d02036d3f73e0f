"""Tiny random models and batches for the gradient and invariant tests."""

import numpy as np
import torch

from calm.config import ModelConfig
from calm.losses import Batch
from calm.model import CalmModel, encoded_length


def small_config(rng, **overrides) -> ModelConfig:
    L = int(rng.integers(2, 4))
    cfg = ModelConfig(
        input_dim=int(rng.integers(3, 6)),
        enc_dim=int(rng.integers(3, 6)),
        emb_dim=int(rng.integers(2, 4)),
        bias_dim=int(rng.integers(2, 4)),
        static_vocab=int(rng.integers(3, 5)),
        num_layers=L,
        subsample_factor=int(rng.integers(1, 3)),
        tap_layers=list(range(1, L)),
        decoder_dim=int(rng.integers(2, 4)),
        max_decode_len=8,
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def random_batch(rng, cfg: ModelConfig, batch_size=2, max_list=2) -> Batch:
    M = cfg.static_vocab
    lengths = [int(rng.integers(4, 8)) for _ in range(batch_size)]
    T = max(lengths)
    feats = torch.zeros((batch_size, T, cfg.input_dim), dtype=torch.float64)
    lists, labels, vads, enrolls = [], [], [], []
    for b, n in enumerate(lengths):
        feats[b, :n] = torch.from_numpy(rng.standard_normal((n, cfg.input_dim)))
        enrolls.append(rng.standard_normal((int(rng.integers(2, 5)), cfg.enroll_size)))
        N = int(rng.integers(0, max_list + 1))
        lists.append([[int(t) for t in rng.integers(1, M, size=int(rng.integers(1, 3)))]
                      for _ in range(N)])
        T_enc = int(encoded_length(n, cfg.subsample_factor))
        # distinct consecutive symbols keep every label feasible
        U = int(rng.integers(0, min(3, T_enc) + 1))
        label, prev = [], None
        while len(label) < U:
            tok = int(rng.integers(1, M + N))
            if tok != prev:
                label.append(tok)
                prev = tok
        labels.append(label)
        vads.append(rng.integers(0, 2, size=T_enc).astype(np.float64))
    return Batch(feats, torch.tensor(lengths), enrolls, lists, labels, vads)


def random_model(rng, **overrides):
    cfg = small_config(rng, **overrides)
    return CalmModel(cfg, seed=int(rng.integers(2 ** 31))), cfg


HEADS = ("ctc_final", "interctc", "attention", "vad", "total")


def _head_values(model, batch, weights):
    from calm.losses import model_losses

    total, parts = model_losses(model, batch, weights)
    return {"ctc_final": parts.ctc_final, "interctc": parts.interctc,
            "attention": parts.attention, "vad": parts.vad, "total": total}


def gradient_errors(model, batch, weights, rng, entries=8, step=1e-6, floor=1e-5):
    """Worst relative error between autograd and central differences per head,
    over ``entries`` randomly chosen parameter coordinates."""
    params = [p for p in model.parameters() if p.requires_grad]
    values = _head_values(model, batch, weights)
    analytic = {}
    for name in HEADS:
        grads = torch.autograd.grad(values[name], params, retain_graph=True, allow_unused=True)
        analytic[name] = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    sizes = np.array([p.numel() for p in params])
    worst = {name: 0.0 for name in HEADS}
    for _ in range(entries):
        which = int(rng.choice(len(params), p=sizes / sizes.sum()))
        idx = int(rng.integers(sizes[which]))
        flat = params[which].data.view(-1)
        old = flat[idx].item()
        with torch.no_grad():
            flat[idx] = old + step
            up = {k: v.item() for k, v in _head_values(model, batch, weights).items()}
            flat[idx] = old - step
            down = {k: v.item() for k, v in _head_values(model, batch, weights).items()}
            flat[idx] = old
        for name in HEADS:
            fd = (up[name] - down[name]) / (2 * step)
            a = analytic[name][which].view(-1)[idx].item()
            err = abs(a - fd) / max(abs(a), abs(fd), floor)
            worst[name] = max(worst[name], err)
    return worst
