"""Forward graph: projection, encoder with self-conditioning taps, FiLM,
bias encoder, joint static/dynamic output heads, VAD head and a small
dynamic-vocabulary attention decoder.

The functional ops work on single utterances (and mostly broadcast over a
leading batch axis); :class:`CalmModel` owns the parameters and runs them
batched with padding masks.  Everything is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .config import ConfigError, ModelConfig, check_mu

DTYPE = torch.float64


@dataclass
class FeatureSequence:
    frames: np.ndarray                 # T x D
    frame_hop_seconds: float = 0.01

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError("FeatureSequence needs a T x D matrix with T >= 1")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("FeatureSequence contains non-finite values")


@dataclass
class PosteriorGrid:
    probs: np.ndarray                  # T x (M + N)
    static_size: int
    dynamic_size: int = 0

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or self.probs.shape[1] != self.static_size + self.dynamic_size:
            raise ValueError("grid width must equal static_size + dynamic_size")

    @property
    def num_frames(self) -> int:
        return self.probs.shape[0]


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _check_width(x: torch.Tensor, width: int, what: str) -> None:
    if x.shape[-1] != width:
        raise ConfigError(f"{what}: expected last dimension {width}, got {x.shape[-1]}")


ACTIVATIONS = {"tanh": torch.tanh, "relu": torch.relu, "linear": lambda x: x}


# --------------------------------------------------------------------------
# functional ops

def project_features(frames, weight):
    """Per-frame linear projection, ``weight`` is D x D^fe."""
    frames, weight = as_tensor(frames), as_tensor(weight)
    _check_width(frames, weight.shape[0], "project_features")
    return frames @ weight


def subsample(frames, factor: int, lengths=None):
    """Average-pool non-overlapping windows of ``factor`` frames.

    Output length is ceil(T / factor); a trailing partial window is the mean
    of the frames it actually contains.  With ``lengths`` the input is a
    padded (B, T, D) batch and padded frames are excluded.
    """
    frames = as_tensor(frames)
    if factor == 1 and lengths is None:
        return frames
    squeeze = frames.dim() == 2
    x = frames[None] if squeeze else frames
    B, T, D = x.shape
    if lengths is None:
        lengths = torch.full((B,), T)
    lengths = torch.as_tensor(lengths)
    mask = (torch.arange(T)[None, :] < lengths[:, None]).to(DTYPE)
    T_out = -(-T // factor)
    pad = T_out * factor - T
    x = torch.nn.functional.pad(x * mask[..., None], (0, 0, 0, pad))
    mask = torch.nn.functional.pad(mask, (0, pad))
    sums = x.reshape(B, T_out, factor, D).sum(2)
    counts = mask.reshape(B, T_out, factor).sum(2)
    out = sums / counts.clamp(min=1.0)[..., None]
    return out[0] if squeeze else out


def encoded_length(num_frames, factor: int):
    return -(-num_frames // factor)


def speaker_encode(enrollment, weight, bias):
    """Mean+std pooling over frames followed by an affine map.

    Columns are sorted before reduction so the result is bit-identical
    under any permutation of the frames.
    """
    x = as_tensor(getattr(enrollment, "frames", enrollment))
    if x.dim() != 2 or x.shape[0] < 1:
        raise ValueError("enrollment must contain at least one frame")
    x = torch.sort(x, dim=0).values
    mean = x.mean(0)
    std = torch.sqrt(((x - mean) ** 2).mean(0) + 1e-12)
    pooled = torch.cat([mean, std])
    weight = as_tensor(weight)
    _check_width(pooled, weight.shape[0], "speaker_encode")
    return pooled @ weight + as_tensor(bias)


def film_params(embedding, gamma_weight, gamma_bias, beta_weight, beta_bias):
    e = as_tensor(embedding)
    gamma_weight, beta_weight = as_tensor(gamma_weight), as_tensor(beta_weight)
    _check_width(e, gamma_weight.shape[0], "film gamma net")
    _check_width(e, beta_weight.shape[0], "film beta net")
    return e @ gamma_weight + as_tensor(gamma_bias), e @ beta_weight + as_tensor(beta_bias)


def film_modulate(states, gamma, beta):
    """gamma * H + beta, broadcast over frames."""
    states, gamma, beta = as_tensor(states), as_tensor(gamma), as_tensor(beta)
    _check_width(states, gamma.shape[-1], "film gamma")
    _check_width(states, beta.shape[-1], "film beta")
    if gamma.dim() == states.dim() - 1:
        gamma, beta = gamma.unsqueeze(-2), beta.unsqueeze(-2)
    return gamma * states + beta


def encode_bias_list(phrases: Sequence[Sequence[int]], token_embeddings, mixer=None):
    """Mean-pooled token embeddings per phrase, then an optional affine mixer.

    ``mixer`` is ``(weight, bias)`` or None for identity.
    """
    table = as_tensor(token_embeddings)
    vocab = table.shape[0]
    rows = []
    for phrase in phrases:
        if len(phrase) == 0:
            raise ValueError("biasing phrases must be non-empty")
        for tok in phrase:
            if not 0 <= tok < vocab:
                raise ValueError(f"phrase token {tok} outside static vocabulary of size {vocab}")
        rows.append(table[list(phrase)].mean(0))
    if not rows:
        out = table.new_zeros((0, table.shape[1]))
    else:
        out = torch.stack(rows)
    if mixer is not None:
        w, b = mixer
        out = out @ as_tensor(w) + as_tensor(b)
    return out


def output_scores(states, bias_vectors, static_weight, static_bias,
                  query_weight, query_bias, key_weight, key_bias):
    """Static scores (T x M) and scaled dot-product dynamic scores (T x N)."""
    states = as_tensor(states)
    static = states @ as_tensor(static_weight) + as_tensor(static_bias)
    V = as_tensor(bias_vectors)
    d_bias = V.shape[-1]
    q = states @ as_tensor(query_weight) + as_tensor(query_bias)
    k = V @ as_tensor(key_weight) + as_tensor(key_bias)
    dynamic = q @ k.transpose(-1, -2) / math.sqrt(d_bias)
    return static, dynamic


def joint_softmax(static, dynamic, mu: float = 1.0, dynamic_mask=None, log=False):
    """Softmax over concat(static, dynamic + ln mu).

    mu = 1 is the training-time distribution; smaller mu moves probability
    mass from dynamic to static tokens.
    """
    check_mu(mu)
    dynamic = dynamic + math.log(mu) if mu != 1.0 else dynamic
    if dynamic_mask is not None:
        dynamic = dynamic.masked_fill(~dynamic_mask.unsqueeze(-2), -math.inf)
    scores = torch.cat([static, dynamic], dim=-1)
    return torch.log_softmax(scores, -1) if log else torch.softmax(scores, -1)


def output_head(states, bias_vectors, head_params: dict, mu: float = 1.0, dynamic_mask=None,
                log: bool = False):
    """Posterior grid over M static + N dynamic tokens."""
    static, dynamic = output_scores(states, bias_vectors, **head_params)
    return joint_softmax(static, dynamic, mu, dynamic_mask, log=log)


def vad_head(states, weight, bias):
    """Frame-level target-speaker activity posteriors."""
    states = as_tensor(states)
    weight = as_tensor(weight)
    _check_width(states, weight.shape[0], "vad_head")
    return torch.sigmoid(states @ weight + as_tensor(bias))


def decoder_forward(prefix, states, bias_vectors, params: dict, static_size: int,
                    state_mask=None, dynamic_mask=None, log: bool = False):
    """Next-token distributions for every position of ``prefix``.

    Row j is the distribution after reading ``prefix[:j + 1]``; index 0 is
    the start/end symbol.  Works on (U,) / (T, D) / (N, Db) or batched inputs
    with a leading batch axis.
    """
    prefix = torch.as_tensor(prefix, dtype=torch.long)
    states, V = as_tensor(states), as_tensor(bias_vectors)
    n_dyn = V.shape[-2]
    if prefix.numel() and (prefix.min() < 0 or prefix.max() >= static_size + n_dyn):
        raise ValueError("prefix token outside the extended vocabulary")
    tok_emb = params["token_embedding"]
    dyn_emb = V @ params["dynamic_embedding"]                   # (..., N, d)
    static_part = tok_emb[prefix.clamp(max=static_size - 1)]
    if n_dyn:
        dyn_idx = (prefix - static_size).clamp(min=0, max=n_dyn - 1)
        dyn_part = torch.gather(
            dyn_emb, -2, dyn_idx.unsqueeze(-1).expand(*dyn_idx.shape, dyn_emb.shape[-1])
        )
        emb = torch.where((prefix >= static_size).unsqueeze(-1), dyn_part, static_part)
    else:
        emb = static_part
    U = prefix.shape[-1]
    pos = params["position_embedding"]
    positions = torch.arange(U).clamp(max=pos.shape[0] - 1)
    query_state = emb + pos[positions]

    d = query_state.shape[-1]
    q = query_state @ params["query"]
    k = states @ params["key"]
    v = states @ params["value"]
    att = q @ k.transpose(-1, -2) / math.sqrt(d)
    if state_mask is not None:
        att = att.masked_fill(~state_mask.unsqueeze(-2), -math.inf)
    context = torch.softmax(att, -1) @ v
    hidden = torch.tanh(query_state + context)
    static = hidden @ params["out_weight"] + params["out_bias"]
    dq = hidden @ params["dyn_query"]
    dk = V @ params["dyn_key"]
    dynamic = dq @ dk.transpose(-1, -2) / math.sqrt(V.shape[-1])
    return joint_softmax(static, dynamic, 1.0, dynamic_mask, log=log)


def decoder_step(prefix, states, bias_vectors, params: dict, static_size: int):
    """Distribution over the M + N extended vocabulary after ``prefix``."""
    if len(prefix) == 0:
        raise ValueError("prefix must start with the start symbol")
    return decoder_forward(prefix, states, bias_vectors, params, static_size)[-1]


# --------------------------------------------------------------------------
# parameterised model

@dataclass
class ForwardOutput:
    tap_log_grids: list        # per tap layer, (B, T_enc, M + N_max) log posteriors
    final_log_grid: torch.Tensor
    vad_logits: torch.Tensor   # (B, T_enc)
    states: list               # raw H per layer, (B, T_enc, D_enc)
    adapted: torch.Tensor      # FiLM-adapted final states
    enc_lengths: torch.Tensor
    bias_vectors: torch.Tensor  # (B, N_max, D_bias)
    bias_mask: torch.Tensor     # (B, N_max)

    @property
    def vad(self) -> torch.Tensor:
        return torch.sigmoid(self.vad_logits)

    @property
    def final_grid(self) -> torch.Tensor:
        return self.final_log_grid.exp()

    @property
    def tap_grids(self) -> list:
        return [g.exp() for g in self.tap_log_grids]


class CalmModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        g = torch.Generator().manual_seed(seed)

        def init(*shape, scale=None):
            scale = 1.0 / math.sqrt(shape[0]) if scale is None else scale
            return nn.Parameter(torch.randn(*shape, generator=g, dtype=DTYPE) * scale)

        def zeros(*shape):
            return nn.Parameter(torch.zeros(*shape, dtype=DTYPE))

        D, E, M = cfg.enc_dim, cfg.emb_dim, cfg.static_vocab
        Db, Dd = cfg.bias_dim, cfg.decoder_dim
        self.proj = init(cfg.input_dim, D)
        self.spk_weight = init(2 * cfg.enroll_size, E)
        self.spk_bias = zeros(E)
        self.layer_weights = nn.ParameterList([init(D, D) for _ in range(cfg.num_layers)])
        self.layer_biases = nn.ParameterList([zeros(D) for _ in range(cfg.num_layers)])
        self.film_gamma_weight = init(E, D, scale=0.1 / math.sqrt(E))
        self.film_gamma_bias = nn.Parameter(torch.ones(D, dtype=DTYPE))
        self.film_beta_weight = init(E, D, scale=0.1 / math.sqrt(E))
        self.film_beta_bias = zeros(D)
        self.bias_token_embedding = init(M, Db, scale=1.0)
        self.bias_mixer_weight = init(Db, Db)
        self.bias_mixer_bias = zeros(Db)
        self.head = nn.ParameterDict({
            "static_weight": init(D, M),
            "static_bias": zeros(M),
            "query_weight": init(D, Db),
            "query_bias": zeros(Db),
            "key_weight": init(Db, Db),
            "key_bias": zeros(Db),
        })
        self.cond_static = init(M, D, scale=0.1)
        self.cond_dynamic = init(Db, D, scale=0.1 / math.sqrt(Db))
        self.vad_weight = init(D)
        self.vad_bias = zeros(())
        self.decoder = nn.ParameterDict({
            "token_embedding": init(M, Dd, scale=1.0),
            "dynamic_embedding": init(Db, Dd),
            "position_embedding": init(cfg.max_decode_len, Dd, scale=0.5),
            "query": init(Dd, Dd),
            "key": init(D, Dd),
            "value": init(D, Dd),
            "out_weight": init(Dd, M),
            "out_bias": zeros(M),
            "dyn_query": init(Dd, Db),
            "dyn_key": init(Db, Db),
        })

    # -- pieces -------------------------------------------------------------
    def speaker_embedding(self, enrollment):
        return speaker_encode(enrollment, self.spk_weight, self.spk_bias)

    def film(self, embedding):
        return film_params(embedding, self.film_gamma_weight, self.film_gamma_bias,
                           self.film_beta_weight, self.film_beta_bias)

    def bias_embeddings(self, phrases):
        return encode_bias_list(phrases, self.bias_token_embedding,
                                (self.bias_mixer_weight, self.bias_mixer_bias))

    def head_params(self) -> dict:
        return dict(self.head)

    def condition_feature(self, grid, bias_vectors):
        M = self.cfg.static_vocab
        feat = grid[..., :M] @ self.cond_static
        if bias_vectors.shape[-2]:
            feat = feat + (grid[..., M:] @ bias_vectors) @ self.cond_dynamic
        return feat

    # -- batched forward ---------------------------------------------------
    def forward(self, feats, feat_lengths, enrollments, bias_lists, mu: float = 1.0,
                self_condition: bool = True) -> ForwardOutput:
        """Run a padded batch.

        feats: (B, T, D) tensor; enrollments: list of (T_e, F) arrays;
        bias_lists: list of phrase lists (each phrase a static token list).
        """
        cfg = self.cfg
        feats = as_tensor(feats)
        B = feats.shape[0]
        feat_lengths = torch.as_tensor(feat_lengths)
        act = ACTIVATIONS[cfg.activation]

        embeddings = torch.stack([self.speaker_embedding(e) for e in enrollments])
        gamma, beta = self.film(embeddings)

        n_max = max((len(b) for b in bias_lists), default=0)
        bias_mask = torch.zeros((B, n_max), dtype=torch.bool)
        rows = []
        for b, phrases in enumerate(bias_lists):
            bias_mask[b, :len(phrases)] = True
            rows.append(torch.cat([self.bias_embeddings(phrases),
                                   feats.new_zeros((n_max - len(phrases), cfg.bias_dim))]))
        V = torch.stack(rows)

        z = project_features(feats, self.proj)
        h = subsample(z, cfg.subsample_factor, feat_lengths)
        enc_lengths = encoded_length(feat_lengths, cfg.subsample_factor)

        cond_weight = cfg.self_condition_weight if self_condition else 0.0
        taps = set(cfg.taps)
        states, tap_log_grids = [], []
        for l in range(1, cfg.num_layers + 1):
            h = h + act(h @ self.layer_weights[l - 1] + self.layer_biases[l - 1])
            states.append(h)
            if l in taps:
                log_grid = output_head(film_modulate(h, gamma, beta), V, self.head_params(),
                                       mu, bias_mask, log=True)
                tap_log_grids.append(log_grid)
                if cond_weight != 0.0:
                    h = h + cond_weight * self.condition_feature(log_grid.exp(), V)
        adapted = film_modulate(h, gamma, beta)
        final_log_grid = output_head(adapted, V, self.head_params(), mu, bias_mask, log=True)
        vad_logits = adapted @ self.vad_weight + self.vad_bias
        return ForwardOutput(tap_log_grids, final_log_grid, vad_logits, states, adapted,
                             enc_lengths, V, bias_mask)

    def decoder_rows(self, out: ForwardOutput, prefixes, log: bool = False):
        """Teacher-forced decoder distributions for padded prefixes (B, U)."""
        frame_mask = torch.arange(out.adapted.shape[1])[None, :] < out.enc_lengths[:, None]
        return decoder_forward(prefixes, out.adapted, out.bias_vectors, dict(self.decoder),
                               self.cfg.static_vocab, frame_mask, out.bias_mask, log=log)
