"""Mixture simulation.

Waveform side: delayed sums of single-speaker sources plus optional white
noise, enrollment crops, frame-level activity labels and a log-mel
frontend.  Feature side: a synthetic task where each token is a short run
of (one-hot token | speaker identity) frames, used for desk-scale training.
"""

from __future__ import annotations

import logging
import math
import wave
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config import SynthConfig

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
WINDOW = 400
HOP = 160
NFFT = 512
N_MELS = 80
LOG_FLOOR = math.log(1e-10)


@dataclass
class SourceUtterance:
    samples: np.ndarray
    rate: int
    speaker: str
    transcript: str = ""
    utt_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("source samples must be finite")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.rate


@dataclass
class MixtureRecord:
    mixture: np.ndarray            # T (or T x D for feature-domain mixtures)
    masks: np.ndarray              # C x T, 0/1
    sources: np.ndarray            # C x T (x D), sources placed at their delays
    noise: np.ndarray              # like mixture; zeros when no noise
    delays: list
    speakers: list = field(default_factory=list)
    transcripts: list = field(default_factory=list)
    enrollments: list = field(default_factory=list)
    vad: list = field(default_factory=list)      # per target speaker
    seed: int = 0

    def reconstruct(self) -> np.ndarray:
        return _combine(self.masks, self.sources, self.noise)


def _combine(masks, sources, noise):
    x = np.zeros_like(noise)
    for c in range(len(sources)):
        m = masks[c].reshape(masks[c].shape + (1,) * (sources.ndim - 2))
        x = x + m * sources[c]
    return x + noise


def mix(sources: Sequence, delays: Sequence[int], snr_db: Optional[float] = None,
        seed: int = 0, rate: Optional[int] = None) -> MixtureRecord:
    """Place each source at its delay, sum, and add white noise.

    ``sources`` are arrays (time first) or :class:`SourceUtterance`.  The SNR
    is measured against the sum of sources; ``None`` or ``inf`` means no
    noise.  The mixture is computed as sum(mask * placed) + noise, so the
    stored components reproduce it exactly.
    """
    if len(sources) == 0:
        raise ValueError("need at least one source")
    if len(delays) != len(sources):
        raise ValueError("one delay per source is required")
    rates = {s.rate for s in sources if isinstance(s, SourceUtterance)}
    if rate is not None:
        rates.add(rate)
    if len(rates) > 1:
        raise ValueError(f"sample-rate mismatch: {sorted(rates)}")
    arrays = [np.asarray(getattr(s, "samples", s), dtype=np.float64) for s in sources]
    if any(d < 0 for d in delays):
        raise ValueError("delays must be non-negative")
    if delays[0] != 0:
        raise ValueError("the first speaker starts at delay 0")
    total = max(d + len(a) for d, a in zip(delays, arrays))
    tail = arrays[0].shape[1:]
    placed = np.zeros((len(arrays), total) + tail)
    masks = np.zeros((len(arrays), total))
    for c, (a, d) in enumerate(zip(arrays, delays)):
        placed[c, d:d + len(a)] = a
        masks[c, d:d + len(a)] = 1.0
    noise = np.zeros((total,) + tail)
    if snr_db is not None and math.isfinite(snr_db):
        clean = _combine(masks, placed, noise)
        power = float(np.mean(clean ** 2))
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal(noise.shape) * math.sqrt(power / 10 ** (snr_db / 10))
    mixture = _combine(masks, placed, noise)
    return MixtureRecord(mixture, masks, placed, noise, list(delays),
                         speakers=[getattr(s, "speaker", str(i)) for i, s in enumerate(sources)],
                         transcripts=[getattr(s, "transcript", "") for s in sources],
                         seed=seed)


def make_enrollment(pool: Sequence[SourceUtterance], speaker: str, duration: float,
                    seed: int = 0, exclude: Sequence[str] = ()) -> SourceUtterance:
    """Seeded contiguous crop from one of the speaker's other utterances."""
    candidates = [u for u in pool if u.speaker == speaker and u.utt_id not in set(exclude)]
    if not candidates:
        raise ValueError(f"no enrollment material for speaker {speaker!r} outside the mixture")
    rng = np.random.default_rng(seed)
    src = candidates[int(rng.integers(len(candidates)))]
    n = int(round(duration * src.rate))
    if n >= len(src.samples):
        if n > len(src.samples):
            logger.warning("enrollment of %.2fs requested, %s has only %.2fs",
                           duration, src.utt_id, src.duration)
        crop = src.samples.copy()
    else:
        start = int(rng.integers(0, len(src.samples) - n + 1))
        crop = src.samples[start:start + n].copy()
    return SourceUtterance(crop, src.rate, speaker, src.transcript, src.utt_id + "-enroll")


def num_frames(num_samples: int, window: int = WINDOW, hop: int = HOP) -> int:
    if num_samples < window:
        return 0
    return 1 + (num_samples - window) // hop


def vad_labels(mask, hop: int = HOP, window: int = WINDOW, subsample: int = 1) -> np.ndarray:
    """1 for encoder frames whose receptive span is more than half active."""
    mask = np.asarray(mask, dtype=np.float64)
    n = num_frames(len(mask), window, hop)
    n_enc = -(-n // subsample)
    out = np.zeros(n_enc)
    for j in range(n_enc):
        first = j * subsample
        last = min((j + 1) * subsample, n) - 1
        span = mask[first * hop:last * hop + window]
        out[j] = 1.0 if span.mean() > 0.5 else 0.0
    return out


def mel_filterbank(rate: int = SAMPLE_RATE, n_fft: int = NFFT, n_mels: int = N_MELS) -> np.ndarray:
    """HTK-scale triangular filters, n_mels x (n_fft // 2 + 1)."""
    def to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def to_hz(m):
        return 700.0 * (10 ** (m / 2595.0) - 1.0)

    edges = to_hz(np.linspace(0.0, to_mel(rate / 2), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def mel_centers(rate: int = SAMPLE_RATE, n_mels: int = N_MELS) -> np.ndarray:
    top = 2595.0 * np.log10(1.0 + rate / 2 / 700.0)
    m = np.linspace(0.0, top, n_mels + 2)[1:-1]
    return 700.0 * (10 ** (m / 2595.0) - 1.0)


def log_mel(samples, rate: int = SAMPLE_RATE) -> np.ndarray:
    """80-dim log-mel frames, 25 ms Hann window, 10 ms hop, no padding."""
    if rate != SAMPLE_RATE:
        raise ValueError(f"log_mel supports {SAMPLE_RATE} Hz only, got {rate}")
    x = np.asarray(samples, dtype=np.float64)
    n = num_frames(len(x))
    if n == 0:
        return np.zeros((0, N_MELS))
    idx = np.arange(WINDOW)[None, :] + HOP * np.arange(n)[:, None]
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(WINDOW) / WINDOW)
    power = np.abs(np.fft.rfft(x[idx] * window, n=NFFT)) ** 2
    energy = power @ mel_filterbank().T
    return np.log(np.maximum(energy, 1e-10))


def read_wav(path) -> SourceUtterance:
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2 or w.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono PCM16")
        rate = w.getframerate()
        data = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return SourceUtterance(data.astype(np.float64) / 32768.0, rate, "", utt_id=str(path))


def write_wav(path, samples, rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(pcm.tobytes())


# --------------------------------------------------------------------------
# feature-domain synthetic task

@dataclass
class SynthDataset:
    config: SynthConfig
    identities: np.ndarray         # num_speakers x id_dim
    records: list                  # MixtureRecord, feature-domain

    @property
    def rare_tokens(self) -> list:
        v, r = self.config.vocab_size, self.config.rare_count
        return list(range(v - r + 1, v + 1))

    @property
    def common_tokens(self) -> list:
        return list(range(1, self.config.vocab_size - self.config.rare_count + 1))


def sample_tokens(cfg: SynthConfig, rng, length: int) -> list:
    common = np.arange(1, cfg.vocab_size - cfg.rare_count + 1)
    rare = np.arange(cfg.vocab_size - cfg.rare_count + 1, cfg.vocab_size + 1)
    out = []
    for _ in range(length):
        if len(rare) and rng.random() < cfg.rare_rate:
            out.append(int(rng.choice(rare)))
        else:
            out.append(int(rng.choice(common)))
    return out


def render_tokens(tokens: Sequence[int], identity: np.ndarray, cfg: SynthConfig,
                  rng) -> np.ndarray:
    """R frames per token of one-hot(token) | identity, plus Gaussian noise."""
    R = cfg.frames_per_token
    frames = np.zeros((len(tokens) * R, cfg.input_dim))
    for i, tok in enumerate(tokens):
        frames[i * R:(i + 1) * R, tok - 1] = 1.0
    frames[:, cfg.vocab_size:] = identity
    if cfg.noise_std > 0:
        frames = frames + cfg.noise_std * rng.standard_normal(frames.shape)
    return frames


def speaker_identities(cfg: SynthConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 1])
    ids = rng.standard_normal((cfg.num_speakers, cfg.id_dim))
    return ids / np.linalg.norm(ids, axis=1, keepdims=True) * 2.0


def synth_mixture(cfg: SynthConfig, identities: np.ndarray, index: int,
                  subsample: int = 1) -> MixtureRecord:
    """One mixture from its own seeded stream, so generation order is irrelevant."""
    rng = np.random.default_rng([cfg.seed, 2, index])
    speakers = rng.choice(cfg.num_speakers, size=cfg.speakers_per_mix, replace=False)
    transcripts, renders, enrollments = [], [], []
    for spk in speakers:
        n = int(rng.integers(cfg.min_tokens, cfg.max_tokens + 1))
        toks = sample_tokens(cfg, rng, n)
        transcripts.append(toks)
        renders.append(render_tokens(toks, identities[spk], cfg, rng))
        enroll_toks = sample_tokens(cfg, rng, cfg.enroll_tokens)
        enrollments.append(render_tokens(enroll_toks, identities[spk], cfg, rng))
    delays = [0]
    for _ in renders[1:]:
        lo, hi = cfg.delay_range
        delays.append(int(round(len(renders[0]) * rng.uniform(lo, hi))))
    rec = mix(renders, delays, seed=int(rng.integers(2 ** 31)))
    rec.speakers = [int(s) for s in speakers]
    rec.transcripts = transcripts
    rec.enrollments = enrollments
    rec.vad = [vad_labels(m, hop=1, window=1, subsample=subsample) for m in rec.masks]
    rec.seed = index
    return rec


def synth_task(cfg: SynthConfig, subsample: int = 1, first_index: int = 0) -> SynthDataset:
    """``cfg.num_mixtures`` mixtures starting at stream ``first_index``.

    Disjoint index ranges of one config give disjoint utterances over the
    same speaker population (a held-out split).
    """
    cfg.validate()
    ids = speaker_identities(cfg)
    records = [synth_mixture(cfg, ids, i, subsample)
               for i in range(first_index, first_index + cfg.num_mixtures)]
    return SynthDataset(cfg, ids, records)
