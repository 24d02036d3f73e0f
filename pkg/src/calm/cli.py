"""Command-line entry point: simulate, build-bias, train, decode, score.

Every command reads an ExperimentConfig (``--config`` or $CALM_CONFIG,
falling back to defaults) and accepts ``--set a.b=value`` overrides.
Training and decoding run on the feature-domain synthetic task.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import biasing
from .checkpoint import load_model, load_synth_dataset, save_model, save_synth_dataset
from .config import ConfigError, ExperimentConfig, apply_override
from .decoding import decode, write_hypotheses
from .mixsim import (SourceUtterance, make_enrollment, mix, read_wav, synth_task, write_wav)
from .model import CalmModel
from .scoring import read_text_map, score_corpus
from .train import (TrainingError, examples_from_dataset, posterior_grids, train,
                    utterance_id)

logger = logging.getLogger("calm")


class CommandError(RuntimeError):
    """User-facing failure; reported on stderr with exit code 2."""


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    for assignment in args.overrides:
        apply_override(cfg, assignment)
    if args.seed is not None:
        for section in (cfg.synth, cfg.mix, cfg.bias, cfg.optim):
            section.seed = args.seed
    return cfg.validate()


def _words(tokens) -> list:
    return [str(t) for t in tokens]


def _parent(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# simulate

def cmd_simulate(cfg: ExperimentConfig, args) -> dict:
    if cfg.task == "synth":
        return _simulate_synth(cfg, args.first_index)
    return _simulate_audio(cfg)


def _simulate_synth(cfg: ExperimentConfig, first_index: int) -> dict:
    data = synth_task(cfg.synth, cfg.model.subsample_factor, first_index)
    prefix = _parent(cfg.paths.dataset)
    save_synth_dataset(prefix, data)
    rows, refs = [], []
    for rec in data.records:
        ids = [utterance_id(rec.seed, c) for c in range(len(rec.transcripts))]
        rows.append({"index": rec.seed, "delays": rec.delays, "speakers": rec.speakers,
                     "transcripts": rec.transcripts, "utterances": ids, "seed": rec.seed,
                     "features": prefix.name + ".bin"})
        refs.extend((u, t) for u, t in zip(ids, rec.transcripts))
    manifest = prefix.with_name(prefix.name + ".manifest.jsonl")
    _write_jsonl(manifest, rows)
    write_hypotheses(_parent(cfg.paths.references), [(u, _words(t)) for u, t in refs])
    return {"manifest": str(manifest), "mixtures": len(rows), "utterances": len(refs)}


def _read_sources(path) -> list:
    out = []
    base = Path(path).parent
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        utt = read_wav(base / row["path"])
        out.append(SourceUtterance(utt.samples, utt.rate, str(row["speaker"]),
                                   row.get("transcript", ""), row.get("id", row["path"])))
    return out


def _simulate_audio(cfg: ExperimentConfig) -> dict:
    if cfg.paths.sources is None:
        raise CommandError("audio simulation needs paths.sources (JSON-lines of source WAVs)")
    mix_cfg = cfg.mix
    pool = _read_sources(cfg.paths.sources)
    speakers = sorted({u.speaker for u in pool})
    if len(speakers) < mix_cfg.speakers_per_mix:
        raise CommandError(f"{len(speakers)} speakers available, {mix_cfg.speakers_per_mix} needed")
    out_dir = Path(cfg.paths.dataset)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    rows, refs = [], []
    for i in range(mix_cfg.num_mixtures):
        rng = np.random.default_rng([mix_cfg.seed, i])
        chosen = rng.choice(len(speakers), size=mix_cfg.speakers_per_mix, replace=False)
        sources = []
        for k in chosen:
            own = [u for u in pool if u.speaker == speakers[k]]
            sources.append(own[int(rng.integers(len(own)))])
        if any(s.rate != mix_cfg.rate for s in sources):
            raise CommandError(f"sources must be sampled at {mix_cfg.rate} Hz")
        lo, hi = mix_cfg.delay_seconds
        delays = [0] + [int(round(rng.uniform(lo, hi) * mix_cfg.rate)) for _ in sources[1:]]
        rec = mix(sources, delays, mix_cfg.snr_db, seed=int(rng.integers(2 ** 31)))
        peak = float(np.max(np.abs(rec.mixture), initial=0.0))
        gain = 1.0 if peak <= 1.0 else 0.99 / peak
        mix_id = f"mix{i:05d}"
        mix_path = out_dir / "wav" / f"{mix_id}.wav"
        write_wav(mix_path, rec.mixture * gain, mix_cfg.rate)
        enroll_paths, ids = [], []
        for c, src in enumerate(sources):
            enr = make_enrollment(pool, src.speaker, mix_cfg.enroll_seconds,
                                  seed=int(rng.integers(2 ** 31)), exclude=[src.utt_id])
            p = out_dir / "wav" / f"{mix_id}-spk{c}-enroll.wav"
            write_wav(p, enr.samples, mix_cfg.rate)
            enroll_paths.append(str(p.relative_to(out_dir)))
            ids.append(utterance_id(i, c))
            refs.append((ids[-1], src.transcript))
        rows.append({"index": i, "mixture": str(mix_path.relative_to(out_dir)), "gain": gain,
                     "delays": delays, "speakers": [s.speaker for s in sources],
                     "sources": [s.utt_id for s in sources],
                     "transcripts": [s.transcript for s in sources], "utterances": ids,
                     "enrollments": enroll_paths, "seed": [mix_cfg.seed, i]})
    manifest = out_dir / "manifest.jsonl"
    _write_jsonl(manifest, rows)
    write_hypotheses(_parent(cfg.paths.references), [(u, t.split()) for u, t in refs])
    return {"manifest": str(manifest), "mixtures": len(rows), "utterances": len(refs)}


# --------------------------------------------------------------------------
# build-bias

def _group_by_mixture(utt_ids) -> dict:
    groups: dict = {}
    for u in utt_ids:
        key = u.rsplit("-spk", 1)[0] if "-spk" in u else u
        groups.setdefault(key, []).append(u)
    return groups


def cmd_build_bias(cfg: ExperimentConfig, args) -> dict:
    bias = cfg.bias
    refs = read_text_map(cfg.paths.references)
    corpus = read_text_map(cfg.paths.corpus) if cfg.paths.corpus else refs
    table = biasing.build_frequency_table(corpus.values(), bias.unit)
    pool = table.rare_set(bias.common_set_size)
    out_dir = Path(cfg.paths.lists)
    out_dir.mkdir(parents=True, exist_ok=True)
    table.save(out_dir / "frequency.tsv")
    biasing.write_list(out_dir / "pool.txt", pool)
    written = 0
    for group in _group_by_mixture(sorted(refs)).values():
        rare = {u: biasing.extract_rare(refs[u], table, bias.common_set_size) for u in group}
        for u in group:
            # the target's own block comes first; other speakers follow in slot order
            order = [u] + [v for v in group if v != u]
            per_speaker = [rare[v] for v in order]
            seed = [bias.seed, written]
            phrases = biasing.assemble_list(per_speaker, pool, bias.list_size, bias.scope,
                                            seed=int(np.random.default_rng(seed).integers(2 ** 31)))
            biasing.write_list(out_dir / f"{u}.txt", phrases)
            written += 1
    return {"lists": written, "pool": len(pool), "directory": str(out_dir)}


# --------------------------------------------------------------------------
# train / decode

def _synth_only(cfg: ExperimentConfig, what: str) -> None:
    if cfg.task != "synth":
        raise CommandError(f"{what} supports the synthetic feature task only")


def _rare_pool(cfg: ExperimentConfig, data) -> list:
    pool_file = Path(cfg.paths.lists) / "pool.txt"
    if not pool_file.exists():
        return data.rare_tokens
    try:
        return [int(u) for u in biasing.read_list(pool_file)]
    except ValueError as exc:
        raise CommandError(f"{pool_file}: synthetic pools hold token ids") from exc


def cmd_train(cfg: ExperimentConfig, args) -> dict:
    _synth_only(cfg, "train")
    data = load_synth_dataset(cfg.paths.dataset)
    examples = examples_from_dataset(data)
    if not examples:
        raise CommandError("training set is empty")
    torch.set_num_threads(1)
    model = CalmModel(cfg.model, seed=cfg.optim.seed)
    log_file = open(args.log, "w", encoding="utf-8") if args.log else sys.stdout

    def log(rec):
        log_file.write(json.dumps(rec, sort_keys=True) + "\n")
        log_file.flush()

    try:
        history = train(model, examples, _rare_pool(cfg, data), cfg.optim, cfg.loss,
                        cfg.bias.train_list_range, log)
    finally:
        if log_file is not sys.stdout:
            log_file.close()
    save_model(model, cfg.paths.checkpoint, {"steps": len(history)})
    return {"checkpoint": cfg.paths.checkpoint, "steps": len(history)}


def _phrases(path: Path) -> list:
    if not path.exists():
        return []
    try:
        return [[int(t) for t in line.split()] for line in biasing.read_list(path)]
    except ValueError as exc:
        raise CommandError(f"{path}: synthetic list entries must be token ids") from exc


def cmd_decode(cfg: ExperimentConfig, args) -> dict:
    _synth_only(cfg, "decode")
    model, _ = load_model(cfg.paths.checkpoint)
    data = load_synth_dataset(cfg.paths.dataset)
    examples = examples_from_dataset(data)
    M = model.cfg.static_vocab
    lists_dir = Path(cfg.paths.lists)
    lists = [[] if cfg.bias.list_size == 0 else _phrases(lists_dir / f"{e.utt_id}.txt")
             for e in examples]
    if args.wrong_speaker and any(e.wrong_enrollment is None for e in examples):
        raise CommandError("--wrong-speaker needs multi-speaker mixtures")
    grids = posterior_grids(model, examples, lists, cfg.decode.mu, args.wrong_speaker) \
        if examples else []
    out, dyn_tokens, dyn_frames = [], 0, 0
    for e, grid, phrases in zip(examples, grids, lists):
        hyp = decode(grid, cfg.decode, phrases, M)
        dyn_tokens += sum(t >= M for t in hyp.tokens)
        dyn_frames += int((grid.argmax(1) >= M).sum())
        out.append((e.utt_id, _words(hyp.surface)))
    write_hypotheses(_parent(cfg.paths.hypotheses), out)
    return {"hypotheses": cfg.paths.hypotheses, "utterances": len(out), "mu": cfg.decode.mu,
            "dynamic_tokens": dyn_tokens, "dynamic_frames": dyn_frames}


# --------------------------------------------------------------------------
# score

def cmd_score(cfg: ExperimentConfig, args) -> dict:
    refs = read_text_map(cfg.paths.references)
    hyps = read_text_map(cfg.paths.hypotheses)
    lists_dir = Path(cfg.paths.lists)
    # biased units come from the list files even when decoding ran without lists
    lists = {u: biasing.read_list(lists_dir / f"{u}.txt") for u in refs
             if (lists_dir / f"{u}.txt").exists()}
    report = score_corpus(refs, hyps, lists, cfg.bias.unit, args.casefold, args.strip_punct)
    _parent(cfg.paths.report).write_text(report.to_json() + "\n")
    return report.as_dict()


COMMANDS = {
    "simulate": cmd_simulate,
    "build-bias": cmd_build_bias,
    "train": cmd_train,
    "decode": cmd_decode,
    "score": cmd_score,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config (default: $CALM_CONFIG or built-in)")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config field by dotted path")
    common.add_argument("--seed", type=int, help="set every seed in the config")
    common.add_argument("--save-config", help="write the resolved config here")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="calm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", parents=[common], help="generate mixtures")
    p.add_argument("--first-index", type=int, default=0,
                   help="first mixture stream index (use num_mixtures for a held-out split)")
    sub.add_parser("build-bias", parents=[common], help="frequency table and bias lists")
    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--log", help="write JSON-lines step log here instead of stdout")
    p = sub.add_parser("decode", parents=[common], help="decode a dataset")
    p.add_argument("--wrong-speaker", action="store_true",
                   help="condition on the other speaker's enrollment")
    p = sub.add_parser("score", parents=[common], help="U/B-decomposed error rates")
    p.add_argument("--casefold", action="store_true")
    p.add_argument("--strip-punct", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.save_config:
            cfg.save(args.save_config)
        summary = COMMANDS[args.command](cfg, args)
    except (CommandError, ConfigError, TrainingError, ValueError, OSError, KeyError) as exc:
        print(f"calm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"command": args.command, **summary}, sort_keys=True), file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
