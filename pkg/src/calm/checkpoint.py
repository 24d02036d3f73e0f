"""Tensor persistence: a JSON manifest (name, shape, byte offset) next to one
little-endian float64 blob.  Used for model checkpoints and feature-domain
datasets; loading is bit-exact.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import ModelConfig, SynthConfig
from .mixsim import MixtureRecord, SynthDataset

FORMAT = "calm-tensors"
DTYPE = "<f8"


def _paths(prefix):
    prefix = Path(prefix)
    return prefix.with_name(prefix.name + ".json"), prefix.with_name(prefix.name + ".bin")


def save_tensors(prefix, tensors: dict, meta: Optional[dict] = None) -> None:
    manifest_path, blob_path = _paths(prefix)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(blob_path, "wb") as f:
        for name, value in tensors.items():
            arr = np.array(value, dtype=DTYPE, order="C")
            f.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    manifest = {"format": FORMAT, "version": 1, "dtype": DTYPE, "blob": blob_path.name,
                "tensors": entries, "meta": meta or {}}
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_tensors(prefix):
    manifest_path, _ = _paths(prefix)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{manifest_path}: not a {FORMAT} manifest")
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    out = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype=DTYPE, count=n, offset=e["offset"])
        out[e["name"]] = arr.reshape(tuple(e["shape"])).astype(np.float64)
    return out, manifest["meta"]


def save_model(model, prefix, extra: Optional[dict] = None) -> None:
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"model_config": dataclasses.asdict(model.cfg)}
    meta.update(extra or {})
    save_tensors(prefix, tensors, meta)


def load_model(prefix):
    from .model import CalmModel

    tensors, meta = load_tensors(prefix)
    model = CalmModel(ModelConfig(**meta["model_config"]))
    state = {k: torch.from_numpy(v.copy()) for k, v in tensors.items()}
    model.load_state_dict(state)
    return model, meta


def save_synth_dataset(prefix, data: SynthDataset) -> None:
    tensors = {"identities": data.identities}
    records = []
    for i, rec in enumerate(data.records):
        key = f"rec{i}"
        tensors[f"{key}/mixture"] = rec.mixture
        tensors[f"{key}/masks"] = rec.masks
        tensors[f"{key}/sources"] = rec.sources
        tensors[f"{key}/noise"] = rec.noise
        for c, enr in enumerate(rec.enrollments):
            tensors[f"{key}/enroll{c}"] = enr
        for c, v in enumerate(rec.vad):
            tensors[f"{key}/vad{c}"] = v
        records.append({"delays": rec.delays, "speakers": rec.speakers,
                        "transcripts": rec.transcripts, "seed": rec.seed})
    save_tensors(prefix, tensors, {"synth_config": dataclasses.asdict(data.config),
                                   "records": records})


def load_synth_dataset(prefix) -> SynthDataset:
    tensors, meta = load_tensors(prefix)
    cfg_dict = dict(meta["synth_config"])
    cfg_dict["delay_range"] = tuple(cfg_dict["delay_range"])
    cfg = SynthConfig(**cfg_dict)
    records = []
    for i, info in enumerate(meta["records"]):
        key = f"rec{i}"
        C = len(info["speakers"])
        records.append(MixtureRecord(
            tensors[f"{key}/mixture"], tensors[f"{key}/masks"], tensors[f"{key}/sources"],
            tensors[f"{key}/noise"], info["delays"], info["speakers"], info["transcripts"],
            [tensors[f"{key}/enroll{c}"] for c in range(C)],
            [tensors[f"{key}/vad{c}"] for c in range(C)], info["seed"],
        ))
    return SynthDataset(cfg, tensors["identities"], records)
