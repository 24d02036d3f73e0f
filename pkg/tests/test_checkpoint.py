import json

import numpy as np
import pytest
import torch

from calm.checkpoint import (load_model, load_synth_dataset, load_tensors, save_model,
                             save_synth_dataset, save_tensors)
from calm.config import ModelConfig, SynthConfig
from calm.mixsim import synth_task
from calm.model import CalmModel


def test_tensor_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.standard_normal((3, 4)), "b": np.array(1e-300), "c": np.zeros((0, 2))}
    save_tensors(tmp_path / "t", tensors, {"note": "x"})
    back, meta = load_tensors(tmp_path / "t")
    assert meta == {"note": "x"}
    for k, v in tensors.items():
        assert back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_foreign_manifest_rejected(tmp_path):
    (tmp_path / "t.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(ValueError):
        load_tensors(tmp_path / "t")


def test_model_round_trip(tmp_path):
    torch.manual_seed(0)
    cfg = ModelConfig(input_dim=6, enc_dim=5, emb_dim=3, bias_dim=4, static_vocab=5,
                      num_layers=3, tap_layers=[1, 2], decoder_dim=3)
    model = CalmModel(cfg)
    save_model(model, tmp_path / "m", {"epoch": 3})
    back, meta = load_model(tmp_path / "m")
    assert meta["epoch"] == 3 and back.cfg == cfg
    for (k, a), (k2, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert k == k2 and torch.equal(a, b)
    feats = torch.as_tensor(np.random.default_rng(1).standard_normal((1, 7, 6)))
    enroll = [np.ones((4, 6))]
    lists = [[[1], [2, 3]]]
    o1 = model(feats, torch.tensor([7]), enroll, lists)
    o2 = back(feats, torch.tensor([7]), enroll, lists)
    assert torch.equal(o1.final_grid, o2.final_grid)


def test_dataset_round_trip(tmp_path):
    data = synth_task(SynthConfig(num_mixtures=4), subsample=2)
    save_synth_dataset(tmp_path / "d", data)
    back = load_synth_dataset(tmp_path / "d")
    assert back.config == data.config
    assert np.array_equal(back.identities, data.identities)
    for a, b in zip(data.records, back.records):
        assert np.array_equal(a.mixture, b.mixture) and np.array_equal(a.masks, b.masks)
        assert a.transcripts == b.transcripts and a.speakers == b.speakers
        assert all(np.array_equal(x, y) for x, y in zip(a.enrollments, b.enrollments))
        assert all(np.array_equal(x, y) for x, y in zip(a.vad, b.vad))
        assert np.array_equal(b.reconstruct(), b.mixture)
