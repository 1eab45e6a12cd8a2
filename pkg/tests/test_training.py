import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from cardiac_meshgen.losses import chamfer_distance
from cardiac_meshgen.model import load_checkpoint, read_sidecar
from cardiac_meshgen.toy import (Dataset, ToyGeneratorParams, assign_splits, synth_population, synth_subject,
                                 write_dataset)
from cardiac_meshgen.training import (LOG_COLUMNS, DatasetError, LossFunction, TrainConfig, TrainingDiverged,
                                      directory_digest, evaluate_items, evaluate_loss, init_model, read_log, train)

from conftest import REFERENCE, SMALL_TOY, small_model_config


def _train(ds, out, **kw):
    return train(ds, small_model_config(), TrainConfig(**{"epochs": 2, **kw}), out)


def test_epochs_zero_is_initial_model(small_dataset, tmp_path):
    result = _train(small_dataset, tmp_path, epochs=0)
    ds = Dataset.open(small_dataset)
    fresh = init_model(ds.split("train"), small_model_config(), seed=0)
    assert evaluate_loss(result.final_checkpoint, ds, "val") == evaluate_loss(fresh, ds, "val")
    rows = read_log(result.log_path)
    assert [(r["epoch"], r["split"]) for r in rows] == [(0, "train"), (0, "val")]
    assert read_sidecar(result.final_checkpoint)["training"]["epochs_completed"] == 0


def test_zero_learning_rate_keeps_weights(small_dataset, tmp_path):
    result = _train(small_dataset, tmp_path, learning_rate=0.0)
    ds = Dataset.open(small_dataset)
    fresh = init_model(ds.split("train"), small_model_config(), seed=0)
    trained = load_checkpoint(result.final_checkpoint)
    for (k, a), (_, b) in zip(fresh.state_dict().items(), trained.state_dict().items()):
        assert torch.equal(a, b), k


def test_training_is_deterministic(small_dataset, tmp_path):
    a = read_log(_train(small_dataset, tmp_path / "a").log_path)
    b = read_log(_train(small_dataset, tmp_path / "b").log_path)
    assert len(a) == len(b) == 6
    for ra, rb in zip(a, b):
        for k in LOG_COLUMNS[2:]:
            assert ra[k] == pytest.approx(rb[k], abs=1e-6)
    wa = (tmp_path / "a" / "checkpoint_final" / "weights.safetensors").read_bytes()
    wb = (tmp_path / "b" / "checkpoint_final" / "weights.safetensors").read_bytes()
    assert wa == wb


def test_log_schema(small_dataset, tmp_path):
    result = _train(small_dataset, tmp_path)
    header = result.log_path.read_text().splitlines()[0]
    assert header == ",".join(LOG_COLUMNS)
    rows = read_log(result.log_path)
    for r in rows:
        assert r["total"] == pytest.approx(r["reconstruction"] + r["kl"] + r["smoothing"])


def test_training_does_not_touch_dataset(small_dataset, tmp_path):
    before = directory_digest(small_dataset)
    _train(small_dataset, tmp_path)
    assert directory_digest(small_dataset) == before


def test_checkpoint_round_trip_preserves_loss(small_dataset, tmp_path):
    result = _train(small_dataset, tmp_path)
    ds = Dataset.open(small_dataset)
    model = load_checkpoint(result.final_checkpoint)
    direct = evaluate_loss(model, ds, "val")
    reloaded = evaluate_loss(result.final_checkpoint, ds, "val")
    assert abs(direct.total - reloaded.total) <= 1e-6
    assert evaluate_loss(result.final_checkpoint, ds, "val") == reloaded


def test_best_checkpoint_tracks_validation(small_dataset, tmp_path):
    result = _train(small_dataset, tmp_path, epochs=3)
    rows = [r for r in read_log(result.log_path) if r["split"] == "val"]
    best_epoch = read_sidecar(result.best_checkpoint)["training"]["epochs_completed"]
    assert best_epoch == min(rows, key=lambda r: r["total"])["epoch"]


def test_periodic_checkpoints(small_dataset, tmp_path):
    _train(small_dataset, tmp_path, epochs=2, checkpoint_every=1)
    assert (tmp_path / "checkpoint_epoch_0001").is_dir()
    assert (tmp_path / "checkpoint_epoch_0002").is_dir()


def test_evaluate_loss_unknown_split(small_dataset, tmp_path):
    result = _train(small_dataset, tmp_path, epochs=0)
    with pytest.raises(KeyError, match="split"):
        evaluate_loss(result.final_checkpoint, small_dataset, "holdout")


class _Passthrough(torch.nn.Module):
    """Harness whose 'reconstruction' is the ground-truth input."""

    def __init__(self, inner):
        super().__init__()
        self.inner = inner
        self.faces, self.labels = inner.faces, inner.labels

    def check_sequence(self, seq):
        self.inner.check_sequence(seq)

    def forward(self, x, conditions, sample=True, generator=None):
        _, st = self.inner(x, conditions, sample=sample, generator=generator)
        return x.clone(), st


def test_perfect_autoencoder_has_zero_reconstruction(small_dataset):
    ds = Dataset.open(small_dataset)
    stub = _Passthrough(init_model(ds.split("train"), small_model_config(), seed=0))
    assert evaluate_loss(stub, ds, "val").reconstruction == 0.0


def test_split_mean_is_mean_of_subjects(small_dataset):
    ds = Dataset.open(small_dataset)
    model = init_model(ds.split("train"), small_model_config(), seed=0)
    items = ds.split("val")
    assert len(items) == 2
    loss_fn = LossFunction(model.faces, model.labels)
    per = evaluate_items(model, items, loss_fn)
    mean = evaluate_loss(model, ds, "val")
    assert mean.total == pytest.approx((per[0].total + per[1].total) / 2, rel=1e-12)
    assert mean.reconstruction == pytest.approx((per[0].reconstruction + per[1].reconstruction) / 2, rel=1e-12)


def test_topology_mismatch_is_dataset_error(tmp_path):
    a = synth_population(2, 1, {"healthy": 1.0}, SMALL_TOY)
    b = synth_population(2, 2, {"healthy": 1.0}, replace(SMALL_TOY, frequency=2))
    items = a + [(replace(r, id=f"b{r.id}"), s) for r, s in b]
    write_dataset(tmp_path / "ds", items, ["train"] * 4)
    with pytest.raises(DatasetError, match="topology"):
        train(tmp_path / "ds", small_model_config(), TrainConfig(epochs=1), tmp_path / "out")


def test_non_finite_loss_aborts(small_dataset, tmp_path, monkeypatch):
    original = LossFunction.__call__

    def poisoned(self, recon, target, mu, logvar):
        total, br = original(self, recon, target, mu, logvar)
        if recon.requires_grad:
            br = replace(br, total=math.nan)
        return total, br

    monkeypatch.setattr(LossFunction, "__call__", poisoned)
    with pytest.raises(TrainingDiverged, match="step 0"):
        _train(small_dataset, tmp_path)


def test_gradient_clip_is_logged(small_dataset, tmp_path, caplog):
    caplog.set_level("INFO", logger="cardiac_meshgen.training")
    _train(small_dataset, tmp_path, epochs=1, grad_clip=1e-6)
    assert "clipped" in caplog.text


def test_overfit_single_subject(tmp_path):
    """Default network and toy resolution: 200 steps on one subject halve the Chamfer loss."""
    seq = synth_subject(REFERENCE, "healthy", ToyGeneratorParams(seed=4))
    items = [(r, seq) for r, _ in synth_population(1, 0, {"healthy": 1.0}, SMALL_TOY)]
    write_dataset(tmp_path / "one", items, ["train"])
    from cardiac_meshgen.model import ModelConfig
    result = train(tmp_path / "one", ModelConfig(), TrainConfig(epochs=200, seed=0), tmp_path / "out")
    rows = [r for r in read_log(result.log_path) if r["split"] == "train"]
    assert rows[-1]["reconstruction"] <= 0.5 * rows[0]["reconstruction"]
    model = load_checkpoint(result.final_checkpoint)
    x = torch.as_tensor(seq.vertices)
    fresh = init_model(items, ModelConfig(), seed=0)
    before = chamfer_distance(torch.as_tensor(fresh.reconstruct(seq)), x).mean().item()
    after = chamfer_distance(torch.as_tensor(model.reconstruct(seq)), x).mean().item()
    assert after <= 0.5 * before
