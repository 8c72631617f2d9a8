#!/usr/bin/env python3
"""
Training engine tests on the miniature experiment.

Covers:
1. Per-step random streams and batch targets
2. Byte-identical checkpoints for repeated runs
3. Resume replaying the uninterrupted run
4. Adversarial phase: frozen SNet-s and the adv_weight = 0 reduction
5. Checkpoint compatibility errors
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from conftest import tiny_spec
from bowda.boundary import distance_array
from bowda.dataset import prepare_data
from bowda.errors import ConfigMismatchError
from bowda.pipeline import Batch
from bowda.tensornet.checkpoint import load_checkpoint
from bowda.trainer import (
    TrainingEngine,
    batch_distance_maps,
    batch_weight_maps,
    infer_volume,
    step_rng,
    steps_per_epoch,
)


@pytest.fixture(scope="module")
def data():
    return prepare_data(tiny_spec())


def _engine(spec, path) -> TrainingEngine:
    return TrainingEngine(spec, path, workers=1, progress=False)


def _snet_blobs(path):
    return load_checkpoint(path).section("snet")


def _same_blobs(a, b) -> bool:
    return list(a) == list(b) and all(np.array_equal(a[k], b[k]) for k in a)


# ── Streams and batch targets ──

def test_step_streams_are_independent():
    a = step_rng(0, "target", "batch", 1, 2).random(4)
    assert np.array_equal(a, step_rng(0, "target", "batch", 1, 2).random(4))
    assert not np.array_equal(a, step_rng(0, "target", "dropout", 1, 2).random(4))
    assert not np.array_equal(a, step_rng(0, "source", "batch", 1, 2).random(4))
    assert not np.array_equal(a, step_rng(0, "target", "batch", 1, 3).random(4))


def test_steps_per_epoch():
    spec = tiny_spec()
    assert steps_per_epoch(spec, 10) == 2
    spec = tiny_spec(epochs__steps_per_epoch=None, sgd__batch_size=4)
    assert steps_per_epoch(spec, 10) == 3
    assert steps_per_epoch(spec, 0) == 1


def _toy_batch() -> Batch:
    labels = np.zeros((2, 1, 4, 6, 6), dtype=np.float32)
    labels[1, 0, 1:3, 2:4, 2:4] = 1.0
    return Batch(images=labels.copy(), labels=labels, spacings=[(1.0, 1.0, 1.0), (2.0, 1.0, 1.0)], cases=[0, 1])


def test_batch_distance_maps():
    batch = _toy_batch()
    maps = batch_distance_maps(batch, workers=2)
    assert maps.shape == (2, 1, 4, 6, 6)
    assert not maps[0].any(), "samples without a boundary get a zero map"
    expected = distance_array(batch.labels[1, 0] > 0.5, (2.0, 1.0, 1.0))
    assert np.allclose(maps[1, 0], expected)


def test_batch_weight_maps():
    maps = batch_weight_maps(_toy_batch())
    assert maps.shape == (2, 1, 4, 6, 6) and maps.dtype == np.float64
    assert not maps[0].any()
    assert maps[1].max() > 0 and maps.min() >= 0


# ── Supervised phases ──

@pytest.mark.slow
def test_repeated_runs_write_identical_checkpoints(tmp_path, data):
    spec = tiny_spec()
    a = _engine(spec, tmp_path / "a").train_source(data.source)
    b = _engine(spec, tmp_path / "b").train_source(data.source)
    assert a.last_path.read_bytes() == b.last_path.read_bytes()
    assert len(a.log) == spec.epochs.steps_per_epoch * spec.epochs.source
    assert {"step", "epoch", "loss", "lr"} <= set(a.log.columns)


@pytest.mark.slow
def test_resume_replays_the_uninterrupted_run(tmp_path, data):
    spec = tiny_spec(epochs__source=2)
    full = _engine(spec, tmp_path / "full").train_source(data.source)

    _engine(tiny_spec(epochs__source=1), tmp_path / "split").train_source(data.source)
    engine = _engine(spec, tmp_path / "split")
    resumed = engine.train_source(data.source, resume_from=tmp_path / "split" / "snet_s.ckpt")

    assert any(msg.startswith("resumed source") for msg in engine.logs)
    assert resumed.state.epoch == full.state.epoch == 2
    assert resumed.last_path.read_bytes() == full.last_path.read_bytes()
    assert (tmp_path / "split" / "snet_s_log.csv").read_bytes() == (tmp_path / "full" / "snet_s_log.csv").read_bytes()


@pytest.mark.slow
def test_target_starts_as_exact_source_copy(tmp_path, data):
    engine = _engine(tiny_spec(), tmp_path)
    source = engine.train_source(data.source)
    snet_t = engine.init_target_from_source(source.best_path)
    assert _same_blobs(snet_t.state_dict(), source.net.state_dict())


def test_infer_volume_probabilities(tmp_path, data):
    spec = tiny_spec()
    net = _engine(spec, tmp_path).build_snet()
    image = data.target.val[0].image
    prob = infer_volume(net, image, spec)
    assert prob.dims == image.dims and prob.spacing == image.spacing
    assert prob.values.min() >= 0.0 and prob.values.max() <= 1.0


# ── Adversarial phase ──

@pytest.mark.slow
def test_adversarial_keeps_source_network_frozen(tmp_path, data):
    engine = _engine(tiny_spec(), tmp_path)
    snet_s, snet_t = engine.build_snet(), engine.build_snet()
    before = snet_s.state_dict()
    result = engine.train_adversarial(snet_s, snet_t, data.source, data.target)
    assert _same_blobs(snet_s.state_dict(), before)
    assert not _same_blobs(result.net.state_dict(), before), "SNet-t moved"

    ckpt = load_checkpoint(result.last_path)
    assert ckpt.meta["phase"] == "target"
    assert any(k.startswith("disc/") for k in ckpt.blobs)
    assert any(k.startswith("opt/disc/") for k in ckpt.blobs)
    assert "disc_loss" in result.log.columns


@pytest.mark.slow
def test_zero_adversarial_weight_reduces_to_supervised_training(tmp_path, data):
    spec = tiny_spec(adversarial__adv_weight=0.0, adversarial__seg_loss="bwsl")
    adv_engine = _engine(spec, tmp_path / "adv")
    adv = adv_engine.train_adversarial(adv_engine.build_snet(), adv_engine.build_snet(), data.source, data.target)

    sup_engine = _engine(spec, tmp_path / "sup")
    sup = sup_engine.train_target(sup_engine.build_snet(), data.target.train_pairs(), data.target, loss_kind="bwsl")

    assert _same_blobs(_snet_blobs(adv.last_path), _snet_blobs(sup.last_path))
    assert np.allclose(adv.log["loss"].to_numpy(), sup.log["loss"].to_numpy())


# ── Compatibility ──

@pytest.mark.slow
def test_checkpoint_compatibility_errors(tmp_path, data):
    engine = _engine(tiny_spec(), tmp_path)
    source = engine.train_source(data.source)

    wider = _engine(tiny_spec(snet__growth=3), tmp_path / "wider")
    with pytest.raises(ConfigMismatchError):
        wider.load_snet(source.best_path)

    with pytest.raises(ConfigMismatchError):
        engine.train_target(engine.build_snet(), data.target.train_pairs(), data.target,
                            resume_from=source.last_path)


def test_write_log(tmp_path):
    messages = []
    engine = TrainingEngine(tiny_spec(), tmp_path, log_callback=messages.append, progress=False)
    engine.log("one")
    engine.log("two")
    assert messages == ["one", "two"]
    assert engine.write_log().read_text(encoding="utf-8") == "one\ntwo\n"


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
