"""Training loop: determinism, no-op conditions, checkpoint selection, separability."""

import json
import math

import numpy as np
import pytest

from speckvet.dataset import FrameRecord, SpeckleDataset
from speckvet.model import EmbeddingNet, EmbeddingNetConfig, embed
from speckvet.optim import init_adam
from speckvet.simulate import DetectorGeometry
from speckvet.train import fit, train_epoch, validation_loss
from speckvet.triplet import TrainerConfig

GEOM = DetectorGeometry()

TOY_CONFIG = EmbeddingNetConfig(
    input_size=96, conv1_out_channels=8, conv2_out_channels=16,
    fc_hidden=64, embedding_dim=32)


def blob_image(rng, center, amplitude):
    yy, xx = np.mgrid[0:96, 0:96].astype(np.float32)
    bump = amplitude * np.exp(-(((yy - center[0]) ** 2 + (xx - center[1]) ** 2) / (2 * 12.0 ** 2)))
    return bump + rng.normal(0.0, 0.5, (96, 96)).astype(np.float32)


def toy_dataset(n_per_class, seed):
    # Overlapping noisy blob families: separable, but not at initialization.
    rng = np.random.default_rng(seed)
    frames, records = [], []
    for cls, (sample, center) in enumerate((("s_one", (42, 42)), ("s_two", (54, 54)))):
        for k in range(n_per_class):
            frames.append(blob_image(rng, center, float(rng.uniform(0.5, 1.5))))
            i = len(records)
            records.append(FrameRecord(
                label=f"class_{cls}", hit_multiplicity=1, sample_id=sample,
                fluence_factor=1.0, frame_id=f"src_{i:06d}", lineage=f"src_{i:06d}"))
    n = len(records)
    return SpeckleDataset(
        frames=np.stack(frames), masks=np.ones((n, 96, 96), bool),
        records=records, geometry=GEOM, seed=seed)


def snapshot(model):
    return {k: v.data.copy() for k, v in model.named_parameters().items()}


def params_equal(a, b):
    return all(np.array_equal(a[k], b[k]) for k in a)


class TestTrainEpoch:
    def test_zero_learning_rate_leaves_parameters_unchanged(self):
        model = EmbeddingNet(TOY_CONFIG, seed=1)
        ds = toy_dataset(6, seed=2)
        before = snapshot(model)
        state = init_adam(model.named_parameters(), learning_rate=0.0)
        metrics = train_epoch(model, ds, TrainerConfig(batch_size=12, epochs=1, seed=3), state)
        assert metrics.n_triplets > 0
        assert params_equal(before, snapshot(model))

    def test_zero_mined_epoch_flags_and_leaves_model_alone(self):
        model = EmbeddingNet(TOY_CONFIG, seed=4)
        ds = toy_dataset(4, seed=5)
        for i, r in enumerate(ds.records):
            r.sample_id = f"unique_{i}"  # no co-sample pairs anywhere
        before = snapshot(model)
        state = init_adam(model.named_parameters())
        metrics = train_epoch(model, ds, TrainerConfig(batch_size=8, epochs=1, seed=6), state)
        assert metrics.zero_mined
        assert metrics.n_triplets == 0
        assert math.isnan(metrics.mean_loss)
        assert params_equal(before, snapshot(model))
        assert state.step_count == 0

    def test_same_seed_identical_metrics(self):
        runs = []
        for _ in range(2):
            model = EmbeddingNet(TOY_CONFIG, seed=7)
            ds = toy_dataset(6, seed=8)
            state = init_adam(model.named_parameters())
            cfg = TrainerConfig(batch_size=12, epochs=1, seed=9)
            runs.append([train_epoch(model, ds, cfg, state, epoch=e) for e in range(2)])
        for ma, mb in zip(*runs):
            assert ma == mb

    def test_updates_move_parameters(self):
        model = EmbeddingNet(TOY_CONFIG, seed=10)
        ds = toy_dataset(6, seed=11)
        before = snapshot(model)
        state = init_adam(model.named_parameters())
        metrics = train_epoch(model, ds, TrainerConfig(batch_size=12, epochs=1, seed=12), state)
        assert metrics.batches_with_triplets > 0
        assert not params_equal(before, snapshot(model))
        assert state.step_count == metrics.batches_with_triplets


class TestValidationLoss:
    def test_zero_mined_validation_is_infinite(self):
        model = EmbeddingNet(TOY_CONFIG, seed=13)
        ds = toy_dataset(3, seed=14)
        for i, r in enumerate(ds.records):
            r.sample_id = f"unique_{i}"
        loss, count = validation_loss(model, ds, margin=1.0)
        assert math.isinf(loss)
        assert count == 0

    def test_empty_split_is_infinite(self):
        model = EmbeddingNet(TOY_CONFIG, seed=15)
        ds = toy_dataset(3, seed=16).subset([])
        assert validation_loss(model, ds, margin=1.0) == (math.inf, 0)

    def test_value_is_nonnegative_and_deterministic(self):
        model = EmbeddingNet(TOY_CONFIG, seed=17)
        ds = toy_dataset(5, seed=18)
        a = validation_loss(model, ds, margin=1.0)
        b = validation_loss(model, ds, margin=1.0)
        assert a == b
        assert a[0] >= 0.0
        # 5 per class: 5*4 ordered same-sample pairs, 5 negatives, 2 classes
        assert a[1] == 2 * 5 * 4 * 5


class TestFit:
    def test_separates_toy_families(self, tmp_path):
        model = EmbeddingNet(TOY_CONFIG, seed=20)
        train_ds = toy_dataset(10, seed=21)
        val_ds = toy_dataset(4, seed=22)
        held_out = toy_dataset(4, seed=23)
        cfg = TrainerConfig(batch_size=20, epochs=5, seed=24)
        result = fit(model, train_ds, val_ds, cfg,
                     checkpoint_path=tmp_path / "toy.ckpt")
        losses = [m.mean_loss for m in result.history]
        assert losses[-1] < losses[0]
        emb = embed(model, held_out.frames)
        labels = np.array(held_out.labels)
        within, between = [], []
        for i in range(len(emb)):
            for j in range(i + 1, len(emb)):
                d = float(np.sum((emb[i] - emb[j]) ** 2))
                (within if labels[i] == labels[j] else between).append(d)
        assert np.mean(within) < np.mean(between)

    def test_best_checkpoint_written_and_restored(self, tmp_path):
        model = EmbeddingNet(TOY_CONFIG, seed=25)
        train_ds = toy_dataset(6, seed=26)
        val_ds = toy_dataset(3, seed=27)
        cfg = TrainerConfig(batch_size=12, epochs=3, seed=28)
        ckpt = tmp_path / "best.ckpt"
        metrics_path = tmp_path / "metrics.jsonl"
        result = fit(model, train_ds, val_ds, cfg,
                     checkpoint_path=ckpt, metrics_path=metrics_path)
        assert ckpt.exists()
        assert result.best_epoch >= 0
        assert result.best_val_loss == min(m.val_loss for m in result.history)
        from speckvet.checkpoint import load_checkpoint
        best = load_checkpoint(ckpt)
        assert best.checkpoint_metadata["epoch"] == result.best_epoch
        live = snapshot(model)
        saved = {k: v.data for k, v in best.named_parameters().items()}
        assert params_equal(live, saved)

    def test_metrics_file_is_line_delimited_json(self, tmp_path):
        model = EmbeddingNet(TOY_CONFIG, seed=29)
        cfg = TrainerConfig(batch_size=12, epochs=2, seed=31)
        metrics_path = tmp_path / "metrics.jsonl"
        fit(model, toy_dataset(6, seed=30), toy_dataset(3, seed=32), cfg,
            metrics_path=metrics_path)
        lines = metrics_path.read_text().strip().split("\n")
        assert len(lines) == 2
        for epoch, line in enumerate(lines):
            record = json.loads(line)
            assert record["epoch"] == epoch
            assert {"mean_loss", "n_triplets", "val_loss", "candidate_counts"} <= set(record)
