"""Checkpoint file format: bit-exact round trips and corruption detection."""

import json

import numpy as np
import pytest

from speckvet.checkpoint import (
    CheckpointError,
    FORMAT_VERSION,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
)
from speckvet.model import build_embedding_net, embed


@pytest.fixture
def trained_ish_net():
    # Push the running stats away from their init values so the round trip
    # exercises buffers as well as parameters.
    net = build_embedding_net(seed=21)
    frames = np.random.default_rng(22).random((4, 96, 96), dtype=np.float32)
    embed(net, frames, mode="train")
    return net


class TestRoundTrip:
    def test_parameters_and_buffers_bit_exact(self, trained_ish_net, tmp_path):
        path = tmp_path / "net.ckpt"
        save_checkpoint(trained_ish_net, path)
        loaded = load_checkpoint(path)
        src_params = trained_ish_net.named_parameters()
        for name, param in loaded.named_parameters().items():
            assert np.array_equal(param.data, src_params[name].data), name
        src_bufs = trained_ish_net.named_buffers()
        for name, buf in loaded.named_buffers().items():
            assert np.array_equal(buf, src_bufs[name]), name

    def test_embeddings_identical_after_reload(self, trained_ish_net, tmp_path):
        path = tmp_path / "net.ckpt"
        save_checkpoint(trained_ish_net, path)
        loaded = load_checkpoint(path)
        frames = np.random.default_rng(23).random((3, 96, 96), dtype=np.float32)
        assert np.array_equal(embed(trained_ish_net, frames), embed(loaded, frames))

    def test_metadata_round_trips(self, trained_ish_net, tmp_path):
        path = tmp_path / "net.ckpt"
        meta = {"epoch": 12, "val_loss": 0.25, "note": "best so far"}
        save_checkpoint(trained_ish_net, path, metadata=meta)
        assert load_checkpoint(path).checkpoint_metadata == meta
        assert read_manifest(path)["metadata"] == meta

    def test_save_leaves_no_temp_file(self, trained_ish_net, tmp_path):
        save_checkpoint(trained_ish_net, tmp_path / "net.ckpt")
        assert [p.name for p in tmp_path.iterdir()] == ["net.ckpt"]

    def test_config_round_trips(self, trained_ish_net, tmp_path):
        path = tmp_path / "net.ckpt"
        save_checkpoint(trained_ish_net, path)
        assert load_checkpoint(path).config == trained_ish_net.config


def rewrite_manifest(path, mutate):
    raw = path.read_bytes()
    line, blob = raw.split(b"\n", 1)
    manifest = json.loads(line)
    mutate(manifest)
    path.write_bytes(json.dumps(manifest).encode() + b"\n" + blob)


class TestCorruptionDetection:
    def test_truncated_blob_rejected(self, trained_ish_net, tmp_path):
        path = tmp_path / "net.ckpt"
        save_checkpoint(trained_ish_net, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-100])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_non_checkpoint_file_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"{\"hello\": 1}\nnot weights")
        with pytest.raises(CheckpointError, match="not a"):
            load_checkpoint(path)

    def test_binary_garbage_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(bytes(range(256)) * 4 + b"\n")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_future_version_rejected(self, trained_ish_net, tmp_path):
        path = tmp_path / "net.ckpt"
        save_checkpoint(trained_ish_net, path)
        rewrite_manifest(path, lambda m: m.update(format_version=FORMAT_VERSION + 1))
        with pytest.raises(CheckpointError, match="format_version"):
            load_checkpoint(path)

    def test_unknown_model_kind_rejected(self, trained_ish_net, tmp_path):
        path = tmp_path / "net.ckpt"
        save_checkpoint(trained_ish_net, path)
        rewrite_manifest(path, lambda m: m.update(model_kind="mystery"))
        with pytest.raises(CheckpointError, match="mystery"):
            load_checkpoint(path)

    def test_shape_mismatch_rejected(self, trained_ish_net, tmp_path):
        path = tmp_path / "net.ckpt"
        save_checkpoint(trained_ish_net, path)

        def shrink(m):
            m["config"]["fc_hidden"] = 256

        rewrite_manifest(path, shrink)
        with pytest.raises(CheckpointError, match="shape|expects"):
            load_checkpoint(path)
