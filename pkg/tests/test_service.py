"""HTTP service behavior: ingest, labeling, supports, classification,
SSE stream, and online retraining with snapshot swaps."""

import base64
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from speckvet.dataset import SpeckleDataset
from speckvet.fewshot import build_support_set, classify_pattern
from speckvet.model import EmbeddingNetConfig, build_embedding_net
from speckvet.service.app import create_app, frame_png
from speckvet.service.state import ServiceConfig, ServiceState
from speckvet.simulate import MULTI_HIT, SINGLE_HIT

TINY = EmbeddingNetConfig(
    input_size=96, conv1_out_channels=4, conv2_out_channels=8,
    fc_hidden=32, embedding_dim=16)
TWO_CLASSES = (SINGLE_HIT, MULTI_HIT)


@pytest.fixture(scope="module")
def tiny_model():
    return build_embedding_net(TINY, seed=11)


def frame_array(i: int) -> np.ndarray:
    rng = np.random.default_rng([9, i])
    img = rng.random((96, 96), dtype=np.float32)
    r, c = 10 * (i % 8), 12 * (i % 7)
    img[r:r + 8, c:c + 8] += 4.0
    return img


def b64(img: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(img, dtype="<f4").tobytes()).decode()


def make_client(tiny_model, **overrides) -> tuple:
    defaults = dict(
        shots=5, label_set=TWO_CLASSES, retrain_after=40,
        retrain_mode="inline", online_epochs=2, online_batch=32,
        augment_copies=3, seed=5)
    defaults.update(overrides)
    config = ServiceConfig(**defaults)
    state = ServiceState(config, model=tiny_model)
    return TestClient(create_app(config, state=state)), state


def ingest(client, i: int) -> int:
    resp = client.post("/api/frames", json={"image_b64": b64(frame_array(i))})
    assert resp.status_code == 200
    return resp.json()["frame_id"]


def label(client, frame_id: int, lab: str) -> dict:
    resp = client.post("/api/labels", json={"frame_id": frame_id, "label": lab})
    assert resp.status_code == 200
    return resp.json()


class TestIngest:
    def test_ids_are_sequential_and_state_unlabeled(self, tiny_model):
        client, _ = make_client(tiny_model)
        ids = [ingest(client, i) for i in range(3)]
        assert ids == [0, 1, 2]
        frames = client.get("/api/frames").json()
        assert [f["frame_id"] for f in frames] == [0, 1, 2]
        assert all(f["state"] == "unlabeled" for f in frames)
        assert all(f["label"] is None for f in frames)

    def test_nested_list_body_matches_b64_bytes(self, tiny_model):
        client, state = make_client(tiny_model)
        img = frame_array(0)
        client.post("/api/frames", json={"image_b64": b64(img)})
        client.post("/api/frames", json={"image": img.tolist()})
        assert np.array_equal(state.frames[0].image, state.frames[1].image)

    def test_both_or_neither_encoding_rejected(self, tiny_model):
        client, _ = make_client(tiny_model)
        img = frame_array(0)
        both = client.post("/api/frames",
                           json={"image_b64": b64(img), "image": img.tolist()})
        neither = client.post("/api/frames", json={})
        assert both.status_code == 422
        assert neither.status_code == 422

    def test_wrong_byte_count_rejected(self, tiny_model):
        client, _ = make_client(tiny_model)
        short = base64.b64encode(b"\x00" * 100).decode()
        resp = client.post("/api/frames", json={"image_b64": short})
        assert resp.status_code == 422
        assert "bytes" in resp.json()["detail"]

    def test_wrong_shape_rejected(self, tiny_model):
        client, _ = make_client(tiny_model)
        resp = client.post("/api/frames", json={"image": [[0.0] * 4] * 4})
        assert resp.status_code == 422

    def test_state_filter(self, tiny_model):
        client, _ = make_client(tiny_model)
        a = ingest(client, 0)
        ingest(client, 1)
        label(client, a, SINGLE_HIT)
        labeled = client.get("/api/frames", params={"state": "labeled"}).json()
        unlabeled = client.get("/api/frames", params={"state": "unlabeled"}).json()
        assert [f["frame_id"] for f in labeled] == [a]
        assert [f["frame_id"] for f in unlabeled] == [1]


class TestImages:
    def test_png_preview(self, tiny_model):
        from PIL import Image
        import io

        client, _ = make_client(tiny_model)
        fid = ingest(client, 0)
        resp = client.get(f"/api/frames/{fid}/image")
        assert resp.status_code == 200
        assert resp.headers["content-type"] == "image/png"
        assert resp.content[:8] == b"\x89PNG\r\n\x1a\n"
        img = Image.open(io.BytesIO(resp.content))
        assert img.size == (96, 96)
        assert img.mode == "L"

    def test_png_peak_maps_to_255(self):
        img = np.zeros((96, 96), dtype=np.float32)
        img[3, 4] = 50.0
        from PIL import Image
        import io

        decoded = np.asarray(Image.open(io.BytesIO(frame_png(img))))
        assert decoded[3, 4] == 255
        assert decoded[0, 0] == 0

    def test_unknown_frame_404(self, tiny_model):
        client, _ = make_client(tiny_model)
        assert client.get("/api/frames/7/image").status_code == 404


class TestLabeling:
    def test_label_updates_supports_immediately(self, tiny_model):
        client, _ = make_client(tiny_model)
        fid = ingest(client, 0)
        before = client.get("/api/supports").json()
        assert before["classes"] == []
        out = label(client, fid, SINGLE_HIT)
        assert out["state"] == "labeled"
        assert out["retrain_triggered"] is False
        after = client.get("/api/supports").json()
        assert after["support_version"] > before["support_version"]
        assert after["classes"] == [
            {"label": SINGLE_HIT, "frame_ids": [fid], "pinned": []}]

    def test_unknown_frame_404_and_bad_label_422(self, tiny_model):
        client, _ = make_client(tiny_model)
        fid = ingest(client, 0)
        missing = client.post("/api/labels", json={"frame_id": 99, "label": SINGLE_HIT})
        assert missing.status_code == 404
        bad = client.post("/api/labels", json={"frame_id": fid, "label": "triple_hit"})
        assert bad.status_code == 422
        assert "triple_hit" in bad.json()["detail"]

    def test_relabel_keeps_audit_history_latest_wins(self, tiny_model):
        client, _ = make_client(tiny_model)
        fid = ingest(client, 0)
        first = label(client, fid, SINGLE_HIT)
        assert first["previous_labels"] == []
        second = label(client, fid, MULTI_HIT)
        assert second["label"] == MULTI_HIT
        assert second["previous_labels"] == [SINGLE_HIT]
        supports = client.get("/api/supports").json()["classes"]
        assert supports == [{"label": MULTI_HIT, "frame_ids": [fid], "pinned": []}]

    def test_supports_keep_most_recent_shots(self, tiny_model):
        client, _ = make_client(tiny_model, shots=2)
        fids = [ingest(client, i) for i in range(3)]
        for fid in fids:
            label(client, fid, SINGLE_HIT)
        rows = client.get("/api/supports").json()["classes"]
        assert rows[0]["frame_ids"] == [fids[2], fids[1]]

    def test_pin_overrides_recency(self, tiny_model):
        client, _ = make_client(tiny_model, shots=2)
        fids = [ingest(client, i) for i in range(3)]
        for fid in fids:
            label(client, fid, SINGLE_HIT)
        resp = client.post("/api/supports/pin", json={"frame_ids": [fids[0]]})
        assert resp.status_code == 200
        rows = resp.json()["classes"]
        assert rows[0]["frame_ids"][0] == fids[0]
        assert rows[0]["pinned"] == [fids[0]]
        cleared = client.post("/api/supports/pin", json={"frame_ids": []})
        assert cleared.json()["classes"][0]["pinned"] == []

    def test_pin_unlabeled_409(self, tiny_model):
        client, _ = make_client(tiny_model)
        fid = ingest(client, 0)
        resp = client.post("/api/supports/pin", json={"frame_ids": [fid]})
        assert resp.status_code == 409


class TestClassification:
    def seeded_client(self, tiny_model, **overrides):
        """Client with one labeled frame per class and two spare frames."""
        client, state = make_client(tiny_model, **overrides)
        a, b, c, d = (ingest(client, i) for i in range(4))
        label(client, a, SINGLE_HIT)
        label(client, b, MULTI_HIT)
        return client, state, (a, b, c, d)

    def test_classify_without_supports_409(self, tiny_model):
        client, _ = make_client(tiny_model)
        fid = ingest(client, 0)
        resp = client.post("/api/classify", json={"frame_id": fid})
        assert resp.status_code == 409
        assert "support set is empty" in resp.json()["detail"]

    def test_classify_assigns_state_and_versions(self, tiny_model):
        client, _, (a, b, c, d) = self.seeded_client(tiny_model)
        resp = client.post("/api/classify", json={"frame_id": c})
        assert resp.status_code == 200
        out = resp.json()
        assert out["predicted_label"] in TWO_CLASSES
        assert set(out["mean_distances"]) == set(TWO_CLASSES)
        assert out["model_version"] == 1
        assert out["support_version"] == 2
        frame = client.get("/api/frames", params={"state": "classified"}).json()
        assert [f["frame_id"] for f in frame] == [c]
        assert frame[0]["predicted_label"] == out["predicted_label"]

    def test_repeat_classify_is_bit_identical(self, tiny_model):
        client, _, (a, b, c, d) = self.seeded_client(tiny_model)
        one = client.post("/api/classify", json={"frame_id": c}).json()
        two = client.post("/api/classify", json={"frame_id": c}).json()
        assert one["mean_distances"] == two["mean_distances"]
        assert one["predicted_label"] == two["predicted_label"]

    def test_duplicate_of_support_lands_on_it_near_zero_distance(self, tiny_model):
        # support embeddings come from a batched forward, the query from a
        # single-frame forward; identical bytes agree to float32 rounding
        client, _, (a, b, c, d) = self.seeded_client(tiny_model)
        dup = client.post("/api/frames",
                          json={"image_b64": b64(frame_array(0))}).json()["frame_id"]
        out = client.post("/api/classify", json={"frame_id": dup}).json()
        assert out["predicted_label"] == SINGLE_HIT
        assert out["mean_distances"][SINGLE_HIT] < 1e-10
        assert out["mean_distances"][MULTI_HIT] > 1e-3
        assert out["tie"] is False

    def test_labeled_frame_cannot_be_classified(self, tiny_model):
        client, _, (a, b, c, d) = self.seeded_client(tiny_model)
        resp = client.post("/api/classify", json={"frame_id": a})
        assert resp.status_code == 409
        assert "labeled" in resp.json()["detail"]

    def test_classified_frame_can_still_be_labeled(self, tiny_model):
        client, _, (a, b, c, d) = self.seeded_client(tiny_model)
        client.post("/api/classify", json={"frame_id": c})
        out = label(client, c, MULTI_HIT)
        assert out["state"] == "labeled"
        resp = client.post("/api/classify", json={"frame_id": c})
        assert resp.status_code == 409

    def test_unknown_frame_404(self, tiny_model):
        client, _, _ = self.seeded_client(tiny_model)
        assert client.post("/api/classify", json={"frame_id": 50}).status_code == 404


class TestStream:
    def test_backlog_matches_classify_responses(self, tiny_model):
        client, state = make_client(tiny_model)
        a, b, c, d = (ingest(client, i) for i in range(4))
        label(client, a, SINGLE_HIT)
        label(client, b, MULTI_HIT)
        responses = [client.post("/api/classify", json={"frame_id": f}).json()
                     for f in (c, d)]
        resp = client.get("/api/stream", params={"follow": "false"})
        assert resp.status_code == 200
        assert resp.headers["content-type"].startswith("text/event-stream")
        events = [json.loads(line[len("data: "):])
                  for line in resp.text.splitlines() if line.startswith("data: ")]
        assert [e["type"] for e in events] == ["classification", "classification"]
        for event, sent in zip(events, responses):
            assert event["frame_id"] == sent["frame_id"]
            assert event["predicted_label"] == sent["predicted_label"]
            assert event["mean_distances"] == sent["mean_distances"]
            assert event["model_version"] == sent["model_version"]
            assert event["support_version"] == sent["support_version"]

    def test_empty_backlog_closes_clean(self, tiny_model):
        client, _ = make_client(tiny_model)
        resp = client.get("/api/stream", params={"follow": "false"})
        assert resp.status_code == 200
        assert resp.text == ""


class TestRetrain:
    def test_trigger_fires_on_last_class_reaching_threshold(self, tiny_model):
        client, state = make_client(tiny_model, retrain_after=2)
        fids = [ingest(client, i) for i in range(4)]
        outs = [
            label(client, fids[0], SINGLE_HIT),
            label(client, fids[1], SINGLE_HIT),
            label(client, fids[2], MULTI_HIT),
        ]
        assert [o["retrain_triggered"] for o in outs] == [False, False, False]
        assert client.get("/api/status").json()["model_version"] == 1
        final = label(client, fids[3], MULTI_HIT)
        assert final["retrain_triggered"] is True
        status = client.get("/api/status").json()
        assert status["model_version"] == 2
        assert status["retrain_state"] == "idle"
        assert all(v == 0 for v in status["new_labels_since_retrain"].values())

    def test_manual_retrain_single_class_skips(self, tiny_model):
        client, _ = make_client(tiny_model)
        fid = ingest(client, 0)
        spare = ingest(client, 1)
        label(client, fid, SINGLE_HIT)
        probe = client.post("/api/classify", json={"frame_id": spare}).json()
        resp = client.post("/api/retrain").json()
        assert resp["skipped_reason"] == "need labeled frames from at least 2 classes"
        assert resp["model_version"] == 1
        again = client.post("/api/classify", json={"frame_id": spare}).json()
        assert again["mean_distances"] == probe["mean_distances"]
        assert again["model_version"] == 1

    def test_retrain_with_no_labels_skips(self, tiny_model):
        client, _ = make_client(tiny_model)
        resp = client.post("/api/retrain").json()
        assert resp["skipped_reason"] == "no labeled frames"
        assert resp["model_version"] == 1

    def test_swap_changes_probe_distances_iff_params_changed(self, tiny_model):
        client, state = make_client(tiny_model, retrain_after=2)
        fids = [ingest(client, i) for i in range(5)]
        probe = fids[4]
        label(client, fids[0], SINGLE_HIT)
        label(client, fids[1], MULTI_HIT)
        before = client.post("/api/classify", json={"frame_id": probe}).json()
        old_params = {name: p.data.copy()
                      for name, p in state.snapshot.model.named_parameters().items()}
        label(client, fids[2], SINGLE_HIT)
        label(client, fids[3], MULTI_HIT)
        new_params = state.snapshot.model.named_parameters()
        params_changed = any(
            not np.array_equal(old_params[name], p.data)
            for name, p in new_params.items())
        after = client.post("/api/classify", json={"frame_id": probe}).json()
        assert after["model_version"] == 2
        assert after["support_version"] > before["support_version"]
        distances_changed = after["mean_distances"] != before["mean_distances"]
        assert distances_changed == params_changed
        assert params_changed, "online fine-tune made no parameter update"

    def test_retrain_persists_spool(self, tiny_model, tmp_path):
        spool = tmp_path / "spool"
        client, _ = make_client(tiny_model, retrain_after=1, spool_dir=str(spool))
        a, b = ingest(client, 0), ingest(client, 1)
        label(client, a, SINGLE_HIT)
        label(client, b, MULTI_HIT)
        saved = SpeckleDataset.load(spool / "labeled")
        assert len(saved) == 2
        assert sorted(saved.labels) == sorted([SINGLE_HIT, MULTI_HIT])
        assert saved.sample_ids == [f"frame_{a:06d}", f"frame_{b:06d}"]

    def test_from_scratch_swaps_in_a_new_model(self, tiny_model):
        client, state = make_client(tiny_model)
        a, b = ingest(client, 0), ingest(client, 1)
        label(client, a, SINGLE_HIT)
        label(client, b, MULTI_HIT)
        resp = client.post("/api/retrain", params={"from_scratch": "true"}).json()
        assert resp["completed"] is True
        assert resp["skipped_reason"] is None
        assert resp["model_version"] == 2
        swapped = state.snapshot.model
        assert swapped is not tiny_model
        assert swapped.config_dict() == tiny_model.config_dict()
        # a scratch restart must not carry the old weights along
        diffs = [
            not np.array_equal(p.data, tiny_model.named_parameters()[name].data)
            for name, p in swapped.named_parameters().items()]
        assert any(diffs)


class TestStatus:
    def test_counts_and_flags(self, tiny_model):
        client, _ = make_client(tiny_model)
        status = client.get("/api/status").json()
        assert status["n_frames"] == 0
        assert status["supports_ready"] is False
        assert status["throughput_fps"] == 0.0
        a, b, c = (ingest(client, i) for i in range(3))
        label(client, a, SINGLE_HIT)
        label(client, b, MULTI_HIT)
        client.post("/api/classify", json={"frame_id": c})
        status = client.get("/api/status").json()
        assert status["n_frames"] == 3
        assert status["n_labeled"] == 2
        assert status["n_classified"] == 1
        assert status["labels_per_class"] == {SINGLE_HIT: 1, MULTI_HIT: 1}
        assert status["supports_ready"] is True
        assert status["throughput_fps"] > 0.0
        assert status["retrain_after"] == 40


class TestReplayEquivalence:
    def test_service_matches_library_classification(self, tiny_model):
        client, state = make_client(tiny_model, shots=2)
        support_ids = {}
        k = 0
        for cls in TWO_CLASSES:
            support_ids[cls] = []
            for _ in range(2):
                fid = ingest(client, k)
                label(client, fid, cls)
                support_ids[cls].append(fid)
                k += 1
        query_ids = [ingest(client, k + j) for j in range(6)]
        api_results = [client.post("/api/classify", json={"frame_id": fid}).json()
                       for fid in query_ids]

        frames, labels, ids = [], [], []
        for cls in TWO_CLASSES:
            for fid in support_ids[cls]:
                frames.append(state.frames[fid].image)
                labels.append(cls)
                ids.append(str(fid))
        support_set = build_support_set(
            tiny_model, np.stack(frames), labels, source_ids=ids)
        for fid, sent in zip(query_ids, api_results):
            ref = classify_pattern(tiny_model, state.frames[fid].image, support_set)
            assert sent["predicted_label"] == ref.predicted_label
            assert sent["tie"] == ref.tie
            for cls in TWO_CLASSES:
                assert sent["mean_distances"][cls] == ref.mean_distances[cls]
