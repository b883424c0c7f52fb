"""REST contract: job lifecycle, validation errors, FIFO, restart recovery."""

import hashlib
import io
import json
import threading
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from clipaway.backends import BackendKind
from clipaway.config import ServiceConfig, ToolkitConfig, build_model_stack
from clipaway.errors import ClipawayError
from clipaway.service import JobStore, create_app, mask_digest

RNG = np.random.default_rng(424242)


def png_bytes(pixels):
    buf = io.BytesIO()
    Image.fromarray(pixels).save(buf, format="PNG")
    return buf.getvalue()


def image_png(h=64, w=64):
    return png_bytes(RNG.integers(0, 256, size=(h, w, 3), dtype=np.uint8))


def mask_png(h=64, w=64, y0=20, y1=40, x0=24, x1=44):
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[y0:y1, x0:x1] = 255
    return png_bytes(mask)


def make_config(tmp_path, **service_kwargs):
    config = ToolkitConfig()
    kwargs = {"data_dir": str(tmp_path / "jobs")}
    kwargs.update(service_kwargs)
    config.service = ServiceConfig(**kwargs)
    return config


def wait_ready(client, timeout=10.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if client.get("/api/v1/health").status_code == 200:
            return
        time.sleep(0.005)
    raise AssertionError("service never became ready")


def wait_terminal(client, job_id, timeout=20.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        body = client.get(f"/api/v1/jobs/{job_id}").json()
        if body["state"] in ("DONE", "FAILED"):
            return body
        time.sleep(0.005)
    raise AssertionError(f"job {job_id} never finished")


def wait_state(client, job_id, state, timeout=10.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        body = client.get(f"/api/v1/jobs/{job_id}").json()
        if body["state"] == state:
            return body
        time.sleep(0.005)
    raise AssertionError(f"job {job_id} never reached {state}")


def submit(client, image=None, mask=None, overrides=None):
    files = {
        "image": ("image.png", image or image_png(), "image/png"),
        "mask": ("mask.png", mask or mask_png(), "image/png"),
    }
    data = {}
    if overrides is not None:
        data["overrides"] = overrides if isinstance(overrides, str) \
            else json.dumps(overrides)
    return client.post("/api/v1/remove", files=files, data=data)


class GatedBackend:
    """generate() blocks until the gate opens; returns the source."""

    latent_downscale = 8

    def __init__(self, kind, gate):
        self.kind = kind
        self.gate = gate

    def generate(self, noise, latent_mask, tokens, text_prompt, steps,
                 guidance_scale, source):
        self.gate.wait()
        return source.copy()


class TestLifecycle:
    def test_submit_to_done(self, tmp_path):
        app = create_app(make_config(tmp_path))
        with TestClient(app) as client:
            wait_ready(client)
            response = submit(client)
            assert response.status_code == 202
            job_id = response.json()["job_id"]

            body = wait_terminal(client, job_id)
            assert body["state"] == "DONE"
            assert body["error"] is None
            assert body["created_at"] <= body["started_at"] <= body["finished_at"]
            assert body["request"]["dilation_kernel"] == 5
            assert body["provenance"]["mock_mode"] is True

            result = client.get(f"/api/v1/results/{job_id}")
            assert result.status_code == 200
            assert result.headers["content-type"] == "image/png"
            out = np.asarray(Image.open(io.BytesIO(result.content)).convert("RGB"))
            assert out.shape == (64, 64, 3)

            diag = client.get(f"/api/v1/results/{job_id}/diagnostics").json()
            assert abs(diag["cos_final_fg"]) <= 1e-4
            assert diag["config"]["dilation_kernel"] == 5
            assert "provenance" in diag

    def test_result_png_embeds_provenance(self, tmp_path):
        app = create_app(make_config(tmp_path))
        with TestClient(app) as client:
            wait_ready(client)
            job_id = submit(client).json()["job_id"]
            wait_terminal(client, job_id)
            result = client.get(f"/api/v1/results/{job_id}")
            png = Image.open(io.BytesIO(result.content))
            embedded = json.loads(png.text["clipaway"])
            assert embedded["mock_mode"] is True

    def test_mask_digest_round_trip(self, tmp_path):
        mask = np.zeros((64, 64), dtype=np.uint8)
        mask[10:30, 5:25] = 255
        expected = hashlib.sha256((mask > 127).astype(np.uint8).tobytes()).hexdigest()
        app = create_app(make_config(tmp_path))
        with TestClient(app) as client:
            wait_ready(client)
            response = submit(client, mask=png_bytes(mask))
            job_id = response.json()["job_id"]
            body = wait_terminal(client, job_id)
            assert body["request"]["mask_sha256"] == expected
            assert body["request"]["mask_area"] == 400
            diag = client.get(f"/api/v1/results/{job_id}/diagnostics").json()
            assert diag["mask_sha256"] == expected

    def test_overrides_respected(self, tmp_path):
        app = create_app(make_config(tmp_path))
        with TestClient(app) as client:
            wait_ready(client)
            response = submit(client, overrides={
                "dilation_kernel": 3, "backend": "blended", "seed": 99,
            })
            assert response.status_code == 202
            body = wait_terminal(client, response.json()["job_id"])
            assert body["state"] == "DONE"
            assert body["request"]["dilation_kernel"] == 3
            assert body["request"]["backend"] == "blended_latent"
            assert body["request"]["seed"] == 99


class TestValidation:
    def test_mask_shape_mismatch(self, tmp_path):
        app = create_app(make_config(tmp_path))
        with TestClient(app) as client:
            wait_ready(client)
            response = submit(client, image=image_png(200, 200),
                              mask=mask_png(100, 100, 10, 50, 10, 50))
            assert response.status_code == 400
            assert response.json()["error"] == "mask_shape_mismatch"

    def test_garbage_uploads(self, tmp_path):
        app = create_app(make_config(tmp_path))
        with TestClient(app) as client:
            wait_ready(client)
            response = submit(client, image=b"not a png")
            assert response.status_code == 400
            assert response.json()["error"] == "image_decode_error"
            response = submit(client, mask=b"also not a png")
            assert response.status_code == 400
            assert response.json()["error"] == "mask_decode_error"

    def test_oversize_rejected(self, tmp_path):
        app = create_app(make_config(tmp_path, max_upload_bytes=500))
        with TestClient(app) as client:
            wait_ready(client)
            response = submit(client)
            assert response.status_code == 413
            assert response.json()["error"] == "payload_too_large"

    def test_bad_overrides(self, tmp_path):
        app = create_app(make_config(tmp_path))
        with TestClient(app) as client:
            wait_ready(client)
            assert submit(client, overrides="{broken").status_code == 400
            response = submit(client, overrides={"no_such_knob": 1})
            assert response.status_code == 400
            assert response.json()["error"] == "bad_overrides"
            response = submit(client, overrides={"dilation_kernel": 4})
            assert response.status_code == 400
            assert response.json()["error"] == "invalid_parameters"
            response = submit(client, overrides={"backend": "dalle"})
            assert response.status_code == 400
            assert response.json()["error"] == "invalid_parameters"

    def test_unknown_job_is_404(self, tmp_path):
        app = create_app(make_config(tmp_path))
        with TestClient(app) as client:
            wait_ready(client)
            for path in ("/api/v1/jobs/nope", "/api/v1/results/nope",
                         "/api/v1/results/nope/diagnostics"):
                response = client.get(path)
                assert response.status_code == 404
                assert response.json()["error"] == "unknown_job"

    def test_result_not_ready_while_queued(self, tmp_path):
        gate = threading.Event()
        app = create_app(
            make_config(tmp_path),
            backend_factory=lambda kind: GatedBackend(kind, gate),
        )
        with TestClient(app) as client:
            wait_ready(client)
            job_id = submit(client).json()["job_id"]
            wait_state(client, job_id, "RUNNING")
            response = client.get(f"/api/v1/results/{job_id}")
            assert response.status_code == 404
            assert response.json()["error"] == "result_not_ready"
            gate.set()
            assert wait_terminal(client, job_id)["state"] == "DONE"


class TestConcurrency:
    def test_fifo_order_observable_in_timestamps(self, tmp_path):
        gate = threading.Event()
        app = create_app(
            make_config(tmp_path),
            backend_factory=lambda kind: GatedBackend(kind, gate),
        )
        with TestClient(app) as client:
            wait_ready(client)
            first = submit(client).json()["job_id"]
            second = submit(client).json()["job_id"]
            gate.set()
            body_1 = wait_terminal(client, first)
            body_2 = wait_terminal(client, second)
            assert body_1["state"] == "DONE" and body_2["state"] == "DONE"
            assert body_1["started_at"] <= body_2["started_at"]
            # single worker: the second never starts before the first ends
            assert body_1["finished_at"] <= body_2["started_at"]

    def test_service_unavailable_while_loading(self, tmp_path):
        load_gate = threading.Event()

        def slow_stack(config):
            load_gate.wait()
            return build_model_stack(config)

        app = create_app(make_config(tmp_path), stack_factory=slow_stack)
        with TestClient(app) as client:
            health = client.get("/api/v1/health")
            assert health.status_code == 503
            assert health.json()["status"] == "loading"
            response = submit(client)
            assert response.status_code == 503
            assert response.json()["error"] == "models_loading"
            load_gate.set()
            wait_ready(client)
            assert submit(client).status_code == 202


class TestRestartRecovery:
    def test_interrupted_jobs_marked_failed(self, tmp_path):
        never = threading.Event()
        config = make_config(tmp_path)
        app_a = create_app(
            config, backend_factory=lambda kind: GatedBackend(kind, never)
        )
        with TestClient(app_a) as client:
            wait_ready(client)
            running = submit(client).json()["job_id"]
            queued = submit(client).json()["job_id"]
            wait_state(client, running, "RUNNING")
            assert client.get(f"/api/v1/jobs/{queued}").json()["state"] == "QUEUED"
        # worker thread is parked on the gate for good; simulate a restart
        app_b = create_app(make_config(tmp_path))
        with TestClient(app_b) as client:
            wait_ready(client)
            health = client.get("/api/v1/health").json()
            assert health["recovered_interrupted_jobs"] == 2
            for job_id in (running, queued):
                body = client.get(f"/api/v1/jobs/{job_id}").json()
                assert body["state"] == "FAILED"
                assert body["error"] == "interrupted"

    def test_store_survives_restart(self, tmp_path):
        config = make_config(tmp_path)
        app = create_app(config)
        with TestClient(app) as client:
            wait_ready(client)
            job_id = submit(client).json()["job_id"]
            wait_terminal(client, job_id)
        app = create_app(make_config(tmp_path))
        with TestClient(app) as client:
            wait_ready(client)
            body = client.get(f"/api/v1/jobs/{job_id}").json()
            assert body["state"] == "DONE"
            result = client.get(f"/api/v1/results/{job_id}")
            assert result.status_code == 200


class TestRetention:
    def test_old_jobs_pruned(self, tmp_path):
        app = create_app(make_config(tmp_path, job_retention=2))
        with TestClient(app) as client:
            wait_ready(client)
            ids = []
            for _ in range(4):
                job_id = submit(client).json()["job_id"]
                wait_terminal(client, job_id)
                ids.append(job_id)
            service = app.state.service
            kept = [i for i in ids if service.store.get(i) is not None]
            assert kept == ids[-2:]
            for job_id in ids[:2]:
                assert client.get(f"/api/v1/jobs/{job_id}").status_code == 404
                assert not service.store.result_path(job_id, ".png").is_file()


class TestJobStore:
    def test_monotone_transitions_enforced(self, tmp_path):
        store = JobStore(tmp_path, retention=10)
        job = store.create({})
        with pytest.raises(ClipawayError):
            store.transition(job.id, "DONE")
        store.transition(job.id, "RUNNING")
        with pytest.raises(ClipawayError):
            store.transition(job.id, "RUNNING")
        store.transition(job.id, "DONE")
        with pytest.raises(ClipawayError):
            store.transition(job.id, "FAILED")

    def test_mask_digest_known_value(self):
        mask = np.array([[0, 1], [1, 0]], dtype=np.uint8)
        assert mask_digest(mask) == hashlib.sha256(bytes([0, 1, 1, 0])).hexdigest()
