"""HTTP front end: removal jobs over REST, one FIFO worker per process.

Jobs persist across restarts as JSON next to their result files. A job
interrupted mid-run (or still queued when the process died, since upload
payloads are not persisted) comes back FAILED with reason "interrupted".
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import queue
import threading
import time
import uuid
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, File, Form, UploadFile
from fastapi.responses import JSONResponse, Response

from . import __version__
from .backends import BackendKind, create_backend
from .config import ToolkitConfig, build_model_stack
from .encoders import decode_image_bytes, decode_mask_bytes, encode_image_png
from .errors import (
    BackendUnavailableError,
    ClipawayError,
    ImageDecodeError,
)
from .pipeline import RemovalRequest, remove_object

logger = logging.getLogger(__name__)

JOB_STATES = ("QUEUED", "RUNNING", "DONE", "FAILED")
_TRANSITIONS = {
    ("QUEUED", "RUNNING"),
    ("QUEUED", "FAILED"),
    ("RUNNING", "DONE"),
    ("RUNNING", "FAILED"),
}
OVERRIDE_KEYS = {
    "dilation_kernel", "backend", "steps", "guidance_scale",
    "ip_adapter_scale", "seed", "composite_unmasked",
}


def mask_digest(mask: np.ndarray) -> str:
    """sha256 over row-major 0/1 bytes; the client computes the same."""
    return hashlib.sha256(
        np.ascontiguousarray(mask.astype(np.uint8)).tobytes()
    ).hexdigest()


@dataclass
class Job:
    id: str
    state: str = "QUEUED"
    request: dict = field(default_factory=dict)
    error: Optional[str] = None
    created_at: float = 0.0
    started_at: Optional[float] = None
    finished_at: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "state": self.state,
            "request": self.request,
            "error": self.error,
            "created_at": self.created_at,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Job":
        return cls(**data)


class JobStore:
    """Persisted job table plus result files; all mutations serialized."""

    def __init__(self, directory, retention: int = 100):
        self.directory = Path(directory)
        self.results_dir = self.directory / "results"
        self.results_dir.mkdir(parents=True, exist_ok=True)
        self.index_path = self.directory / "jobs.json"
        self.retention = retention
        self._lock = threading.Lock()
        self._jobs: dict = {}
        self._load()

    def _load(self) -> None:
        if not self.index_path.is_file():
            return
        payload = json.loads(self.index_path.read_text())
        for data in payload["jobs"]:
            self._jobs[data["id"]] = Job.from_dict(data)

    def _flush_locked(self) -> None:
        payload = {"jobs": [j.to_dict() for j in self._jobs.values()]}
        tmp = self.index_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(payload))
        tmp.replace(self.index_path)

    def recover(self) -> int:
        """Mark every non-terminal job FAILED; payloads did not survive."""
        with self._lock:
            n = 0
            for job in self._jobs.values():
                if job.state in ("QUEUED", "RUNNING"):
                    job.state = "FAILED"
                    job.error = "interrupted"
                    job.finished_at = time.time()
                    n += 1
            if n:
                self._flush_locked()
            return n

    def create(self, request_echo: dict) -> Job:
        job = Job(id=uuid.uuid4().hex, request=request_echo, created_at=time.time())
        with self._lock:
            self._jobs[job.id] = job
            self._flush_locked()
        return job

    def get(self, job_id: str) -> Optional[Job]:
        with self._lock:
            return self._jobs.get(job_id)

    def transition(self, job_id: str, new_state: str, *, error: str = None) -> None:
        with self._lock:
            job = self._jobs[job_id]
            if (job.state, new_state) not in _TRANSITIONS:
                raise ClipawayError(
                    f"illegal job transition {job.state} -> {new_state}"
                )
            job.state = new_state
            now = time.time()
            if new_state == "RUNNING":
                job.started_at = now
            else:
                job.finished_at = now
            if error is not None:
                job.error = error
            self._prune_locked()
            self._flush_locked()

    def _prune_locked(self) -> None:
        terminal = [j for j in self._jobs.values() if j.state in ("DONE", "FAILED")]
        excess = len(terminal) - self.retention
        if excess <= 0:
            return
        terminal.sort(key=lambda j: j.finished_at or 0.0)
        for job in terminal[:excess]:
            del self._jobs[job.id]
            for suffix in (".png", ".json"):
                path = self.result_path(job.id, suffix)
                if path.is_file():
                    path.unlink()

    def result_path(self, job_id: str, suffix: str) -> Path:
        return self.results_dir / f"{job_id}{suffix}"

    def save_result(self, job_id: str, png: bytes, diagnostics: dict) -> None:
        self.result_path(job_id, ".png").write_bytes(png)
        self.result_path(job_id, ".json").write_text(
            json.dumps(diagnostics, indent=2, sort_keys=True)
        )


@dataclass
class _WorkItem:
    job_id: str
    request: RemovalRequest


class RemovalService:
    """Owns the model stack, the job store, and the single worker thread."""

    def __init__(self, config: ToolkitConfig, *, stack_factory=None,
                 backend_factory=None):
        self.config = config
        self.store = JobStore(
            config.service.data_dir, retention=config.service.job_retention
        )
        self.interrupted = self.store.recover()
        self._stack_factory = stack_factory or build_model_stack
        self._backend_factory = backend_factory or (
            lambda kind: create_backend(kind, mock_mode=config.mock_mode)
        )
        self.stack = None
        self._backends: dict = {}
        self.ready = threading.Event()
        self._queue: queue.Queue = queue.Queue()
        self._threads: list = []

    def start(self) -> None:
        loader = threading.Thread(target=self._load, name="clipaway-loader",
                                  daemon=True)
        loader.start()
        worker = threading.Thread(target=self._work, name="clipaway-worker",
                                  daemon=True)
        worker.start()
        self._threads = [loader, worker]

    def stop(self) -> None:
        self._queue.put(None)
        for thread in self._threads:
            thread.join(timeout=2.0)

    def _load(self) -> None:
        try:
            self.stack = self._stack_factory(self.config)
            self.ready.set()
        except Exception:
            logger.exception("model loading failed; service stays not-ready")

    def _backend(self, kind: BackendKind):
        if kind not in self._backends:
            self._backends[kind] = self._backend_factory(kind)
        return self._backends[kind]

    def submit(self, request: RemovalRequest, request_echo: dict) -> Job:
        job = self.store.create(request_echo)
        self._queue.put(_WorkItem(job.id, request))
        return job

    def _work(self) -> None:
        self.ready.wait()
        while True:
            item = self._queue.get()
            if item is None:
                return
            try:
                self.store.transition(item.job_id, "RUNNING")
                result = remove_object(
                    item.request,
                    self.stack.region_encoder,
                    self.stack.adapter,
                    self._backend(item.request.backend),
                    self.stack.token_projection,
                )
                diagnostics = dict(result.diagnostics)
                diagnostics["mask_sha256"] = mask_digest(item.request.mask)
                diagnostics["provenance"] = self.config.snapshot()
                png = encode_image_png(result.output, text_metadata={
                    "clipaway": json.dumps(
                        diagnostics["provenance"], sort_keys=True
                    ),
                })
                self.store.save_result(item.job_id, png, diagnostics)
                self.store.transition(item.job_id, "DONE")
            except Exception as exc:
                logger.exception("job %s failed", item.job_id)
                self.store.transition(
                    item.job_id, "FAILED", error=f"{type(exc).__name__}: {exc}"
                )


def _error(status: int, code: str, detail: str = "") -> JSONResponse:
    return JSONResponse({"error": code, "detail": detail}, status_code=status)


def create_app(config: Optional[ToolkitConfig] = None, *, stack_factory=None,
               backend_factory=None) -> FastAPI:
    if config is None:
        config = ToolkitConfig()
    service = RemovalService(
        config, stack_factory=stack_factory, backend_factory=backend_factory
    )

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        service.start()
        yield
        service.stop()

    app = FastAPI(title="clipaway", version=__version__, lifespan=lifespan)
    app.state.service = service
    max_bytes = config.service.max_upload_bytes

    @app.post("/api/v1/remove", status_code=202)
    async def submit_removal(
        image: UploadFile = File(...),
        mask: UploadFile = File(...),
        overrides: Optional[str] = Form(None),
    ):
        if not service.ready.is_set():
            return _error(503, "models_loading", "try again shortly")
        image_bytes = await image.read()
        mask_bytes = await mask.read()
        if len(image_bytes) > max_bytes or len(mask_bytes) > max_bytes:
            return _error(413, "payload_too_large",
                          f"uploads are capped at {max_bytes} bytes")
        try:
            pixels = decode_image_bytes(image_bytes)
        except ImageDecodeError as exc:
            return _error(400, "image_decode_error", str(exc))
        try:
            mask_array = decode_mask_bytes(mask_bytes)
        except ImageDecodeError as exc:
            return _error(400, "mask_decode_error", str(exc))
        if mask_array.shape != pixels.shape[:2]:
            return _error(
                400, "mask_shape_mismatch",
                f"mask {mask_array.shape[1]}x{mask_array.shape[0]} does not "
                f"match image {pixels.shape[1]}x{pixels.shape[0]}",
            )

        params = {
            "dilation_kernel": config.pipeline.dilation_kernel,
            "steps": config.pipeline.steps,
            "guidance_scale": config.pipeline.guidance_scale,
            "ip_adapter_scale": config.pipeline.ip_adapter_scale,
            "composite_unmasked": config.pipeline.composite_unmasked,
            "seed": config.seed,
            "backend": "sd_inpaint",
        }
        if overrides:
            try:
                extra = json.loads(overrides)
            except json.JSONDecodeError as exc:
                return _error(400, "bad_overrides", f"overrides is not JSON: {exc}")
            if not isinstance(extra, dict):
                return _error(400, "bad_overrides", "overrides must be an object")
            unknown = set(extra) - OVERRIDE_KEYS
            if unknown:
                return _error(400, "bad_overrides",
                              f"unknown override keys: {sorted(unknown)}")
            params.update(extra)

        try:
            backend_kind = BackendKind.parse(params.pop("backend"))
            request = RemovalRequest(
                image=pixels, mask=mask_array, backend=backend_kind, **params
            )
        except (ClipawayError, BackendUnavailableError, ValueError, TypeError) as exc:
            return _error(400, "invalid_parameters", str(exc))

        echo = request.config_echo()
        echo["image_shape"] = list(pixels.shape)
        echo["mask_area"] = int(mask_array.sum())
        echo["mask_sha256"] = mask_digest(mask_array)
        job = service.submit(request, echo)
        return JSONResponse({"job_id": job.id}, status_code=202)

    @app.get("/api/v1/jobs/{job_id}")
    def get_job(job_id: str):
        job = service.store.get(job_id)
        if job is None:
            return _error(404, "unknown_job", job_id)
        payload = job.to_dict()
        payload["provenance"] = config.snapshot()
        return payload

    @app.get("/api/v1/results/{job_id}")
    def get_result(job_id: str):
        job = service.store.get(job_id)
        if job is None:
            return _error(404, "unknown_job", job_id)
        if job.state == "FAILED":
            return _error(404, "job_failed", job.error or "")
        if job.state != "DONE":
            return _error(404, "result_not_ready", f"job is {job.state}")
        png = service.store.result_path(job_id, ".png").read_bytes()
        return Response(content=png, media_type="image/png")

    @app.get("/api/v1/results/{job_id}/diagnostics")
    def get_diagnostics(job_id: str):
        job = service.store.get(job_id)
        if job is None:
            return _error(404, "unknown_job", job_id)
        if job.state == "FAILED":
            return _error(404, "job_failed", job.error or "")
        if job.state != "DONE":
            return _error(404, "result_not_ready", f"job is {job.state}")
        return json.loads(
            service.store.result_path(job_id, ".json").read_text()
        )

    @app.get("/api/v1/health")
    def health():
        ready = service.ready.is_set()
        body = {
            "status": "ok" if ready else "loading",
            "version": __version__,
            "mock_mode": config.mock_mode,
            "recovered_interrupted_jobs": service.interrupted,
            "models": config.snapshot()["models"],
        }
        return JSONResponse(body, status_code=200 if ready else 503)

    return app
