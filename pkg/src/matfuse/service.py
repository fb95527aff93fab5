"""HTTP job service around the transfer pipeline.

Uploads are content-addressed by sha256, so re-submitting the same object
image reuses its inversion trajectory from the cache. Jobs run on worker
threads through a simple state machine:

    queued -> inverting -> sampling -> done
                     \\-> failed        \\-> failed | cancelled

Cancellation is cooperative and lands at step boundaries. Job records are
JSON files replaced atomically, so a restarted service recovers its queue:
jobs still queued are re-enqueued, jobs caught mid-run are marked failed.
Previews are decoded every few steps and swapped in atomically.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import queue
import threading
import time
import uuid
from dataclasses import replace

from fastapi import FastAPI, File, HTTPException, UploadFile
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse, JSONResponse

from .core import (
    CONFIG_DEFAULTS,
    BinaryMask,
    ConfigError,
    ImageRGB,
    PromptSet,
    ValidationError,
    make_config,
)
from .denoiser import make_toy_backend
from .pipeline import CancelledRun, TransferRequest, lambda_sweep, material_transfer
from .sampler import InversionResult, NoiseSchedule, TrajectoryCache, ddim_invert

TERMINAL_STATES = ("done", "failed", "cancelled")
ACTIVE_STATES = ("inverting", "sampling")
DEFAULT_SWEEP = (0.5, 0.8, 1.1, 1.5)


def _atomic_write_json(path: str, payload: dict) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


class JobStore:
    """Disk-backed job records and content-addressed uploads."""

    def __init__(self, data_dir: str):
        self.data_dir = data_dir
        self.uploads_dir = os.path.join(data_dir, "uploads")
        self.jobs_dir = os.path.join(data_dir, "jobs")
        os.makedirs(self.uploads_dir, exist_ok=True)
        os.makedirs(self.jobs_dir, exist_ok=True)
        self._lock = threading.Lock()
        self._records: dict[str, dict] = {}
        for name in os.listdir(self.jobs_dir):
            if name.endswith(".json"):
                with open(os.path.join(self.jobs_dir, name)) as fh:
                    record = json.load(fh)
                self._records[record["id"]] = record

    def save_upload(self, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()
        path = os.path.join(self.uploads_dir, digest)
        if not os.path.exists(path):
            tmp = f"{path}.{uuid.uuid4().hex}.tmp"
            with open(tmp, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        return digest

    def upload_path(self, digest: str) -> str | None:
        path = os.path.join(self.uploads_dir, digest)
        return path if os.path.isfile(path) else None

    def create_job(self, params: dict, kind: str) -> dict:
        record = {
            "id": str(uuid.uuid4()),
            "kind": kind,
            "state": "queued",
            "created_at": time.time(),
            "updated_at": time.time(),
            "error": None,
            "progress": {"phase": "queued", "step": 0, "total": params["config"]["T"], "preview": 0},
            "params": params,
            "results": [],
        }
        with self._lock:
            self._records[record["id"]] = record
            _atomic_write_json(self._job_path(record["id"]), record)
        return record

    def get(self, job_id: str) -> dict | None:
        with self._lock:
            record = self._records.get(job_id)
            return dict(record) if record else None

    def list_jobs(self) -> list[dict]:
        with self._lock:
            records = [dict(r) for r in self._records.values()]
        return sorted(records, key=lambda r: r["created_at"])

    def update(self, job_id: str, **changes) -> dict:
        with self._lock:
            record = self._records[job_id]
            record.update(changes)
            record["updated_at"] = time.time()
            _atomic_write_json(self._job_path(job_id), record)
            return dict(record)

    def job_dir(self, job_id: str) -> str:
        path = os.path.join(self.jobs_dir, job_id)
        os.makedirs(path, exist_ok=True)
        return path

    def _job_path(self, job_id: str) -> str:
        return os.path.join(self.jobs_dir, f"{job_id}.json")


class TransferService:
    """Worker pool plus the store; owns backends and the trajectory cache."""

    def __init__(
        self,
        data_dir: str,
        backend_kind: str = "toy",
        backend_seed: int = 0,
        weights_dir: str | None = None,
        workers: int | None = None,
        preview_every: int = 10,
        step_delay: float = 0.0,
    ):
        self.store = JobStore(data_dir)
        self.backend_kind = backend_kind
        self.backend_seed = backend_seed
        self.weights_dir = weights_dir
        self.preview_every = preview_every
        self.step_delay = step_delay
        self.cache = TrajectoryCache(cache_dir=os.path.join(data_dir, "cache"))
        if workers is None:
            workers = (os.cpu_count() or 1) if backend_kind == "toy" else 1
        self.worker_count = workers
        self._queue: queue.Queue[str] = queue.Queue()
        self._cancel_events: dict[str, threading.Event] = {}
        self._backends: dict[tuple[int, int], object] = {}
        self._backend_lock = threading.Lock()
        self._pretrained = None
        self._recover()
        self._workers = [
            threading.Thread(target=self._worker_loop, daemon=True, name=f"matfuse-worker-{i}")
            for i in range(workers)
        ]
        for thread in self._workers:
            thread.start()

    def _recover(self) -> None:
        for record in self.store.list_jobs():
            if record["state"] in ACTIVE_STATES:
                self.store.update(
                    record["id"], state="failed", error="interrupted by service restart"
                )
            elif record["state"] == "queued":
                self._cancel_events[record["id"]] = threading.Event()
                self._queue.put(record["id"])

    def backend_for(self, image: ImageRGB):
        if self.backend_kind == "pretrained":
            with self._backend_lock:
                if self._pretrained is None:
                    from .denoiser import load_pretrained_backend

                    self._pretrained = load_pretrained_backend(self.weights_dir)
                return self._pretrained
        size = (image.height, image.width)
        with self._backend_lock:
            if size not in self._backends:
                self._backends[size] = make_toy_backend(seed=self.backend_seed, image_size=size)
            return self._backends[size]

    def submit(self, params: dict, kind: str) -> dict:
        record = self.store.create_job(params, kind)
        self._cancel_events[record["id"]] = threading.Event()
        self._queue.put(record["id"])
        return record

    def cancel(self, job_id: str) -> dict | None:
        record = self.store.get(job_id)
        if record is None:
            return None
        if record["state"] in TERMINAL_STATES:
            return record
        event = self._cancel_events.get(job_id)
        if event is not None:
            event.set()
        if record["state"] == "queued":
            return self.store.update(job_id, state="cancelled")
        return self.store.get(job_id)

    def _worker_loop(self) -> None:
        while True:
            job_id = self._queue.get()
            record = self.store.get(job_id)
            if record is None or record["state"] != "queued":
                continue
            try:
                self._run_job(record)
            except CancelledRun:
                self.store.update(job_id, state="cancelled")
            except Exception as exc:
                self.store.update(job_id, state="failed", error=str(exc))
            finally:
                self._cancel_events.pop(job_id, None)

    def _load_image(self, digest: str) -> ImageRGB:
        path = self.store.upload_path(digest)
        return ImageRGB.from_file(path)

    def _load_mask(self, digest: str) -> BinaryMask:
        path = self.store.upload_path(digest)
        return BinaryMask.from_file(path)

    def _run_job(self, record: dict) -> None:
        job_id = record["id"]
        params = record["params"]
        cancel_event = self._cancel_events.get(job_id, threading.Event())
        if cancel_event.is_set():
            raise CancelledRun(0)
        config = make_config(params["config"])
        init = self._load_image(params["init"])
        material = self._load_image(params["material"])
        mask = self._load_mask(params["mask"])
        backend = self.backend_for(init)
        request = TransferRequest(
            init_image=init,
            material_image=material,
            mask=mask,
            prompts=PromptSet(y_src=params["y_src"], y_trg=params["y_trg"]),
            config=config,
        )

        self.store.update(
            job_id,
            progress={"phase": "inverting", "step": 0, "total": config.T, "preview": 0},
            state="inverting",
        )
        key = TrajectoryCache.key(backend.metadata.fingerprint, init, params["y_src"], config.T)
        trajectory = self.cache.get(key)
        if trajectory is None:
            schedule = NoiseSchedule.scaled_linear(T=config.T, native_steps=backend.metadata.native_steps)
            trajectory = ddim_invert(backend, init, params["y_src"], schedule).trajectory
            self.cache.put(key, trajectory)
        if cancel_event.is_set():
            raise CancelledRun(0)
        inversion = InversionResult(trajectory=trajectory)

        job_dir = self.store.job_dir(job_id)

        preview_count = 0

        def on_step(step_index: int, total: int, z) -> None:
            nonlocal preview_count
            if self.step_delay:
                time.sleep(self.step_delay)
            # The preview file lands before its index is published, so a
            # client reacting to a new index always finds the image.
            if (step_index + 1) % self.preview_every == 0 and step_index + 1 < total:
                preview = backend.decode(z)
                tmp = os.path.join(job_dir, f".preview.{uuid.uuid4().hex}.png")
                preview.save(tmp)
                os.replace(tmp, os.path.join(job_dir, "preview.png"))
                preview_count += 1
            self.store.update(
                job_id,
                progress={
                    "phase": "sampling",
                    "step": step_index + 1,
                    "total": total,
                    "preview": preview_count,
                },
            )

        self.store.update(job_id, state="sampling")
        if record["kind"] == "sweep":
            lams = tuple(sorted(params["lams"]))
            outputs = []
            for index, lam in enumerate(lams):
                swept = replace(request, config=config.replace(lam=lam))
                result = material_transfer(
                    backend,
                    swept,
                    inversion=inversion,
                    on_step=on_step,
                    should_cancel=cancel_event.is_set,
                )
                name = f"result_{index}.png"
                result.image.save(os.path.join(job_dir, name))
                outputs.append({"lam": lam, "image": name})
            self.store.update(job_id, state="done", results=outputs)
        else:
            result = material_transfer(
                backend,
                request,
                inversion=inversion,
                on_step=on_step,
                should_cancel=cancel_event.is_set,
            )
            result.image.save(os.path.join(job_dir, "result.png"))
            self.store.update(job_id, state="done", results=[{"lam": config.lam, "image": "result.png"}])


def create_app(
    backend_kind: str = "toy",
    backend_seed: int = 0,
    weights_dir: str | None = None,
    data_dir: str | None = None,
    workers: int | None = None,
    preview_every: int = 10,
    step_delay: float | None = None,
):
    """Build the FastAPI app; importable by tests and the serve command."""
    if data_dir is None:
        data_dir = os.environ.get("MATFUSE_CACHE_DIR") or os.path.join(os.getcwd(), "matfuse_data")
    if step_delay is None:
        step_delay = float(os.environ.get("MATFUSE_STEP_DELAY", "0") or 0)

    service = TransferService(
        data_dir=data_dir,
        backend_kind=backend_kind,
        backend_seed=backend_seed,
        weights_dir=weights_dir,
        workers=workers,
        preview_every=preview_every,
        step_delay=step_delay,
    )
    app = FastAPI(title="matfuse service")
    # The browser console is served from a different origin (or file://);
    # nothing here uses cookies, so a blanket allowance is safe.
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    app.state.service = service

    def public(record: dict) -> dict:
        return {
            "id": record["id"],
            "kind": record["kind"],
            "state": record["state"],
            "error": record["error"],
            "progress": record["progress"],
            "results": record["results"],
            "created_at": record["created_at"],
            "updated_at": record["updated_at"],
        }

    @app.get("/health")
    def health():
        return {"status": "ok", "backend": service.backend_kind, "workers": service.worker_count}

    @app.post("/uploads")
    async def upload(file: UploadFile = File(...)):
        data = await file.read()
        try:
            from PIL import Image

            Image.open(io.BytesIO(data)).verify()
        except Exception:
            raise HTTPException(status_code=400, detail="not a decodable image")
        digest = service.store.save_upload(data)
        return {"sha256": digest, "bytes": len(data)}

    def resolve_upload(digest: str, field: str) -> str:
        if service.store.upload_path(digest) is None:
            raise HTTPException(status_code=400, detail=f"unknown upload for {field}: {digest}")
        return digest

    @app.post("/jobs")
    def create_job(payload: dict):
        kind = payload.get("kind", "transfer")
        if kind not in ("transfer", "sweep"):
            raise HTTPException(status_code=400, detail=f"unknown job kind {kind!r}")
        for field in ("init", "material", "mask", "y_src", "y_trg"):
            if field not in payload:
                raise HTTPException(status_code=400, detail=f"missing field {field!r}")
        values = dict(CONFIG_DEFAULTS)
        values.update(payload.get("config") or {})
        try:
            config = make_config(values)
        except (ConfigError, ValidationError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        params = {
            "init": resolve_upload(payload["init"], "init"),
            "material": resolve_upload(payload["material"], "material"),
            "mask": resolve_upload(payload["mask"], "mask"),
            "y_src": payload["y_src"],
            "y_trg": payload["y_trg"],
            "config": config.to_dict(),
        }
        if kind == "sweep":
            lams = payload.get("lams") or list(DEFAULT_SWEEP)
            try:
                params["lams"] = [float(v) for v in lams]
            except (TypeError, ValueError):
                raise HTTPException(status_code=400, detail=f"bad lams: {lams!r}")
        record = service.submit(params, kind)
        return JSONResponse(public(record), status_code=201)

    def get_record(job_id: str) -> dict:
        record = service.store.get(job_id)
        if record is None:
            raise HTTPException(status_code=404, detail="no such job")
        return record

    @app.get("/jobs")
    def list_jobs():
        return {"jobs": [public(r) for r in service.store.list_jobs()]}

    @app.get("/jobs/{job_id}")
    def job_status(job_id: str):
        return public(get_record(job_id))

    @app.post("/jobs/{job_id}/cancel")
    def cancel_job(job_id: str):
        record = get_record(job_id)
        if record["state"] in ("done", "failed"):
            raise HTTPException(status_code=409, detail=f"job already {record['state']}")
        return public(service.cancel(job_id))

    @app.get("/jobs/{job_id}/result")
    def job_result(job_id: str, index: int = 0):
        record = get_record(job_id)
        if record["state"] != "done":
            raise HTTPException(status_code=409, detail=f"job is {record['state']}, not done")
        if not 0 <= index < len(record["results"]):
            raise HTTPException(status_code=404, detail=f"no result index {index}")
        name = record["results"][index]["image"]
        return FileResponse(os.path.join(service.store.job_dir(job_id), name), media_type="image/png")

    @app.get("/jobs/{job_id}/gallery")
    def job_gallery(job_id: str):
        record = get_record(job_id)
        if record["state"] != "done":
            raise HTTPException(status_code=409, detail=f"job is {record['state']}, not done")
        entries = [
            {"lam": item["lam"], "url": f"/jobs/{job_id}/result?index={i}"}
            for i, item in enumerate(record["results"])
        ]
        return {"id": job_id, "results": entries}

    @app.get("/jobs/{job_id}/preview")
    def job_preview(job_id: str):
        get_record(job_id)
        path = os.path.join(service.store.job_dir(job_id), "preview.png")
        if not os.path.isfile(path):
            raise HTTPException(status_code=404, detail="no preview yet")
        return FileResponse(path, media_type="image/png")

    return app
