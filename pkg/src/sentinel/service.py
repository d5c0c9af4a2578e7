"""HTTP surface: recognition, review queue with SSE, corrections, model ops.

All state lives in the PipelineRuntime; this module only maps endpoints to
runtime calls and runtime exceptions to status codes. The review console
(static single-page app) is served under /console/ when configured.

SSE stream events on /v1/review/stream (all JSON, `data:` lines):
  queue_add     {item}                  new pending review item
  resolved      {prediction_id,action}  item confirmed or corrected
  model_swap    {version}               active model changed
  job_finished  {job}                   training job terminal state
"""

from __future__ import annotations

import json
import queue
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import FileResponse, JSONResponse, StreamingResponse
from pydantic import BaseModel, Field

from .config import ServiceConfig
from .deploy import NoPreviousVersion
from .runtime import (
    AlreadyResolved,
    BackendUnavailable,
    BadCursor,
    CorrectionRejected,
    PipelineRuntime,
    UnknownPrediction,
)
from .vqa import EmptyTaskSet, ImageRef, TaskKind


class ImageRefBody(BaseModel):
    id: str
    digest: str
    width: int = 0
    height: int = 0
    quality_score: float = Field(default=1.0, ge=0.0, le=1.0)


class RecognizeBody(BaseModel):
    image: ImageRefBody
    tasks: list[str]


class ResolveBody(BaseModel):
    operator_id: str = "operator"


class CorrectBody(BaseModel):
    operator_id: str = "operator"
    corrections: dict[str, str]


def create_app(runtime: PipelineRuntime) -> FastAPI:
    app = FastAPI(title="sentinel", version="0.1.0")
    config = runtime.config

    def _tasks_from(names: list[str]) -> list[TaskKind]:
        try:
            return [TaskKind(n) for n in names]
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=f"unknown task: {exc}")

    @app.get("/v1/health")
    def health():
        return {"status": "ok", "model_version": runtime.registry.current_version()}

    @app.post("/v1/recognize")
    def recognize(body: RecognizeBody):
        tasks = _tasks_from(body.tasks)
        if not tasks:
            raise HTTPException(status_code=400, detail="tasks must be non-empty")
        try:
            image = ImageRef(
                id=body.image.id,
                digest=body.image.digest,
                width=body.image.width,
                height=body.image.height,
                quality_score=body.image.quality_score,
            )
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        try:
            rec = runtime.recognize(image, tasks)
        except EmptyTaskSet as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        except BackendUnavailable as exc:
            raise HTTPException(status_code=503, detail=str(exc))
        return rec.to_dict()

    @app.get("/v1/review/queue")
    def review_queue(limit: int = 50, cursor: Optional[str] = None):
        try:
            return runtime.review_queue(limit=limit, cursor=cursor)
        except BadCursor as exc:
            raise HTTPException(status_code=400, detail=str(exc))

    @app.get("/v1/review/stream")
    def review_stream(request: Request):
        q = runtime.subscribe()

        def gen():
            try:
                yield "retry: 2000\n\n"
                while True:
                    try:
                        event = q.get(timeout=15.0)
                    except queue.Empty:
                        yield ": keepalive\n\n"
                        continue
                    yield f"data: {json.dumps(event)}\n\n"
            finally:
                runtime.unsubscribe(q)

        return StreamingResponse(gen(), media_type="text/event-stream")

    @app.post("/v1/review/{prediction_id}/confirm")
    def confirm(prediction_id: str, body: ResolveBody):
        try:
            rec = runtime.confirm(prediction_id, body.operator_id)
        except UnknownPrediction:
            raise HTTPException(status_code=404, detail=f"unknown prediction {prediction_id}")
        except AlreadyResolved:
            raise HTTPException(status_code=409, detail=f"{prediction_id} already resolved")
        return rec.to_dict()

    @app.post("/v1/review/{prediction_id}/correct")
    def correct(prediction_id: str, body: CorrectBody):
        corrections = {}
        for name, value in body.corrections.items():
            try:
                corrections[TaskKind(name)] = value
            except ValueError:
                raise HTTPException(status_code=400, detail=f"unknown task {name!r}")
        try:
            rec, job_id = runtime.correct(prediction_id, body.operator_id, corrections)
        except UnknownPrediction:
            raise HTTPException(status_code=404, detail=f"unknown prediction {prediction_id}")
        except AlreadyResolved:
            raise HTTPException(status_code=409, detail=f"{prediction_id} already resolved")
        except CorrectionRejected as exc:
            raise HTTPException(status_code=422, detail={"rejected": exc.reasons})
        payload = rec.to_dict()
        payload["training_job"] = job_id
        payload["pending_corrections"] = runtime.corrections.pending_count()
        return payload

    @app.get("/v1/metrics")
    def metrics():
        return runtime.metrics_snapshot()

    @app.get("/v1/models")
    def models():
        return runtime.models_listing()

    @app.post("/v1/models/rollback")
    def rollback():
        try:
            return runtime.rollback()
        except NoPreviousVersion as exc:
            raise HTTPException(status_code=409, detail=str(exc))

    @app.get("/v1/jobs/{job_id}")
    def job(job_id: str):
        found = runtime.jobs.get(job_id)
        if found is None:
            raise HTTPException(status_code=404, detail=f"unknown job {job_id}")
        return found

    @app.get("/v1/review/secondary")
    def secondary_review():
        return {"items": [c.to_dict() for c in runtime.corrections.secondary_review()]}

    @app.get("/v1/images/{digest}")
    def image(digest: str):
        if config.object_store_path is None:
            raise HTTPException(status_code=404, detail="no object store configured")
        path = Path(config.object_store_path) / digest
        if not path.exists():
            raise HTTPException(status_code=404, detail="image not found")
        return FileResponse(path)

    if config.console_path is not None:
        console_dir = Path(config.console_path)

        @app.get("/console/")
        def console_index():
            return FileResponse(console_dir / "index.html")

        @app.get("/console/{asset:path}")
        def console_asset(asset: str):
            path = (console_dir / asset).resolve()
            if not str(path).startswith(str(console_dir.resolve())) or not path.is_file():
                raise HTTPException(status_code=404, detail="asset not found")
            return FileResponse(path)

    @app.exception_handler(Exception)
    def unhandled(request: Request, exc: Exception):
        return JSONResponse(status_code=500, content={"detail": f"{type(exc).__name__}: {exc}"})

    return app


def serve(config: ServiceConfig) -> None:
    """Blocking uvicorn server entry point."""
    import uvicorn

    runtime = PipelineRuntime(config)
    app = create_app(runtime)
    uvicorn.run(app, host=config.host, port=config.port, log_level="warning")
