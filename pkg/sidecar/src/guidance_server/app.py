"""HTTP surface: validation, error mapping, bounded concurrency."""

import threading

from fastapi import FastAPI
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from . import schemas
from .config import ServerConfig
from .engine import EngineLoadError, load_engine


def _error(status, code, message):
    return JSONResponse(status_code=status,
                        content={"code": code, "message": str(message)[:500]})


def create_app(config: ServerConfig | None = None) -> FastAPI:
    config = (config or ServerConfig()).validate()
    app = FastAPI(title="guidance-server", version="0.1.0")

    # engine loads lazily on first use; a failure is reported per request
    # (503) and retried on the next one rather than cached
    holder: dict = {}
    load_lock = threading.Lock()
    gate = threading.BoundedSemaphore(int(config.max_concurrent))

    def engine():
        with load_lock:
            if "engine" not in holder:
                holder["engine"] = load_engine(config)
            return holder["engine"]

    @app.exception_handler(RequestValidationError)
    async def _invalid(request, exc):
        return _error(400, "invalid_payload", exc)

    @app.exception_handler(schemas.PayloadError)
    async def _bad_payload(request, exc):
        return _error(400, "invalid_payload", exc)

    @app.exception_handler(EngineLoadError)
    async def _no_model(request, exc):
        return _error(503, "model_unavailable", exc)

    def _require_mode(body: schemas.WireRequest, mode: str):
        if body.mode != mode:
            raise schemas.PayloadError(
                f"mode {body.mode!r} posted to the {mode} endpoint")

    # handlers are sync on purpose: starlette runs them on worker threads,
    # and the semaphore bounds how many reach the engine at once
    @app.post("/v1/generate", response_model=schemas.GenerateResponse)
    def generate(body: schemas.WireRequest):
        _require_mode(body, "generate")
        cond = schemas.decode_png(body.cond_image)
        with gate:
            img = engine().generate(
                cond, body.prompt, body.negative_prompt,
                body.strength, body.cfg_scale, body.seed)
        return schemas.GenerateResponse(image=schemas.encode_png(img))

    @app.post("/v1/score", response_model=schemas.ScoreResponse)
    def score(body: schemas.WireRequest):
        _require_mode(body, "score")
        cond = schemas.decode_png(body.cond_image)
        noisy = schemas.decode_array(body.noisy_image)
        with gate:
            eps = engine().score(
                cond, noisy, float(body.t), body.prompt,
                body.negative_prompt, body.strength, body.cfg_scale)
        return schemas.ScoreResponse(epsilon=schemas.encode_array(eps))

    @app.get("/v1/health")
    def health():
        return {"status": "ok", "model": config.model}

    return app
