"""HTTP inference service wrapping the generation pipeline.

Endpoints:
    GET  /health       liveness + version + config hash
    POST /generate     text + object -> motion sequence
    POST /contact-map  text + object -> per-point contact probabilities

Objects are referenced by server-side source: a bundled primitive name
("sphere", "box", "cylinder", "articulated-box") or a mesh path readable by
the server process.  Training is not served; use the CLI.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import primitives
from .config import VERSION
from .geometry import canonicalize_object
from .pipeline import GenerationPipeline, PipelineError


class GenerateRequest(BaseModel):
    text: str = Field(min_length=1)
    object_source: str = Field(description="Primitive name or server-side mesh path.")
    refine: bool = True
    seed: int = 0
    length: int | None = Field(default=None, ge=1, le=150)
    hand_type: str | None = Field(default=None, pattern="^(left|right|both)$")


class GenerateResponse(BaseModel):
    text: str
    hand_type: str
    length: int
    refined: bool
    seed: int
    lhand: list[list[float]]
    rhand: list[list[float]]
    obj: list[list[float]]
    config_hash: str
    version: str


class ContactRequest(BaseModel):
    text: str = Field(min_length=1)
    object_source: str
    seed: int = 0


class ContactResponse(BaseModel):
    contact: list[float]
    n_points: int
    config_hash: str
    version: str


def _resolve_object(pipeline: GenerationPipeline, source: str):
    if source in primitives.PRIMITIVES:
        verts, faces, articulation = primitives.primitive_mesh(source)
        return canonicalize_object(verts, faces, n=pipeline.cfg.n_points,
                                   articulation=articulation)
    path = Path(source)
    if not path.exists():
        raise HTTPException(status_code=404,
                            detail=f"object source not found: {source}")
    try:
        return pipeline.load_object(path)
    except Exception as exc:  # noqa: BLE001 - surface as a client error
        raise HTTPException(status_code=400, detail=str(exc)) from exc


def create_app(checkpoint_dir=None, pipeline: GenerationPipeline | None = None) -> FastAPI:
    if pipeline is None:
        if checkpoint_dir is None:
            raise ValueError("create_app needs a checkpoint_dir or a pipeline")
        pipeline = GenerationPipeline.load(checkpoint_dir)
    app = FastAPI(title="hoigen", version=VERSION)
    app.state.pipeline = pipeline

    @app.get("/health")
    def health():
        return {"status": "ok", "version": VERSION,
                "config_hash": pipeline.cfg.hash,
                "refiner_loaded": pipeline.refiner is not None}

    @app.post("/generate", response_model=GenerateResponse)
    def generate(req: GenerateRequest):
        spec = _resolve_object(pipeline, req.object_source)
        try:
            res = pipeline.generate(req.text, spec, seed=req.seed, refine=req.refine,
                                    length=req.length, hand_type=req.hand_type)
        except PipelineError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        return GenerateResponse(
            text=req.text, hand_type=res.hand_type, length=res.length,
            refined=res.refined, seed=req.seed,
            lhand=res.seq.lhand.tolist(), rhand=res.seq.rhand.tolist(),
            obj=res.seq.obj.tolist(),
            config_hash=pipeline.cfg.hash, version=VERSION)

    @app.post("/contact-map", response_model=ContactResponse)
    def contact_map(req: ContactRequest):
        spec = _resolve_object(pipeline, req.object_source)
        contact = pipeline.contact_map(req.text, spec, seed=req.seed)
        return ContactResponse(contact=[float(x) for x in contact],
                               n_points=len(contact),
                               config_hash=pipeline.cfg.hash, version=VERSION)

    return app
