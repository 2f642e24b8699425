"""HTTP inference API over a frozen checkpoint.

Serves encoding, reconstruction, editing and mixing for the latent-editor
UI and scripted clients. The loaded model is immutable for the session;
encoded latents are cached by image content hash, and clients may instead
round-trip latent arrays to run multi-step edits without server state.
"""

from __future__ import annotations

import base64
import hashlib
import io
import time
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from . import edit as edit_ops
from .model import DualDisModel, LatentPair
from .persist import load_checkpoint

DEFAULT_MAX_PAYLOAD = 8_000_000


class EncodeRequest(BaseModel):
    image: str  # base64 PNG


class LatentHandle(BaseModel):
    h_y: list[float]
    h_z: list[float]


class EditRequest(BaseModel):
    image_id: Optional[str] = None
    latents: Optional[LatentHandle] = None
    attribute: str | int
    epsilon: float


class ReconstructRequest(BaseModel):
    image_id: str


class MixRequest(BaseModel):
    identity_image_id: str
    attribute_image_id: str


class CalibrateRequest(BaseModel):
    attribute: str | int
    epsilon: Optional[float] = None  # None resets to the calibrated default


class Session:
    """Frozen model plus the per-checkpoint attribute/epsilon tables."""

    def __init__(self, checkpoint_path: Path):
        loaded = load_checkpoint(checkpoint_path, inference_only=True)
        self.model: DualDisModel = loaded.model
        self.model.eval()
        self.config = loaded.config
        names = loaded.config.attribute_names or tuple(
            f"attr_{i}" for i in range(loaded.config.n_attributes)
        )
        self.attribute_names = list(names)
        eps_extra = loaded.extra.get("epsilons", {})
        self.default_epsilons = {i: float(eps_extra.get(name, 1.0)) for i, name in enumerate(self.attribute_names)}
        self.epsilons = dict(self.default_epsilons)
        self.checkpoint_id = hashlib.sha256(Path(checkpoint_path).read_bytes()).hexdigest()[:16]
        self.latents: dict[str, LatentPair] = {}

    def attribute_index(self, attribute: str | int) -> int:
        if isinstance(attribute, int) or (isinstance(attribute, str) and attribute.isdigit()):
            idx = int(attribute)
            if not 0 <= idx < self.config.n_attributes:
                raise HTTPException(422, f"attribute index {idx} out of range")
            return idx
        try:
            return self.attribute_names.index(attribute)
        except ValueError:
            raise HTTPException(422, f"unknown attribute {attribute!r}") from None


def _decode_image(session: Session, b64: str, max_payload: int) -> torch.Tensor:
    if len(b64) > max_payload:
        raise HTTPException(413, "payload too large")
    from PIL import Image

    try:
        raw = base64.b64decode(b64, validate=True)
        with Image.open(io.BytesIO(raw)) as im:
            arr = np.asarray(im.convert("RGB" if session.config.image_channels == 3 else "L"), dtype=np.float32) / 255.0
    except Exception:
        raise HTTPException(400, "malformed image payload") from None
    if arr.ndim == 2:
        arr = arr[None, :, :]
    else:
        arr = arr.transpose(2, 0, 1)
    size = session.config.image_size
    if arr.shape[1] != size or arr.shape[2] != size:
        raise HTTPException(400, f"expected a {size}x{size} image, got {arr.shape[1]}x{arr.shape[2]}")
    return torch.from_numpy(arr).unsqueeze(0)


def _encode_png(image: torch.Tensor) -> str:
    from PIL import Image

    arr = np.clip(np.round(image.squeeze(0).numpy() * 255.0), 0, 255).astype(np.uint8)
    arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def create_app(checkpoint_path: Optional[Path | str] = None, max_payload: int = DEFAULT_MAX_PAYLOAD, static_dir: Optional[Path | str] = None) -> FastAPI:
    app = FastAPI(title="dualdis latent editing service")
    app.state.session = Session(Path(checkpoint_path)) if checkpoint_path else None
    app.state.started = time.time()
    app.state.max_payload = max_payload

    def session() -> Session:
        if app.state.session is None:
            raise HTTPException(503, "no checkpoint loaded")
        return app.state.session

    def get_latents(s: Session, image_id: str) -> LatentPair:
        pair = s.latents.get(image_id)
        if pair is None:
            raise HTTPException(404, f"unknown image id {image_id!r}")
        return pair

    @app.get("/health")
    def health():
        if app.state.session is None:
            return JSONResponse({"status": "no checkpoint loaded"}, status_code=503)
        return {
            "status": "ok",
            "checkpoint_id": app.state.session.checkpoint_id,
            "uptime_s": time.time() - app.state.started,
        }

    @app.get("/attributes")
    def attributes():
        s = session()
        return {
            "names": s.attribute_names,
            "epsilons": {name: s.epsilons[i] for i, name in enumerate(s.attribute_names)},
            "defaults": {name: s.default_epsilons[i] for i, name in enumerate(s.attribute_names)},
        }

    @app.post("/calibrate")
    def calibrate(req: CalibrateRequest):
        s = session()
        idx = s.attribute_index(req.attribute)
        if req.epsilon is None:
            s.epsilons[idx] = s.default_epsilons[idx]
        else:
            if req.epsilon <= 0:
                raise HTTPException(422, "epsilon must be positive")
            s.epsilons[idx] = float(req.epsilon)
        return {"attribute": s.attribute_names[idx], "epsilon": s.epsilons[idx]}

    @app.post("/encode")
    @torch.no_grad()
    def encode(req: EncodeRequest):
        s = session()
        x = _decode_image(s, req.image, app.state.max_payload)
        image_id = hashlib.sha256(base64.b64decode(req.image)).hexdigest()[:24]
        pair = s.model.encode(x)
        s.latents[image_id] = pair
        y_probs, z_probs = s.model.heads(pair)
        return {
            "image_id": image_id,
            "h_y": pair.h_y.squeeze(0).tolist(),
            "h_z": pair.h_z.squeeze(0).tolist(),
            "y_probs": y_probs.squeeze(0).tolist(),
            "z_probs": z_probs.squeeze(0).tolist(),
        }

    @app.post("/reconstruct")
    @torch.no_grad()
    def reconstruct(req: ReconstructRequest):
        s = session()
        pair = get_latents(s, req.image_id)
        image = s.model.decode(pair.h_y, pair.h_z).clamp(0.0, 1.0)
        return {"image": _encode_png(image), "image_id": req.image_id}

    @app.post("/edit")
    @torch.no_grad()
    def edit(req: EditRequest):
        s = session()
        idx = s.attribute_index(req.attribute)
        if req.latents is not None:
            pair = LatentPair(
                torch.tensor([req.latents.h_y], dtype=torch.float32),
                torch.tensor([req.latents.h_z], dtype=torch.float32),
            )
            if pair.h_y.shape[1] != s.config.dim_hy or pair.h_z.shape[1] != s.config.dim_hz:
                raise HTTPException(422, "latent handle has wrong dimensions")
        elif req.image_id is not None:
            pair = get_latents(s, req.image_id)
        else:
            raise HTTPException(422, "provide image_id or latents")
        image, z_probs, edited = edit_ops.slide(s.model, pair, idx, req.epsilon)
        return {
            "image": _encode_png(image.clamp(0.0, 1.0)),
            "z_probs": z_probs.squeeze(0).tolist(),
            "latents": {"h_y": edited.h_y.squeeze(0).tolist(), "h_z": edited.h_z.squeeze(0).tolist()},
        }

    @app.post("/mix")
    @torch.no_grad()
    def mix(req: MixRequest):
        s = session()
        a = get_latents(s, req.identity_image_id)
        b = get_latents(s, req.attribute_image_id)
        image = edit_ops.mix(s.model, a, b).clamp(0.0, 1.0)
        audit_pair = s.model.encode(image)
        y_probs, z_probs = s.model.heads(audit_pair)
        return {
            "image": _encode_png(image),
            "audit": {"y_probs": y_probs.squeeze(0).tolist(), "z_probs": z_probs.squeeze(0).tolist()},
        }

    if static_dir is not None and Path(static_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="ui")

    return app


def serve(checkpoint_path: Path | str, port: int = 8008, host: str = "127.0.0.1", max_payload: int = DEFAULT_MAX_PAYLOAD, static_dir: Optional[Path | str] = None):
    import uvicorn

    app = create_app(checkpoint_path, max_payload, static_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")
