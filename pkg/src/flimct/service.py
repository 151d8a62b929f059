"""HTTP session API for the interactive marker-drawing workflow.

One session per server process; state (markers, accepted layers,
evaluation history) is persisted after every mutation so the process can
be restarted without losing work.
"""

from __future__ import annotations

import io
import json
import os
import threading

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse

from . import classify, flim, volcore
from .archlab import ArchSession, accept_layer, evaluate_candidate
from .cli import load_dataset
from .errors import FlimError, InvalidCoord
from .flim import ConvLayerSpec, MarkerSet
from .volcore import _atomic_write_bytes


def window_to_u8(plane: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Linear window [lo, hi] -> [0, 255] with round-half-up and clamping."""
    if hi <= lo:
        hi = lo + 1.0
    scaled = (plane.astype(np.float64) - lo) / (hi - lo) * 255.0
    return np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)


def _png_bytes(img: np.ndarray) -> bytes:
    from PIL import Image
    buf = io.BytesIO()
    Image.fromarray(img, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status,
                        content={"error": code, "message": message})


class SessionState:
    def __init__(self, data_dir: str, markers_dir: str, session_dir: str):
        self.volumes, self.labels = load_dataset(data_dir)
        self.markers_dir = markers_dir
        self.session_dir = session_dir
        os.makedirs(markers_dir, exist_ok=True)
        os.makedirs(session_dir, exist_ok=True)
        self.marker_store: dict[str, MarkerSet] = {}
        for fname in sorted(os.listdir(markers_dir)):
            if fname.endswith(".json"):
                mset = MarkerSet.load(os.path.join(markers_dir, fname))
                self.marker_store[mset.volume_id] = mset
        self.session = self._load_or_init_session()
        self.status = "idle"
        self.training_lock = threading.Lock()
        self.write_lock = threading.Lock()

    def _load_or_init_session(self) -> ArchSession:
        path = os.path.join(self.session_dir, "session.json")
        if os.path.isfile(path):
            return ArchSession.load(path)
        abnormal = sorted(vid for vid, lab in self.labels.items() if lab > 0)
        if len(abnormal) < 6:
            raise FlimError("session needs at least 6 abnormal volumes")
        session = ArchSession(marker_ids=abnormal[:3],
                              validation_ids=abnormal[3:6],
                              checkpoint_path=path)
        session.checkpoint()
        return session

    def train_pool(self) -> list[str]:
        held_out = set(self.session.marker_ids) | set(self.session.validation_ids)
        return sorted(vid for vid in self.volumes if vid not in held_out)


def create_app(data_dir: str, markers_dir: str, session_dir: str) -> FastAPI:
    app = FastAPI(title="flimct session API")
    state = SessionState(data_dir, markers_dir, session_dir)
    app.state.session_state = state

    @app.get("/volumes")
    def list_volumes():
        out = []
        for vid in sorted(state.volumes):
            vol = state.volumes[vid]
            label = "abnormal" if state.labels.get(vid, 0) > 0 else "normal"
            out.append({"id": vid, "dims": list(vol.dims), "label": label})
        return out

    @app.get("/volumes/{vid}/slice")
    def get_slice(vid: str, axis: int = 2, index: int = 0,
                  window_lo: float = 0.0, window_hi: float = 4095.0,
                  channel: int = 0):
        if vid not in state.volumes:
            return _error(404, "not_found", f"unknown volume {vid}")
        try:
            plane = volcore.slice_extract(state.volumes[vid], axis, index, channel)
        except FlimError as e:
            return _error(422, "bad_index", str(e))
        img = window_to_u8(plane, window_lo, window_hi)
        return Response(content=_png_bytes(img), media_type="image/png")

    @app.get("/volumes/{vid}/markers")
    def get_markers(vid: str):
        if vid not in state.volumes:
            return _error(404, "not_found", f"unknown volume {vid}")
        mset = state.marker_store.get(vid)
        if mset is None:
            return {"volume_id": vid, "markers": []}
        return mset.to_dict()

    @app.put("/volumes/{vid}/markers", status_code=204)
    async def put_markers(vid: str, request: Request):
        if vid not in state.volumes:
            return _error(404, "not_found", f"unknown volume {vid}")
        try:
            body = json.loads(await request.body())
            mset = MarkerSet.from_dict(body)
            if mset.volume_id != vid:
                raise ValueError("volume_id does not match URL")
            mset.validate_dims(state.volumes[vid].dims)
        except (ValueError, KeyError, TypeError, InvalidCoord,
                json.JSONDecodeError) as e:
            return _error(422, "invalid_markers", str(e))
        with state.write_lock:
            mset.save(os.path.join(state.markers_dir, f"{vid}.json"))
            state.marker_store[vid] = mset
        return Response(status_code=204)

    @app.get("/session")
    def get_session():
        return {
            "marker_ids": state.session.marker_ids,
            "validation_ids": state.session.validation_ids,
            "depth": len(state.session.accepted_layers),
            "status": state.status,
            "history": [{"spec": s.to_dict(), "report": r.to_dict()}
                        for s, r in state.session.history],
        }

    @app.get("/session/status")
    def get_status():
        return {"status": state.status,
                "depth": len(state.session.accepted_layers)}

    def _parse_spec(body: dict) -> ConvLayerSpec:
        return ConvLayerSpec.from_dict(body)

    def _markers_ready() -> str | None:
        missing = [vid for vid in state.session.marker_ids
                   if vid not in state.marker_store]
        return None if not missing else ", ".join(missing)

    @app.post("/session/layers")
    async def evaluate_layer(request: Request):
        try:
            spec = _parse_spec(json.loads(await request.body()))
        except (ValueError, KeyError, TypeError, json.JSONDecodeError) as e:
            return _error(422, "invalid_spec", str(e))
        missing = _markers_ready()
        if missing:
            return _error(422, "missing_markers", f"no markers for: {missing}")
        if not state.training_lock.acquire(blocking=False):
            return _error(409, "training_in_progress", "a training job is running")
        try:
            state.status = "training"
            report = evaluate_candidate(
                state.session, spec, state.volumes, state.labels,
                state.marker_store, state.train_pool())
            state.session.checkpoint()
            return report.to_dict()
        except FlimError as e:
            return _error(422, "training_failed", str(e))
        finally:
            state.status = "ready"
            state.training_lock.release()

    @app.post("/session/layers/accept", status_code=204)
    async def accept(request: Request):
        try:
            spec = _parse_spec(json.loads(await request.body()))
        except (ValueError, KeyError, TypeError, json.JSONDecodeError) as e:
            return _error(422, "invalid_spec", str(e))
        if not state.training_lock.acquire(blocking=False):
            return _error(409, "training_in_progress", "a training job is running")
        try:
            state.status = "training"
            accept_layer(state.session, spec, state.volumes, state.marker_store)
            return Response(status_code=204)
        except FlimError as e:
            return _error(422, "accept_failed", str(e))
        finally:
            state.status = "ready"
            state.training_lock.release()

    @app.get("/volumes/{vid}/activations/{layer}/{kernel}/slice")
    def activation_slice(vid: str, layer: int, kernel: int,
                         axis: int = 2, index: int = 0):
        if vid not in state.volumes:
            return _error(404, "not_found", f"unknown volume {vid}")
        depth = len(state.session.accepted_layers)
        if not 1 <= layer <= depth:
            return _error(422, "bad_layer", f"layer must be in [1, {depth}]")
        layers = state.session.accepted_layers[:layer]
        if not 0 <= kernel < layers[-1].spec.n_kernels:
            return _error(422, "bad_kernel",
                          f"kernel must be < {layers[-1].spec.n_kernels}")
        fmap = state.volumes[vid]
        for lyr in layers:
            fmap = flim.conv_forward(fmap, lyr)
        try:
            plane = volcore.slice_extract(fmap, axis, index, kernel)
        except FlimError as e:
            return _error(422, "bad_index", str(e))
        peak = float(fmap.data[..., kernel].max())
        img = window_to_u8(plane, 0.0, peak if peak > 0 else 1.0)
        return Response(content=_png_bytes(img), media_type="image/png")

    return app
