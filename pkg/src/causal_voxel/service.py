"""HTTP JSON API for counterfactual queries and slice rendering.

State is limited to an upload store, a bounded inversion cache keyed by
image content hash, and a response cache that makes identical requests
byte-identical without recomputation. Handlers are otherwise pure; cache
fills are single-flight per image.
"""

from __future__ import annotations

import hashlib
import io
import json
import threading
from collections import OrderedDict

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from .dataset_io import NiftiError, read_volume, write_volume
from .inversion import OptimizerConfig, invert
from .latent_edit import VolumeRegression, counterfactual_image
from .metrics import ssim3d
from .phantom import PhantomGenerator, VoxelGrid, measure_volumes
from .scm import CausalGraph, GraphError

__all__ = ["build_app", "SessionState"]

AXES = {"sagittal": 0, "coronal": 1, "axial": 2}
VARIABLE_ALIASES = {"age": "a", "sex": "s", "mmse": "m", "score": "m",
                    "brain": "b", "gm": "g", "ventricle": "v"}


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str, details=None):
        self.status = status
        self.code = code
        self.message = message
        self.details = details or {}


class LruCache:
    """Tiny thread-safe LRU; entries are immutable once stored."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._data = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, key):
        with self._lock:
            if key in self._data:
                self._data.move_to_end(key)
                self.hits += 1
                return self._data[key]
            self.misses += 1
            return None

    def put(self, key, value):
        with self._lock:
            if key not in self._data:
                self._data[key] = value
            self._data.move_to_end(key)
            while len(self._data) > self.capacity:
                self._data.popitem(last=False)

    def __contains__(self, key):
        with self._lock:
            return key in self._data


class SessionState:
    """Model bundle plus caches; one per served application."""

    def __init__(self, graph: CausalGraph, mechanisms: dict,
                 generator: PhantomGenerator, regression: VolumeRegression,
                 seed: int = 0, cache_size: int = 32):
        self.graph = graph
        self.mechanisms = mechanisms
        self.generator = generator
        self.regression = regression
        self.seed = seed
        self.images = LruCache(capacity=256)
        self.inversions = LruCache(capacity=cache_size)
        self.responses = LruCache(capacity=cache_size * 4)
        self._flight_locks = {}
        self._flight_guard = threading.Lock()

    def flight_lock(self, key) -> threading.Lock:
        with self._flight_guard:
            if key not in self._flight_locks:
                self._flight_locks[key] = threading.Lock()
            return self._flight_locks[key]

    def store_image(self, vox: VoxelGrid) -> str:
        image_id = hashlib.sha256(
            vox.data.tobytes() + repr(vox.spacing).encode()
        ).hexdigest()[:16]
        self.images.put(image_id, vox)
        return image_id

    def get_image(self, image_id: str) -> VoxelGrid:
        vox = self.images.get(image_id)
        if vox is None:
            raise ApiError(404, "unknown_image", f"no image with id {image_id!r}")
        return vox

    def invert_cached(self, image_id: str):
        cached = self.inversions.get(image_id)
        if cached is not None:
            return cached
        with self.flight_lock(("invert", image_id)):
            cached = self.inversions.get(image_id)
            if cached is not None:
                return cached
            result = invert(self.get_image(image_id), self.generator,
                            OptimizerConfig.fast(seed=self.seed))
            self.inversions.put(image_id, result)
            return result


def build_app(graph=None, mechanisms=None, generator=None, regression=None,
              seed: int = 0, cache_size: int = 32) -> FastAPI:
    """Service application; pass no model to get 503s on model endpoints."""
    app = FastAPI(title="causal-voxel", docs_url=None, redoc_url=None)
    # the browser UI is served from a different origin than the API
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"],
    )
    loaded = all(x is not None for x in (graph, mechanisms, generator, regression))
    state = SessionState(graph, mechanisms, generator, regression, seed,
                         cache_size) if loaded else None
    app.state.session = state

    def require_state() -> SessionState:
        if state is None:
            raise ApiError(503, "model_not_loaded", "no model bundle is loaded")
        return state

    @app.exception_handler(ApiError)
    async def handle_api_error(_request: Request, exc: ApiError):
        return JSONResponse(
            status_code=exc.status,
            content={"code": exc.code, "message": exc.message, "details": exc.details},
        )

    @app.get("/v1/health")
    def health():
        return {"status": "ok", "model_loaded": state is not None}

    @app.get("/v1/model/info")
    def model_info():
        s = require_state()
        return {
            "graph": s.graph.to_dict(),
            "grid": {"dims": list(s.generator.grid.dims),
                     "spacing": s.generator.grid.spacing},
            "style_dim": s.generator.style_dim,
            "volumes": list(s.regression.alpha.keys()),
            "cache": {
                "inversions": {"hits": s.inversions.hits, "misses": s.inversions.misses},
                "responses": {"hits": s.responses.hits, "misses": s.responses.misses},
            },
        }

    @app.post("/v1/images")
    async def upload_image(request: Request):
        s = require_state()
        blob = await request.body()
        try:
            vox = _volume_from_bytes(blob)
        except NiftiError as exc:
            raise ApiError(400, "bad_volume", str(exc)) from exc
        if vox.dims != s.generator.grid.dims:
            raise ApiError(400, "grid_mismatch",
                           f"expected dims {list(s.generator.grid.dims)}",
                           {"got": list(vox.dims)})
        image_id = s.store_image(vox)
        return {
            "image_id": image_id,
            "dims": list(vox.dims),
            "spacing": vox.spacing,
            "volumes": measure_volumes(vox).as_dict(),
        }

    @app.post("/v1/counterfactual")
    async def counterfactual_endpoint(request: Request):
        s = require_state()
        try:
            body = await request.json()
        except Exception as exc:
            raise ApiError(400, "bad_json", "request body is not valid JSON") from exc
        image_id = body.get("image_id")
        if not image_id:
            raise ApiError(400, "missing_field", "image_id is required")
        raw_interventions = body.get("interventions", {})
        mode = body.get("mode", "exact")
        if mode not in ("exact", "paper_literal"):
            raise ApiError(400, "bad_mode", f"unknown mode {mode!r}")
        interventions = {}
        for key, value in raw_interventions.items():
            name = VARIABLE_ALIASES.get(str(key).lower(), str(key))
            try:
                interventions[name] = float(value)
            except (TypeError, ValueError) as exc:
                raise ApiError(400, "bad_intervention",
                               f"value for {key!r} is not a number") from exc

        cache_key = (image_id, json.dumps(interventions, sort_keys=True), mode)
        cached = s.responses.get(cache_key)
        if cached is not None:
            return json.loads(cached)

        image = s.get_image(image_id)
        try:
            s.graph.check_intervention(interventions)
        except GraphError as exc:
            details = {}
            for name in interventions:
                spec = s.graph.by_name.get(name)
                if spec is not None and spec.bounds is not None:
                    details[name] = {"bounds": list(spec.bounds)}
            raise ApiError(400, "invalid_intervention", str(exc), details) from exc

        with s.flight_lock(("counterfactual", cache_key)):
            cached = s.responses.get(cache_key)
            if cached is not None:
                return json.loads(cached)
            inversion = s.invert_cached(image_id)
            result = counterfactual_image(
                image, interventions, s.graph, s.mechanisms, s.generator,
                s.regression, mode=mode, inversion_result=inversion,
            )
            result_id = s.store_image(result.image)
            factual = result.factual_volumes.as_dict()
            measured = measure_volumes(result.image).as_dict()
            response = {
                "image_id": image_id,
                "result_image_id": result_id,
                "interventions": interventions,
                "mode": mode,
                "factual_volumes": factual,
                "counterfactual_volumes": {
                    volume: result.counterfactual_evidence[var]
                    for volume, var in (("brain", "b"), ("gm", "g"), ("ventricle", "v"))
                },
                "measured_counterfactual_volumes": measured,
                "volume_deltas_ml": {k: measured[k] - factual[k] for k in measured},
                "volume_deltas_percent": {
                    k: 100.0 * (measured[k] - factual[k]) / factual[k] if factual[k] else 0.0
                    for k in measured
                },
                "factual_evidence": result.factual_evidence,
                "counterfactual_evidence": result.counterfactual_evidence,
                "defaulted_evidence": result.defaulted_evidence,
                "ssim": ssim3d(image, result.image),
                "inversion": {
                    "l1_error": inversion.l1_error,
                    "converged": inversion.converged,
                },
            }
            canonical = json.dumps(response, sort_keys=True)
            s.responses.put(cache_key, canonical)
            return json.loads(canonical)  # same key order as cache replays

    @app.get("/v1/images/{image_id}/slice")
    def slice_endpoint(image_id: str, axis: str = "axial", index: int = -1,
                       window: str = "0,1"):
        s = require_state()
        vox = s.get_image(image_id)
        if axis not in AXES:
            raise ApiError(422, "bad_axis", f"axis must be one of {sorted(AXES)}")
        dim = vox.dims[AXES[axis]]
        if index == -1:
            index = dim // 2
        if not 0 <= index < dim:
            raise ApiError(422, "index_out_of_range",
                           f"index {index} outside valid range",
                           {"axis": axis, "valid": [0, dim - 1]})
        try:
            lo, hi = (float(x) for x in window.split(","))
        except ValueError as exc:
            raise ApiError(422, "bad_window", "window must be 'low,high'") from exc
        if hi <= lo:
            raise ApiError(422, "bad_window", "window must satisfy low < high")
        plane = np.take(vox.data, index, axis=AXES[axis])
        return Response(content=_plane_to_png(plane, lo, hi), media_type="image/png")

    return app


def _volume_from_bytes(blob: bytes) -> VoxelGrid:
    import tempfile, os

    with tempfile.NamedTemporaryFile(suffix=".nii", delete=False) as f:
        f.write(blob)
        path = f.name
    try:
        return read_volume(path)
    finally:
        os.unlink(path)


def _plane_to_png(plane: np.ndarray, lo: float, hi: float) -> bytes:
    from PIL import Image

    scaled = np.clip((plane - lo) / (hi - lo), 0.0, 1.0)
    img = Image.fromarray(np.round(scaled * 255.0).astype(np.uint8), mode="L")
    out = io.BytesIO()
    img.save(out, format="PNG")
    return out.getvalue()


def volume_to_bytes(vox: VoxelGrid) -> bytes:
    """Serialized single-file NIfTI bytes for uploads in tests and clients."""
    import tempfile, os

    with tempfile.NamedTemporaryFile(suffix=".nii", delete=False) as f:
        path = f.name
    try:
        write_volume(path, vox)
        with open(path, "rb") as f:
            return f.read()
    finally:
        os.unlink(path)
