"""Session-oriented HTTP service for interactive refinement.

Each session owns the observed image, the evolving solution and the solver's
hidden memories.  Users step the solver, paint corrections into any channel
(which also zeroes the hidden state under the edit mask so the solver
re-examines that region), and export composites.  Requests within one session
are serialized by a per-session lock; distinct sessions run concurrently.
"""

from __future__ import annotations

import base64
import hashlib
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from . import images
from .compositing import (
    CANONICAL,
    NETWORK,
    MattingState,
    init_state,
)
from .errors import ShapeError, ValidationError
from .rim import (
    HiddenState,
    IterationConfig,
    RimNet,
    rim_step,
    to_canonical_space,
    zero_hidden,
)

EDIT_TARGETS = {"foreground": (0, 3), "background": (3, 6), "alpha": (6, 7)}


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str, detail: str = ""):
        self.status = status
        self.code = code
        self.message = message
        self.detail = detail
        super().__init__(message)


def _b64_raster(data: Optional[str], what: str) -> np.ndarray:
    if not data:
        raise ApiError(422, "missing_payload", f"{what} raster is required")
    try:
        return images.decode_png(base64.b64decode(data))
    except Exception as e:
        raise ApiError(422, "bad_raster", f"cannot decode {what}", str(e))


@dataclass
class SessionOp:
    seq: int
    kind: str  # "step" | "edit" | "reset"
    payload: Dict


@dataclass
class Session:
    sid: str
    image: torch.Tensor  # (1, 3, H, W) padded to even
    orig_size: tuple[int, int]
    x0: MattingState  # network space, padded
    config: IterationConfig
    x: MattingState = None  # current state, network space
    hidden: HiddenState = None
    t: int = 0
    revision: int = 0
    history: List[Dict] = field(default_factory=list)
    oplog: List[SessionOp] = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def __post_init__(self):
        if self.x is None:
            self.x = self.x0.clone()
        if self.hidden is None:
            h, w = self.image.shape[-2:]
            self.hidden = HiddenState.zeros(1, h, w)

    def canonical(self) -> MattingState:
        oh, ow = self.orig_size
        state = to_canonical_space(self.x)
        return MattingState(state.x[..., :oh, :ow], CANONICAL)

    def state_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.x.x.numpy().tobytes())
        h.update(self.hidden.h1.numpy().tobytes())
        h.update(self.hidden.h2.numpy().tobytes())
        return h.hexdigest()[:16]

    def summary(self) -> Dict:
        oh, ow = self.orig_size
        return {
            "id": self.sid,
            "iteration": self.t,
            "revision": self.revision,
            "height": oh,
            "width": ow,
            "config": {
                "iterations": self.config.iterations,
                "sigma": self.config.sigma,
                "gradient_variant": self.config.gradient_variant.value,
            },
            "edits": len(self.history),
            "state_hash": self.state_hash(),
            "previews": {
                layer: f"/sessions/{self.sid}/preview/{layer}"
                for layer in ("image", "foreground", "background", "alpha", "composite")
            },
        }


def _pad_even(t: torch.Tensor) -> torch.Tensor:
    h, w = t.shape[-2:]
    if h % 2 or w % 2:
        t = torch.nn.functional.pad(t, (0, w % 2, 0, h % 2), mode="reflect")
    return t


class CreateSessionBody(BaseModel):
    image: str
    alpha: str
    trimap: Optional[str] = None
    iterations: Optional[int] = None
    sigma: Optional[float] = None
    gradient_variant: Optional[str] = None


class StepBody(BaseModel):
    n: int = 1


class EditBody(BaseModel):
    target: str
    mask: str
    values: str
    zero_hidden: bool = True


def create_app(
    net: RimNet,
    config: Optional[IterationConfig] = None,
    ui_dir: Optional[str | Path] = None,
) -> FastAPI:
    base_config = config or IterationConfig()
    app = FastAPI(title="invcomp interactive service")
    sessions: Dict[str, Session] = {}
    sessions_lock = threading.Lock()

    @app.exception_handler(ApiError)
    def handle_api_error(request: Request, exc: ApiError):
        return JSONResponse(
            status_code=exc.status,
            content={"code": exc.code, "message": exc.message, "detail": exc.detail},
        )

    def get_session(sid: str) -> Session:
        with sessions_lock:
            session = sessions.get(sid)
        if session is None:
            raise ApiError(404, "not_found", f"no session {sid}")
        return session

    @app.post("/sessions")
    async def create_session(request: Request):
        body = await _session_body(request)
        return _create_session(body)

    async def _session_body(request: Request) -> CreateSessionBody:
        ctype = request.headers.get("content-type", "")
        if ctype.startswith("multipart/form-data"):
            form = await request.form()
            fields: Dict[str, Optional[str]] = {}
            for name in ("image", "alpha", "trimap"):
                value = form.get(name)
                if value is None:
                    fields[name] = None
                elif hasattr(value, "read"):
                    fields[name] = base64.b64encode(await value.read()).decode()
                else:
                    fields[name] = str(value)
            if fields["image"] is None or fields["alpha"] is None:
                raise ApiError(422, "missing_payload", "image and alpha files are required")
            extras = {}
            for key in ("iterations", "sigma", "gradient_variant"):
                if form.get(key) is not None:
                    extras[key] = form.get(key)
            return CreateSessionBody(image=fields["image"], alpha=fields["alpha"],
                                     trimap=fields["trimap"], **extras)
        try:
            return CreateSessionBody(**(await request.json()))
        except ApiError:
            raise
        except Exception as e:
            raise ApiError(422, "bad_request", "cannot parse session payload", str(e))

    def _create_session(body: CreateSessionBody):
        image_np = _b64_raster(body.image, "image")
        alpha_np = _b64_raster(body.alpha, "alpha")
        if image_np.ndim != 3:
            raise ApiError(422, "bad_raster", "image must be RGB")
        if alpha_np.ndim == 3:
            alpha_np = alpha_np[..., 0]
        if alpha_np.shape != image_np.shape[:2]:
            raise ApiError(
                422,
                "dimension_mismatch",
                "alpha resolution does not match image",
                f"image {image_np.shape[:2]} vs alpha {alpha_np.shape}",
            )
        trimap_t = None
        if body.trimap:
            raw = base64.b64decode(body.trimap)
            trimap_np = images.load_trimap_bytes(raw)
            if trimap_np.shape != image_np.shape[:2]:
                raise ApiError(
                    422,
                    "dimension_mismatch",
                    "trimap resolution does not match image",
                    f"image {image_np.shape[:2]} vs trimap {trimap_np.shape}",
                )
            trimap_t = images.chw(trimap_np.astype(np.float32)).to(torch.uint8)
        cfg_kwargs = {}
        if body.iterations is not None:
            cfg_kwargs["iterations"] = body.iterations
        if body.sigma is not None:
            cfg_kwargs["sigma"] = body.sigma
        if body.gradient_variant is not None:
            from .compositing import GradientVariant

            try:
                cfg_kwargs["gradient_variant"] = GradientVariant(body.gradient_variant)
            except ValueError:
                raise ApiError(422, "bad_config", f"unknown gradient variant {body.gradient_variant}")
        session_config = IterationConfig(
            iterations=cfg_kwargs.get("iterations", base_config.iterations),
            sigma=cfg_kwargs.get("sigma", base_config.sigma),
            gradient_variant=cfg_kwargs.get("gradient_variant", base_config.gradient_variant),
        )
        try:
            image_t = images.chw(image_np)
            x0 = init_state(image_t, trimap_t, images.chw(alpha_np))
        except (ValidationError, ShapeError) as e:
            raise ApiError(422, "validation", str(e))
        from .rim import to_network_space

        padded_image = _pad_even(image_t.unsqueeze(0))
        x0_net = to_network_space(MattingState(_pad_even(x0.x), CANONICAL))
        sid = uuid.uuid4().hex[:12]
        session = Session(
            sid=sid,
            image=padded_image,
            orig_size=(image_np.shape[0], image_np.shape[1]),
            x0=x0_net,
            config=session_config,
        )
        with sessions_lock:
            sessions[sid] = session
        return session.summary()

    @app.get("/sessions/{sid}")
    def get_state(sid: str):
        return get_session(sid).summary()

    @app.post("/sessions/{sid}/step")
    def step(sid: str, body: StepBody):
        session = get_session(sid)
        if body.n < 0:
            raise ApiError(422, "bad_request", "step count must be >= 0")
        with session.lock:
            with torch.no_grad():
                for _ in range(body.n):
                    dx, session.hidden = rim_step(
                        session.image, session.x, session.hidden, net, session.config
                    )
                    session.x = MattingState(session.x.x + dx, NETWORK)
                    session.t += 1
            if body.n > 0:
                session.revision += 1
                session.oplog.append(
                    SessionOp(seq=session.revision, kind="step", payload={"n": body.n})
                )
            return session.summary()

    @app.post("/sessions/{sid}/edit")
    def edit(sid: str, body: EditBody):
        session = get_session(sid)
        if body.target not in EDIT_TARGETS:
            raise ApiError(422, "bad_request", f"unknown edit target {body.target}")
        mask_np = _b64_raster(body.mask, "mask")
        if mask_np.ndim == 3:
            mask_np = mask_np[..., 0]
        oh, ow = session.orig_size
        if mask_np.shape != (oh, ow):
            raise ApiError(
                422,
                "dimension_mismatch",
                "mask resolution does not match session",
                f"session {(oh, ow)} vs mask {mask_np.shape}",
            )
        values_np = _b64_raster(body.values, "values")
        c0, c1 = EDIT_TARGETS[body.target]
        if body.target == "alpha":
            if values_np.ndim == 3:
                values_np = values_np[..., 0]
            values_np = values_np[..., None]
        elif values_np.ndim != 3:
            raise ApiError(422, "bad_raster", f"{body.target} values must be RGB")
        if values_np.shape[:2] != (oh, ow):
            raise ApiError(
                422,
                "dimension_mismatch",
                "values resolution does not match session",
                f"session {(oh, ow)} vs values {values_np.shape[:2]}",
            )
        mask = torch.from_numpy((mask_np > 0.5).astype(np.float32))
        if mask.sum() == 0:
            return {"edited_pixels": 0, "state": session.summary()}
        with session.lock:
            ph, pw = session.image.shape[-2:]
            mask_padded = torch.zeros(ph, pw)
            mask_padded[:oh, :ow] = mask
            values_t = torch.zeros(1, c1 - c0, ph, pw)
            values_t[..., :oh, :ow] = images.chw(values_np).unsqueeze(0)
            x = session.x.x.clone()
            m = mask_padded.unsqueeze(0).unsqueeze(0)
            # user values arrive canonical; re-encode into the solver's space
            x[:, c0:c1] = torch.where(m > 0, 2.0 * values_t - 1.0, x[:, c0:c1])
            session.x = MattingState(x, NETWORK)
            if body.zero_hidden:
                session.hidden = zero_hidden(session.hidden, mask_padded)
            session.revision += 1
            op_payload = {
                "target": body.target,
                "mask": body.mask,
                "values": body.values,
                "zero_hidden": body.zero_hidden,
            }
            session.history.append(op_payload)
            session.oplog.append(
                SessionOp(seq=session.revision, kind="edit", payload=op_payload)
            )
            return {
                "edited_pixels": int(mask.sum().item()),
                "state": session.summary(),
            }

    @app.post("/sessions/{sid}/reset")
    def reset(sid: str):
        session = get_session(sid)
        with session.lock:
            session.x = session.x0.clone()
            h, w = session.image.shape[-2:]
            session.hidden = HiddenState.zeros(1, h, w)
            session.t = 0
            session.history.clear()
            session.revision += 1
            session.oplog.append(SessionOp(seq=session.revision, kind="reset", payload={}))
            return session.summary()

    @app.delete("/sessions/{sid}")
    def delete(sid: str):
        get_session(sid)
        with sessions_lock:
            sessions.pop(sid, None)
        return {"deleted": sid}

    @app.get("/sessions/{sid}/oplog")
    def oplog(sid: str):
        session = get_session(sid)
        with session.lock:
            return {
                "ops": [
                    {"seq": op.seq, "kind": op.kind, "payload": op.payload}
                    for op in session.oplog
                ]
            }

    def _layer_array(session: Session, layer: str) -> np.ndarray:
        state = session.canonical()
        oh, ow = session.orig_size
        if layer == "image":
            return images.hwc(session.image[..., :oh, :ow])
        if layer == "foreground":
            return images.hwc(state.fg)
        if layer == "background":
            return images.hwc(state.bg)
        if layer == "alpha":
            return images.hwc(state.alpha)
        if layer == "composite":
            a = images.hwc(state.alpha)[..., None]
            return a * images.hwc(state.fg) + (1 - a) * images.hwc(state.bg)
        raise ApiError(404, "not_found", f"unknown layer {layer}")

    @app.get("/sessions/{sid}/preview/{layer}")
    def preview(sid: str, layer: str):
        session = get_session(sid)
        with session.lock:
            arr = _layer_array(session, layer)
        arr = images.downsample_preview(arr)
        return Response(content=images.encode_png(arr, bits=8), media_type="image/png")

    @app.get("/sessions/{sid}/export")
    def export(sid: str, what: str = "composite", bg: Optional[str] = None, bits: int = 8):
        session = get_session(sid)
        if bits not in (8, 16):
            raise ApiError(422, "bad_request", f"bits must be 8 or 16, got {bits}")
        with session.lock:
            state = session.canonical()
            if what in ("foreground", "background", "alpha"):
                arr = _layer_array(session, what)
            elif what == "composite":
                a = images.hwc(state.alpha)[..., None]
                fg = images.hwc(state.fg)
                if bg is None:
                    new_bg = images.hwc(state.bg)
                else:
                    color = _parse_bg_color(bg)
                    new_bg = np.broadcast_to(color, fg.shape).astype(np.float32)
                arr = a * fg + (1 - a) * new_bg
            else:
                raise ApiError(422, "bad_request", f"unknown export target {what}")
        return Response(content=images.encode_png(arr, bits=bits), media_type="image/png")

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app


def _parse_bg_color(spec: str) -> np.ndarray:
    named = {"black": "#000000", "white": "#ffffff", "gray": "#808080"}
    spec = named.get(spec.lower(), spec)
    if spec.startswith("#") and len(spec) == 7:
        return np.array(
            [int(spec[i : i + 2], 16) / 255.0 for i in (1, 3, 5)], dtype=np.float32
        )
    raise ApiError(422, "bad_request", f"cannot parse background color {spec!r}")


def serve(
    net: RimNet,
    config: Optional[IterationConfig] = None,
    host: str = "127.0.0.1",
    port: int = 8711,
    ui_dir: Optional[str | Path] = None,
) -> None:
    import uvicorn

    uvicorn.run(create_app(net, config, ui_dir), host=host, port=port, log_level="info")
