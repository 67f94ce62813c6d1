"""HTTP JSON service: scene browsing plus the ground / accept-reject loop.

Sessions are in-memory only; each one pins a GroundingResult and walks its
ranked list as the user rejects candidates, exactly once per candidate.
"""

from __future__ import annotations

import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from . import pipeline as pipeline_mod
from .pipeline import GroundingEngine, GroundingResult
from .scene import SceneRecord, make_proposals

DEFAULT_SESSION_TIMEOUT = 30 * 60.0


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


@dataclass
class Session:
    session_id: str
    scene_id: str
    query: str
    result: GroundingResult
    rejected: set[int] = field(default_factory=set)
    current_index: int = 0
    created_at: float = field(default_factory=time.monotonic)
    last_seen: float = field(default_factory=time.monotonic)


class SessionStore:
    def __init__(self, timeout: float = DEFAULT_SESSION_TIMEOUT):
        self.timeout = timeout
        self._sessions: dict[str, Session] = {}
        self._lock = threading.Lock()

    def create(self, scene_id: str, query: str, result: GroundingResult) -> Session:
        session = Session(session_id=uuid.uuid4().hex, scene_id=scene_id,
                          query=query, result=result)
        with self._lock:
            self._purge()
            self._sessions[session.session_id] = session
        return session

    def get(self, session_id: str) -> Session:
        with self._lock:
            self._purge()
            session = self._sessions.get(session_id)
            if session is None:
                raise ApiError(404, "unknown_session",
                               f"no active session {session_id!r}")
            session.last_seen = time.monotonic()
            return session

    def close(self, session_id: str) -> None:
        with self._lock:
            self._sessions.pop(session_id, None)

    def _purge(self) -> None:
        now = time.monotonic()
        for sid in [sid for sid, s in self._sessions.items()
                    if now - s.last_seen > self.timeout]:
            del self._sessions[sid]


def _candidate_payload(result: GroundingResult, index: int) -> dict:
    entry = result.ranked[index]
    return {"box": entry.box.as_list(), "score": entry.score, "rank": index + 1}


def create_app(engine: GroundingEngine, records: list[SceneRecord],
               static_dir: str | Path | None = None,
               session_timeout: float = DEFAULT_SESSION_TIMEOUT) -> FastAPI:
    app = FastAPI(title="refground", docs_url=None, redoc_url=None)
    scenes = {record.scene.id: record for record in records}
    store = SessionStore(timeout=session_timeout)
    app.state.sessions = store

    @app.exception_handler(ApiError)
    async def handle_api_error(_request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status,
                            content={"code": exc.code, "message": exc.message})

    @app.get("/api/health")
    def health():
        return {"status": "ok", "scenes": len(scenes)}

    @app.get("/api/scenes")
    def list_scenes():
        return [
            {"id": rec.scene.id, "width": rec.scene.width,
             "height": rec.scene.height, "object_count": len(rec.scene.objects)}
            for rec in sorted(scenes.values(), key=lambda r: r.scene.id)
        ]

    @app.get("/api/scenes/{scene_id}")
    def get_scene(scene_id: str):
        record = scenes.get(scene_id)
        if record is None:
            raise ApiError(404, "unknown_scene", f"no scene {scene_id!r}")
        scene = record.scene
        return {
            "id": scene.id,
            "width": scene.width,
            "height": scene.height,
            "objects": [
                {"id": o.id, "category": o.category, "color": o.color,
                 "size_class": o.size_class, "bbox": o.bbox.as_list()}
                for o in scene.objects
            ],
            "expressions": [e.text for e in record.expressions],
        }

    @app.post("/api/ground")
    async def ground(request: Request):
        body = await request.json()
        scene_id = body.get("scene_id", "")
        query = body.get("query", "")
        aggregation = body.get("aggregation")
        record = scenes.get(scene_id)
        if record is None:
            raise ApiError(404, "unknown_scene", f"no scene {scene_id!r}")
        if not isinstance(query, str) or not query.strip():
            raise ApiError(400, "empty_query", "query must be a non-empty string")
        try:
            proposals = make_proposals(record.scene, "ground_truth", seed=0)
            result = pipeline_mod.ground(engine, record.scene, proposals, query,
                                         aggregation)
        except pipeline_mod.GroundingError as exc:
            raise ApiError(400, "grounding_failed", str(exc)) from exc
        session = store.create(scene_id, query, result)
        return {
            "session_id": session.session_id,
            "candidate": _candidate_payload(result, 0),
            "rank": 1,
            "diagnostics": result.to_dict()["diagnostics"],
        }

    @app.post("/api/feedback")
    async def feedback(request: Request):
        body = await request.json()
        session_id = body.get("session_id", "")
        verdict = body.get("verdict")
        if verdict not in ("accept", "reject"):
            raise ApiError(400, "bad_verdict",
                           'verdict must be "accept" or "reject"')
        session = store.get(session_id)
        if verdict == "accept":
            store.close(session_id)
            return {"status": "confirmed", "rank": session.current_index + 1}
        session.rejected.add(session.current_index)
        nxt = pipeline_mod.next_candidate(session.result, session.rejected)
        if nxt is None:
            store.close(session_id)
            return {"status": "exhausted"}
        session.current_index = nxt
        return {"candidate": _candidate_payload(session.result, nxt),
                "rank": nxt + 1}

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True),
                  name="ui")

    return app
