"""HTTP curation service: serve pending tile pairs, record keep/drop
decisions into the manifest, report progress.

One reviewer, one manifest: reads see an immutable snapshot, writes are
serialized behind a lock and persisted atomically (temp file + rename)
before the response is sent.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

from fastapi import Depends, FastAPI, HTTPException, Request, Response
from pydantic import BaseModel

from .imaging import Manifest, read_manifest, write_manifest


class TileSummary(BaseModel):
    tile_id: str
    case_id: str
    her2_score: str
    split: str
    status: str
    artifact_tag: str


class TilePage(BaseModel):
    items: list[TileSummary]
    total: int
    limit: int
    offset: int


class DecisionRequest(BaseModel):
    decision: Literal["kept", "dropped", "pending"]
    artifact_tag: str | None = None


class ProgressResponse(BaseModel):
    total: int
    pending: int
    kept: int
    dropped: int


class DecisionResponse(BaseModel):
    tile_id: str
    status: str
    artifact_tag: str
    counts: ProgressResponse


class SessionResponse(BaseModel):
    manifest_path: str
    reviewer: str
    cursor: int
    counts: ProgressResponse


@dataclass
class CurationStore:
    """In-memory manifest snapshot plus the single-writer persistence lock."""

    manifest_path: Path
    reviewer: str = "anonymous"

    def __post_init__(self):
        self.manifest_path = Path(self.manifest_path)
        self._lock = threading.Lock()
        self.manifest: Manifest = read_manifest(self.manifest_path)

    def progress(self) -> ProgressResponse:
        counts = self.manifest.status_counts()
        return ProgressResponse(total=len(self.manifest), **counts)

    def cursor(self) -> int:
        """Index (in tile_id order) of the first still-pending tile."""
        ordered = sorted(self.manifest.records, key=lambda r: r.tile_id)
        for i, rec in enumerate(ordered):
            if rec.status == "pending":
                return i
        return len(ordered)

    def decide(self, tile_id: str, decision: str, artifact_tag: str | None):
        with self._lock:
            by_id = self.manifest.by_id()
            if tile_id not in by_id:
                raise KeyError(tile_id)
            updated = by_id[tile_id].with_status(decision, artifact_tag)
            records = tuple(updated if rec.tile_id == tile_id else rec
                            for rec in self.manifest.records)
            candidate = Manifest(records, self.manifest.dataset_name,
                                 self.manifest.microns_per_pixel)
            write_manifest(candidate, self.manifest_path)  # persist, then publish
            self.manifest = candidate
            return updated, self.progress()


def _summary(rec) -> TileSummary:
    return TileSummary(tile_id=rec.tile_id, case_id=rec.case_id,
                       her2_score=rec.her2_score, split=rec.split,
                       status=rec.status, artifact_tag=rec.artifact_tag)


def create_app(manifest_path: str | Path, token: str | None = None,
               reviewer: str = "anonymous", frontend_dir: str | Path | None = None) -> FastAPI:
    store = CurationStore(Path(manifest_path), reviewer=reviewer)
    app = FastAPI(title="stainbench curation service")
    app.state.store = store

    def check_token(request: Request):
        if token is None:
            return
        supplied = request.headers.get("authorization", "")
        if supplied != f"Bearer {token}":
            raise HTTPException(status_code=401, detail="missing or invalid token")

    @app.get("/api/tiles", response_model=TilePage)
    def list_tiles(status: str = "pending", limit: str = "50", offset: str = "0",
                   _=Depends(check_token)):
        try:
            limit_n, offset_n = int(limit), int(offset)
        except ValueError:
            raise HTTPException(status_code=400, detail="limit and offset must be integers")
        if not 1 <= limit_n <= 500 or offset_n < 0:
            raise HTTPException(status_code=400,
                                detail="need 1 <= limit <= 500 and offset >= 0")
        if status not in ("pending", "kept", "dropped", "all"):
            raise HTTPException(status_code=400, detail=f"unknown status filter {status!r}")
        records = sorted(store.manifest.records, key=lambda r: r.tile_id)
        if status != "all":
            records = [r for r in records if r.status == status]
        page = records[offset_n:offset_n + limit_n]
        return TilePage(items=[_summary(r) for r in page], total=len(records),
                        limit=limit_n, offset=offset_n)

    @app.get("/api/tiles/{tile_id}", response_model=TileSummary)
    def get_tile(tile_id: str, _=Depends(check_token)):
        rec = store.manifest.by_id().get(tile_id)
        if rec is None:
            raise HTTPException(status_code=404, detail=f"unknown tile_id: {tile_id}")
        return _summary(rec)

    @app.get("/api/tiles/{tile_id}/image")
    def get_tile_image(tile_id: str, stain: str = "source", _=Depends(check_token)):
        rec = store.manifest.by_id().get(tile_id)
        if rec is None:
            raise HTTPException(status_code=404, detail=f"unknown tile_id: {tile_id}")
        if stain not in ("source", "target"):
            raise HTTPException(status_code=400, detail="stain must be source or target")
        path = Path(rec.path_source if stain == "source" else rec.path_target)
        if not path.exists():
            raise HTTPException(status_code=410, detail=f"image file missing: {path}")
        return Response(content=path.read_bytes(), media_type="image/png")

    @app.post("/api/tiles/{tile_id}/decision", response_model=DecisionResponse)
    def post_decision(tile_id: str, body: DecisionRequest, _=Depends(check_token)):
        try:
            rec, counts = store.decide(tile_id, body.decision, body.artifact_tag)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown tile_id: {tile_id}")
        return DecisionResponse(tile_id=rec.tile_id, status=rec.status,
                                artifact_tag=rec.artifact_tag, counts=counts)

    @app.get("/api/progress", response_model=ProgressResponse)
    def progress(_=Depends(check_token)):
        return store.progress()

    @app.get("/api/session", response_model=SessionResponse)
    def session(_=Depends(check_token)):
        return SessionResponse(manifest_path=str(store.manifest_path),
                               reviewer=store.reviewer, cursor=store.cursor(),
                               counts=store.progress())

    if frontend_dir is not None and Path(frontend_dir).is_dir():
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=str(frontend_dir), html=True), name="ui")

    return app
