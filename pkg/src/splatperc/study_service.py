"""Blind A/B preference-study service over HTTP.

The service plans trials (method pair via information-gain scheduling, one
shared random crop of an aligned view for the reference and both methods),
serves the crop images, persists votes to an append-only fsync'd log, and
refits the rating table off the request path every K votes. Method
identities never appear in any client payload: candidates are only ever "a"
and "b", in randomized display order.

Endpoints:
  GET  /api/next?rater=ID  -> {trial_id, reference, image_a, image_b, deadline}
  POST /api/vote           {trial_id, choice: "a"|"b"} -> 204
  GET  /api/ratings        -> rating table JSON
  GET  /crops/{name}.png   -> generated crop images
"""

from __future__ import annotations

import json
import secrets
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import FileResponse, JSONResponse, Response
from fastapi.staticfiles import StaticFiles

from .elo import (
    DEFAULT_PRIOR_SCALE,
    RatingTable,
    VoteStore,
    elo_fit,
    make_vote,
    prior_only_table,
    select_next_pair,
)
from .image_io import load_image, sample_crop, save_image

DEFAULT_REFIT_INTERVAL = 25
DEFAULT_DEADLINE_S = 60.0


@dataclass
class StudyConfig:
    methods: dict  # name -> render directory
    reference_dir: str
    work_dir: str
    crop_side: int = 256
    refit_interval: int = DEFAULT_REFIT_INTERVAL
    prior_scale: float = DEFAULT_PRIOR_SCALE
    trial_budget: int = 10000
    deadline_s: float = DEFAULT_DEADLINE_S
    seed: int = 0
    ui_dir: str | None = None

    @classmethod
    def from_json_file(cls, path) -> "StudyConfig":
        d = json.loads(Path(path).read_text())
        return cls(**d)


@dataclass
class TrialPlan:
    trial_id: str
    method_a: str  # method shown as candidate "a" (already randomized)
    method_b: str
    crop_id: str
    rater_id: str
    created: float


class StudyState:
    """All mutable study state behind one lock; refits run on a worker
    thread so the vote path stays fast."""

    def __init__(self, cfg: StudyConfig):
        self.cfg = cfg
        self.lock = threading.Lock()
        self.methods = sorted(cfg.methods.keys())
        if len(self.methods) < 2:
            raise ValueError("need at least 2 methods")
        self.views = self._aligned_views()
        if not self.views:
            raise ValueError("no aligned views across method directories")
        self.work = Path(cfg.work_dir)
        self.crops = self.work / "crops"
        self.crops.mkdir(parents=True, exist_ok=True)
        self.store = VoteStore(self.work / "votes.jsonl")
        self.pending: dict[str, TrialPlan] = {}
        self.done_trials: set[str] = set()
        for v in self.store.votes:
            self.done_trials.add(v.trial_id)
        self.table: RatingTable = self._fit_or_prior()
        self.votes_at_refit = len(self.store)
        self._refitting = False
        import numpy as np

        self.rng = np.random.default_rng(cfg.seed)

    def _aligned_views(self):
        names = None
        for d in [self.cfg.reference_dir] + [self.cfg.methods[m] for m in self.methods]:
            files = {p.name for p in Path(d).iterdir()
                     if p.suffix.lower() in (".png", ".ppm", ".pgm")}
            names = files if names is None else names & files
        return sorted(names or [])

    def _fit_or_prior(self) -> RatingTable:
        if len(self.store) == 0:
            return prior_only_table(self.methods, self.cfg.prior_scale)
        return elo_fit(self.store.votes, self.cfg.prior_scale, methods=self.methods)

    def refit_now(self) -> None:
        with self.lock:
            votes = list(self.store.votes)
        table = (elo_fit(votes, self.cfg.prior_scale, methods=self.methods)
                 if votes else prior_only_table(self.methods, self.cfg.prior_scale))
        with self.lock:
            self.table = table
            self.votes_at_refit = len(votes)
            self._refitting = False

    def maybe_schedule_refit(self) -> None:
        with self.lock:
            due = (len(self.store) - self.votes_at_refit >= self.cfg.refit_interval
                   and not self._refitting)
            if due:
                self._refitting = True
        if due:
            threading.Thread(target=self.refit_now, daemon=True).start()

    def plan_trial(self, rater_id: str) -> dict | None:
        with self.lock:
            if len(self.store) + len(self.pending) >= self.cfg.trial_budget:
                return None
            vote_counts = dict(self.table.vote_counts)
            pair_seed = int(self.rng.integers(0, 2**63 - 1))
            m1, m2 = select_next_pair(self.table, vote_counts, pair_seed)
            if self.rng.random() < 0.5:  # hide which method is which side
                m1, m2 = m2, m1
            view = self.views[int(self.rng.integers(0, len(self.views)))]
            crop_seed = int(self.rng.integers(0, 2**63 - 1))
            trial_id = secrets.token_hex(8)
        ref_img = load_image(Path(self.cfg.reference_dir) / view)
        img1 = load_image(Path(self.cfg.methods[m1]) / view)
        img2 = load_image(Path(self.cfg.methods[m2]) / view)
        if img1.data.shape != ref_img.data.shape or img2.data.shape != ref_img.data.shape:
            raise ValueError(f"view {view}: method renders not aligned to reference")
        side = min(self.cfg.crop_side, ref_img.height, ref_img.width)
        spec = sample_crop(ref_img, crop_seed, side)
        crop_id = f"{trial_id}"
        save_image(spec.apply(ref_img), self.crops / f"{crop_id}_ref.png")
        save_image(spec.apply(img1), self.crops / f"{crop_id}_a.png")
        save_image(spec.apply(img2), self.crops / f"{crop_id}_b.png")
        plan = TrialPlan(trial_id=trial_id, method_a=m1, method_b=m2,
                         crop_id=crop_id, rater_id=rater_id, created=time.time())
        with self.lock:
            self.pending[trial_id] = plan
        return {
            "trial_id": trial_id,
            "reference": f"/crops/{crop_id}_ref.png",
            "image_a": f"/crops/{crop_id}_a.png",
            "image_b": f"/crops/{crop_id}_b.png",
            "deadline": plan.created + self.cfg.deadline_s,
        }

    def record_vote(self, trial_id: str, choice: str) -> int:
        """Returns an HTTP status: 204 ok, 404 unknown, 409 duplicate."""
        with self.lock:
            if trial_id in self.done_trials:
                return 409
            plan = self.pending.get(trial_id)
            if plan is None:
                return 404
            vote = make_vote(trial_id, plan.method_a, plan.method_b,
                             plan.crop_id, choice, plan.rater_id)
            self.store.append(vote)
            self.done_trials.add(trial_id)
            del self.pending[trial_id]
        self.maybe_schedule_refit()
        return 204


def create_app(cfg: StudyConfig) -> FastAPI:
    state = StudyState(cfg)
    app = FastAPI(title="splatperc study service")
    app.state.study = state

    @app.get("/api/next")
    def next_trial(rater: str = "anonymous"):
        plan = state.plan_trial(rater)
        if plan is None:
            return JSONResponse({"done": True})
        return JSONResponse(plan)

    @app.post("/api/vote")
    async def vote(request: Request):
        try:
            body = await request.json()
        except Exception:
            return JSONResponse({"error": "malformed body"}, status_code=400)
        trial_id = body.get("trial_id")
        choice = body.get("choice")
        if not isinstance(trial_id, str) or choice not in ("a", "b"):
            return JSONResponse({"error": "malformed body"}, status_code=400)
        status = state.record_vote(trial_id, choice)
        if status == 404:
            return JSONResponse({"error": "unknown trial"}, status_code=404)
        if status == 409:
            return JSONResponse({"error": "duplicate vote"}, status_code=409)
        return Response(status_code=204)

    @app.get("/api/ratings")
    def ratings():
        with state.lock:
            table = state.table
        return JSONResponse(table.as_dict())

    @app.get("/crops/{name}")
    def crop(name: str):
        path = state.crops / name
        if not path.is_file() or path.suffix != ".png" or "/" in name:
            return JSONResponse({"error": "not found"}, status_code=404)
        return FileResponse(path)

    ui = cfg.ui_dir
    if ui and Path(ui).is_dir():
        app.mount("/", StaticFiles(directory=ui, html=True), name="ui")
    return app


def serve(cfg: StudyConfig, host: str = "127.0.0.1", port: int = 8000) -> None:
    import uvicorn

    uvicorn.run(create_app(cfg), host=host, port=port, log_level="warning")
