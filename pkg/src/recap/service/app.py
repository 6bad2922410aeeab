"""FastAPI service wrapping the training pipeline and the live intervention
sessions. The CLI is a thin client of this API."""

from __future__ import annotations

import asyncio
from pathlib import Path

from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from fastapi.responses import HTMLResponse
from fastapi.staticfiles import StaticFiles

from .. import pipeline as pipe
from ..rollout import PolicySampler, episode_seeds
from .schemas import (
    CollectRequest,
    CompareRequest,
    EvaluateRequest,
    IterateRequest,
    PretrainRequest,
    SessionStatus,
    SftRequest,
    StageResponse,
    UiSessionCreated,
)
from .sessions import SessionManager, SessionRunner

FRONTEND_DIST = Path(__file__).resolve().parents[3] / "frontend" / "dist"


def _run_for(req) -> pipe.Run:
    try:
        config = req.resolved_config()
    except (ValueError, FileNotFoundError) as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    return pipe.Run(req.out_dir, config, req.seed)


def create_app() -> FastAPI:
    app = FastAPI(title="recap", version="0.1.0")
    app.state.sessions = SessionManager()

    @app.get("/healthz")
    def healthz():
        return {"ok": True}

    @app.post("/pretrain", response_model=StageResponse)
    def pretrain(req: PretrainRequest):
        try:
            return StageResponse(summary=pipe.pretrain(_run_for(req)))
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))

    @app.post("/sft", response_model=StageResponse)
    def sft(req: SftRequest):
        try:
            return StageResponse(summary=pipe.sft(_run_for(req), req.task))
        except (ValueError, FileNotFoundError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))

    @app.post("/iterate", response_model=StageResponse)
    def iterate(req: IterateRequest):
        run = _run_for(req)
        iterations = req.iterations or run.config.iteration.iterations
        try:
            summaries = [
                pipe.run_iteration(run, req.task, k, intervention_source=req.intervention_source)
                for k in range(1, iterations + 1)
            ]
        except (ValueError, FileNotFoundError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return StageResponse(summary={"iterations": summaries})

    @app.post("/evaluate", response_model=StageResponse)
    def evaluate(req: EvaluateRequest):
        try:
            summary = pipe.evaluate_checkpoint(
                _run_for(req), req.task, req.checkpoint, beta=req.beta,
                episodes=req.episodes, label=req.label, indicator_code=req.indicator_code,
            )
        except (ValueError, FileNotFoundError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return StageResponse(summary=summary)

    @app.post("/compare", response_model=StageResponse)
    def compare(req: CompareRequest):
        try:
            return StageResponse(summary=pipe.compare(_run_for(req), req.task))
        except (ValueError, FileNotFoundError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))

    @app.post("/collect")
    async def collect(req: CollectRequest):
        if req.intervention_source != "ui":
            try:
                summary = await asyncio.to_thread(_scripted_collect, req)
            except (ValueError, FileNotFoundError) as exc:
                raise HTTPException(status_code=422, detail=str(exc))
            return StageResponse(summary=summary).model_dump()
        try:
            session, created = await asyncio.to_thread(_create_ui_session, app, req)
        except (ValueError, FileNotFoundError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        asyncio.create_task(app.state.sessions.watchdog(session))
        return created.model_dump()

    @app.get("/sessions/{session_id}", response_model=SessionStatus)
    def session_status(session_id: str):
        try:
            return SessionStatus(**app.state.sessions.get(session_id).status())
        except KeyError:
            raise HTTPException(status_code=404, detail=f"no session {session_id}")

    @app.websocket("/ws/sessions/{session_id}")
    async def session_ws(websocket: WebSocket, session_id: str):
        try:
            session = app.state.sessions.get(session_id)
        except KeyError:
            await websocket.close(code=4404)
            return
        if session.state in ("done", "error") or session.connected:
            await websocket.accept()
            await websocket.close(code=4409)
            return
        await websocket.accept()
        runner = SessionRunner(session, websocket)
        try:
            await runner.run()
        except WebSocketDisconnect:
            session.connected = False
            if session.state == "running":
                session.state = "pending"
        finally:
            session.connected = False

    if FRONTEND_DIST.exists():
        app.mount("/ui", StaticFiles(directory=FRONTEND_DIST, html=True), name="ui")
    else:
        @app.get("/ui")
        def ui_placeholder():
            return HTMLResponse("<h3>frontend not built; run npm install && npm run build in frontend/</h3>")

    return app


def _scripted_collect(req: CollectRequest) -> dict:
    run = _run_for(req)
    return pipe.collect_stage(
        run, req.task, autonomous=req.autonomous, intervention=req.intervention,
        k=req.iteration, intervention_source=req.intervention_source or "none",
        policy_name=req.policy_checkpoint,
    )


def _create_ui_session(app: FastAPI, req: CollectRequest):
    run = _run_for(req)
    env = run.env(req.task)
    if env.spec.kind != "continuous":
        raise ValueError("ui collection drives the continuous tasks only")
    n = req.autonomous + req.intervention
    if n < 1:
        raise ValueError("ui collection needs a positive episode count")
    policy_name = req.policy_checkpoint or pipe._collection_policy_name(run, req.task, req.iteration)
    pnet, _, _ = run.load_policy_ckpt(policy_name)
    sampler = PolicySampler(pnet, run.config.tasks, indicator_code=1,
                            euler_steps=run.config.training.euler_steps, beta=1.0)
    value_name = req.value_checkpoint or pipe._gate_value_name(run, req.task, req.iteration)
    critic, _, _ = run.load_value_ckpt(value_name)
    task = req.task
    session = app.state.sessions.create(
        env=env, sampler=sampler,
        value_fn=lambda obs: critic.value(obs, task),
        store=run.store, episodes_total=n,
        seeds=episode_seeds(run.seed, f"ui-collect/{task}/k{req.iteration}", n),
        init_set=run.config.task(task).init_set, iteration=req.iteration,
        provenance=policy_name, frame_interval=req.frame_interval,
        client_timeout=req.client_timeout,
    )
    created = UiSessionCreated(
        session_id=session.session_id,
        ws_path=f"/ws/sessions/{session.session_id}",
        ui_url=f"/ui/?session={session.session_id}",
        episodes=n,
    )
    return session, created
