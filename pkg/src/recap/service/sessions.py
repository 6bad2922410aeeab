"""Live intervention sessions: one browser (or scripted) client drives
takeover/steer/release/label over a WebSocket while the server rolls
episodes tick by tick."""

from __future__ import annotations

import asyncio
import json
import time
import uuid
from dataclasses import dataclass, field

import numpy as np

from ..data import Episode, EpisodeStore, Transition
from ..rollout import PolicySampler, child_rng

STALE_ACTION_WINDOW = 5  # human_action older than this many ticks is dropped


@dataclass
class UiSession:
    session_id: str
    env: object
    sampler: PolicySampler
    value_fn: object
    store: EpisodeStore
    episodes_total: int
    seeds: list[int]
    init_set: str
    iteration: int
    provenance: str
    frame_interval: float
    client_timeout: float
    state: str = "pending"
    episodes_done: int = 0
    ui_dropped: int = 0
    stale_actions_dropped: int = 0
    error: str | None = None
    connected: bool = False
    created_at: float = field(default_factory=time.time)

    def status(self) -> dict:
        return {
            "session_id": self.session_id,
            "state": self.state,
            "episodes_done": self.episodes_done,
            "episodes_total": self.episodes_total,
            "ui_dropped": self.ui_dropped,
            "stale_actions_dropped": self.stale_actions_dropped,
            "error": self.error,
        }


class SessionManager:
    def __init__(self):
        self.sessions: dict[str, UiSession] = {}

    def create(self, **kwargs) -> UiSession:
        session = UiSession(session_id=uuid.uuid4().hex[:12], **kwargs)
        self.sessions[session.session_id] = session
        return session

    def get(self, session_id: str) -> UiSession:
        if session_id not in self.sessions:
            raise KeyError(session_id)
        return self.sessions[session_id]

    async def watchdog(self, session: UiSession):
        """Flag sessions nobody ever connected to."""
        await asyncio.sleep(session.client_timeout)
        if session.state == "pending" and not session.connected:
            session.state = "error"
            session.error = "connection error: no client connected"


class _ClientGone(Exception):
    pass


@dataclass
class _EpisodeCtx:
    episode_id: str
    seed: int
    state: object
    obs: object
    action_rng: np.random.Generator
    seg_obs: np.ndarray
    seg_start: int
    seg_source: str = "autonomous"
    seg_cmds: list = field(default_factory=list)
    pending: list = field(default_factory=list)
    transitions: list = field(default_factory=list)


class SessionRunner:
    """Drives one websocket connection through the remaining episodes."""

    def __init__(self, session: UiSession, websocket):
        self.s = session
        self.ws = websocket
        self.seq = 0
        self.control = "policy"
        self.held_action = np.zeros(2)
        self.label_override: str | None = None
        self.labeled = False
        self.advance = False
        self.episode_terminal = False

    async def send(self, payload: dict):
        try:
            await self.ws.send_text(json.dumps(payload))
        except Exception as exc:  # client went away mid-send
            raise _ClientGone() from exc

    async def reject(self, code: str, message: str):
        self.seq += 1
        await self.send({"kind": "error", "v": 1, "seq": self.seq, "code": code, "message": message})

    async def drain_messages(self, current_t: int):
        """Apply all pending control messages without blocking."""
        while True:
            try:
                raw = await asyncio.wait_for(self.ws.receive_text(), timeout=0.0001)
            except asyncio.TimeoutError:
                return
            except Exception as exc:
                raise _ClientGone() from exc
            await self.apply_message(raw, current_t)

    async def apply_message(self, raw: str, current_t: int):
        try:
            msg = json.loads(raw)
            kind = msg.get("kind")
        except (ValueError, AttributeError):
            await self.reject("bad_json", "message is not a JSON object")
            return
        if kind == "takeover":
            if self.episode_terminal:
                await self.reject("episode_over", "cannot take over a finished episode")
                return
            self.control = "human"
            self.held_action = np.zeros(2)
        elif kind == "release":
            self.control = "policy"
        elif kind == "human_action":
            if self.control != "human":
                await self.reject("not_in_control", "human_action requires a takeover first")
                return
            step_ref = msg.get("step_ref", current_t)
            if step_ref < current_t - STALE_ACTION_WINDOW:
                self.s.stale_actions_dropped += 1
                return
            action = np.asarray(msg.get("action", [0.0, 0.0]), dtype=np.float64)
            self.held_action = np.clip(action, -1.0, 1.0)
        elif kind == "label":
            if not self.episode_terminal:
                await self.reject("not_terminal", "label rejected: episode still running")
                return
            if self.labeled:
                await self.reject("already_labeled", "label rejected: episode already labeled")
                return
            outcome = msg.get("outcome")
            if outcome not in ("success", "failure"):
                await self.reject("bad_label", f"label outcome must be success|failure, got {outcome!r}")
                return
            self.label_override = outcome
            self.labeled = True
            self.seq += 1
            await self.send({"kind": "label_ack", "v": 1, "seq": self.seq, "outcome": outcome})
        elif kind == "next":
            self.advance = True
        else:
            await self.reject("unknown_kind", f"unknown message kind {kind!r}")

    async def frame(self, episode_id: str, state, value: float):
        self.seq += 1
        geometry = self.s.env.render_geometry()
        await self.send({
            "kind": "frame",
            "v": 1,
            "episode_id": episode_id,
            "seq": self.seq,
            "t": int(state.t),
            "pos": [float(x) for x in state.pos],
            "vel": [float(x) for x in state.vel],
            "goal": geometry["goal"],
            "failure_regions": geometry["regions"],
            "value": float(value),
            "control": self.control,
            "task": self.s.env.spec.task_id,
        })

    async def run(self):
        s = self.s
        s.connected = True
        s.state = "running"
        self.seq += 1
        await self.send({
            "kind": "session_start", "v": 1, "seq": self.seq,
            "session_id": s.session_id, "task": s.env.spec.task_id,
            "episodes_total": s.episodes_total, "episodes_done": s.episodes_done,
            "geometry": s.env.render_geometry(),
        })
        try:
            while s.episodes_done < s.episodes_total:
                await self.run_episode(s.seeds[s.episodes_done])
            s.state = "done"
            self.seq += 1
            await self.send({"kind": "session_end", "v": 1, "seq": self.seq, "summary": s.status()})
        except _ClientGone:
            s.connected = False
            if s.state != "done":
                s.state = "pending"  # a client may reconnect and resume

    def _new_episode(self, seed: int) -> "_EpisodeCtx":
        s = self.s
        self.control = "policy"
        self.label_override = None
        self.labeled = False
        self.advance = False
        self.episode_terminal = False
        state, obs = s.env.reset(seed, s.init_set)
        return _EpisodeCtx(
            episode_id=f"{s.session_id}-{s.episodes_done}", seed=seed,
            state=state, obs=obs,
            action_rng=child_rng(seed, "actions", s.env.spec.task_id),
            seg_obs=obs.features, seg_start=state.t,
        )

    def _close_segment(self, ctx: "_EpisodeCtx"):
        if ctx.seg_cmds:
            cmds = list(ctx.seg_cmds)
            h = self.s.env.spec.chunk_h
            while len(cmds) < h:
                cmds.append(cmds[-1])  # pad interrupted chunks by repetition
            ctx.transitions.append(Transition(
                t=ctx.seg_start, obs=ctx.seg_obs, action=np.stack(cmds[:h]),
                source=ctx.seg_source, ticks=len(ctx.seg_cmds),
            ))
        ctx.seg_cmds = []

    def _tick(self, ctx: "_EpisodeCtx"):
        """One synchronous env step under the current control holder."""
        s = self.s
        source = "intervention" if self.control == "human" else "autonomous"
        if source != ctx.seg_source or len(ctx.seg_cmds) >= s.env.spec.chunk_h:
            self._close_segment(ctx)
            ctx.seg_obs, ctx.seg_source, ctx.seg_start = ctx.obs.features, source, ctx.state.t
            ctx.pending = []
        if self.control == "human":
            command = self.held_action.copy()
        else:
            if not ctx.pending:
                chunk = s.sampler.act(s.env, ctx.obs.features, ctx.action_rng)
                ctx.pending = [row for row in np.asarray(chunk)]
            command = ctx.pending.pop(0)
        ctx.state, result = s.env.step(ctx.state, command[None, :])
        ctx.seg_cmds.append(command)
        ctx.obs = result.obs

    def _append_episode(self, ctx: "_EpisodeCtx", ui_dropped: bool):
        s = self.s
        state = ctx.state
        outcome = state.outcome
        extra = {"mode": state.side} if getattr(state, "side", None) else {}
        if ui_dropped:
            extra["ui_dropped"] = True
            s.ui_dropped += 1
        if self.label_override is not None:
            outcome = self.label_override
            extra["labeler"] = "human"
            extra["env_outcome"] = state.outcome
        s.store.append(Episode(
            task_id=s.env.spec.task_id, seed=ctx.seed, init_set=s.init_set,
            transitions=ctx.transitions, final_obs=ctx.obs.features, final_t=state.t,
            outcome=outcome, stages=list(state.stages), iteration=s.iteration,
            policy_provenance=s.provenance, sim_seconds=state.t * s.env.spec.step_seconds,
            extra=extra,
        ))
        s.episodes_done += 1

    def _finish_without_client(self, ctx: "_EpisodeCtx"):
        """Client lost (disconnect or task cancellation): complete the episode
        autonomously with synchronous steps only, then record it."""
        self.control = "policy"
        while not ctx.state.terminal:
            self._tick(ctx)
        self._close_segment(ctx)
        self._append_episode(ctx, ui_dropped=True)
        self.s.connected = False
        if self.s.state == "running":
            self.s.state = "pending" if self.s.episodes_done < self.s.episodes_total else "done"

    async def run_episode(self, seed: int):
        s = self.s
        ctx = self._new_episode(seed)
        try:
            self.seq += 1
            await self.send({"kind": "episode_start", "v": 1, "seq": self.seq,
                             "episode_id": ctx.episode_id, "t": int(ctx.state.t), "seed": seed})
            # frames describe actionable states: t = 0 .. T-1 for a T-step episode
            await self.frame(ctx.episode_id, ctx.state, s.value_fn(ctx.obs.features))
            while not ctx.state.terminal:
                await self.drain_messages(ctx.state.t)
                self._tick(ctx)
                if not ctx.state.terminal:
                    await self.frame(ctx.episode_id, ctx.state, s.value_fn(ctx.obs.features))
                    if s.frame_interval > 0:
                        await asyncio.sleep(s.frame_interval)
            self._close_segment(ctx)
            self.episode_terminal = True
            self.seq += 1
            await self.send({"kind": "episode_end", "v": 1, "seq": self.seq,
                             "episode_id": ctx.episode_id, "t": int(ctx.state.t),
                             "outcome": ctx.state.outcome, "awaiting": "label-or-next"})
            await self.await_label_or_next(ctx.state.t)
        except BaseException:
            # _ClientGone or task cancellation (client side closed). Finish the
            # episode without a client and re-raise so cancellation semantics
            # stay intact.
            if not ctx.state.terminal:
                self._finish_without_client(ctx)
            else:
                self._append_episode(ctx, ui_dropped=False)
                self.s.connected = False
                if s.state == "running":
                    s.state = "pending" if s.episodes_done < s.episodes_total else "done"
            raise
        self._append_episode(ctx, ui_dropped=False)

    async def await_label_or_next(self, current_t: int, timeout: float = 60.0):
        deadline = time.time() + timeout
        while not self.advance and time.time() < deadline:
            try:
                raw = await asyncio.wait_for(self.ws.receive_text(), timeout=0.25)
            except asyncio.TimeoutError:
                continue
            except Exception as exc:
                raise _ClientGone() from exc
            await self.apply_message(raw, current_t)
