"""ReachChunk and CollarFlip: 2-D point-mass tasks with chunked commands.

Commands are accelerations in [-1, 1]^2 scaled by A_MAX; velocity is capped
at V_MAX per step. ReachChunk has a spill disc (fatal); CollarFlip replaces
the spill with a wall that splits the workspace into two homotopy paths, of
which the right one counts as a wrong-mode completion (failure).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

import numpy as np

from .base import EnvSpec, Observation, StepResult, as_chunk, check_init_set

V_MAX = 0.05
A_MAX = 0.001
GOAL = np.array([0.5, 0.8])
R_GOAL = 0.05
V_SUCCESS = 0.02
CHUNK_H = 5
ACTION_DIM = 2
STEP_SECONDS = 0.1

REACH_L_MAX = 100
SPILL_CENTER = np.array([0.28, 0.50])
SPILL_RADIUS = 0.10
REACH_START_STANDARD = ((0.35, 0.65), (0.10, 0.30))  # (x range, y range)
REACH_START_ADVERSARIAL = ((0.42, 0.52), (0.38, 0.48))

COLLAR_L_MAX = 160
WALL_Y = (0.48, 0.52)
WALL_X = (0.18, 0.82)
COLLAR_START_STANDARD = ((0.25, 0.75), (0.10, 0.20))
COLLAR_START_ADVERSARIAL = ((0.60, 0.75), (0.10, 0.20))
WRONG_GAP_REGION = ((0.82, 1.0), (0.40, 0.60))  # failure-proximity proxy for the gate


@dataclass
class PointState:
    pos: np.ndarray
    vel: np.ndarray
    t: int
    terminal: bool
    outcome: str | None
    side: str | None  # CollarFlip: last upward wall crossing ("left" | "right")
    expert_route: str  # CollarFlip demo expert's chosen gap for this episode
    stages: tuple[str, ...]
    rng: np.random.Generator


def _uniform_in(rng: np.random.Generator, box) -> np.ndarray:
    (x0, x1), (y0, y1) = box
    return np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])


class _PointMassEnv:
    """Dynamics shared by ReachChunk and CollarFlip."""

    task_id = ""
    l_max = 0
    start_standard: tuple = ()
    start_adversarial: tuple = ()

    def __init__(self, l_max: int | None = None):
        self.spec = EnvSpec(
            task_id=self.task_id,
            obs_dim=10,
            kind="continuous",
            l_max=l_max or self.l_max,
            step_seconds=STEP_SECONDS,
            action_dim=ACTION_DIM,
            chunk_h=CHUNK_H,
        )

    # -- dynamics -----------------------------------------------------------

    def _blocked(self, pos: np.ndarray) -> bool:
        return False

    def _move(self, pos: np.ndarray, vel: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        vel = vel + np.clip(u, -1.0, 1.0) * A_MAX
        speed = float(np.linalg.norm(vel))
        if speed > V_MAX:
            vel = vel * (V_MAX / speed)
        # Axis-wise move with obstacle/boundary collision; contact zeroes the
        # velocity component.
        pos = pos.copy()
        vel = vel.copy()
        for axis in range(2):
            trial = pos.copy()
            trial[axis] += vel[axis]
            trial[axis] = np.clip(trial[axis], 0.0, 1.0)
            if self._blocked(trial):
                vel[axis] = 0.0
            else:
                if trial[axis] != pos[axis] + vel[axis]:
                    vel[axis] = 0.0  # hit the domain boundary
                pos = trial
        return pos, vel

    def _tick_outcome(self, state: PointState, pos, vel, side) -> str | None:
        raise NotImplementedError

    def _update_side(self, old_pos, new_pos, side):
        return side

    # -- environment interface ----------------------------------------------

    def reset(self, seed: int, init_set: str = "standard") -> tuple[PointState, Observation]:
        check_init_set(init_set)
        rng = np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(self.task_id.encode())]))
        box = self.start_adversarial if init_set == "adversarial" else self.start_standard
        pos = _uniform_in(rng, box)
        route = self._draw_route(rng)
        state = PointState(
            pos=pos, vel=np.zeros(2), t=0, terminal=False, outcome=None,
            side=None, expert_route=route, stages=(), rng=rng,
        )
        return state, self._observe(state)

    def _draw_route(self, rng: np.random.Generator) -> str:
        return "left"

    def step(self, state: PointState, chunk: np.ndarray) -> tuple[PointState, StepResult]:
        if state.terminal:
            raise RuntimeError("step called on a terminal state")
        commands = as_chunk(chunk, self.spec.chunk_h, ACTION_DIM)
        pos, vel, side = state.pos, state.vel, state.side
        t, outcome = state.t, None
        stages = list(state.stages)
        for u in commands:
            new_pos, vel = self._move(pos, vel, u)
            side = self._update_side(pos, new_pos, side)
            pos = new_pos
            t += 1
            outcome = self._tick_outcome(state, pos, vel, side)
            if outcome is None and t >= self.spec.l_max:
                outcome = "failure"
            if outcome is not None:
                break
        if outcome == "success" and "reach" not in stages:
            stages.append("reach")
        new = replace(state, pos=pos, vel=vel, t=t, terminal=outcome is not None,
                      outcome=outcome, side=side, stages=tuple(stages))
        return new, StepResult(obs=self._observe(new), terminal=new.terminal, outcome=outcome)

    def _observe(self, s: PointState) -> Observation:
        delta = GOAL - s.pos
        feats = np.array(
            [
                s.pos[0],
                s.pos[1],
                s.vel[0] / V_MAX,
                s.vel[1] / V_MAX,
                delta[0],
                delta[1],
                float(np.linalg.norm(delta)),
                self.dist_to_failure(s),
                {"left": 1.0, "right": -1.0, None: 0.0}[s.side],
                s.t / self.spec.l_max,
            ],
            dtype=np.float64,
        )
        return Observation(features=feats, t=s.t)

    def dist_to_failure(self, state: PointState) -> float:
        return 1.0

    # -- scripted expert -----------------------------------------------------

    def _control(self, pos, vel, target, stop: bool) -> np.ndarray:
        err = target - pos
        dist = float(np.linalg.norm(err))
        if dist < 1e-9:
            v_des = np.zeros(2)
        else:
            direction = err / dist
            if stop:
                # Ride the braking curve with a 0.6 deceleration margin.
                speed = min(V_MAX, np.sqrt(2.0 * 0.6 * A_MAX * max(dist - 0.5 * R_GOAL, 0.0)))
            else:
                speed = min(V_MAX, 0.025)
            v_des = direction * speed
        return np.clip((v_des - vel) / A_MAX, -1.0, 1.0)

    def expert_action(self, state: PointState, noise_level: float = 0.0, role: str = "demo") -> np.ndarray:
        rng = state.rng
        if noise_level > 0.0 and rng.random() < noise_level:
            # Distracted chunk: a constant random command held for H ticks.
            return np.tile(rng.uniform(-1.0, 1.0, size=ACTION_DIM), (CHUNK_H, 1))
        # Plan H commands by rolling the controller through the true dynamics.
        pos, vel, side = state.pos.copy(), state.vel.copy(), state.side
        commands = np.zeros((CHUNK_H, ACTION_DIM))
        for i in range(CHUNK_H):
            waypoints = self._waypoints_from(pos, side, state.expert_route if role == "demo" else "left")
            target, stop = waypoints[0]
            u = self._control(pos, vel, target, stop)
            commands[i] = u
            new_pos, vel = self._move(pos, vel, u)
            side = self._update_side(pos, new_pos, side)
            pos = new_pos
        if noise_level > 0.0:
            commands = np.clip(commands + rng.normal(0.0, noise_level, commands.shape), -1.0, 1.0)
        return commands

    def _waypoints_from(self, pos, side, route) -> list[tuple[np.ndarray, bool]]:
        return [(GOAL, True)]

    def render_geometry(self) -> dict:
        return {"goal": {"pos": GOAL.tolist(), "radius": R_GOAL}, "regions": []}


class ReachChunk(_PointMassEnv):
    task_id = "reachchunk"
    l_max = REACH_L_MAX
    start_standard = REACH_START_STANDARD
    start_adversarial = REACH_START_ADVERSARIAL

    def _tick_outcome(self, state, pos, vel, side):
        if np.linalg.norm(pos - SPILL_CENTER) < SPILL_RADIUS:
            return "failure"
        if np.linalg.norm(pos - GOAL) < R_GOAL and np.linalg.norm(vel) < V_SUCCESS:
            return "success"
        return None

    def dist_to_failure(self, state: PointState) -> float:
        return float(max(0.0, np.linalg.norm(state.pos - SPILL_CENTER) - SPILL_RADIUS))

    def render_geometry(self) -> dict:
        return {
            "goal": {"pos": GOAL.tolist(), "radius": R_GOAL},
            "regions": [{"kind": "disc", "center": SPILL_CENTER.tolist(), "radius": SPILL_RADIUS}],
        }


def _dist_to_rect(pos: np.ndarray, rect) -> float:
    (x0, x1), (y0, y1) = rect
    dx = max(x0 - pos[0], 0.0, pos[0] - x1)
    dy = max(y0 - pos[1], 0.0, pos[1] - y1)
    return float(np.hypot(dx, dy))


class CollarFlip(_PointMassEnv):
    """ReachChunk layout with a wall; completing via the right gap is a
    wrong-mode completion and counts as failure."""

    task_id = "collarflip"
    l_max = COLLAR_L_MAX
    start_standard = COLLAR_START_STANDARD
    start_adversarial = COLLAR_START_ADVERSARIAL

    def __init__(self, l_max: int | None = None, wrong_route_prob: float = 0.6):
        super().__init__(l_max)
        self.wrong_route_prob = wrong_route_prob

    def _draw_route(self, rng: np.random.Generator) -> str:
        return "right" if rng.random() < self.wrong_route_prob else "left"

    def _blocked(self, pos: np.ndarray) -> bool:
        return WALL_X[0] <= pos[0] <= WALL_X[1] and WALL_Y[0] <= pos[1] <= WALL_Y[1]

    def _update_side(self, old_pos, new_pos, side):
        if old_pos[1] < 0.5 <= new_pos[1]:
            return "left" if new_pos[0] < 0.5 else "right"
        return side

    def _tick_outcome(self, state, pos, vel, side):
        if np.linalg.norm(pos - GOAL) < R_GOAL and np.linalg.norm(vel) < V_SUCCESS:
            return "success" if side == "left" else "failure"
        return None

    def step(self, state, chunk):
        new, result = super().step(state, chunk)
        if new.terminal and new.side == "right" and np.linalg.norm(new.pos - GOAL) < R_GOAL:
            # annotate wrong-mode completion for metrics
            new = replace(new, stages=tuple(s for s in new.stages if s != "reach"))
        return new, result

    def dist_to_failure(self, state: PointState) -> float:
        if state.side == "left" or state.pos[1] > WALL_Y[1]:
            return 1.0
        return _dist_to_rect(state.pos, WRONG_GAP_REGION)

    def _waypoints_from(self, pos, side, route):
        gap_x = 0.10 if route == "left" else 0.90
        if pos[1] < WALL_Y[0] and side is None:
            below = np.array([gap_x, 0.40])
            above = np.array([gap_x, 0.62])
            if abs(pos[0] - gap_x) > 0.06:
                return [(below, False), (above, False), (GOAL, True)]
            return [(above, False), (GOAL, True)]
        return [(GOAL, True)]

    def render_geometry(self) -> dict:
        return {
            "goal": {"pos": GOAL.tolist(), "radius": R_GOAL},
            "regions": [
                {
                    "kind": "band",
                    "x0": WALL_X[0],
                    "x1": WALL_X[1],
                    "y0": WALL_Y[0],
                    "y1": WALL_Y[1],
                }
            ],
        }
