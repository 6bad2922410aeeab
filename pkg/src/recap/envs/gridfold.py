"""GridFold: a 9x9 multi-stage gridworld (pick -> carry -> stack).

The agent must walk to the object cell, pick it up, carry it through a
barrier of drop cells (fatal while carrying), and place it on the stack
cell. Exactly solvable, which makes it the oracle task for value checks.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from .base import EnvSpec, Observation, StepResult, check_init_set

SIZE = 9
OBJECT_CELL = (7, 1)
GOAL_CELL = (1, 7)
# Vertical barrier at x=4 with a single gap at y=4; fatal only while carrying.
DROP_CELLS = frozenset((4, y) for y in range(SIZE) if y != 4)
L_MAX = 60
STEP_SECONDS = 1.0

# Actions: +x, -x, +y, -y, ACT (pick/place).
MOVES = ((1, 0), (-1, 0), (0, 1), (0, -1))
ACT = 4
N_ACTIONS = 5


@dataclass
class GridState:
    pos: tuple[int, int]
    carrying: bool
    t: int
    terminal: bool
    outcome: str | None
    stages: tuple[str, ...]
    rng: np.random.Generator


def _in_grid(c: tuple[int, int]) -> bool:
    return 0 <= c[0] < SIZE and 0 <= c[1] < SIZE


def _bfs_distances(target: tuple[int, int], blocked: frozenset) -> dict[tuple[int, int], int]:
    dist = {target: 0}
    queue = deque([target])
    while queue:
        cur = queue.popleft()
        for dx, dy in MOVES:
            nxt = (cur[0] + dx, cur[1] + dy)
            if _in_grid(nxt) and nxt not in blocked and nxt not in dist:
                dist[nxt] = dist[cur] + 1
                queue.append(nxt)
    return dist


class GridFold:
    def __init__(self, l_max: int = L_MAX):
        self.spec = EnvSpec(
            task_id="gridfold",
            obs_dim=10,
            kind="discrete",
            l_max=l_max,
            step_seconds=STEP_SECONDS,
            n_actions=N_ACTIONS,
            chunk_h=1,
        )
        self._d_object = _bfs_distances(OBJECT_CELL, frozenset())
        self._d_goal = _bfs_distances(GOAL_CELL, DROP_CELLS)
        self._start_cells = sorted(
            c
            for c in ((x, y) for x in range(SIZE) for y in range(SIZE))
            if c not in DROP_CELLS and c != OBJECT_CELL
        )
        self._adversarial_cells = [c for c in self._start_cells if c[0] <= 1 and c[1] >= 7]

    def reset(self, seed: int, init_set: str = "standard") -> tuple[GridState, Observation]:
        check_init_set(init_set)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x67726964]))
        cells = self._adversarial_cells if init_set == "adversarial" else self._start_cells
        pos = cells[int(rng.integers(len(cells)))]
        state = GridState(pos=pos, carrying=False, t=0, terminal=False, outcome=None, stages=(), rng=rng)
        return state, self._observe(state)

    def _observe(self, s: GridState) -> Observation:
        ax, ay = s.pos
        ox, oy = OBJECT_CELL
        gx, gy = GOAL_CELL
        drop_dist = min(max(abs(ax - cx), abs(ay - cy)) for cx, cy in DROP_CELLS)
        feats = np.array(
            [
                ax / 8.0,
                ay / 8.0,
                1.0 if s.carrying else 0.0,
                0.0 if s.carrying else (ox - ax) / 8.0,
                0.0 if s.carrying else (oy - ay) / 8.0,
                (gx - ax) / 8.0,
                (gy - ay) / 8.0,
                drop_dist / 8.0,
                1.0 if (s.carrying and drop_dist <= 1) else 0.0,
                s.t / self.spec.l_max,
            ],
            dtype=np.float64,
        )
        return Observation(features=feats, t=s.t)

    def step(self, state: GridState, action: int) -> tuple[GridState, StepResult]:
        if state.terminal:
            raise RuntimeError("step called on a terminal state")
        action = int(action)
        if not 0 <= action < N_ACTIONS:
            raise ValueError(f"action {action} outside [0, {N_ACTIONS})")
        pos, carrying, stages = state.pos, state.carrying, list(state.stages)
        outcome: str | None = None
        if action == ACT:
            if not carrying and pos == OBJECT_CELL:
                carrying = True
                stages.append("pick")
            elif carrying and pos == GOAL_CELL:
                stages.append("stack")
                outcome = "success"
        else:
            dx, dy = MOVES[action]
            nxt = (pos[0] + dx, pos[1] + dy)
            if _in_grid(nxt):
                if carrying and nxt in DROP_CELLS:
                    outcome = "failure"
                pos = nxt
        t = state.t + 1
        if carrying and pos == GOAL_CELL and "carry" not in stages:
            stages.append("carry")
        if outcome is None and t >= self.spec.l_max:
            outcome = "failure"
        new = replace(state, pos=pos, carrying=carrying, t=t, terminal=outcome is not None,
                      outcome=outcome, stages=tuple(stages))
        return new, StepResult(obs=self._observe(new), terminal=new.terminal, outcome=outcome)

    def optimal_actions(self, pos: tuple[int, int], carrying: bool) -> set[int]:
        """All actions on a shortest successful path; used by the expert."""
        if not carrying:
            if pos == OBJECT_CELL:
                return {ACT}
            dist, blocked = self._d_object, frozenset()
        else:
            if pos == GOAL_CELL:
                return {ACT}
            dist, blocked = self._d_goal, DROP_CELLS
        best: set[int] = set()
        best_d = dist[pos]
        for a, (dx, dy) in enumerate(MOVES):
            nxt = (pos[0] + dx, pos[1] + dy)
            if _in_grid(nxt) and nxt not in blocked and dist.get(nxt, 10**9) == best_d - 1:
                best.add(a)
        return best

    def expert_action(self, state: GridState, noise_level: float = 0.0, role: str = "demo") -> int:
        if noise_level > 0.0 and state.rng.random() < noise_level:
            # Wandering, not suicidal: noisy demonstrators never step into a
            # drop cell while carrying.
            safe = [a for a in range(N_ACTIONS) if not self._fatal(state, a)]
            return int(safe[state.rng.integers(len(safe))])
        return min(self.optimal_actions(state.pos, state.carrying))

    def _fatal(self, state: GridState, action: int) -> bool:
        if action == ACT or not state.carrying:
            return False
        dx, dy = MOVES[action]
        nxt = (state.pos[0] + dx, state.pos[1] + dy)
        return _in_grid(nxt) and nxt in DROP_CELLS

    def dist_to_failure(self, state: GridState) -> float:
        if not state.carrying:
            return 1.0
        d = min(max(abs(state.pos[0] - cx), abs(state.pos[1] - cy)) for cx, cy in DROP_CELLS)
        return d / 8.0

    def optimal_steps_from(self, pos: tuple[int, int]) -> int:
        """Exact success step count under the noiseless expert."""
        return self._d_object[pos] + 1 + self._d_goal[OBJECT_CELL] + 1

    def render_geometry(self) -> dict:
        return {
            "size": SIZE,
            "object": list(OBJECT_CELL),
            "goal": list(GOAL_CELL),
            "drop_cells": sorted(list(c) for c in DROP_CELLS),
        }
