"""Episode records, the append-only episode store, and feature assembly.

Episodes are stored as JSON-lines, one per line, schema-versioned. Features
are persisted verbatim with each transition so training reads exactly what
the rollout saw.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import returns as ret

SCHEMA_VERSION = 1

SOURCES = ("demo", "autonomous", "intervention")


@dataclass
class Transition:
    t: int  # tick index at the observation
    obs: np.ndarray
    action: int | np.ndarray  # discrete index or (H, d) command chunk
    source: str
    ticks: int  # low-level commands actually consumed


@dataclass
class Episode:
    task_id: str
    seed: int
    init_set: str
    transitions: list[Transition]
    final_obs: np.ndarray
    final_t: int
    outcome: str
    stages: list[str]
    iteration: int
    policy_provenance: str
    sim_seconds: float
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for tr in self.transitions:
            if tr.source not in SOURCES:
                raise ValueError(f"unknown transition source {tr.source!r}")
        if self.outcome not in ("success", "failure"):
            raise ValueError(f"episode outcome must be terminal, got {self.outcome!r}")

    def to_json(self) -> str:
        def enc_action(a):
            return int(a) if np.isscalar(a) or isinstance(a, (int, np.integer)) else np.asarray(a).tolist()

        return json.dumps(
            {
                "schema": SCHEMA_VERSION,
                "task_id": self.task_id,
                "seed": self.seed,
                "init_set": self.init_set,
                "transitions": [
                    {
                        "t": tr.t,
                        "obs": np.asarray(tr.obs).tolist(),
                        "action": enc_action(tr.action),
                        "source": tr.source,
                        "ticks": tr.ticks,
                    }
                    for tr in self.transitions
                ],
                "final_obs": np.asarray(self.final_obs).tolist(),
                "final_t": self.final_t,
                "outcome": self.outcome,
                "stages": list(self.stages),
                "iteration": self.iteration,
                "policy_provenance": self.policy_provenance,
                "sim_seconds": self.sim_seconds,
                "extra": self.extra,
            }
        )

    @staticmethod
    def from_json(line: str) -> "Episode":
        d = json.loads(line)
        if d.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported episode schema {d.get('schema')!r}")
        transitions = [
            Transition(
                t=tr["t"],
                obs=np.asarray(tr["obs"], dtype=np.float64),
                action=tr["action"] if isinstance(tr["action"], int) else np.asarray(tr["action"]),
                source=tr["source"],
                ticks=tr["ticks"],
            )
            for tr in d["transitions"]
        ]
        return Episode(
            task_id=d["task_id"],
            seed=d["seed"],
            init_set=d["init_set"],
            transitions=transitions,
            final_obs=np.asarray(d["final_obs"], dtype=np.float64),
            final_t=d["final_t"],
            outcome=d["outcome"],
            stages=d["stages"],
            iteration=d["iteration"],
            policy_provenance=d["policy_provenance"],
            sim_seconds=d["sim_seconds"],
            extra=d.get("extra", {}),
        )


class EpisodeStore:
    """Append-only episode collection backed by a JSONL file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._episodes: list[Episode] = []
        if self.path.exists():
            with self.path.open() as fh:
                for line in fh:
                    if line.strip():
                        self._episodes.append(Episode.from_json(line))

    def append(self, episode: Episode) -> None:
        with self.path.open("a") as fh:
            fh.write(episode.to_json() + "\n")
        self._episodes.append(episode)

    def extend(self, episodes) -> None:
        for ep in episodes:
            self.append(ep)

    def episodes(self, task_id: str | None = None, iteration: int | None = None) -> list[Episode]:
        out = self._episodes
        if task_id is not None:
            out = [e for e in out if e.task_id == task_id]
        if iteration is not None:
            out = [e for e in out if e.iteration == iteration]
        return list(out)

    def __len__(self) -> int:
        return len(self._episodes)

    def counts(self) -> dict:
        by_source: dict[str, int] = {}
        by_iteration: dict[int, int] = {}
        for ep in self._episodes:
            by_iteration[ep.iteration] = by_iteration.get(ep.iteration, 0) + 1
            for tr in ep.transitions:
                by_source[tr.source] = by_source.get(tr.source, 0) + 1
        return {"episodes": len(self._episodes), "steps_by_source": by_source, "episodes_by_iteration": by_iteration}


# -- feature assembly ------------------------------------------------------------


def task_onehot(task_id: str, tasks: list[str]) -> np.ndarray:
    vec = np.zeros(len(tasks))
    vec[tasks.index(task_id)] = 1.0
    return vec


def value_input(obs: np.ndarray, task_id: str, tasks: list[str]) -> np.ndarray:
    return np.concatenate([np.asarray(obs, dtype=np.float64), task_onehot(task_id, tasks)])


def policy_input(obs: np.ndarray, task_id: str, tasks: list[str], indicator_code: float) -> np.ndarray:
    return np.concatenate(
        [np.asarray(obs, dtype=np.float64), task_onehot(task_id, tasks), [float(indicator_code)]]
    )


@dataclass
class PreparedEpisode:
    """An episode with return traces evaluated at its observation ticks."""

    task_id: str
    l_max: int
    obs: np.ndarray  # (n_transitions + 1, obs_dim); last row is the terminal obs
    ticks: np.ndarray  # tick index per obs row
    norm_returns: np.ndarray  # clamped normalized return at each obs row
    bins: np.ndarray  # discretized targets per obs row
    actions: list
    sources: list[str]
    forced: np.ndarray  # bool per transition (intervention-sourced)
    outcome: str

    @property
    def n_transitions(self) -> int:
        return len(self.actions)

    def reward_sum(self, tick_from: int, tick_to: int) -> float:
        """Sum of per-tick normalized rewards over [tick_from, tick_to)."""
        return -(tick_to - tick_from) / self.l_max


def prepare_episode(episode: Episode, l_max: int) -> PreparedEpisode:
    rewarded = ret.rewards_from_outcome(episode.outcome, episode.final_t, episode.task_id, l_max)
    trace = ret.normalize_returns(ret.returns(rewarded), l_max)
    ticks = np.array([tr.t for tr in episode.transitions] + [episode.final_t])
    obs = np.stack([tr.obs for tr in episode.transitions] + [episode.final_obs])
    return PreparedEpisode(
        task_id=episode.task_id,
        l_max=l_max,
        obs=obs,
        ticks=ticks,
        norm_returns=trace.returns[ticks],
        bins=trace.bins[ticks],
        actions=[tr.action for tr in episode.transitions],
        sources=[tr.source for tr in episode.transitions],
        forced=np.array([tr.source == "intervention" for tr in episode.transitions]),
        outcome=episode.outcome,
    )
