"""Episode collection (demos, autonomous, gated interventions) and
evaluation metrics."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import policy as pol
from .data import Episode, Transition, policy_input
from .envs import GateConfig, GateState, gate_decide


def child_rng(root_seed: int, *labels) -> np.random.Generator:
    parts = [root_seed] + [zlib.crc32(str(label).encode()) for label in labels]
    return np.random.default_rng(np.random.SeedSequence(parts))


def episode_seeds(root_seed: int, label: str, n: int) -> list[int]:
    rng = child_rng(root_seed, "episode-seeds", label)
    return [int(s) for s in rng.integers(0, 2**31 - 1, size=n)]


@dataclass
class PolicySampler:
    """Bundles a policy net with its conditioning for rollouts."""

    pnet: pol.PolicyNet
    tasks: list[str]
    indicator_code: int = 1
    euler_steps: int = 10
    beta: float = 1.0

    def act(self, env, obs_features: np.ndarray, rng: np.random.Generator):
        base = policy_input(obs_features, env.spec.task_id, self.tasks, 0.0)[:-1]
        if env.spec.kind == "discrete":
            return pol.sample_discrete(self.pnet, base, self.indicator_code, rng)
        if self.beta != 1.0:
            return pol.sample_actions_cfg(self.pnet, base, self.beta, self.euler_steps, rng)
        return pol.sample_actions(self.pnet, base, self.indicator_code, self.euler_steps, rng)


@dataclass
class ExpertSampler:
    noise: float = 0.0
    role: str = "demo"

    def act(self, env, state):
        return env.expert_action(state, self.noise, role=self.role)


def run_episode(
    env,
    seed: int,
    sampler: PolicySampler | None,
    *,
    init_set: str = "standard",
    source: str = "autonomous",
    expert: ExpertSampler | None = None,
    value_fn=None,
    gate_cfg: GateConfig | None = None,
    intervention_expert: ExpertSampler | None = None,
    iteration: int = 0,
    provenance: str = "expert",
) -> Episode:
    """One full episode. With a gate config, control flips to the
    intervention expert on 'intervene' and back on 'release'; intervention
    steps are tagged between those decisions."""
    state, obs = env.reset(seed, init_set)
    action_rng = child_rng(seed, "actions", env.spec.task_id)
    gate_state = GateState()
    value_trace: list[float] = []
    gate_events: list[tuple[int, str]] = []
    transitions: list[Transition] = []
    while not state.terminal:
        step_source = source
        if gate_cfg is not None:
            value_trace.append(value_fn(obs.features))
            decision = gate_decide(value_trace, env.dist_to_failure(state), gate_state, gate_cfg)
            if decision != "continue":
                gate_events.append((state.t, decision))
            step_source = "intervention" if gate_state.intervening else source
        if step_source == "intervention":
            action = intervention_expert.act(env, state)
        elif expert is not None:
            action = expert.act(env, state)
        else:
            action = sampler.act(env, obs.features, action_rng)
        prev_t = state.t
        state, result = env.step(state, action)
        transitions.append(
            Transition(t=prev_t, obs=obs.features, action=action, source=step_source,
                       ticks=state.t - prev_t)
        )
        obs = result.obs
    extra = {}
    if getattr(state, "side", None) is not None:
        extra["mode"] = state.side
    if gate_events:
        extra["gate_events"] = [[t, d] for t, d in gate_events]
    return Episode(
        task_id=env.spec.task_id,
        seed=seed,
        init_set=init_set,
        transitions=transitions,
        final_obs=obs.features,
        final_t=state.t,
        outcome=state.outcome,
        stages=list(state.stages),
        iteration=iteration,
        policy_provenance=provenance,
        sim_seconds=state.t * env.spec.step_seconds,
        extra=extra,
    )


def collect(
    env,
    n_episodes: int,
    seeds: list[int],
    *,
    sampler: PolicySampler | None = None,
    expert: ExpertSampler | None = None,
    source: str = "autonomous",
    init_set: str = "standard",
    value_fn=None,
    gate_cfg: GateConfig | None = None,
    intervention_expert: ExpertSampler | None = None,
    iteration: int = 0,
    provenance: str = "expert",
) -> list[Episode]:
    if len(seeds) < n_episodes:
        raise ValueError("not enough seeds for the requested episode count")
    if gate_cfg is not None and (value_fn is None or intervention_expert is None):
        raise ValueError("gated collection needs a value function and an intervention expert")
    return [
        run_episode(
            env, seeds[i], sampler, init_set=init_set, source=source, expert=expert,
            value_fn=value_fn, gate_cfg=gate_cfg, intervention_expert=intervention_expert,
            iteration=iteration, provenance=provenance,
        )
        for i in range(n_episodes)
    ]


# -- metrics -----------------------------------------------------------------------


@dataclass
class Metrics:
    task_id: str
    checkpoint: str
    beta: float
    episodes: int
    successes: int
    success_rate: float
    stderr: float
    sim_seconds: float
    throughput_per_hour: float
    stage_rates: dict[str, float] = field(default_factory=dict)

    def to_row(self) -> dict:
        row = {
            "task": self.task_id,
            "checkpoint": self.checkpoint,
            "beta": self.beta,
            "episodes": self.episodes,
            "successes": self.successes,
            "success_rate": round(self.success_rate, 6),
            "stderr": round(self.stderr, 6),
            "sim_seconds": round(self.sim_seconds, 3),
            "throughput_per_hour": round(self.throughput_per_hour, 6),
        }
        for stage, rate in sorted(self.stage_rates.items()):
            row[f"stage_{stage}"] = round(rate, 6)
        return row


def compute_metrics(episodes: list[Episode], task_id: str, checkpoint: str, beta: float) -> Metrics:
    if not episodes:
        raise ValueError("metrics need at least one episode")
    n = len(episodes)
    successes = sum(1 for e in episodes if e.outcome == "success")
    p = successes / n
    stderr = float(np.sqrt(p * (1 - p) / n))
    sim_seconds = float(sum(e.sim_seconds for e in episodes))
    throughput = successes / (sim_seconds / 3600.0) if sim_seconds > 0 else 0.0
    stage_names = sorted({s for e in episodes for s in e.stages})
    stage_rates = {s: sum(1 for e in episodes if s in e.stages) / n for s in stage_names}
    return Metrics(
        task_id=task_id,
        checkpoint=checkpoint,
        beta=beta,
        episodes=n,
        successes=successes,
        success_rate=p,
        stderr=stderr,
        sim_seconds=sim_seconds,
        throughput_per_hour=throughput,
        stage_rates=stage_rates,
    )


def evaluate(
    env,
    sampler: PolicySampler,
    n_episodes: int,
    seeds: list[int],
    *,
    init_set: str = "standard",
    checkpoint: str = "",
    iteration: int = 0,
) -> tuple[Metrics, list[Episode]]:
    episodes = collect(
        env, n_episodes, seeds, sampler=sampler, source="autonomous", init_set=init_set,
        iteration=iteration, provenance=checkpoint,
    )
    return compute_metrics(episodes, env.spec.task_id, checkpoint, sampler.beta), episodes
