"""End-to-end training loop: pre-training, per-task SFT, data collection
with optional gated interventions, iterated retraining, evaluation, and the
baseline comparison harness.

Artifacts live under an output directory: a JSONL episode store, RCAP
checkpoints, a metrics CSV, and a JSON manifest linking all of them.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import policy as pol
from . import value as val
from .config import RunConfig
from .data import EpisodeStore, PreparedEpisode, policy_input, prepare_episode
from .envs import GateConfig, make_env
from .rollout import (
    ExpertSampler,
    PolicySampler,
    child_rng,
    collect,
    compute_metrics,
    episode_seeds,
    evaluate,
)

METRIC_COLUMNS = [
    "label", "task", "checkpoint", "beta", "seed", "episodes", "successes",
    "success_rate", "stderr", "sim_seconds", "throughput_per_hour",
    "stage_pick", "stage_carry", "stage_stack", "stage_reach",
]


class Run:
    """A pipeline run rooted at an output directory."""

    def __init__(self, out_dir: str | Path, config: RunConfig, seed: int):
        self.out_dir = Path(out_dir)
        self.config = config
        self.seed = seed
        (self.out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        self.store = EpisodeStore(self.out_dir / "store" / "episodes.jsonl")
        self.manifest_path = self.out_dir / "manifest.json"
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())
        else:
            self.manifest = {
                "seed": seed,
                "config": config.model_dump(),
                "tasks": list(config.tasks),
                "store": "store/episodes.jsonl",
                "checkpoints": {},
                "thresholds": {},
                "positive_fractions": {},
                "evaluations": [],
            }
        self.envs = {t: make_env(t, **config.task(t).env_overrides) for t in config.tasks}
        (self.out_dir / "config.json").write_text(json.dumps(config.model_dump(), indent=2) + "\n")

    # -- structural helpers ---------------------------------------------------

    def env(self, task_id: str):
        if task_id not in self.envs:
            raise ValueError(f"task {task_id!r} not in this run's config ({self.config.tasks})")
        return self.envs[task_id]

    def layout(self) -> pol.PolicyLayout:
        n_actions = max([e.spec.n_actions for e in self.envs.values()] + [1])
        cont = [e for e in self.envs.values() if e.spec.kind == "continuous"]
        chunk_h = max([e.spec.chunk_h for e in cont] + [1])
        action_dim = max([e.spec.action_dim for e in cont] + [1])
        obs_dim = max(e.spec.obs_dim for e in self.envs.values())
        return pol.PolicyLayout(obs_dim=obs_dim, tasks=list(self.config.tasks),
                                n_actions=n_actions, chunk_h=chunk_h, action_dim=action_dim)

    def value_cfg(self) -> val.ValueTrainConfig:
        t = self.config.training
        return val.ValueTrainConfig(hidden=tuple(t.value_hidden), epochs=t.value_epochs,
                                    batch_size=t.value_batch, lr=t.value_lr)

    def policy_cfg(self) -> pol.PolicyTrainConfig:
        t = self.config.training
        net = pol.PolicyNetConfig(
            trunk_hidden=tuple(t.trunk_hidden), trunk_out=t.trunk_out,
            dhead_hidden=tuple(t.dhead_hidden), bhead_hidden=tuple(t.bhead_hidden),
            fhead_hidden=tuple(t.fhead_hidden),
        )
        return pol.PolicyTrainConfig(net=net, epochs=t.policy_epochs, batch_size=t.policy_batch,
                                     lr=t.policy_lr, indicator_dropout=t.indicator_dropout,
                                     euler_steps=t.euler_steps)

    def n_ticks(self, task_id: str) -> int:
        override = self.config.task(task_id).advantage_n_ticks
        return override if override is not None else max(1, self.env(task_id).spec.l_max // 10)

    # -- artifacts --------------------------------------------------------------

    def _ckpt_path(self, name: str) -> Path:
        return self.out_dir / "checkpoints" / f"{name}.rcap"

    def save_policy_ckpt(self, name: str, pnet: pol.PolicyNet, provenance: str, init: str) -> None:
        self._ckpt_path(name).write_bytes(pol.save_policy(pnet, provenance, init))
        self.manifest["checkpoints"][name] = {
            "path": f"checkpoints/{name}.rcap", "kind": "policy",
            "provenance": provenance, "init_provenance": init,
        }
        self.save_manifest()

    def load_policy_ckpt(self, name: str) -> tuple[pol.PolicyNet, str, str]:
        return pol.load_policy(self._ckpt_path(name).read_bytes())

    def save_value_ckpt(self, name: str, vnet: val.ValueNet, provenance: str, init: str) -> None:
        self._ckpt_path(name).write_bytes(val.save_value(vnet, provenance, init))
        self.manifest["checkpoints"][name] = {
            "path": f"checkpoints/{name}.rcap", "kind": "value",
            "provenance": provenance, "init_provenance": init,
        }
        self.save_manifest()

    def load_value_ckpt(self, name: str) -> tuple[val.ValueNet, str, str]:
        return val.load_value(self._ckpt_path(name).read_bytes())

    def save_manifest(self) -> None:
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")

    def add_metrics(self, metrics, label: str) -> dict:
        row = {c: "" for c in METRIC_COLUMNS}
        row.update({k: v for k, v in metrics.to_row().items() if k in METRIC_COLUMNS})
        row["label"] = label
        row["seed"] = self.seed
        path = self.out_dir / "metrics.csv"
        write_header = not path.exists()
        with path.open("a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
            if write_header:
                writer.writeheader()
            writer.writerow(row)
        entry = dict(row)
        self.manifest["evaluations"].append(entry)
        self.save_manifest()
        return entry

    # -- dataset assembly ---------------------------------------------------------

    def prepared(self, task_id: str, iteration: int | None = None) -> list[PreparedEpisode]:
        l_max = self.env(task_id).spec.l_max
        return [prepare_episode(e, l_max) for e in self.store.episodes(task_id, iteration)]

    def prepared_all(self) -> list[PreparedEpisode]:
        return [p for t in self.config.tasks for p in self.prepared(t)]


def _policy_base(prep: PreparedEpisode, t: int, tasks: list[str]) -> np.ndarray:
    return policy_input(prep.obs[t], prep.task_id, tasks, 0.0)[:-1]


def build_policy_examples(
    run: Run,
    preps: list[PreparedEpisode],
    critic: val.ValueNet | None,
    thresholds: val.ThresholdTable | None,
    *,
    mode: str = "montecarlo",
    sft: bool = False,
) -> tuple[list[pol.TrainingExample], dict[str, list[int]]]:
    """Training examples with computed or forced indicators. Returns the
    examples and, per task, the non-forced indicator values (bookkeeping for
    positive-fraction checks)."""
    examples: list[pol.TrainingExample] = []
    non_forced: dict[str, list[int]] = {}
    include_negative = run.config.iteration.include_negative_episodes
    for prep in preps:
        kind = run.env(prep.task_id).spec.kind
        advantages = None
        if not sft:
            values = critic.values_for_episode(prep)
            n_ticks = run.n_ticks(prep.task_id)
            advantages = [
                val.advantage(prep, values, mode, t, n_ticks) for t in range(prep.n_transitions)
            ]
            if not include_negative and not prep.forced.any() and prep.outcome == "failure":
                if float(np.mean(advantages)) <= 0.0:
                    continue
        for t in range(prep.n_transitions):
            if sft:
                ind = val.indicator(0.0, 0.0, sft=True)
            elif prep.forced[t]:
                ind = val.indicator(0.0, 0.0, forced=True)
            else:
                ind = val.indicator(advantages[t], thresholds.eps[prep.task_id])
                non_forced.setdefault(prep.task_id, []).append(ind)
            base = _policy_base(prep, t, run.config.tasks)
            if kind == "discrete":
                examples.append(pol.TrainingExample(base=base, kind="discrete", indicator=ind,
                                                    forced=bool(prep.forced[t]),
                                                    action_index=int(prep.actions[t])))
            else:
                examples.append(pol.TrainingExample(base=base, kind="continuous", indicator=ind,
                                                    forced=bool(prep.forced[t]),
                                                    chunk=np.asarray(prep.actions[t])))
    return examples, non_forced


def calibrate_task_threshold(
    run: Run,
    preps: list[PreparedEpisode],
    critic: val.ValueNet,
    task_id: str,
    fraction: float,
    *,
    mode: str,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Threshold and realized positive fraction on the calibration sample."""
    advs: list[float] = []
    n_ticks = run.n_ticks(task_id)
    for prep in preps:
        if prep.task_id != task_id:
            continue
        values = critic.values_for_episode(prep)
        for t in range(prep.n_transitions):
            if not prep.forced[t]:
                advs.append(val.advantage(prep, values, mode, t, n_ticks))
    arr = np.array(advs)
    eps = val.calibrate_threshold(arr, fraction, rng)
    realized = float((arr > eps).mean())
    return eps, realized


# -- stages -----------------------------------------------------------------------


def ensure_demos(run: Run) -> dict:
    """Collect scripted-expert demos for every configured task that has none."""
    counts = {}
    for task_id in run.config.tasks:
        existing = [e for e in run.store.episodes(task_id) if e.transitions[0].source == "demo"]
        ts = run.config.task(task_id)
        missing = ts.demo_count - len(existing)
        if missing > 0:
            env = run.env(task_id)
            seeds = episode_seeds(run.seed, f"demos/{task_id}", missing)
            episodes = []
            for i in range(missing):
                noise = ts.demo_noise
                if ts.demo_noise_high is not None and i % 2 == 1:
                    noise = ts.demo_noise_high
                episodes += collect(
                    env, 1, [seeds[i]], expert=ExpertSampler(noise=noise, role="demo"),
                    source="demo", init_set=ts.init_set, iteration=0, provenance="expert-demo",
                )
            run.store.extend(episodes)
        counts[task_id] = ts.demo_count
    return counts


def pretrain(run: Run) -> dict:
    """Multi-task value pre-training, threshold calibration, and policy
    pre-training with on-the-fly empirical-return advantages."""
    if len(run.config.tasks) < 2:
        raise ValueError(
            f"pre-training is multi-task; need demos for >=2 tasks, got {run.config.tasks}"
        )
    ensure_demos(run)
    preps = run.prepared_all()
    critic, _ = val.train_value(preps, run.config.tasks, run.value_cfg(),
                                child_rng(run.seed, "pretrain", "value"))
    run.save_value_ckpt("value_pre", critic, "pretrain", "scratch")

    table = val.ThresholdTable()
    fractions = {}
    frac = run.config.iteration.pretrain_positive_fraction
    for task_id in run.config.tasks:
        target = frac
        eps, realized = calibrate_task_threshold(
            run, preps, critic, task_id, target, mode="montecarlo",
            rng=child_rng(run.seed, "pretrain", "calibrate", task_id),
        )
        table.eps[task_id] = eps
        table.fraction[task_id] = target
        fractions[task_id] = realized
    run.manifest["thresholds"]["pretrain"] = table.to_dict()
    run.manifest["positive_fractions"]["pretrain"] = fractions

    examples, _ = build_policy_examples(run, preps, critic, table, mode="montecarlo")
    pnet, _ = pol.train_policy(examples, run.layout(), run.policy_cfg(),
                               child_rng(run.seed, "pretrain", "policy"))
    run.save_policy_ckpt("policy_pre", pnet, "pretrain", "scratch")
    run.save_manifest()
    return {"demos": {t: run.config.task(t).demo_count for t in run.config.tasks},
            "positive_fractions": fractions, "thresholds": table.to_dict()}


def sft(run: Run, task_id: str) -> dict:
    """Supervised finetuning of the pre-trained policy on one task's demos,
    with the improvement indicator fixed to positive."""
    pre, _, _ = run.load_policy_ckpt("policy_pre")
    demo_preps = [
        prepare_episode(e, run.env(task_id).spec.l_max)
        for e in run.store.episodes(task_id)
        if e.transitions[0].source == "demo"
    ]
    if not demo_preps:
        raise ValueError(f"no demos stored for task {task_id!r}; run pretrain first")
    examples, _ = build_policy_examples(run, demo_preps, None, None, sft=True)
    pnet, _ = pol.train_policy(examples, run.layout(), run.policy_cfg(),
                               child_rng(run.seed, "sft", task_id), init=pre)
    name = f"policy_sft_{task_id}"
    run.save_policy_ckpt(name, pnet, "sft", "pretrain")
    return {"checkpoint": name, "examples": len(examples)}


def _collection_policy_name(run: Run, task_id: str, k: int) -> str:
    return f"policy_sft_{task_id}" if k <= 1 else f"policy_{task_id}_recap{k - 1}"


def _gate_value_name(run: Run, task_id: str, k: int) -> str:
    return "value_pre" if k <= 1 else f"value_{task_id}_recap{k - 1}"


def collect_stage(
    run: Run,
    task_id: str,
    *,
    autonomous: int,
    intervention: int,
    k: int,
    intervention_source: str = "scripted-gate",
    policy_name: str | None = None,
) -> dict:
    """Collect rollouts with the iteration's policy; intervention episodes
    run under the scripted gate with the correct-mode expert."""
    env = run.env(task_id)
    ts = run.config.task(task_id)
    policy_name = policy_name or _collection_policy_name(run, task_id, k)
    pnet, _, _ = run.load_policy_ckpt(policy_name)
    sampler = PolicySampler(pnet, run.config.tasks, indicator_code=1,
                            euler_steps=run.config.training.euler_steps, beta=1.0)
    episodes = []
    if autonomous > 0:
        seeds = episode_seeds(run.seed, f"collect/{task_id}/k{k}/auto", autonomous)
        episodes += collect(env, autonomous, seeds, sampler=sampler, source="autonomous",
                            init_set=ts.init_set, iteration=k, provenance=policy_name)
    if intervention > 0:
        if intervention_source == "none":
            raise ValueError("intervention episodes requested with intervention-source=none")
        if intervention_source != "scripted-gate":
            raise ValueError(f"collect_stage only drives scripted-gate interventions, got {intervention_source!r}")
        critic, _, _ = run.load_value_ckpt(_gate_value_name(run, task_id, k))
        value_fn = lambda obs: critic.value(obs, task_id)  # noqa: E731
        gate_cfg = GateConfig(**run.config.gate.model_dump())
        seeds = episode_seeds(run.seed, f"collect/{task_id}/k{k}/gated", intervention)
        episodes += collect(env, intervention, seeds, sampler=sampler, source="autonomous",
                            init_set=ts.init_set, value_fn=value_fn, gate_cfg=gate_cfg,
                            intervention_expert=ExpertSampler(noise=0.0, role="intervention"),
                            iteration=k, provenance=policy_name)
    run.store.extend(episodes)
    intervention_steps = sum(
        1 for e in episodes for tr in e.transitions if tr.source == "intervention"
    )
    return {"task": task_id, "iteration": k, "episodes": len(episodes),
            "intervention_steps": intervention_steps, "policy": policy_name}


def run_iteration(run: Run, task_id: str, k: int, *, intervention_source: str = "scripted-gate") -> dict:
    """One improvement iteration: collect, retrain the critic on everything,
    recalibrate thresholds on the fresh rollouts, retrain the policy from the
    pre-trained checkpoint, and evaluate."""
    it = run.config.iteration
    intervention = 0 if intervention_source == "none" else it.intervention_count
    collected = collect_stage(run, task_id, autonomous=it.autonomous_count,
                              intervention=intervention, k=k,
                              intervention_source="scripted-gate" if intervention else "none")

    v_pre, _, _ = run.load_value_ckpt("value_pre")
    preps = run.prepared(task_id)
    critic, _ = val.train_value(preps, run.config.tasks, run.value_cfg(),
                                child_rng(run.seed, "iterate", task_id, k, "value"), init=v_pre)
    run.save_value_ckpt(f"value_{task_id}_recap{k}", critic, f"recap-{k}", "pretrain")

    rollout_preps = run.prepared(task_id, iteration=k)
    target = run.config.task(task_id).iteration_threshold_fraction or it.iteration_positive_fraction
    eps, realized = calibrate_task_threshold(
        run, rollout_preps, critic, task_id, target, mode="nstep",
        rng=child_rng(run.seed, "iterate", task_id, k, "calibrate"),
    )
    table = val.ThresholdTable(eps={task_id: eps}, fraction={task_id: target})
    run.manifest["thresholds"][f"{task_id}/recap{k}"] = table.to_dict()
    run.manifest["positive_fractions"][f"{task_id}/recap{k}"] = {task_id: realized}

    pre, _, _ = run.load_policy_ckpt("policy_pre")
    examples, _ = build_policy_examples(run, preps, critic, table, mode="nstep")
    pnet, _ = pol.train_policy(examples, run.layout(), run.policy_cfg(),
                               child_rng(run.seed, "iterate", task_id, k, "policy"), init=pre)
    name = f"policy_{task_id}_recap{k}"
    run.save_policy_ckpt(name, pnet, f"recap-{k}", "pretrain")

    summary = evaluate_checkpoint(run, task_id, name, label=f"{task_id}/recap{k}")
    summary.update(collected)
    summary["threshold"] = eps
    summary["positive_fraction"] = realized
    run.save_manifest()
    return summary


def evaluate_checkpoint(
    run: Run,
    task_id: str,
    checkpoint_name: str,
    *,
    beta: float | None = None,
    episodes: int | None = None,
    label: str | None = None,
    indicator_code: int | None = None,
) -> dict:
    env = run.env(task_id)
    ts = run.config.task(task_id)
    beta = run.config.iteration.evaluation_beta if beta is None else beta
    n = episodes or run.config.iteration.evaluation_episodes
    pnet, _, _ = run.load_policy_ckpt(checkpoint_name)
    if indicator_code is None:
        indicator_code = 0 if checkpoint_name.startswith("baseline_") else 1
    sampler = PolicySampler(pnet, run.config.tasks, indicator_code=indicator_code,
                            euler_steps=run.config.training.euler_steps, beta=beta)
    seeds = episode_seeds(run.seed, f"eval/{task_id}", n)
    metrics, _ = evaluate(env, sampler, n, seeds, init_set=ts.init_set,
                          checkpoint=checkpoint_name)
    entry = run.add_metrics(metrics, label or f"{task_id}/{checkpoint_name}")
    return {"metrics": entry, "checkpoint": checkpoint_name,
            "success_rate": metrics.success_rate,
            "throughput_per_hour": metrics.throughput_per_hour}


def compare(run: Run, task_id: str) -> dict:
    """Train AWR and SPO on the same stored data as the final conditioned
    policy and evaluate all three under the shared metrics schema."""
    k = run.config.iteration.iterations
    final_value = f"value_{task_id}_recap{k}"
    final_policy = f"policy_{task_id}_recap{k}"
    if final_policy not in run.manifest["checkpoints"]:
        raise ValueError(f"run iterations first: {final_policy} missing")
    critic, _, _ = run.load_value_ckpt(final_value)
    pre, _, _ = run.load_policy_ckpt("policy_pre")

    preps = run.prepared(task_id)
    n_ticks = run.n_ticks(task_id)
    bexamples = []
    for prep in preps:
        values = critic.values_for_episode(prep)
        kind = run.env(task_id).spec.kind
        for t in range(prep.n_transitions):
            a = val.advantage(prep, values, "nstep", t, n_ticks)
            base = _policy_base(prep, t, run.config.tasks)
            if kind == "discrete":
                bexamples.append(bl.BaselineExample(base=base, kind="discrete", advantage=a,
                                                    action_index=int(prep.actions[t])))
            else:
                bexamples.append(bl.BaselineExample(base=base, kind="continuous", advantage=a,
                                                    chunk=np.asarray(prep.actions[t])))

    bs = run.config.baselines
    pcfg = run.policy_cfg()
    cfg = bl.BaselineConfig(net=pcfg.net, epochs=bs.epochs, batch_size=pcfg.batch_size,
                            lr=pcfg.lr, beta_awr=bs.beta_awr, w_max=bs.w_max,
                            eps_ar=bs.eps_ar, eps_flow=bs.eps_flow, alpha=bs.alpha)
    results = {}
    for method in ("awr", "spo"):
        pnet = bl.train_baseline(bexamples, run.layout(), method, cfg,
                                 child_rng(run.seed, "baseline", task_id, method), init=pre)
        name = f"baseline_{method}_{task_id}"
        run.save_policy_ckpt(name, pnet, f"baseline-{method}", "pretrain")
        results[method] = evaluate_checkpoint(run, task_id, name, label=f"{task_id}/{method}")
    results["recap"] = evaluate_checkpoint(run, task_id, final_policy,
                                           label=f"{task_id}/recap-final")
    run.save_manifest()
    return {m: {"success_rate": r["success_rate"], "throughput_per_hour": r["throughput_per_hour"]}
            for m, r in results.items()}
