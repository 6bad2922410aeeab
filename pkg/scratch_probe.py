"""Scratch: full acceptance-shaped run for one seed. Not part of the package."""

import sys
import time
import tempfile

from recap.config import RunConfig, TaskSettings, IterationSettings
from recap import pipeline as pipe


def acceptance_config():
    return RunConfig(
        tasks=["gridfold", "reachchunk", "collarflip"],
        task_settings={
            "gridfold": TaskSettings(demo_count=600, demo_noise=0.0, demo_noise_high=0.55),
            "reachchunk": TaskSettings(demo_count=200, demo_noise=0.55),
            "collarflip": TaskSettings(demo_count=200, demo_noise=0.1, init_set="adversarial"),
        },
        iteration=IterationSettings(iterations=2, autonomous_count=300, intervention_count=0,
                                    evaluation_episodes=200),
    )


def run_seed(seed, out_dir):
    t0 = time.time()
    run = pipe.Run(out_dir, acceptance_config(), seed=seed)
    r = {}
    pipe.pretrain(run)
    print(f"  pretrain ({time.time()-t0:.0f}s)", flush=True)
    r["grid_cond"] = pipe.evaluate_checkpoint(run, "gridfold", "policy_pre", label="grid-cond",
                                              indicator_code=1)["success_rate"]
    r["grid_uncond"] = pipe.evaluate_checkpoint(run, "gridfold", "policy_pre", label="grid-uncond",
                                                indicator_code=0)["success_rate"]
    pipe.sft(run, "reachchunk")
    s = pipe.evaluate_checkpoint(run, "reachchunk", "policy_sft_reachchunk", label="reach-sft")
    r["reach_sft"] = (s["success_rate"], s["throughput_per_hour"])
    for k in (1, 2):
        it = pipe.run_iteration(run, "reachchunk", k, intervention_source="none")
        r[f"reach_i{k}"] = (it["success_rate"], it["throughput_per_hour"])
    print(f"  reach done ({time.time()-t0:.0f}s)", flush=True)
    r["compare"] = {m: v["throughput_per_hour"] for m, v in pipe.compare(run, "reachchunk").items()}
    print(f"  compare done ({time.time()-t0:.0f}s)", flush=True)
    pipe.sft(run, "collarflip")
    s = pipe.evaluate_checkpoint(run, "collarflip", "policy_sft_collarflip", label="collar-sft")
    r["collar_sft"] = s["success_rate"]
    for k in (1, 2):
        it = pipe.run_iteration(run, "collarflip", k, intervention_source="none")
        r[f"collar_i{k}"] = it["success_rate"]
    r["pos_fractions"] = run.manifest["positive_fractions"]
    r["time"] = time.time() - t0
    return r


if __name__ == "__main__":
    seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
    with tempfile.TemporaryDirectory() as td:
        result = run_seed(seed, td)
    print(f"\nseed {seed} ({result['time']:.0f}s):")
    print(f"  grid cond {result['grid_cond']:.3f} vs uncond {result['grid_uncond']:.3f} "
          f"(gap {result['grid_cond']-result['grid_uncond']:+.3f})")
    print(f"  reach: sft {result['reach_sft'][0]:.2f}/{result['reach_sft'][1]:.0f} -> "
          f"i1 {result['reach_i1'][0]:.2f}/{result['reach_i1'][1]:.0f} -> "
          f"i2 {result['reach_i2'][0]:.2f}/{result['reach_i2'][1]:.0f}")
    d = result['reach_i2'][0] - result['reach_sft'][0]
    x = result['reach_i2'][1] / max(result['reach_sft'][1], 1e-9)
    print(f"  reach delta {d:+.2f}, throughput x{x:.2f}")
    print(f"  compare: {({m: round(v,1) for m, v in result['compare'].items()})}")
    print(f"  collar: sft {result['collar_sft']:.2f} -> i1 {result['collar_i1']:.2f} -> i2 {result['collar_i2']:.2f}")
    print(f"  pos fractions: {result['pos_fractions']}")
