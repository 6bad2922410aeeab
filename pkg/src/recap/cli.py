"""Thin command-line client for the service API.

Without --server, commands run against an in-process app over an ASGI
transport; with --server they talk to a running `recap serve` instance.
The ui intervention source needs a real server so a browser can connect.
"""

from __future__ import annotations

import asyncio
import json
import sys
import time

import click
import httpx


class _InProcessClient:
    """Synchronous facade over the ASGI app for serverless CLI runs."""

    def __init__(self):
        from .service import create_app

        self._app = create_app()

    def _request(self, method: str, path: str, **kw):
        async def go():
            transport = httpx.ASGITransport(app=self._app)
            async with httpx.AsyncClient(transport=transport, base_url="http://recap.local",
                                         timeout=None) as client:
                return await client.request(method, path, **kw)

        return asyncio.run(go())

    def post(self, path: str, **kw):
        return self._request("POST", path, **kw)

    def get(self, path: str, **kw):
        return self._request("GET", path, **kw)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def _client(server: str | None):
    if server:
        return httpx.Client(base_url=server, timeout=None)
    return _InProcessClient()


def _post(ctx, path: str, payload: dict) -> dict:
    with _client(ctx.obj["server"]) as client:
        resp = client.post(path, json=payload)
        if resp.status_code != 200:
            try:
                detail = resp.json().get("detail", resp.text)
            except ValueError:
                detail = resp.text
            raise click.ClickException(f"{path} failed ({resp.status_code}): {detail}")
        return resp.json()


def _stage_payload(ctx, **extra) -> dict:
    payload = {"config_path": ctx.obj["config"], "seed": ctx.obj["seed"], "out_dir": ctx.obj["out"]}
    payload.update(extra)
    return payload


def _echo(result: dict):
    click.echo(json.dumps(result, indent=2, default=str))


@click.group()
@click.option("--config", type=click.Path(), help="run config JSON")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), help="output directory for run artifacts")
@click.option("--server", type=str, default=None,
              help="base URL of a running service; default runs in-process")
@click.pass_context
def main(ctx, config, seed, out, server):
    """Iterated offline RL with advantage-conditioned policies."""
    ctx.ensure_object(dict)
    ctx.obj.update({"config": config, "seed": seed, "out": out, "server": server})


def _require(ctx, *names):
    missing = [n for n in names if not ctx.obj.get(n)]
    if missing:
        raise click.UsageError(f"missing required option(s): {', '.join('--' + n for n in missing)}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
def serve(host, port):
    """Run the HTTP/WebSocket service."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port)


@main.command()
@click.pass_context
def pretrain(ctx):
    """Multi-task value + policy pre-training on scripted demos."""
    _require(ctx, "config", "out")
    _echo(_post(ctx, "/pretrain", _stage_payload(ctx)))


@main.command()
@click.option("--task", required=True)
@click.pass_context
def sft(ctx, task):
    """Supervised finetuning on one task's demos (indicator forced positive)."""
    _require(ctx, "config", "out")
    _echo(_post(ctx, "/sft", _stage_payload(ctx, task=task)))


@main.command()
@click.option("--task", required=True)
@click.option("--autonomous", type=int, default=0, show_default=True)
@click.option("--intervention", type=int, default=0, show_default=True)
@click.option("--intervention-source", type=click.Choice(["none", "scripted-gate", "ui"]),
              default="none", show_default=True)
@click.option("--iteration", type=int, default=1, show_default=True)
@click.option("--policy-checkpoint", type=str, default=None)
@click.option("--frame-interval", type=float, default=0.05, show_default=True)
@click.option("--client-timeout", type=float, default=60.0, show_default=True)
@click.pass_context
def collect(ctx, task, autonomous, intervention, intervention_source, iteration,
            policy_checkpoint, frame_interval, client_timeout):
    """Collect episodes with the current policy into the episode store."""
    _require(ctx, "config", "out")
    payload = _stage_payload(
        ctx, task=task, autonomous=autonomous, intervention=intervention,
        intervention_source=intervention_source, iteration=iteration,
        policy_checkpoint=policy_checkpoint, frame_interval=frame_interval,
        client_timeout=client_timeout,
    )
    if intervention_source != "ui":
        _echo(_post(ctx, "/collect", payload))
        return
    if not ctx.obj["server"]:
        raise click.ClickException(
            "ui interventions need a running server (start one with `recap serve` "
            "and pass --server); no client could connect to an in-process app"
        )
    created = _post(ctx, "/collect", payload)
    click.echo(f"session {created['session_id']} waiting for a client:")
    click.echo(f"  open {ctx.obj['server']}{created['ui_url']}")
    with _client(ctx.obj["server"]) as client:
        while True:
            status = client.get(f"/sessions/{created['session_id']}").json()
            click.echo(f"  [{status['state']}] {status['episodes_done']}/{status['episodes_total']}")
            if status["state"] in ("done", "error"):
                if status["state"] == "error":
                    raise click.ClickException(status["error"] or "session failed")
                _echo(status)
                return
            time.sleep(2.0)


@main.command()
@click.option("--task", required=True)
@click.option("--iterations", type=int, default=None, help="defaults to the config value")
@click.option("--intervention-source", type=click.Choice(["none", "scripted-gate"]),
              default="scripted-gate", show_default=True)
@click.pass_context
def iterate(ctx, task, iterations, intervention_source):
    """Run improvement iterations: collect, retrain critic and policy, evaluate."""
    _require(ctx, "config", "out")
    _echo(_post(ctx, "/iterate", _stage_payload(
        ctx, task=task, iterations=iterations, intervention_source=intervention_source)))


@main.command()
@click.option("--task", required=True)
@click.option("--checkpoint", required=True)
@click.option("--beta", type=float, default=None, help="guidance weight; >1 uses CFG")
@click.option("--episodes", type=int, default=None)
@click.option("--label", type=str, default=None)
@click.pass_context
def evaluate(ctx, task, checkpoint, beta, episodes, label):
    """Evaluate a checkpoint: success rate and throughput."""
    _require(ctx, "config", "out")
    _echo(_post(ctx, "/evaluate", _stage_payload(
        ctx, task=task, checkpoint=checkpoint, beta=beta, episodes=episodes, label=label)))


@main.command()
@click.option("--task", required=True)
@click.pass_context
def compare(ctx, task):
    """Train AWR and SPO on the same stored data and evaluate all methods."""
    _require(ctx, "config", "out")
    _echo(_post(ctx, "/compare", _stage_payload(ctx, task=task)))


if __name__ == "__main__":
    main(sys.argv[1:])
