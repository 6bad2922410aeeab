import json
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from recap import pipeline as pipe
from recap.service import create_app

from test_pipeline import tiny_config


@pytest.fixture(scope="module")
def prepared_run(tmp_path_factory):
    """A tiny run with pretrain + sft so collect endpoints have checkpoints."""
    out = tmp_path_factory.mktemp("svc-run")
    run = pipe.Run(out, tiny_config(), seed=0)
    pipe.pretrain(run)
    pipe.sft(run, "reachchunk")
    return out


@pytest.fixture()
def client():
    with TestClient(create_app()) as c:
        yield c


def payload(prepared_run, **extra):
    body = {"out_dir": str(prepared_run), "seed": 0,
            "config": tiny_config().model_dump()}
    body.update(extra)
    return body


def test_healthz(client):
    assert client.get("/healthz").json() == {"ok": True}


def test_pretrain_endpoint_rejects_single_task(client, tmp_path):
    body = {"out_dir": str(tmp_path), "seed": 0,
            "config": tiny_config(tasks=("gridfold",)).model_dump()}
    resp = client.post("/pretrain", json=body)
    assert resp.status_code == 422
    assert "gridfold" in resp.json()["detail"]


def test_request_needs_config(client, tmp_path):
    resp = client.post("/pretrain", json={"out_dir": str(tmp_path), "seed": 0})
    assert resp.status_code == 422


def test_evaluate_endpoint(client, prepared_run):
    resp = client.post("/evaluate", json=payload(
        prepared_run, task="reachchunk", checkpoint="policy_sft_reachchunk",
        episodes=6, label="svc-eval"))
    assert resp.status_code == 200
    summary = resp.json()["summary"]
    assert 0.0 <= summary["success_rate"] <= 1.0


def test_evaluate_missing_checkpoint_is_422(client, prepared_run):
    resp = client.post("/evaluate", json=payload(prepared_run, task="reachchunk",
                                                 checkpoint="nope", episodes=4))
    assert resp.status_code == 422


def test_scripted_collect_endpoint(client, prepared_run):
    resp = client.post("/collect", json=payload(
        prepared_run, task="reachchunk", autonomous=3, intervention=2,
        intervention_source="scripted-gate", iteration=1))
    assert resp.status_code == 200
    assert resp.json()["summary"]["episodes"] == 5


def test_session_status_404(client):
    assert client.get("/sessions/none").status_code == 404


# -- ui session protocol ---------------------------------------------------------


def _ui_session(client, prepared_run, episodes=1, client_timeout=30.0):
    resp = client.post("/collect", json=payload(
        prepared_run, task="reachchunk", autonomous=episodes, intervention=0,
        intervention_source="ui", iteration=1, frame_interval=0.0,
        client_timeout=client_timeout))
    assert resp.status_code == 200, resp.text
    return resp.json()


def _steer_command(frame):
    """Test-side proportional controller from frame data."""
    pos = np.array(frame["pos"])
    vel = np.array(frame["vel"])
    goal = np.array(frame["goal"]["pos"])
    err = goal - pos
    dist = float(np.linalg.norm(err))
    v_des = err / max(dist, 1e-9) * min(0.03, np.sqrt(2 * 0.0006 * max(dist - 0.02, 0.0)))
    return np.clip((v_des - vel * 0.05) / 0.001, -1, 1).tolist()


def test_ui_loop_takeover_steer_release_label(client, prepared_run):
    created = _ui_session(client, prepared_run, episodes=1)
    store_before = len(pipe.EpisodeStore(prepared_run / "store" / "episodes.jsonl"))
    takeover_t = release_t = None
    with client.websocket_connect(created["ws_path"]) as ws:
        start = json.loads(ws.receive_text())
        assert start["kind"] == "session_start"
        assert json.loads(ws.receive_text())["kind"] == "episode_start"
        seqs, ts = [], []
        labeled = False
        while True:
            msg = json.loads(ws.receive_text())
            if msg["kind"] == "frame":
                seqs.append(msg["seq"])
                ts.append(msg["t"])
                if msg["t"] == 10:
                    takeover_t = msg["t"]
                    ws.send_text(json.dumps({"kind": "takeover"}))
                if msg["control"] == "human":
                    if np.array(msg["pos"])[1] > 0.72 and release_t is None:
                        release_t = msg["t"]
                        ws.send_text(json.dumps({"kind": "release"}))
                    else:
                        ws.send_text(json.dumps({
                            "kind": "human_action", "step_ref": msg["t"],
                            "action": _steer_command(msg)}))
            elif msg["kind"] == "episode_end":
                assert msg["outcome"] in ("success", "failure")
                ws.send_text(json.dumps({"kind": "label", "outcome": "success"}))
                ack = json.loads(ws.receive_text())
                assert ack["kind"] == "label_ack"
                labeled = True
                ws.send_text(json.dumps({"kind": "next"}))
            elif msg["kind"] == "session_end":
                break
        assert labeled
        # frames arrive in order at every step
        assert seqs == sorted(seqs)
        assert ts == list(range(len(ts)))

    status = client.get(f"/sessions/{created['session_id']}").json()
    assert status["state"] == "done"
    assert status["episodes_done"] == 1

    store = pipe.EpisodeStore(prepared_run / "store" / "episodes.jsonl")
    assert len(store) == store_before + 1
    ep = store.episodes()[-1]
    assert ep.outcome == "success"
    assert ep.extra.get("labeler") == "human"
    sources = [tr.source for tr in ep.transitions]
    assert "intervention" in sources
    # the intervention segment is bounded by the takeover/release window
    for tr in ep.transitions:
        if tr.source == "intervention":
            assert takeover_t <= tr.t <= (release_t or ep.final_t) + 5
    # policy training consumes the episode without error
    prep = pipe.prepare_episode(ep, 100)
    assert prep.forced.any()


def test_ui_rejects_human_action_without_takeover(client, prepared_run):
    created = _ui_session(client, prepared_run, episodes=1)
    with client.websocket_connect(created["ws_path"]) as ws:
        assert json.loads(ws.receive_text())["kind"] == "session_start"
        assert json.loads(ws.receive_text())["kind"] == "episode_start"
        frame = json.loads(ws.receive_text())
        assert frame["kind"] == "frame"
        ws.send_text(json.dumps({"kind": "human_action", "step_ref": frame["t"], "action": [1, 0]}))
        while True:
            msg = json.loads(ws.receive_text())
            if msg["kind"] == "error":
                assert msg["code"] == "not_in_control"
                break
            assert msg["kind"] in ("frame", "episode_end")
            if msg["kind"] == "episode_end":
                pytest.fail("error for uncontrolled human_action never arrived")


def test_ui_rejects_label_before_terminal_and_double_label(client, prepared_run):
    created = _ui_session(client, prepared_run, episodes=1)
    with client.websocket_connect(created["ws_path"]) as ws:
        assert json.loads(ws.receive_text())["kind"] == "session_start"
        assert json.loads(ws.receive_text())["kind"] == "episode_start"
        ws.send_text(json.dumps({"kind": "label", "outcome": "success"}))
        got_early_reject = False
        while True:
            msg = json.loads(ws.receive_text())
            if msg["kind"] == "error" and msg["code"] == "not_terminal":
                got_early_reject = True
            elif msg["kind"] == "episode_end":
                ws.send_text(json.dumps({"kind": "label", "outcome": "failure"}))
                assert json.loads(ws.receive_text())["kind"] == "label_ack"
                ws.send_text(json.dumps({"kind": "label", "outcome": "success"}))
                msg2 = json.loads(ws.receive_text())
                assert msg2["kind"] == "error" and msg2["code"] == "already_labeled"
                ws.send_text(json.dumps({"kind": "next"}))
            elif msg["kind"] == "session_end":
                break
        assert got_early_reject
    store = pipe.EpisodeStore(prepared_run / "store" / "episodes.jsonl")
    assert store.episodes()[-1].outcome == "failure"  # the accepted label stands


def test_ui_unknown_kind_rejected(client, prepared_run):
    created = _ui_session(client, prepared_run, episodes=1)
    with client.websocket_connect(created["ws_path"]) as ws:
        assert json.loads(ws.receive_text())["kind"] == "session_start"
        assert json.loads(ws.receive_text())["kind"] == "episode_start"
        ws.send_text(json.dumps({"kind": "chaos"}))
        while True:
            msg = json.loads(ws.receive_text())
            if msg["kind"] == "error":
                assert msg["code"] == "unknown_kind"
                break
            if msg["kind"] == "episode_end":
                pytest.fail("unknown kind never rejected")


def test_ui_stale_actions_dropped(client, prepared_run):
    created = _ui_session(client, prepared_run, episodes=1)
    with client.websocket_connect(created["ws_path"]) as ws:
        assert json.loads(ws.receive_text())["kind"] == "session_start"
        assert json.loads(ws.receive_text())["kind"] == "episode_start"
        sent_stale = False
        while True:
            msg = json.loads(ws.receive_text())
            if msg["kind"] == "frame" and msg["t"] == 0:
                ws.send_text(json.dumps({"kind": "takeover"}))
            elif msg["kind"] == "frame" and msg["t"] == 20 and not sent_stale:
                ws.send_text(json.dumps({"kind": "human_action", "step_ref": 5,
                                         "action": [0.5, 0.5]}))
                sent_stale = True
            elif msg["kind"] == "episode_end":
                ws.send_text(json.dumps({"kind": "next"}))
            elif msg["kind"] == "session_end":
                break
    status = client.get(f"/sessions/{created['session_id']}").json()
    assert status["stale_actions_dropped"] >= 1


def test_ui_disconnect_finishes_episode_autonomously(client, prepared_run):
    created = _ui_session(client, prepared_run, episodes=2)
    store_before = len(pipe.EpisodeStore(prepared_run / "store" / "episodes.jsonl"))
    with client.websocket_connect(created["ws_path"]) as ws:
        assert json.loads(ws.receive_text())["kind"] == "session_start"
        assert json.loads(ws.receive_text())["kind"] == "episode_start"
        assert json.loads(ws.receive_text())["kind"] == "frame"
        # walk away mid-episode
    deadline = time.time() + 10
    while time.time() < deadline:
        status = client.get(f"/sessions/{created['session_id']}").json()
        if status["episodes_done"] >= 1:
            break
        time.sleep(0.05)
    assert status["episodes_done"] >= 1
    assert status["state"] == "pending"  # awaiting reconnection for episode 2
    assert status["ui_dropped"] == 1
    store = pipe.EpisodeStore(prepared_run / "store" / "episodes.jsonl")
    ep = store.episodes()[-1]
    assert ep.extra.get("ui_dropped") is True
    assert all(tr.source == "autonomous" for tr in ep.transitions)
    assert ep.outcome in ("success", "failure")

    # a reconnecting client finishes the session
    with client.websocket_connect(created["ws_path"]) as ws:
        while True:
            msg = json.loads(ws.receive_text())
            if msg["kind"] == "episode_end":
                ws.send_text(json.dumps({"kind": "next"}))
            elif msg["kind"] == "session_end":
                break
    status = client.get(f"/sessions/{created['session_id']}").json()
    assert status["state"] == "done"
    assert len(pipe.EpisodeStore(prepared_run / "store" / "episodes.jsonl")) == store_before + 2


def test_ui_session_times_out_without_client(client, prepared_run):
    created = _ui_session(client, prepared_run, episodes=1, client_timeout=0.1)
    deadline = time.time() + 5
    while time.time() < deadline:
        status = client.get(f"/sessions/{created['session_id']}").json()
        if status["state"] == "error":
            break
        time.sleep(0.05)
    assert status["state"] == "error"
    assert "connection error" in status["error"]


def test_ui_rejects_discrete_task(client, prepared_run):
    resp = client.post("/collect", json=payload(
        prepared_run, task="gridfold", autonomous=1, intervention_source="ui"))
    assert resp.status_code == 422
    assert "continuous" in resp.json()["detail"]
