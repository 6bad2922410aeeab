"""Request/response models for the HTTP API and the UI wire protocol."""

from __future__ import annotations

from pydantic import BaseModel, Field

from ..config import RunConfig

WIRE_VERSION = 1


class StageRequest(BaseModel):
    out_dir: str
    seed: int = 0
    config: RunConfig | None = None
    config_path: str | None = None

    def resolved_config(self) -> RunConfig:
        from ..config import load_config

        if self.config is not None:
            return self.config
        if self.config_path:
            return load_config(self.config_path)
        raise ValueError("request needs either an inline config or a config_path")


class PretrainRequest(StageRequest):
    pass


class SftRequest(StageRequest):
    task: str


class CollectRequest(StageRequest):
    task: str
    autonomous: int = 0
    intervention: int = 0
    intervention_source: str = "none"  # none | scripted-gate | ui
    iteration: int = 1
    policy_checkpoint: str | None = None
    value_checkpoint: str | None = None
    # ui-source options
    frame_interval: float = 0.05  # seconds between frames sent to the client
    client_timeout: float = 30.0  # seconds to wait for a client before erroring


class IterateRequest(StageRequest):
    task: str
    iterations: int | None = None  # None: config value
    intervention_source: str = "scripted-gate"


class EvaluateRequest(StageRequest):
    task: str
    checkpoint: str
    beta: float | None = None
    episodes: int | None = None
    indicator_code: int | None = None
    label: str | None = None


class CompareRequest(StageRequest):
    task: str


class StageResponse(BaseModel):
    ok: bool = True
    summary: dict = Field(default_factory=dict)


class UiSessionCreated(BaseModel):
    session_id: str
    ws_path: str
    ui_url: str
    episodes: int


class SessionStatus(BaseModel):
    session_id: str
    state: str  # pending | running | done | error
    episodes_done: int
    episodes_total: int
    ui_dropped: int = 0
    stale_actions_dropped: int = 0
    error: str | None = None


# -- websocket wire protocol (field names are the schema) ---------------------------


class FrameMessage(BaseModel):
    kind: str = "frame"
    v: int = WIRE_VERSION
    episode_id: str
    seq: int
    t: int
    pos: list[float]
    vel: list[float]
    goal: dict
    failure_regions: list[dict]
    value: float
    control: str  # policy | human
    task: str


class ControlMessage(BaseModel):
    kind: str  # takeover | human_action | release | label | next
    step_ref: int | None = None
    action: list[float] | None = None
    outcome: str | None = None
