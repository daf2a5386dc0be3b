"""Pydantic models for the REST surface and the JSON leg of the socket."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, Field


class StartCommand(BaseModel):
    type: Literal["start"]
    user: str | None = None
    level: str | None = None        # "angle,tilt", e.g. "30,left"
    fps: float = 25.0
    duration_s: float = Field(default=180.0, gt=0)


class EndCommand(BaseModel):
    type: Literal["end"]


class StateMessage(BaseModel):
    type: Literal["state"] = "state"
    seq: int
    status: str
    ring_id: int | None = None
    led_id: int | None = None


class WarningMessage(BaseModel):
    type: Literal["warning"] = "warning"
    kind: str
    intensity: float
    seq: int


class TargetMessage(BaseModel):
    type: Literal["target"] = "target"
    led_id: int


class ErrorMessage(BaseModel):
    type: Literal["error"] = "error"
    error: str


class Health(BaseModel):
    status: str = "ok"
    version: str


class UserCreate(BaseModel):
    id: str = Field(min_length=1)
    name: str | None = None


class UserOut(BaseModel):
    id: str
    name: str
    sessions: int
