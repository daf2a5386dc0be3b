"""FastAPI service: REST for users/health, WebSocket for live sessions.

The socket handler is the acquisition lane: it decodes FRAME messages and
drops them into the bounded queue. A per-session worker thread is the
analysis lane: it consumes frames sequentially, emits state/warning/target
messages through the event loop and finishes with the synopsis.
"""

from __future__ import annotations

import asyncio
import json
import threading
from dataclasses import dataclass

from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect

from .. import __version__
from ..assessment import extract_features, predict, load_model, render_synopsis
from ..calibration import load_profile
from ..records import EventKind, Status
from ..session import (Conflict, FrameQueue, SessionEngine, SourceStall,
                       UserStore)
from .models import (ErrorMessage, Health, StartCommand, StateMessage,
                     TargetMessage, UserCreate, UserOut, WarningMessage)
from .protocol import ProtocolError, decode_frame


def _parse_level(text: str | None) -> tuple[int, str]:
    if not text:
        return (0, "straight")
    try:
        angle_s, tilt = text.split(",", 1)
        return (int(angle_s), tilt.strip())
    except ValueError as exc:
        raise ValueError(f"level must look like '30,left', got {text!r}") \
            from exc


@dataclass
class _SessionRun:
    """One live session: queue in, messages out, worker in between."""

    engine: SessionEngine
    queue: FrameQueue
    max_frames: int
    fps: float
    user: str | None
    thread: threading.Thread | None = None


def _run_analysis(run: _SessionRun, model, store: UserStore | None, emit):
    """Analysis lane body. Runs in a worker thread; emit() is loop-safe."""
    engine = run.engine
    led_sent: int | None = None
    last_seq = 0
    done = 0
    try:
        for frame in run.queue.frames(live=True):
            if frame.seq <= last_seq:
                continue  # stale or duplicated frame from the wire
            last_seq = frame.seq
            state, messages = engine.step(frame)
            if state is not None:
                emit(StateMessage(seq=frame.seq, status=state.status.value,
                                  ring_id=state.ring_id,
                                  led_id=state.led_id).model_dump())
                if state.led_id != led_sent and state.led_id is not None:
                    led_sent = state.led_id
                    emit(TargetMessage(led_id=state.led_id).model_dump())
            for m in messages:
                emit(WarningMessage(kind=m.kind.value, intensity=m.intensity,
                                    seq=m.frame_seq).model_dump())
            done += 1
            if done >= run.max_frames:
                break
    except SourceStall:
        emit(ErrorMessage(error="source stalled").model_dump())
    except Exception as exc:  # surface analysis faults to the client
        emit(ErrorMessage(error=f"analysis failed: {exc}").model_dump())
    log, features = engine.finish()
    verdict = margin = None
    if model is not None:
        verdict, margin = predict(model, features)
    synopsis = render_synopsis(log, features, verdict=verdict, margin=margin,
                               user=run.user)
    if store is not None and run.user:
        try:
            store.append_synopsis(run.user, synopsis.to_dict())
        except KeyError:
            pass
    emit({"type": "synopsis", **synopsis.to_dict()})
    emit(None)  # sender sentinel: flush and stop


def create_app(calib_path: str, model_path: str | None = None,
               store_path: str | None = None) -> FastAPI:
    """Build the service around one calibration profile."""
    profile = load_profile(calib_path)
    model = load_model(model_path) if model_path else None
    store = UserStore(store_path) if store_path else None

    app = FastAPI(title="netoas", version=__version__)

    @app.get("/health", response_model=Health)
    def health() -> Health:
        return Health(version=__version__)

    @app.get("/users", response_model=list[UserOut])
    def list_users() -> list[UserOut]:
        if store is None:
            return []
        return [UserOut(id=u.user_id, name=u.name, sessions=len(u.synopses))
                for u in store.list_users()]

    @app.post("/users", response_model=UserOut, status_code=201)
    def create_user(body: UserCreate) -> UserOut:
        if store is None:
            raise HTTPException(503, "no user store configured")
        try:
            rec = store.store_user(body.id, body.name)
        except Conflict as exc:
            raise HTTPException(409, str(exc)) from exc
        return UserOut(id=rec.user_id, name=rec.name, sessions=0)

    @app.websocket("/ws/session")
    async def ws_session(ws: WebSocket) -> None:
        await ws.accept()
        loop = asyncio.get_running_loop()
        out_q: asyncio.Queue = asyncio.Queue()

        def emit(msg) -> None:
            loop.call_soon_threadsafe(out_q.put_nowait, msg)

        async def sender() -> None:
            while True:
                msg = await out_q.get()
                if msg is None:
                    return
                try:
                    await ws.send_text(json.dumps(msg))
                except Exception:
                    return  # client went away; drain silently

        send_task = asyncio.create_task(sender())
        run: _SessionRun | None = None
        try:
            while True:
                message = await ws.receive()
                if message["type"] == "websocket.disconnect":
                    break
                data = message.get("bytes")
                if data is not None:
                    if run is None:
                        continue  # frames before start are ignored
                    try:
                        run.queue.put(decode_frame(data, run.fps))
                    except ProtocolError as exc:
                        emit(ErrorMessage(error=str(exc)).model_dump())
                    continue
                text = message.get("text")
                if text is None:
                    continue
                try:
                    cmd = json.loads(text)
                except json.JSONDecodeError:
                    emit(ErrorMessage(error="not json").model_dump())
                    continue
                if cmd.get("type") == "start" and run is None:
                    start = StartCommand(**cmd)
                    _parse_level(start.level)  # validated; engine is
                    # calibration-driven, so the level is informational
                    if store is not None and start.user:
                        try:
                            store.store_user(start.user)
                        except Conflict:
                            pass
                    engine = SessionEngine(profile, fps=start.fps,
                                           seed=int(cmd.get("seed", 0)))
                    run = _SessionRun(
                        engine=engine, queue=FrameQueue(),
                        max_frames=int(round(start.duration_s * start.fps)),
                        fps=start.fps, user=start.user)
                    run.thread = threading.Thread(
                        target=_run_analysis, args=(run, model, store, emit),
                        daemon=True)
                    run.thread.start()
                elif cmd.get("type") == "end":
                    break
                else:
                    emit(ErrorMessage(
                        error=f"unknown command {cmd.get('type')!r}"
                    ).model_dump())
        except WebSocketDisconnect:
            pass
        finally:
            if run is not None:
                run.queue.close()
                if run.thread is not None:
                    await asyncio.to_thread(run.thread.join)
            else:
                emit(None)
            await send_task
            try:
                await ws.close()
            except Exception:
                pass

    return app
