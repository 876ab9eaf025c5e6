"""Live gateway: a single-writer pipeline thread feeding an HTTP/WebSocket
surface for the operator console.

Endpoints: GET /state, GET /history?window=, GET /config, POST /scenario,
POST /simulator/control, plus the /stream WebSocket pushing one JSON bundle
per completed frame. The pipeline thread owns all mutable state; the service
holds an atomically swapped reference to the latest immutable bundle, so
readers never observe a torn frame and slow clients never stall the loop
(per-client queues conflate to the most recent 32 bundles).
"""
from __future__ import annotations

import asyncio
import hashlib
import json
import math
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np
from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect

from .core import CalibrationProfile, Scene, validate_frame
from .criticality import DangerSpec
from .pipeline import Pipeline, PipelineOptions, parse_stream
from .profiles import danger_for
from .scenario import (
    InterventionSpec,
    MicroDynamics,
    SurrogateParams,
    _InterventionRuntime,
    select_intervention,
)
from .spectral import power_iteration
from .synthetic import PRESETS, _initial_frame, _phase_at, _regime_params

__all__ = ["GatewayConfig", "create_app"]

STREAM_BUFFER = 32


@dataclass
class GatewayConfig:
    cal: CalibrationProfile
    preset: str | None = "escalation-7"
    replay_file: str | None = None
    replay_speed: float = 1.0          # wall-clock pacing multiplier; 0 = flat out
    sim_speed: float = 1.0
    with_grid: bool = True
    history_minutes: float = 5.0
    danger: DangerSpec | None = None

    def resolved_danger(self) -> DangerSpec:
        if self.danger is not None:
            return self.danger
        try:
            return danger_for(self.cal.vertical_name)
        except KeyError:
            return DangerSpec()


class _Broadcast:
    """Fan-out of bundles to websocket subscribers with latest-wins conflation."""

    def __init__(self):
        self._subs: dict[int, tuple[asyncio.Queue, asyncio.AbstractEventLoop]] = {}
        self._lock = threading.Lock()
        self._next = 0

    def subscribe(self, loop: asyncio.AbstractEventLoop) -> tuple[int, asyncio.Queue]:
        q: asyncio.Queue = asyncio.Queue(maxsize=STREAM_BUFFER)
        with self._lock:
            sid = self._next
            self._next += 1
            self._subs[sid] = (q, loop)
        return sid, q

    def unsubscribe(self, sid: int) -> None:
        with self._lock:
            self._subs.pop(sid, None)

    def publish(self, item: dict) -> None:
        with self._lock:
            subs = list(self._subs.values())
        for q, loop in subs:
            def _put(q=q):
                if q.full():
                    try:
                        q.get_nowait()             # drop the oldest bundle
                    except asyncio.QueueEmpty:
                        pass
                q.put_nowait(item)
            try:
                loop.call_soon_threadsafe(_put)
            except RuntimeError:
                pass                                # loop shut down mid-publish


class _Source:
    """Frame source driven by the pipeline thread."""

    mode = "simulator"

    def next_frame(self):                           # -> ValidatedFrame | None
        raise NotImplementedError

    def control(self, command: str, payload: dict) -> None:
        raise HTTPException(status_code=400, detail=f"{command!r} not supported in {self.mode} mode")


class _SimulatorSource(_Source):
    """Live synthetic scene with regime schedule and operator interventions.

    Stream time is an internal counter, so pause/resume never skews the
    timestamp axis.
    """

    mode = "simulator"

    def __init__(self, cal: CalibrationProfile, preset_name: str):
        self.cal = cal
        self._lock = threading.Lock()
        self._interventions: list[tuple[_InterventionRuntime, float]] = []
        self._load(preset_name, t_base=0.0)

    def _load(self, preset_name: str, t_base: float) -> None:
        if preset_name not in PRESETS:
            raise HTTPException(status_code=400, detail=f"unknown preset {preset_name!r}")
        self.preset = PRESETS[preset_name]
        rng = np.random.default_rng(self.preset.seed)
        vf0 = _initial_frame(self.preset, self.cal, rng)
        self.rng = rng
        self.dyn = MicroDynamics(vf0, self.cal, self.preset.scene)
        lam0 = power_iteration(self.dyn.build_w(), tol=1e-8, max_iter=300).lambda_max
        self.rho_crit = 1.0 / lam0 if lam0 > 1e-9 else 1.0
        self.t_base = t_base
        self.t_local = 0.0
        self.dt = 1.0 / self.preset.frame_rate
        self._interventions.clear()

    @property
    def scene(self) -> Scene:
        return self.preset.scene

    def next_frame(self):
        with self._lock:
            t = self.t_base + self.t_local
            frame = self.dyn.frame(t)

            phase, start, end = _phase_at(self.preset, self.t_local % self.preset.duration_s)
            frac = (self.t_local % self.preset.duration_s - start) / max(end - start, 1e-9)
            kappa, rho, sigma = _regime_params(phase, frac, self.rho_crit)

            n = self.dyn.n
            set_e = np.full(n, np.nan)
            set_p = np.zeros(n)
            theta_t = np.full(n, np.nan)
            pos_t = np.full((n, 2), np.nan)
            rho_scale = 1.0
            col_scale = None
            for rt, t_applied in self._interventions:
                (se, sp), th, ps, rs, cs = rt.overrides(t - t_applied)
                m = np.isfinite(se); set_e[m] = se[m]; set_p[m] = sp[m]
                m = np.isfinite(th); theta_t[m] = th[m]
                m = np.isfinite(ps[:, 0]); pos_t[m] = ps[m]
                rho_scale *= rs
                if cs is not None:
                    col_scale = cs if col_scale is None else col_scale * cs
            w = self.dyn.build_w(col_scale)
            self.dyn.step(w, self.dt, kappa, rho * rho_scale, sigma, self.rng,
                          set_e_override=(set_e, set_p),
                          theta_target=theta_t, pos_target=pos_t)
            self.t_local += self.dt
            return frame

    def control(self, command: str, payload: dict) -> None:
        with self._lock:
            if command == "load-preset":
                self._load(payload.get("preset", ""), t_base=self.t_base + self.t_local)
            elif command == "inject-perturbation":
                aid = payload.get("agent_id")
                ids = list(self.dyn.ids)
                if aid not in ids:
                    raise HTTPException(status_code=400, detail=f"unknown agent {aid!r}")
                i = ids.index(aid)
                channel = payload.get("channel", "gesture")
                value = float(payload.get("value", 0.0))
                if channel == "gesture":
                    self.dyn.gesture[i] = max(0.0, value)
                elif channel == "speed":
                    self.dyn.speed[i] = max(0.0, value)
                else:
                    raise HTTPException(status_code=400, detail=f"unknown channel {channel!r}")
            elif command == "apply-intervention":
                try:
                    spec = InterventionSpec.from_json_dict(payload["intervention"])
                    rt = _InterventionRuntime(spec, self.dyn)
                except (KeyError, TypeError, ValueError) as exc:
                    raise HTTPException(status_code=400, detail=f"invalid intervention: {exc}")
                self._interventions.append((rt, self.t_base + self.t_local))
            else:
                raise HTTPException(status_code=400, detail=f"unknown command {command!r}")


class _ReplaySource(_Source):
    mode = "replay"

    def __init__(self, path: str, scene: Scene):
        self._frames = iter(list(parse_stream(path, scene)))
        self.scene = scene
        self.dt = 0.25

    def next_frame(self):
        return next(self._frames, None)


class _Gateway:
    def __init__(self, cfg: GatewayConfig):
        self.cfg = cfg
        self.cal = cfg.cal
        if cfg.replay_file:
            scene = PRESETS["escalation-7"].scene
            self.source: _Source = _ReplaySource(cfg.replay_file, scene)
        else:
            self.source = _SimulatorSource(cfg.cal, cfg.preset or "escalation-7")
        self.pipeline = Pipeline(cfg.cal, self.source.scene,
                                 PipelineOptions(with_grid=cfg.with_grid,
                                                 danger=cfg.resolved_danger()))
        self.broadcast = _Broadcast()
        self.latest: dict | None = None              # atomically swapped reference
        self.history: deque = deque()
        self.seq = 0
        self.paused = threading.Event()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._scenario_lock = threading.Lock()
        self._scenario_cache: dict[str, dict] = {}
        self.loop: asyncio.AbstractEventLoop | None = None

    # -- pipeline thread ------------------------------------------------------

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, name="groupfields-pipeline", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread:
            self._thread.join(timeout=5.0)

    def _run(self) -> None:
        pace = self.cfg.replay_speed if self.source.mode == "replay" else self.cfg.sim_speed
        prev_t = None
        while not self._stop.is_set():
            if self.paused.is_set():
                time.sleep(0.01)
                continue
            frame = self.source.next_frame()
            if frame is None:
                break
            vf = frame if hasattr(frame, "warnings") else validate_frame(
                frame, self.source.scene, prev_t)
            prev_t = vf.timestamp
            report = self.pipeline.process(vf)
            bundle = report.to_json_dict(with_grids=self.cfg.with_grid)
            bundle["seq"] = self.seq
            bundle["mode"] = self.source.mode
            self.seq += 1
            self.latest = bundle                     # single swap: readers see old or new
            self.history.append(bundle)
            horizon = vf.timestamp - self.cfg.history_minutes * 60.0
            while self.history and self.history[0]["timestamp"] < horizon:
                self.history.popleft()
            self.broadcast.publish({"type": "frame", "bundle": bundle})
            if pace > 0:
                time.sleep(self.source.dt / pace)

    # -- scenario ---------------------------------------------------------------

    def run_scenario(self, payload: dict) -> dict:
        if self.latest is None:
            raise HTTPException(status_code=409, detail="no live frame yet")
        try:
            candidates = [InterventionSpec.from_json_dict(d)
                          for d in payload.get("candidates", [])]
        except (KeyError, TypeError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=f"invalid intervention spec: {exc}")
        overrides = payload.get("surrogate", {})
        try:
            sp = SurrogateParams(**overrides)
        except (TypeError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=f"invalid surrogate params: {exc}")

        frame_bundle = self.latest
        key = hashlib.sha256(json.dumps(
            {"p": payload, "t": frame_bundle["timestamp"]}, sort_keys=True
        ).encode()).hexdigest()
        if key in self._scenario_cache:
            out = dict(self._scenario_cache[key])
            out["cached"] = True
            return out

        agents = frame_bundle["agents"]
        from .core import AgentMicroState, MicroStateFrame

        micro = MicroStateFrame(
            timestamp=frame_bundle["timestamp"],
            agents=tuple(
                AgentMicroState(
                    agent_id=a["agent_id"],
                    position=tuple(a["position"]),
                    velocity=tuple(a["velocity"]),
                    orientation=a["orientation"],
                    gesture=a["gesture"],
                    proxemic=a["proxemic"],
                    confidence=a["confidence"],
                    role_label=a.get("role_label"),
                )
                for a in agents
            ),
        )
        vf = validate_frame(micro, self.source.scene)
        self.broadcast.publish({"type": "scenario_progress", "status": "started", "key": key})
        with self._scenario_lock:                     # one heavy job at a time
            res = select_intervention(candidates, vf, self.cal, sp,
                                      scene=self.source.scene,
                                      danger=self.cfg.resolved_danger())
        out = res.to_json_dict()
        out["key"] = key
        out["cached"] = False
        self._scenario_cache[key] = out
        self.broadcast.publish({"type": "scenario_progress", "status": "done", "key": key})
        return out


def create_app(cfg: GatewayConfig) -> FastAPI:
    gw = _Gateway(cfg)
    app = FastAPI(title="groupfields gateway")
    app.state.gateway = gw

    @app.on_event("startup")
    async def _startup():
        gw.loop = asyncio.get_running_loop()
        gw.start()

    @app.on_event("shutdown")
    async def _shutdown():
        gw.stop()

    @app.get("/state")
    async def state():
        if gw.latest is None:
            return {"cold_start": True, "mode": gw.source.mode}
        return gw.latest

    @app.get("/history")
    async def history(window: float = 60.0):
        bundles = list(gw.history)
        if not bundles:
            return {"bundles": []}
        t_last = bundles[-1]["timestamp"]
        return {"bundles": [b for b in bundles if b["timestamp"] >= t_last - window]}

    @app.get("/config")
    async def config():
        return {
            "schema_version": 1,
            "mode": gw.source.mode,
            "profile": json.loads(gw.cal.to_json()),
            "danger": {
                "r_crit": gw.cfg.resolved_danger().r_crit,
                "st_crit": gw.cfg.resolved_danger().st_crit,
                "t_crit": gw.cfg.resolved_danger().t_crit,
                "rule": gw.cfg.resolved_danger().rule,
            },
        }

    @app.post("/scenario")
    async def scenario(payload: dict):
        loop = asyncio.get_running_loop()
        return await loop.run_in_executor(None, gw.run_scenario, payload)

    @app.post("/simulator/control")
    async def control(payload: dict):
        command = payload.get("command")
        if command == "pause":
            gw.paused.set()
            return {"ok": True, "command": command}
        if command == "resume":
            gw.paused.clear()
            return {"ok": True, "command": command}
        gw.source.control(command, payload)
        return {"ok": True, "command": command}

    @app.websocket("/stream")
    async def stream(ws: WebSocket):
        await ws.accept()
        sid, q = gw.broadcast.subscribe(asyncio.get_running_loop())
        try:
            while True:
                item = await q.get()
                await ws.send_json(item)
        except WebSocketDisconnect:
            pass
        finally:
            gw.broadcast.unsubscribe(sid)

    return app
