"""Stream ingestion and the per-frame processing pipeline.

The pipeline enforces the strict level ordering: micro-signals are validated
and normalized first, the interaction matrix is built from the validated
frame, every field needs the matrix, the state vector needs the fields, and
the decision layer needs the state vector. A failed frame is reported and
isolated; rolling windows simply skip it.
"""
from __future__ import annotations

import json
import math
import time
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

from .core import (
    AgentMicroState,
    CalibrationProfile,
    FrameRejected,
    MicroStateFrame,
    Scene,
    ValidatedFrame,
    frame_from_json,
    normalize_frame,
    validate_frame,
    SCHEMA_VERSION,
)
from .criticality import CriticalityReport, DangerSpec, evaluate_criticality
from .fields import (
    IX_N,
    IX_ST,
    IX_T,
    FieldFrame,
    StateVector,
    assemble_state_vector,
    compute_instant_fields,
    kuramoto_synchrony,
    momentum,
    noise_level,
    phase_extract,
)
from .interaction import build_interaction_matrix, matrix_to_json_dict
from .scenario import InterventionSpec, ScenarioResult, SurrogateParams, select_intervention
from .spectral import EwsReport, power_iteration, rolling_ews

__all__ = [
    "StreamDiagnostic",
    "StreamAborted",
    "ParsedStream",
    "parse_stream",
    "PipelineOptions",
    "FrameReport",
    "RunSummary",
    "Pipeline",
    "run_pipeline",
    "replay",
]


# ---------------------------------------------------------------------------
# Stream parsing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StreamDiagnostic:
    line_no: int
    message: str


class StreamAborted(RuntimeError):
    """Raised when too large a share of the stream is malformed."""


class ParsedStream:
    """Lazy JSONL frame reader; malformed lines are skipped and reported.

    Iterate to obtain validated frames; ``diagnostics`` fills as parsing
    proceeds. The stream aborts once malformed lines exceed 10% (with a small
    grace allowance so a single early typo does not kill a long recording).
    """

    def __init__(self, source: str | Path | IO[str] | Iterable[str], scene: Scene | None = None):
        self._source = source
        self.scene = scene or Scene()
        self.diagnostics: list[StreamDiagnostic] = []
        self.frames_ok = 0

    def _lines(self) -> Iterator[str]:
        src = self._source
        if isinstance(src, (str, Path)):
            with open(src, "r", encoding="utf-8") as fh:
                yield from fh
        else:
            yield from src

    def __iter__(self) -> Iterator[ValidatedFrame]:
        prev_t: float | None = None
        bad = 0
        for line_no, raw in enumerate(self._lines(), start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                frame = frame_from_json(line)
                vf = validate_frame(frame, self.scene, prev_timestamp=prev_t)
            except (json.JSONDecodeError, FrameRejected, KeyError, TypeError, ValueError, IndexError) as exc:
                bad += 1
                self.diagnostics.append(StreamDiagnostic(line_no, f"line {line_no}: {exc}"))
                if bad > max(2.0, 0.10 * (bad + self.frames_ok)):
                    raise StreamAborted(
                        f"{bad} malformed lines out of {bad + self.frames_ok}; aborting"
                    ) from exc
                continue
            prev_t = vf.timestamp
            self.frames_ok += 1
            yield vf


def parse_stream(source, scene: Scene | None = None) -> ParsedStream:
    """JSONL source (path, file object, or line iterable) -> frame stream."""
    return ParsedStream(source, scene)


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineOptions:
    with_grid: bool = True
    with_synchrony: bool = True
    with_ews: bool = True
    scenario_cadence_s: float | None = None
    scenario_candidates: tuple[InterventionSpec, ...] = ()
    surrogate: SurrogateParams = field(default_factory=SurrogateParams)
    danger: DangerSpec = field(default_factory=DangerSpec)
    dropout_retention_s: float | None = None   # defaults to the calibration EWS window
    dropout_half_life_s: float = 1.0


@dataclass(frozen=True)
class FrameReport:
    timestamp: float
    vframe: ValidatedFrame | None
    matrix: "object | None"
    fields: FieldFrame | None
    spectral: "object | None"
    ews: EwsReport | None
    state: StateVector | None
    criticality: CriticalityReport | None
    scenario: ScenarioResult | None = None
    failed: bool = False
    error: str | None = None

    def to_json_dict(self, with_grids: bool = True) -> dict:
        if self.failed:
            return {
                "schema_version": SCHEMA_VERSION,
                "timestamp": self.timestamp,
                "failed": True,
                "error": self.error,
            }
        ews = None
        if self.ews is not None:
            ews = {
                "variance": [float(x) for x in self.ews.variance],
                "autocorrelation": [None if not math.isfinite(x) else float(x)
                                    for x in self.ews.autocorrelation],
                "variance_trend": [int(x) for x in self.ews.variance_trend],
                "autocorr_trend": [int(x) for x in self.ews.autocorr_trend],
                "lag_steps": self.ews.lag_steps,
                "window": self.ews.window,
            }
        return {
            "schema_version": SCHEMA_VERSION,
            "timestamp": self.timestamp,
            "failed": False,
            "warnings": list(self.vframe.warnings),
            "agents": [
                {
                    "agent_id": a.agent_id,
                    "position": list(a.position),
                    "velocity": list(a.velocity),
                    "orientation": a.orientation,
                    "gesture": a.gesture,
                    "proxemic": a.proxemic,
                    "confidence": a.confidence,
                    "role_label": a.role_label,
                }
                for a in self.vframe.agents
            ],
            "matrix": matrix_to_json_dict(self.matrix),
            "fields": self.fields.to_json_dict(with_grids=with_grids),
            "spectral": {
                "lambda_max": self.spectral.lambda_max,
                "stability_margin": self.spectral.stability_margin,
                "relaxation_time": (None if math.isinf(self.spectral.relaxation_time)
                                    else self.spectral.relaxation_time),
                "dominant_mode": [float(x) for x in self.spectral.dominant_mode],
                "iterations": self.spectral.iterations,
                "converged": self.spectral.converged,
            },
            "ews": ews,
            "state": [float(x) for x in self.state.components],
            "state_flags": list(self.state.flags),
            "criticality": {
                "g_value": self.criticality.g_value,
                "r_raw": self.criticality.r_raw,
                "r_index": self.criticality.r_index,
                "zone": self.criticality.zone,
                "contributions": {k: v for k, v in self.criticality.contributions},
                "st_red_flag": self.criticality.st_red_flag,
            },
            "scenario": self.scenario.to_json_dict() if self.scenario else None,
        }


@dataclass
class RunSummary:
    n_frames: int = 0
    n_failed: int = 0
    zone_counts: dict = field(default_factory=lambda: {"green": 0, "amber": 0, "red": 0})
    st_min: float = math.inf
    st_max: float = -math.inf
    ews_trend_episodes: int = 0        # frames with variance and autocorr both rising on tension
    first_timestamp: float | None = None
    last_timestamp: float | None = None

    def zone_occupancy(self) -> dict:
        total = max(1, sum(self.zone_counts.values()))
        return {k: v / total for k, v in self.zone_counts.items()}

    def to_json_dict(self) -> dict:
        return {
            "n_frames": self.n_frames,
            "n_failed": self.n_failed,
            "zone_occupancy": self.zone_occupancy(),
            "st_min": None if math.isinf(self.st_min) else self.st_min,
            "st_max": None if math.isinf(self.st_max) else self.st_max,
            "ews_trend_episodes": self.ews_trend_episodes,
            "span_s": (None if self.first_timestamp is None
                       else (self.last_timestamp - self.first_timestamp)),
        }


class _AgentHistory:
    """Per-agent gesture ring for phase extraction, keyed by agent id."""

    def __init__(self, maxlen: int):
        self.maxlen = maxlen
        self.series: dict = {}

    def push(self, vframe: ValidatedFrame) -> None:
        for a in vframe.agents:
            ring = self.series.get(a.agent_id)
            if ring is None:
                ring = deque(maxlen=self.maxlen)
                self.series[a.agent_id] = ring
            ring.append(a.gesture)

    def window(self, agent_ids: Sequence) -> tuple[np.ndarray, list[int]]:
        """Aligned history for the agents that have enough samples."""
        rows, idx = [], []
        depth = None
        for k, aid in enumerate(agent_ids):
            ring = self.series.get(aid)
            if ring is None or len(ring) < 8:
                continue
            depth = len(ring) if depth is None else min(depth, len(ring))
            rows.append(ring)
            idx.append(k)
        if not rows:
            return np.empty((0, 0)), []
        h = np.stack([np.array(list(r))[-depth:] for r in rows])
        return h, idx


class Pipeline:
    """Stateful frame-by-frame runner with rolling windows.

    Single writer: one Pipeline instance must be fed from one thread. Reports
    are immutable and safe to hand to other threads.
    """

    def __init__(self, cal: CalibrationProfile, scene: Scene | None = None,
                 options: PipelineOptions | None = None):
        self.cal = cal
        self.scene = scene or Scene()
        self.options = options or PipelineOptions()
        win = max(32, int(round(cal.ews_window * 16)))   # generous cap; trimmed by time
        self._gestures = _AgentHistory(maxlen=256)
        self._x_ring: deque = deque()
        self._prev_state: StateVector | None = None
        self._last_seen: dict = {}
        self._last_scenario_t: float | None = None
        self.summary = RunSummary()

    # -- dropout handling ---------------------------------------------------

    def _augment_dropouts(self, vframe: ValidatedFrame) -> ValidatedFrame:
        t = vframe.timestamp
        retention = self.options.dropout_retention_s
        if retention is None:
            retention = self.cal.ews_window
        present = set(vframe.frame.agent_ids())
        for a in vframe.agents:
            self._last_seen[a.agent_id] = (t, a)

        ghosts: list[AgentMicroState] = []
        for aid, (t_seen, a) in list(self._last_seen.items()):
            if aid in present:
                continue
            age = t - t_seen
            if age > retention:
                del self._last_seen[aid]
                continue
            decay = 0.5 ** (age / self.options.dropout_half_life_s)
            ghosts.append(replace(a, confidence=a.confidence * decay))
        if not ghosts:
            return vframe
        merged = vframe.frame.agents + tuple(ghosts)
        return ValidatedFrame(
            frame=replace(vframe.frame, agents=merged),
            warnings=vframe.warnings + tuple(
                f"agent {g.agent_id!r}: retained after dropout (confidence decayed)"
                for g in ghosts
            ),
            out_of_scene=vframe.out_of_scene,
        )

    # -- per-frame processing -----------------------------------------------

    def process(self, vframe: ValidatedFrame) -> FrameReport:
        try:
            return self._process(vframe)
        except Exception as exc:                       # frame isolation barrier
            self.summary.n_frames += 1
            self.summary.n_failed += 1
            return FrameReport(
                timestamp=vframe.timestamp, vframe=vframe, matrix=None,
                fields=None, spectral=None, ews=None, state=None,
                criticality=None, failed=True, error=f"{type(exc).__name__}: {exc}",
            )

    def _process(self, vframe: ValidatedFrame) -> FrameReport:
        opts = self.options
        cal = self.cal
        vframe = self._augment_dropouts(vframe)
        t = vframe.timestamp

        norm = normalize_frame(vframe.frame, cal)
        W = build_interaction_matrix(vframe, cal, self.scene)
        ff = compute_instant_fields(vframe, norm, W, cal, self.scene,
                                    with_grid=opts.with_grid)

        self._gestures.push(vframe)
        sync = float("nan")
        sync_valid = False
        if opts.with_synchrony:
            hist, idx = self._gestures.window(vframe.frame.agent_ids())
            if hist.shape[0] >= 1 and hist.shape[1] >= 8:
                phases, valid = phase_extract(hist)
                sync = kuramoto_synchrony(phases, valid)
                sync_valid = math.isfinite(sync)

        spec = power_iteration(W, tol=1e-8, max_iter=300)

        if self._x_ring:
            hist_x = np.stack([c for _, c in self._x_ring])
            noise, _ = noise_level(hist_x)
        else:
            noise = 0.0

        ff = replace(
            ff,
            synchrony=sync,
            synchrony_valid=sync_valid,
            noise=noise,
            stability=spec.stability_margin,
        )
        x0 = assemble_state_vector(ff, cal.attention_aggregator)
        m_val, cold = momentum(x0, self._prev_state)
        comps = x0.components.copy()
        comps[6] = m_val
        state = StateVector(timestamp=t, components=comps,
                            flags=x0.flags + (("momentum_cold_start",) if cold else ()))
        ff = replace(ff, momentum=m_val)

        ews = None
        if opts.with_ews and len(self._x_ring) >= 15:
            hist_x = np.stack([c for _, c in self._x_ring] + [state.components])
            ts = np.array([tt for tt, _ in self._x_ring] + [t])
            ews = rolling_ews(hist_x, ts)

        crit = evaluate_criticality(state, cal, ews)

        scenario = None
        if (opts.scenario_cadence_s is not None
                and (self._last_scenario_t is None
                     or t - self._last_scenario_t >= opts.scenario_cadence_s)):
            self._last_scenario_t = t
            scenario = select_intervention(
                list(opts.scenario_candidates), vframe, cal, opts.surrogate,
                scene=self.scene, danger=opts.danger,
            )
            if scenario.item(scenario.recommended_id).stats is not None:
                tau = scenario.item("no-op").stats.tau
                crit = crit.with_tau(tau.tau, (tau.tau_lo, tau.tau_hi))

        # ring updates happen only for successful frames
        self._x_ring.append((t, state.components))
        horizon = t - cal.ews_window
        while self._x_ring and self._x_ring[0][0] < horizon:
            self._x_ring.popleft()
        self._prev_state = state

        s = self.summary
        s.n_frames += 1
        s.zone_counts[crit.zone] += 1
        s.st_min = min(s.st_min, state[IX_ST])
        s.st_max = max(s.st_max, state[IX_ST])
        if ews is not None and ews.variance_trend[IX_T] > 0 and ews.autocorr_trend[IX_T] > 0:
            s.ews_trend_episodes += 1
        if s.first_timestamp is None:
            s.first_timestamp = t
        s.last_timestamp = t

        return FrameReport(
            timestamp=t, vframe=vframe, matrix=W, fields=ff, spectral=spec,
            ews=ews, state=state, criticality=crit, scenario=scenario,
        )


def run_pipeline(
    frames: Iterable[MicroStateFrame | ValidatedFrame],
    cal: CalibrationProfile,
    scene: Scene | None = None,
    options: PipelineOptions | None = None,
) -> tuple[list[FrameReport], RunSummary]:
    """Batch runner: validate (when needed) and process every frame in order."""
    scene = scene or Scene()
    pipe = Pipeline(cal, scene, options)
    reports: list[FrameReport] = []
    prev_t: float | None = None
    for f in frames:
        if isinstance(f, ValidatedFrame):
            vf = f
        else:
            try:
                vf = validate_frame(f, scene, prev_timestamp=prev_t)
            except FrameRejected as exc:
                pipe.summary.n_frames += 1
                pipe.summary.n_failed += 1
                reports.append(FrameReport(
                    timestamp=f.timestamp, vframe=None, matrix=None, fields=None,
                    spectral=None, ews=None, state=None, criticality=None,
                    failed=True, error=str(exc),
                ))
                continue
        prev_t = vf.timestamp
        reports.append(pipe.process(vf))
    return reports, pipe.summary


def replay(
    frames: Iterable[MicroStateFrame],
    speed: float = 1.0,
    sleep=time.sleep,
    clock=time.monotonic,
) -> Iterator[MicroStateFrame]:
    """Emit frames at their recorded cadence scaled by 1/speed.

    ``speed=0`` is the batch sentinel: no pacing at all. Values between 0 and
    1 slow the recording down; values above 1 speed it up.
    """
    if speed < 0:
        raise ValueError("speed must be >= 0")
    it = iter(frames)
    try:
        first = next(it)
    except StopIteration:
        return
    start = clock()
    t0 = first.timestamp
    yield first
    for f in it:
        if speed > 0:
            target = start + (f.timestamp - t0) / speed
            delay = target - clock()
            if delay > 0:
                sleep(delay)
        yield f
