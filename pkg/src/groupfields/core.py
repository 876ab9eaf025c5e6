"""Domain types, calibration profiles, and z-score normalization.

Everything downstream (interaction graph, fields, criticality, forecasts)
consumes the value objects defined here. All types are immutable after
construction and safe to share across threads.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Sequence

__all__ = [
    "AgentMicroState",
    "MicroStateFrame",
    "Scene",
    "CalibrationProfile",
    "NormalizedState",
    "ValidatedFrame",
    "FrameRejected",
    "normalize_agent",
    "normalize_frame",
    "validate_frame",
    "wrap_angle",
    "frame_to_json",
    "frame_from_json",
]

SCHEMA_VERSION = 1


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.remainder(a, 2.0 * math.pi)
    if w <= -math.pi:
        w += 2.0 * math.pi
    return w


@dataclass(frozen=True)
class AgentMicroState:
    """Observable kinematics of one agent at one instant (SI units)."""

    agent_id: int | str
    position: tuple[float, float]      # m, scene coordinates
    velocity: tuple[float, float]      # m/s
    orientation: float                 # rad, wrapped to (-pi, pi]
    gesture: float                     # rad/s, >= 0, gestural amplitude
    proxemic: float = 0.0              # [0, 1] crowding index
    confidence: float = 1.0            # [0, 1] measurement confidence
    role_label: str | None = None

    @property
    def speed(self) -> float:
        return math.hypot(self.velocity[0], self.velocity[1])


@dataclass(frozen=True)
class MicroStateFrame:
    """One timestamped snapshot of every tracked agent."""

    timestamp: float                   # s, strictly increasing across a stream
    agents: tuple[AgentMicroState, ...]
    scene_ref: str = "default"

    @property
    def n(self) -> int:
        return len(self.agents)

    def agent_ids(self) -> tuple[int | str, ...]:
        return tuple(a.agent_id for a in self.agents)


def _point_in_polygon(x: float, y: float, poly: Sequence[tuple[float, float]]) -> bool:
    """Even-odd rule; boundary points count as inside."""
    inside = False
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        if (y1 > y) != (y2 > y):
            xi = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x <= xi:
                inside = not inside
    return inside


def _segments_cross(p0, p1, q0, q1) -> bool:
    """Proper intersection test for segments p0-p1 and q0-q1."""
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(q0, q1, p0)
    d2 = orient(q0, q1, p1)
    d3 = orient(p0, p1, q0)
    d4 = orient(p0, p1, q1)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


@dataclass(frozen=True)
class Scene:
    """Physical environment: bounds, obstacles, exits, named zones."""

    bounds: tuple[float, float, float, float] = (0.0, 0.0, 8.0, 5.0)  # x0, y0, x1, y1 (m)
    obstacles: tuple[tuple[tuple[float, float], ...], ...] = ()
    exits: tuple[tuple[tuple[float, float], tuple[float, float]], ...] = ()
    zones: tuple[tuple[str, tuple[tuple[float, float], ...]], ...] = ()
    grid_resolution: float = 0.25      # m per cell for field rasterization
    name: str = "default"

    def __post_init__(self):
        x0, y0, x1, y1 = self.bounds
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"scene bounds must be a nonempty rectangle, got {self.bounds}")
        if self.grid_resolution <= 0:
            raise ValueError("grid_resolution must be > 0")
        for poly in list(self.obstacles) + [p for _, p in self.zones]:
            for (px, py) in poly:
                if not (x0 <= px <= x1 and y0 <= py <= y1):
                    raise ValueError(f"polygon vertex {(px, py)} outside scene bounds")

    def contains(self, x: float, y: float) -> bool:
        x0, y0, x1, y1 = self.bounds
        return x0 <= x <= x1 and y0 <= y <= y1

    def segment_occluded(self, p: tuple[float, float], q: tuple[float, float]) -> bool:
        """True when the open sightline p->q passes through any obstacle."""
        for poly in self.obstacles:
            m = ((p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0)
            if _point_in_polygon(m[0], m[1], poly):
                return True
            nv = len(poly)
            for i in range(nv):
                if _segments_cross(p, q, poly[i], poly[(i + 1) % nv]):
                    return True
        return False


@dataclass(frozen=True)
class CalibrationProfile:
    """Per-vertical calibration: baselines, kernel parameters, risk weights.

    The shipped defaults are the negotiation profile. The kinematic baselines
    (mu/sigma pairs) and the kernel parameters were fitted once against the
    canonical seven-agent fixture and are ordinary config, not truth claims;
    every field can be overridden from JSON.
    """

    vertical_name: str = "negotiation"

    # z-score baselines
    mu_v: float = 0.08                 # m/s
    sigma_v: float = 0.06
    mu_e: float = 0.449                # rad/s
    sigma_e: float = 0.35

    # tension weights (quadratic form)
    gamma_v: float = 0.30
    gamma_e: float = 0.55
    gamma_p: float = 0.15              # inert while proxemic inputs are zero

    # interaction kernels
    alpha_w: float = 1.0
    h_r: float = 2.50                  # m
    h_theta: float = 1.047             # rad
    beta_e: float = 0.5
    comfort_distance: float = 1.2      # m, proxemic reference

    # criticality g weights (a1, a2, a3, a4, eps)
    r_weights: tuple[float, float, float, float, float] = (0.40, 0.35, 0.25, 0.0, 0.10)
    t_norm_scale: float = 50.0
    n_norm_scale: float = 2500.0
    b_norm_scale: float = 25.0
    risk_mode: str = "identity"        # "identity" or "logistic"
    logistic_k: float = 4.0
    logistic_g0: float = 0.5

    # scene smoothing and rolling statistics
    smoothing_h: float = 1.0           # m
    ews_window: float = 30.0           # s

    # zone thresholds on R
    zone_thresholds: tuple[float, float] = (0.30, 0.60)  # green_max, amber_max

    # state-vector aggregation
    attention_aggregator: str = "max"  # "max" | "entropy" | "variance"

    # intervention cost weights
    w_delay: float = 0.30
    w_struct: float = 0.25

    def __post_init__(self):
        if self.sigma_v <= 0 or self.sigma_e <= 0:
            raise ValueError("sigma baselines must be > 0")
        if min(self.h_r, self.h_theta, self.smoothing_h) <= 0:
            raise ValueError("kernel bandwidths must be > 0")
        if min(self.gamma_v, self.gamma_e, self.gamma_p) < 0:
            raise ValueError("tension weights must be >= 0")
        if self.gamma_v + self.gamma_e + self.gamma_p <= 0:
            raise ValueError("at least one tension weight must be positive")
        g, a = self.zone_thresholds
        if not (0.0 < g < a < 1.0):
            raise ValueError(f"zone thresholds must satisfy 0 < green < amber < 1, got {self.zone_thresholds}")
        if self.risk_mode not in ("identity", "logistic"):
            raise ValueError(f"unknown risk_mode {self.risk_mode!r}")
        if self.attention_aggregator not in ("max", "entropy", "variance"):
            raise ValueError(f"unknown attention_aggregator {self.attention_aggregator!r}")

    def to_json(self) -> str:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["r_weights"] = list(self.r_weights)
        d["zone_thresholds"] = list(self.zone_thresholds)
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationProfile":
        d = json.loads(text)
        if "r_weights" in d:
            d["r_weights"] = tuple(d["r_weights"])
        if "zone_thresholds" in d:
            d["zone_thresholds"] = tuple(d["zone_thresholds"])
        return cls(**d)


@dataclass(frozen=True)
class NormalizedState:
    """Z-scored agent state: speed and gesture deviations in std units.

    The proxemic index is already dimensionless in [0, 1] and is carried
    through unchanged, as is the measurement confidence.
    """

    agent_id: int | str
    speed_z: float
    gesture_z: float
    proxemic: float
    confidence: float


def normalize_agent(a: AgentMicroState, cal: CalibrationProfile) -> NormalizedState:
    """Map raw kinematics to baseline-relative z-scores."""
    return NormalizedState(
        agent_id=a.agent_id,
        speed_z=(a.speed - cal.mu_v) / cal.sigma_v,
        gesture_z=(a.gesture - cal.mu_e) / cal.sigma_e,
        proxemic=a.proxemic,
        confidence=a.confidence,
    )


def normalize_frame(frame: MicroStateFrame, cal: CalibrationProfile) -> tuple[NormalizedState, ...]:
    return tuple(normalize_agent(a, cal) for a in frame.agents)


class FrameRejected(ValueError):
    """Raised when a frame has unrecoverable violations."""

    def __init__(self, violations: Sequence[str]):
        self.violations = tuple(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class ValidatedFrame:
    """A frame that passed validation, possibly with clamped fields.

    ``warnings`` lists every recoverable issue that was repaired in place
    (confidence clamped, orientation re-wrapped, negative gesture zeroed) and
    every informational flag (agent outside scene bounds).
    """

    frame: MicroStateFrame
    warnings: tuple[str, ...] = ()
    out_of_scene: tuple[int | str, ...] = ()

    @property
    def timestamp(self) -> float:
        return self.frame.timestamp

    @property
    def agents(self) -> tuple[AgentMicroState, ...]:
        return self.frame.agents

    @property
    def n(self) -> int:
        return self.frame.n


def _finite(*values: float) -> bool:
    return all(math.isfinite(v) for v in values)


def validate_frame(
    frame: MicroStateFrame,
    scene: Scene,
    prev_timestamp: float | None = None,
) -> ValidatedFrame:
    """Validate one frame against the scene; clamp what is repairable.

    Raises
    ------
    FrameRejected
        On duplicate agent ids, non-finite numerics, or a timestamp at or
        before ``prev_timestamp``. Every violation found is listed.
    """
    violations: list[str] = []
    warnings: list[str] = []
    out_of_scene: list[int | str] = []

    if not _finite(frame.timestamp):
        violations.append("timestamp is not finite")
    if prev_timestamp is not None and frame.timestamp <= prev_timestamp:
        violations.append(
            f"timestamp regression: {frame.timestamp} after {prev_timestamp}"
        )

    seen: set = set()
    for a in frame.agents:
        if a.agent_id in seen:
            violations.append(f"duplicate agent_id {a.agent_id!r}")
        seen.add(a.agent_id)
        if not _finite(a.position[0], a.position[1], a.velocity[0], a.velocity[1],
                       a.orientation, a.gesture, a.proxemic, a.confidence):
            violations.append(f"agent {a.agent_id!r} has non-finite fields")

    if violations:
        raise FrameRejected(violations)

    repaired: list[AgentMicroState] = []
    for a in frame.agents:
        fixes = {}
        if not (0.0 <= a.confidence <= 1.0):
            fixes["confidence"] = min(1.0, max(0.0, a.confidence))
            warnings.append(f"agent {a.agent_id!r}: confidence {a.confidence} clamped to {fixes['confidence']}")
        if not (0.0 <= a.proxemic <= 1.0):
            fixes["proxemic"] = min(1.0, max(0.0, a.proxemic))
            warnings.append(f"agent {a.agent_id!r}: proxemic {a.proxemic} clamped")
        if a.gesture < 0.0:
            fixes["gesture"] = 0.0
            warnings.append(f"agent {a.agent_id!r}: negative gesture clamped to 0")
        if not (-math.pi < a.orientation <= math.pi):
            fixes["orientation"] = wrap_angle(a.orientation)
            warnings.append(f"agent {a.agent_id!r}: orientation wrapped to {fixes['orientation']:.4f}")
        if not scene.contains(a.position[0], a.position[1]):
            out_of_scene.append(a.agent_id)
            warnings.append(f"agent {a.agent_id!r}: position {a.position} outside scene bounds")
        repaired.append(replace(a, **fixes) if fixes else a)

    return ValidatedFrame(
        frame=replace(frame, agents=tuple(repaired)),
        warnings=tuple(warnings),
        out_of_scene=tuple(out_of_scene),
    )


# ---------------------------------------------------------------------------
# Wire format: newline-delimited JSON, one frame per line (see docs/SCHEMAS.md)
# ---------------------------------------------------------------------------

def _agent_to_dict(a: AgentMicroState) -> dict:
    d = {
        "agent_id": a.agent_id,
        "position": [a.position[0], a.position[1]],
        "velocity": [a.velocity[0], a.velocity[1]],
        "orientation": a.orientation,
        "gesture": a.gesture,
        "proxemic": a.proxemic,
        "confidence": a.confidence,
    }
    if a.role_label is not None:
        d["role_label"] = a.role_label
    return d


def _agent_from_dict(d: dict) -> AgentMicroState:
    return AgentMicroState(
        agent_id=d["agent_id"],
        position=(float(d["position"][0]), float(d["position"][1])),
        velocity=(float(d["velocity"][0]), float(d["velocity"][1])),
        orientation=float(d["orientation"]),
        gesture=float(d["gesture"]),
        proxemic=float(d.get("proxemic", 0.0)),
        confidence=float(d.get("confidence", 1.0)),
        role_label=d.get("role_label"),
    )


def frame_to_json(frame: MicroStateFrame) -> str:
    """Serialize one frame to a single JSON line (numerically lossless)."""
    return json.dumps(
        {
            "timestamp": frame.timestamp,
            "scene_ref": frame.scene_ref,
            "agents": [_agent_to_dict(a) for a in frame.agents],
        },
        separators=(",", ":"),
    )


def frame_from_json(line: str) -> MicroStateFrame:
    d = json.loads(line)
    return MicroStateFrame(
        timestamp=float(d["timestamp"]),
        agents=tuple(_agent_from_dict(a) for a in d["agents"]),
        scene_ref=d.get("scene_ref", "default"),
    )
