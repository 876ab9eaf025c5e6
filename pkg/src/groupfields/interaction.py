"""Directed interaction matrix: the scene-to-graph operator.

W[i][j] quantifies the influence of agent j on agent i through four
multiplicative channels: spatial proximity, the receiver's directional
alignment toward the source, the source's expressivity, and the source's
measurement confidence. The matrix is generally asymmetric; that asymmetry
is signal, not error.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .core import AgentMicroState, CalibrationProfile, Scene, ValidatedFrame, wrap_angle

__all__ = [
    "InteractionMatrix",
    "GraphSummary",
    "bearing_gap",
    "kernel_eval",
    "build_interaction_matrix",
    "graph_summaries",
    "matrix_to_json_dict",
]


@dataclass(frozen=True)
class InteractionMatrix:
    """Dense nonnegative influence weights with a fixed agent ordering."""

    timestamp: float
    agent_order: tuple
    weights: np.ndarray                # (n, n), row i col j = influence of j on i
    degenerate_pairs: tuple = ()       # (i, j) index pairs with coincident positions

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)      # owned copy, frozen below
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"weights must be square, got shape {w.shape}")
        if w.shape[0] != len(self.agent_order):
            raise ValueError("agent_order length does not match matrix size")
        if np.any(w < 0):
            raise ValueError("interaction weights must be nonnegative")
        if w.shape[0] and np.any(np.diagonal(w) != 0.0):
            raise ValueError("diagonal must be exactly zero (no self-influence)")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.weights.shape[0]


def bearing_gap(i: AgentMicroState, j: AgentMicroState) -> float:
    """Absolute angular gap in [0, pi] between i's body orientation and the
    bearing from i to j. Coincident positions degenerate to 0 (the proximity
    kernel dominates there anyway)."""
    dx = j.position[0] - i.position[0]
    dy = j.position[1] - i.position[1]
    if dx == 0.0 and dy == 0.0:
        return 0.0
    return abs(wrap_angle(i.orientation - math.atan2(dy, dx)))


def kernel_eval(kind: str, x: float, bandwidth: float) -> float:
    """Gaussian falloff exp(-x^2 / (2 h^2)); ``kind`` is documentation
    ("proximity" in meters, "alignment" in radians) and shares the formula."""
    if kind not in ("proximity", "alignment"):
        raise ValueError(f"unknown kernel kind {kind!r}")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be > 0")
    return math.exp(-(x * x) / (2.0 * bandwidth * bandwidth))


def build_interaction_matrix(
    vframe: ValidatedFrame,
    cal: CalibrationProfile,
    scene: Scene | None = None,
) -> InteractionMatrix:
    """Evaluate W over all ordered pairs of the frame.

    Uses the raw gestural amplitude in the expressivity factor (the z-scored
    value is reserved for the tension field). When a scene with obstacles is
    supplied, occluded sightlines zero the corresponding entries: influence
    requires visibility.
    """
    agents = vframe.agents
    n = len(agents)
    if n == 0:
        raise ValueError("cannot build an interaction matrix for an empty frame")

    pos = np.array([a.position for a in agents], dtype=float)
    theta = np.array([a.orientation for a in agents], dtype=float)
    gesture = np.array([a.gesture for a in agents], dtype=float)
    conf = np.array([a.confidence for a in agents], dtype=float)

    d = pos[None, :, :] - pos[:, None, :]             # d[i, j] = x_j - x_i
    r = np.hypot(d[..., 0], d[..., 1])
    bearing = np.arctan2(d[..., 1], d[..., 0])
    gap = np.abs(np.arctan2(np.sin(theta[:, None] - bearing),
                            np.cos(theta[:, None] - bearing)))

    coincident = (r == 0.0) & ~np.eye(n, dtype=bool)
    gap[coincident] = 0.0

    w = (
        cal.alpha_w
        * np.exp(-(r ** 2) / (2.0 * cal.h_r ** 2))
        * np.exp(-(gap ** 2) / (2.0 * cal.h_theta ** 2))
        * (1.0 + cal.beta_e * gesture[None, :])
        * conf[None, :]
    )
    np.fill_diagonal(w, 0.0)

    if scene is not None and scene.obstacles:
        for i in range(n):
            for j in range(n):
                if i != j and w[i, j] > 0.0 and scene.segment_occluded(
                    agents[i].position, agents[j].position
                ):
                    w[i, j] = 0.0

    pairs = tuple(zip(*np.nonzero(coincident))) if coincident.any() else ()
    return InteractionMatrix(
        timestamp=vframe.timestamp,
        agent_order=vframe.frame.agent_ids(),
        weights=w,
        degenerate_pairs=tuple((int(i), int(j)) for i, j in pairs),
    )


@dataclass(frozen=True)
class GraphSummary:
    """Per-agent strengths. in_strength[i] = sum over column i (how much the
    others attend to i), out_strength[i] = sum over row i (i's exposure)."""

    agent_order: tuple
    in_strength: np.ndarray
    out_strength: np.ndarray
    total_weight: float


def graph_summaries(W: InteractionMatrix) -> GraphSummary:
    w = W.weights
    return GraphSummary(
        agent_order=W.agent_order,
        in_strength=w.sum(axis=0),
        out_strength=w.sum(axis=1),
        total_weight=float(w.sum()),
    )


def matrix_to_json_dict(W: InteractionMatrix) -> dict:
    """Dense row-major export consumed by the console graph view."""
    return {
        "timestamp": W.timestamp,
        "n": W.n,
        "agent_order": list(W.agent_order),
        "weights": [float(x) for x in W.weights.ravel()],
    }


def matrix_from_json_dict(d: dict) -> InteractionMatrix:
    n = int(d["n"])
    return InteractionMatrix(
        timestamp=float(d["timestamp"]),
        agent_order=tuple(d["agent_order"]),
        weights=np.array(d["weights"], dtype=float).reshape(n, n),
    )
