"""The nine behavioral fields and the system state vector.

Field conventions, in evaluation order:

* attention A: normalized incoming weight per agent (sums to 1)
* tension T: quadratic kinematic intensity of z-scored deviations
* synchrony S: Kuramoto order parameter of gestural phases
* influence I: tension-weighted interaction; both the exposure variant
  (row-weighted, what an agent receives) and the emission variant
  (column-weighted, what an agent broadcasts) are computed
* stability St: spectral margin, filled in by the spectral module
* alignment dispersion L: spread of z-scored states around their mean
* momentum M: rate of change of the state vector
* noise N: detrended fluctuation variance over a rolling window
* boundary B: spatial gradient magnitude of the smoothed tension field
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.signal import hilbert

from .core import CalibrationProfile, NormalizedState, Scene, ValidatedFrame
from .interaction import InteractionMatrix

__all__ = [
    "Grid",
    "FieldFrame",
    "StateVector",
    "IX_A", "IX_T", "IX_S", "IX_I", "IX_ST", "IX_L", "IX_M", "IX_N", "IX_B",
    "COMPONENT_NAMES",
    "attention_field",
    "tension_field",
    "influence_field",
    "phase_extract",
    "kuramoto_synchrony",
    "alignment_dispersion",
    "momentum",
    "noise_level",
    "smooth_to_scene",
    "boundary_field",
    "assemble_state_vector",
    "compute_instant_fields",
]

# fixed component ordering of the state vector
IX_A, IX_T, IX_S, IX_I, IX_ST, IX_L, IX_M, IX_N, IX_B = range(9)
COMPONENT_NAMES = ("attention", "tension", "synchrony", "influence",
                   "stability", "alignment", "momentum", "noise", "boundary")


@dataclass(frozen=True)
class Grid:
    """Row-major scalar field on the scene raster; NaN marks no-data cells.

    ``values[iy, ix]`` covers the cell centered at
    ``(origin[0] + (ix + 0.5) * resolution, origin[1] + (iy + 0.5) * resolution)``.
    """

    values: np.ndarray
    origin: tuple[float, float]
    resolution: float

    def __post_init__(self):
        v = np.array(self.values, dtype=float)       # owned copy, frozen below
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def to_json_dict(self) -> dict:
        return {
            "origin": list(self.origin),
            "resolution": self.resolution,
            "ny": int(self.values.shape[0]),
            "nx": int(self.values.shape[1]),
            "values": [None if math.isnan(x) else float(x) for x in self.values.ravel()],
        }


@dataclass(frozen=True)
class StateVector:
    """Nine-component system state; ordering is fixed by the IX_* constants."""

    timestamp: float
    components: np.ndarray
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        c = np.array(self.components, dtype=float)   # owned copy, frozen below
        if c.shape != (9,):
            raise ValueError(f"state vector must have 9 components, got {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "components", c)

    def __getitem__(self, i: int) -> float:
        return float(self.components[i])


@dataclass(frozen=True)
class FieldFrame:
    """All field values evaluated at one instant."""

    timestamp: float
    agent_order: tuple
    attention: np.ndarray
    attention_degenerate: bool
    tension: np.ndarray
    tension_mean: float
    influence_exposure: np.ndarray
    influence_emission: np.ndarray
    synchrony: float                   # NaN while undefined
    synchrony_valid: bool
    alignment_dispersion: float
    momentum: float
    noise: float
    stability: float                   # NaN until the spectral pass fills it
    tension_grid: Grid | None = None
    boundary_grid: Grid | None = None
    boundary_max: float = float("nan")
    flags: tuple[str, ...] = ()

    def to_json_dict(self, with_grids: bool = True) -> dict:
        def arr(a):
            return [float(x) for x in a]

        def opt(x):
            return None if (x is None or not math.isfinite(x)) else float(x)

        d = {
            "timestamp": self.timestamp,
            "agent_order": list(self.agent_order),
            "attention": arr(self.attention),
            "attention_degenerate": self.attention_degenerate,
            "tension": arr(self.tension),
            "tension_mean": self.tension_mean,
            "influence_exposure": arr(self.influence_exposure),
            "influence_emission": arr(self.influence_emission),
            "synchrony": opt(self.synchrony),
            "synchrony_valid": self.synchrony_valid,
            "alignment_dispersion": self.alignment_dispersion,
            "momentum": self.momentum,
            "noise": self.noise,
            "stability": opt(self.stability),
            "boundary_max": opt(self.boundary_max),
            "flags": list(self.flags),
        }
        if with_grids:
            d["tension_grid"] = self.tension_grid.to_json_dict() if self.tension_grid else None
            d["boundary_grid"] = self.boundary_grid.to_json_dict() if self.boundary_grid else None
        return d


def attention_field(W: InteractionMatrix) -> tuple[np.ndarray, bool]:
    """Column sums over the grand sum. A zero matrix degenerates to the
    uniform distribution (flagged)."""
    w = W.weights
    total = float(w.sum())
    if total <= 0.0:
        n = W.n
        return np.full(n, 1.0 / n), True
    return w.sum(axis=0) / total, False


def tension_field(
    norm: Sequence[NormalizedState], cal: CalibrationProfile
) -> tuple[np.ndarray, float]:
    """Quadratic intensity per agent plus its mean.

    The quadratic form is the unique minimal polynomial respecting sign
    invariance, monotonicity in deviation magnitude, additivity over agents,
    and isotropy; deviations below baseline heat the system exactly as much
    as deviations above it.
    """
    zv = np.array([s.speed_z for s in norm])
    ze = np.array([s.gesture_z for s in norm])
    zp = np.array([s.proxemic for s in norm])
    t = cal.gamma_v * zv ** 2 + cal.gamma_e * ze ** 2 + cal.gamma_p * zp ** 2
    return t, float(t.mean()) if len(t) else 0.0


def influence_field(
    W: InteractionMatrix, tension: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Tension-weighted influence, both directions.

    exposure[i] = sum_j W[i,j] T[j]  (what i is subjected to)
    emission[i] = T[i] * sum_j W[j,i] (what i broadcasts into the group)
    """
    t = np.asarray(tension, dtype=float)
    if t.shape[0] != W.n:
        raise ValueError(f"tension length {t.shape[0]} != matrix size {W.n}")
    exposure = W.weights @ t
    emission = W.weights.sum(axis=0) * t
    return exposure, emission


def phase_extract(
    history: np.ndarray, min_samples: int = 4
) -> tuple[np.ndarray, np.ndarray]:
    """Instantaneous phase of each agent's rhythmic signal.

    ``history`` is (n_agents, k): the windowed signal (typically gestural
    amplitude). Each row is linearly detrended and converted to its analytic
    signal; the phase is read at the window center, where the discrete
    quadrature is most accurate. Rows without variation carry no phase and
    are reported invalid.

    Returns (phases, valid) with phases in (-pi, pi].
    """
    h = np.atleast_2d(np.asarray(history, dtype=float))
    n, k = h.shape
    if k < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {k}")

    t = np.arange(k, dtype=float)
    t = (t - t.mean()) / max(1.0, t.std())
    basis = np.stack([np.ones(k), t], axis=1)            # (k, 2)
    coef, *_ = np.linalg.lstsq(basis, h.T, rcond=None)
    resid = h - (basis @ coef).T

    scale = np.max(np.abs(h), axis=1)
    valid = np.std(resid, axis=1) > 1e-9 * np.maximum(scale, 1.0)

    analytic = hilbert(resid, axis=1)
    phases = np.angle(analytic[:, k // 2])
    phases[~valid] = np.nan
    return phases, valid


def kuramoto_synchrony(
    phases: np.ndarray, valid: np.ndarray | None = None
) -> float:
    """Modulus of the mean unit phasor: 1 = full coherence, 0 = incoherence.

    Returns NaN when no valid phases are available.
    """
    p = np.asarray(phases, dtype=float)
    if valid is not None:
        p = p[np.asarray(valid, dtype=bool)]
    p = p[np.isfinite(p)]
    if p.size == 0:
        return float("nan")
    return float(np.abs(np.mean(np.exp(1j * p))))


def alignment_dispersion(norm: Sequence[NormalizedState]) -> float:
    """Mean squared Euclidean deviation of the z-scored state vectors
    (speed_z, gesture_z, proxemic) from their group mean."""
    if len(norm) == 0:
        raise ValueError("alignment dispersion needs at least one agent")
    s = np.array([[x.speed_z, x.gesture_z, x.proxemic] for x in norm])
    return float(np.mean(np.sum((s - s.mean(axis=0)) ** 2, axis=1)))


def momentum(current: StateVector, previous: StateVector | None) -> tuple[float, bool]:
    """Rate of state change ||dX/dt|| over the eight non-momentum components
    (M is excluded from its own derivative). Returns (value, cold_start)."""
    if previous is None:
        return 0.0, True
    dt = current.timestamp - previous.timestamp
    if dt <= 0.0:
        raise ValueError("momentum requires strictly increasing timestamps")
    keep = [i for i in range(9) if i != IX_M]
    delta = current.components[keep] - previous.components[keep]
    return float(np.linalg.norm(delta) / dt), False


def noise_level(
    history: np.ndarray,
    min_samples: int = 8,
    components: Sequence[int] | None = None,
) -> tuple[float, bool]:
    """Fluctuation level: variance of residuals after removing a linear trend
    from each state component over the window, summed across components.

    ``history`` is (k, m) with rows ordered in time. When m == 9 (a full
    state-vector window) the momentum and noise components are excluded by
    default: both are themselves derived from this window, and feeding them
    back creates a self-amplifying loop that diverges on escalating streams.
    Pass ``components`` explicitly to override the column selection.

    The residual variance uses ddof=2 (two fitted trend parameters), so a
    pure linear ramp yields exactly zero and iid noise of variance s^2 yields
    s^2 per included component in expectation. Returns (value, cold_start).
    """
    h = np.asarray(history, dtype=float)
    if h.ndim == 1:
        h = h[:, None]
    if components is not None:
        h = h[:, list(components)]
    elif h.shape[1] == 9:
        h = h[:, [i for i in range(9) if i not in (IX_M, IX_N)]]
    k = h.shape[0]
    if k < min_samples:
        return 0.0, True
    t = np.arange(k, dtype=float)
    t = (t - t.mean()) / max(1.0, t.std())
    basis = np.stack([np.ones(k), t], axis=1)
    coef, *_ = np.linalg.lstsq(basis, h, rcond=None)
    resid = h - basis @ coef
    var = np.sum(resid ** 2, axis=0) / max(1, k - 2)
    return float(var.sum()), False


def smooth_to_scene(
    values: np.ndarray,
    positions: np.ndarray,
    scene: Scene,
    h: float,
    max_reach: float = 3.0,
) -> Grid:
    """Graph-to-scene projection: Nadaraya-Watson estimate of a per-agent
    quantity on the scene raster with a Gaussian kernel of bandwidth ``h``.

    Cells farther than ``max_reach * h`` from every agent are no-data (NaN).
    An empty agent set yields an all-NaN grid.
    """
    if h <= 0:
        raise ValueError("smoothing bandwidth must be > 0")
    x0, y0, x1, y1 = scene.bounds
    res = scene.grid_resolution
    xs = np.arange(x0 + res / 2.0, x1, res)
    ys = np.arange(y0 + res / 2.0, y1, res)

    vals = np.asarray(values, dtype=float)
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    if vals.shape[0] == 0:
        return Grid(np.full((len(ys), len(xs)), np.nan), (x0, y0), res)

    gx, gy = np.meshgrid(xs, ys)                          # (ny, nx)
    dx = gx[..., None] - pos[None, None, :, 0]
    dy = gy[..., None] - pos[None, None, :, 1]
    d2 = dx * dx + dy * dy
    k = np.exp(-d2 / (2.0 * h * h))
    num = k @ vals
    den = k.sum(axis=-1)
    f = num / den
    f[np.min(d2, axis=-1) > (max_reach * h) ** 2] = np.nan
    return Grid(f, (x0, y0), res)


def boundary_field(grid: Grid) -> tuple[Grid, float]:
    """Gradient magnitude of a scalar grid: central differences inside,
    one-sided at the edges. No-data cells propagate into their stencil.
    Returns (gradient grid, max over valid cells)."""
    v = grid.values
    if v.shape[0] < 2 or v.shape[1] < 2:
        raise ValueError("boundary field needs at least 2 cells per axis")
    gy, gx = np.gradient(v, grid.resolution)
    b = np.hypot(gx, gy)
    b[~np.isfinite(v)] = np.nan        # a central stencil skips its own cell
    bmax = float(np.nanmax(b)) if np.any(np.isfinite(b)) else float("nan")
    return Grid(b, grid.origin, grid.resolution), bmax


def _aggregate_attention(attention: np.ndarray, how: str) -> float:
    if how == "max":
        return float(np.max(attention))
    if how == "entropy":
        p = attention[attention > 0]
        return float(-(p * np.log(p)).sum())
    if how == "variance":
        return float(np.var(attention))
    raise ValueError(f"unknown attention aggregator {how!r}")


def assemble_state_vector(
    ff: FieldFrame, attention_aggregator: str = "max"
) -> StateVector:
    """Aggregate a field frame into the 9-vector X.

    Fixed aggregators: attention concentration (max by default), mean
    tension, synchrony as-is, peak influence emission, stability margin,
    dispersion, momentum, noise, and peak boundary gradient. Undefined
    history-dependent entries enter as flagged zeros.
    """
    flags = list(ff.flags)
    x = np.zeros(9)
    x[IX_A] = _aggregate_attention(ff.attention, attention_aggregator)
    x[IX_T] = ff.tension_mean
    if ff.synchrony_valid and math.isfinite(ff.synchrony):
        x[IX_S] = ff.synchrony
    else:
        flags.append("synchrony_undefined")
    x[IX_I] = float(np.max(ff.influence_emission)) if ff.influence_emission.size else 0.0
    if math.isfinite(ff.stability):
        x[IX_ST] = ff.stability
    else:
        flags.append("stability_missing")
    x[IX_L] = ff.alignment_dispersion
    x[IX_M] = ff.momentum
    x[IX_N] = ff.noise
    if math.isfinite(ff.boundary_max):
        x[IX_B] = ff.boundary_max
    elif ff.tension_grid is None:
        flags.append("boundary_not_computed")
    return StateVector(timestamp=ff.timestamp, components=x, flags=tuple(flags))


def compute_instant_fields(
    vframe: ValidatedFrame,
    norm: Sequence[NormalizedState],
    W: InteractionMatrix,
    cal: CalibrationProfile,
    scene: Scene | None = None,
    with_grid: bool = True,
) -> FieldFrame:
    """Evaluate every field that depends only on the current frame.

    History-dependent entries (synchrony, momentum, noise) and the stability
    margin start undefined; the pipeline fills them via dataclasses.replace.
    """
    attention, degenerate = attention_field(W)
    tension, t_mean = tension_field(norm, cal)
    exposure, emission = influence_field(W, tension)

    tension_grid = None
    boundary_grid = None
    bmax = float("nan")
    if with_grid and scene is not None:
        pos = np.array([a.position for a in vframe.agents], dtype=float)
        tension_grid = smooth_to_scene(tension, pos, scene, cal.smoothing_h)
        boundary_grid, bmax = boundary_field(tension_grid)

    return FieldFrame(
        timestamp=vframe.timestamp,
        agent_order=vframe.frame.agent_ids(),
        attention=attention,
        attention_degenerate=degenerate,
        tension=tension,
        tension_mean=t_mean,
        influence_exposure=exposure,
        influence_emission=emission,
        synchrony=float("nan"),
        synchrony_valid=False,
        alignment_dispersion=alignment_dispersion(norm),
        momentum=0.0,
        noise=0.0,
        stability=float("nan"),
        tension_grid=tension_grid,
        boundary_grid=boundary_grid,
        boundary_max=bmax,
        flags=("attention_degenerate",) if degenerate else (),
    )
