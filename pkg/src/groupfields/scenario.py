"""What-if forecasting: surrogate micro-dynamics, ensemble simulation under
candidate interventions, cost ranking, and the causal explanation chain.

The surrogate is agent-level because interventions are specified mechanically
on micro-signals (a gesture setpoint drops, orientations turn). Each agent's
gesture and speed mean-revert toward a setpoint that blends the calibration
baseline with the interaction-weighted deviations of the agents it attends
to; the full field pipeline is re-evaluated every step, so a damped column
immediately shows up in the spectral margin. The coupled system is
supercritical exactly when rho_contagion * lambda_max(W) exceeds one, which
ties escalation and recovery to the same spectral quantity the live engine
monitors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Sequence

import numpy as np

from .core import (
    AgentMicroState,
    CalibrationProfile,
    MicroStateFrame,
    NormalizedState,
    Scene,
    ValidatedFrame,
    wrap_angle,
)
from .criticality import (
    CriticalityReport,
    DangerSpec,
    ForecastPath,
    TauEstimate,
    evaluate_criticality,
    time_to_threshold,
)
from .fields import (
    FieldFrame,
    IX_ST,
    StateVector,
    assemble_state_vector,
    compute_instant_fields,
)
from .interaction import InteractionMatrix, build_interaction_matrix
from .spectral import power_iteration

__all__ = [
    "EffectSpec",
    "InterventionSpec",
    "SurrogateParams",
    "Trajectory",
    "EnsembleStats",
    "ScenarioItem",
    "ScenarioResult",
    "ChainStep",
    "CausalChain",
    "EnsembleInvalid",
    "no_op",
    "simulate_trajectory",
    "run_ensemble",
    "cost_J",
    "select_intervention",
    "causal_chain",
]

CHANNELS = ("gesture_setpoint", "orientation", "position", "coupling_scale")

BLOWUP_Z = 1e3
SIGMA_POS = 0.15                       # m / sqrt(s) of positional jitter per unit sigma scale


@dataclass(frozen=True)
class EffectSpec:
    """One timed parameter override.

    ``target`` is an agent id or "global". ``value`` is a float for scalar
    channels, an (x, y) pair for position, or "agent:<id>" for orientation
    (face toward that agent, re-aimed every step while ramping).
    """

    target: int | str
    channel: str
    value: float | tuple[float, float] | str
    ramp_s: float = 0.0

    def __post_init__(self):
        if self.channel not in CHANNELS:
            raise ValueError(f"unknown channel {self.channel!r}, expected one of {CHANNELS}")
        if self.ramp_s < 0:
            raise ValueError("ramp_s must be >= 0")


@dataclass(frozen=True)
class InterventionSpec:
    id: str
    description: str = ""
    effects: tuple[EffectSpec, ...] = ()
    execution_delay: float = 0.0       # s before the effects start ramping
    structural_cost: float = 0.0       # dimensionless disruption cost

    def __post_init__(self):
        if self.execution_delay < 0:
            raise ValueError("execution_delay must be >= 0")
        if self.structural_cost < 0:
            raise ValueError("structural_cost must be >= 0")

    def to_json_dict(self) -> dict:
        return {
            "id": self.id,
            "description": self.description,
            "execution_delay": self.execution_delay,
            "structural_cost": self.structural_cost,
            "effects": [
                {
                    "target": e.target,
                    "channel": e.channel,
                    "value": list(e.value) if isinstance(e.value, tuple) else e.value,
                    "ramp_s": e.ramp_s,
                }
                for e in self.effects
            ],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "InterventionSpec":
        effects = tuple(
            EffectSpec(
                target=e["target"],
                channel=e["channel"],
                value=tuple(e["value"]) if isinstance(e["value"], list) else e["value"],
                ramp_s=float(e.get("ramp_s", 0.0)),
            )
            for e in d.get("effects", [])
        )
        return cls(
            id=d["id"],
            description=d.get("description", ""),
            effects=effects,
            execution_delay=float(d.get("execution_delay", 0.0)),
            structural_cost=float(d.get("structural_cost", 0.0)),
        )


def no_op() -> InterventionSpec:
    return InterventionSpec(id="no-op", description="no intervention")


@dataclass(frozen=True)
class SurrogateParams:
    """Mean-reversion, contagion, and noise parameters of the surrogate.

    ``sigma_noise`` scales the per-channel calibration sigmas; the defaults
    were tuned once so that escalation, partial recovery, and full recovery
    are all reachable from the canonical fixture, then pinned.
    """

    kappa: float = 0.08                # 1/s mean reversion
    rho_contagion: float = 0.45        # coupling gain on interaction-weighted deviations
    sigma_noise: float = 0.12          # multiplier on (sigma_v, sigma_e)
    sat_z: float = 30.0                # contagion drive saturates at this many sigmas
    dt: float = 0.5                    # s
    horizon: float = 90.0              # s
    ensemble_size: int = 50
    rng_seed: int = 424243

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")
        if self.kappa <= 0:
            raise ValueError("kappa must be > 0")
        if self.sigma_noise < 0:
            raise ValueError("sigma_noise must be >= 0")

    @property
    def n_steps(self) -> int:
        steps = round(self.horizon / self.dt)
        if abs(steps * self.dt - self.horizon) > 1e-9:
            raise ValueError(f"dt {self.dt} does not divide horizon {self.horizon}")
        return int(steps)


# ---------------------------------------------------------------------------
# Micro-dynamics stepper (also drives the synthetic scene generator)
# ---------------------------------------------------------------------------

class MicroDynamics:
    """Mutable agent-state arrays evolved by Euler-Maruyama steps."""

    def __init__(self, vframe: ValidatedFrame, cal: CalibrationProfile,
                 scene: Scene | None = None):
        agents = vframe.agents
        self.cal = cal
        self.scene = scene
        self.ids = vframe.frame.agent_ids()
        self.roles = tuple(a.role_label for a in agents)
        self.scene_ref = vframe.frame.scene_ref
        self.n = len(agents)
        self.pos = np.array([a.position for a in agents], dtype=float)
        self.theta = np.array([a.orientation for a in agents], dtype=float)
        self.gesture = np.array([a.gesture for a in agents], dtype=float)
        self.speed = np.array([a.speed for a in agents], dtype=float)
        self.conf = np.array([a.confidence for a in agents], dtype=float)
        self.prox = np.array([a.proxemic for a in agents], dtype=float)
        dirs = np.array([a.velocity for a in agents], dtype=float)
        nrm = np.linalg.norm(dirs, axis=1)
        fallback = np.stack([np.cos(self.theta), np.sin(self.theta)], axis=1)
        self.dirs = np.where(nrm[:, None] > 0, dirs / np.maximum(nrm, 1e-12)[:, None], fallback)

    def build_w(self, rho_col_scale: np.ndarray | None = None) -> np.ndarray:
        """Interaction weights from the current arrays (no object wrapper)."""
        cal = self.cal
        d = self.pos[None, :, :] - self.pos[:, None, :]
        r = np.hypot(d[..., 0], d[..., 1])
        bearing = np.arctan2(d[..., 1], d[..., 0])
        diff = self.theta[:, None] - bearing
        gap = np.abs(np.arctan2(np.sin(diff), np.cos(diff)))
        np.fill_diagonal(gap, 0.0)
        w = (
            cal.alpha_w
            * np.exp(-(r ** 2) / (2.0 * cal.h_r ** 2))
            * np.exp(-(gap ** 2) / (2.0 * cal.h_theta ** 2))
            * (1.0 + cal.beta_e * self.gesture[None, :])
            * self.conf[None, :]
        )
        np.fill_diagonal(w, 0.0)
        if rho_col_scale is not None:
            w = w * rho_col_scale[None, :]
        return w

    def step(
        self,
        w: np.ndarray,
        dt: float,
        kappa: float,
        rho: float,
        sigma_scale: float,
        rng: np.random.Generator,
        set_e_override: np.ndarray | None = None,
        theta_target: np.ndarray | None = None,
        pos_target: np.ndarray | None = None,
        sat_z: float = 30.0,
    ) -> None:
        """Advance all agents by one step.

        The contagion drive saturates smoothly at ``sat_z`` channel sigmas:
        arousal transfer is linear near baseline but bounded, so escalation
        plateaus at high intensity instead of running off numerically. The
        RNG draw count is fixed per step regardless of overrides so that
        common-random-number coupling across interventions stays aligned.
        """
        cal = self.cal
        xi = rng.standard_normal(4 * self.n)
        xi_e, xi_v = xi[: self.n], xi[self.n: 2 * self.n]
        xi_p = xi[2 * self.n:].reshape(self.n, 2)

        cap_e = sat_z * cal.sigma_e
        cap_v = sat_z * cal.sigma_v
        drive_e = cap_e * np.tanh((w @ (self.gesture - cal.mu_e)) / cap_e)
        drive_v = cap_v * np.tanh((w @ (self.speed - cal.mu_v)) / cap_v)
        set_e = cal.mu_e + rho * drive_e
        set_v = cal.mu_v + rho * drive_v
        if set_e_override is not None:
            target, progress = set_e_override
            mask = np.isfinite(target)
            # blend toward the override target: a partially executed
            # intervention shifts the natural setpoint, never replaces it
            blend = np.where(mask, (1.0 - progress) * set_e + progress * target, set_e)
            set_e = np.where(mask, blend, set_e)

        sq = math.sqrt(dt)
        self.gesture = np.maximum(
            0.0, self.gesture - kappa * (self.gesture - set_e) * dt
            + sigma_scale * cal.sigma_e * sq * xi_e
        )
        self.speed = np.maximum(
            0.0, self.speed - kappa * (self.speed - set_v) * dt
            + sigma_scale * cal.sigma_v * sq * xi_v
        )
        self.pos = self.pos + sigma_scale * SIGMA_POS * sq * xi_p
        if self.scene is not None:
            x0, y0, x1, y1 = self.scene.bounds
            self.pos[:, 0] = np.clip(self.pos[:, 0], x0, x1)
            self.pos[:, 1] = np.clip(self.pos[:, 1], y0, y1)
        if theta_target is not None:
            mask = np.isfinite(theta_target)
            self.theta = np.where(mask, theta_target, self.theta)
        if pos_target is not None:
            mask = np.isfinite(pos_target[:, 0])
            self.pos = np.where(mask[:, None], pos_target, self.pos)

    def z_extreme(self) -> float:
        cal = self.cal
        zv = np.max(np.abs(self.speed - cal.mu_v)) / cal.sigma_v
        ze = np.max(np.abs(self.gesture - cal.mu_e)) / cal.sigma_e
        return float(max(zv, ze))

    def frame(self, t: float) -> ValidatedFrame:
        agents = tuple(
            AgentMicroState(
                agent_id=self.ids[i],
                position=(float(self.pos[i, 0]), float(self.pos[i, 1])),
                velocity=(float(self.speed[i] * self.dirs[i, 0]),
                          float(self.speed[i] * self.dirs[i, 1])),
                orientation=wrap_angle(float(self.theta[i])),
                gesture=float(self.gesture[i]),
                proxemic=float(self.prox[i]),
                confidence=float(self.conf[i]),
                role_label=self.roles[i],
            )
            for i in range(self.n)
        )
        return ValidatedFrame(frame=MicroStateFrame(t, agents, self.scene_ref))


class _EffectState:
    """Per-effect activation bookkeeping: capture-at-activation plus ramp."""

    def __init__(self, effect: EffectSpec, indices: list[int]):
        self.effect = effect
        self.indices = indices
        self.start: np.ndarray | None = None

    def progress(self, t: float, delay: float) -> float:
        if t < delay:
            return -1.0
        if self.effect.ramp_s <= 0:
            return 1.0
        return min(1.0, (t - delay) / self.effect.ramp_s)


class _InterventionRuntime:
    """Turns an InterventionSpec into per-step override arrays."""

    def __init__(self, u: InterventionSpec, dyn: MicroDynamics):
        self.u = u
        self.dyn = dyn
        index_of = {aid: i for i, aid in enumerate(dyn.ids)}
        self.states: list[_EffectState] = []
        for e in u.effects:
            if e.target == "global":
                idx = list(range(dyn.n))
            else:
                if e.target not in index_of:
                    raise ValueError(f"intervention {u.id!r} targets unknown agent {e.target!r}")
                idx = [index_of[e.target]]
            self.states.append(_EffectState(e, idx))
        self.index_of = index_of

    def overrides(self, t: float):
        n = self.dyn.n
        set_e = np.full(n, np.nan)
        set_p = np.zeros(n)
        theta = np.full(n, np.nan)
        pos = np.full((n, 2), np.nan)
        rho_scale = 1.0
        col_scale = None
        for st in self.states:
            p = st.progress(t, self.u.execution_delay)
            if p < 0:
                continue
            e = st.effect
            if e.channel == "gesture_setpoint":
                set_e[st.indices] = float(e.value)
                set_p[st.indices] = p
            elif e.channel == "orientation":
                if st.start is None:
                    st.start = self.dyn.theta[st.indices].copy()
                if isinstance(e.value, str) and e.value.startswith("agent:"):
                    ref = e.value.split(":", 1)[1]
                    key = ref if ref in self.index_of else (
                        int(ref) if ref.lstrip("-").isdigit() and int(ref) in self.index_of else ref
                    )
                    j = self.index_of[key]
                    d = self.dyn.pos[j] - self.dyn.pos[st.indices]
                    tgt = np.arctan2(d[:, 1], d[:, 0])
                    tgt[np.array(st.indices) == j] = self.dyn.theta[j]
                else:
                    tgt = np.full(len(st.indices), float(e.value))
                delta = np.array([wrap_angle(a) for a in tgt - st.start])
                theta[st.indices] = st.start + delta * p
            elif e.channel == "position":
                if st.start is None:
                    st.start = self.dyn.pos[st.indices].copy()
                tgt = np.array(e.value, dtype=float)
                pos[st.indices] = st.start + (tgt - st.start) * p
            elif e.channel == "coupling_scale":
                s = 1.0 + (float(e.value) - 1.0) * p
                if e.target == "global":
                    rho_scale *= s
                else:
                    if col_scale is None:
                        col_scale = np.ones(n)
                    col_scale[st.indices] = s
        return (set_e, set_p), theta, pos, rho_scale, col_scale


@lru_cache(maxsize=64)
def _detrend_projector(k: int) -> np.ndarray:
    """Residual projector removing {constant, linear} along a k-window."""
    t = np.arange(k, dtype=float)
    t = (t - t.mean()) / max(1.0, t.std())
    b = np.stack([np.ones(k), t], axis=1)
    q = np.eye(k) - b @ np.linalg.pinv(b)
    q.setflags(write=False)
    return q


def _analytic_phase_center(res: np.ndarray) -> np.ndarray:
    """Phase of the analytic signal at the window center, rows = agents."""
    k = res.shape[1]
    spec = np.fft.fft(res, axis=1)
    gain = np.zeros(k)
    gain[0] = 1.0
    if k % 2 == 0:
        gain[k // 2] = 1.0
        gain[1:k // 2] = 2.0
    else:
        gain[1:(k + 1) // 2] = 2.0
    analytic = np.fft.ifft(spec * gain, axis=1)
    return np.angle(analytic[:, k // 2])


class _Ring:
    """Fixed-capacity rolling buffer of row vectors."""

    def __init__(self, capacity: int, width: int):
        self.buf = np.zeros((capacity, width))
        self.capacity = capacity
        self.head = 0
        self.count = 0

    def push(self, row: np.ndarray) -> None:
        self.buf[self.head] = row
        self.head = (self.head + 1) % self.capacity
        self.count = min(self.count + 1, self.capacity)

    def ordered(self) -> np.ndarray:
        if self.count < self.capacity:
            return self.buf[: self.count]
        return np.concatenate([self.buf[self.head:], self.buf[: self.head]])


class _StateEvaluator:
    """Lean per-step field pipeline over the dynamics arrays."""

    def __init__(self, cal: CalibrationProfile, dt: float, n: int):
        self.cal = cal
        win = max(8, int(round(cal.ews_window / dt)))
        self.gesture_ring = _Ring(win, n)
        self.x_ring = _Ring(win, 9)
        self.prev_state: StateVector | None = None
        self._noise_cols = [i for i in range(9) if i not in (6, 7)]
        self._mode: np.ndarray | None = None

    def evaluate(self, t: float, dyn: MicroDynamics, w: np.ndarray) -> tuple[StateVector, CriticalityReport]:
        cal = self.cal
        zv = (dyn.speed - cal.mu_v) / cal.sigma_v
        ze = (dyn.gesture - cal.mu_e) / cal.sigma_e
        tension = cal.gamma_v * zv ** 2 + cal.gamma_e * ze ** 2 + cal.gamma_p * dyn.prox ** 2
        t_mean = float(tension.mean())

        total = float(w.sum())
        col = w.sum(axis=0)
        attention = col / total if total > 0 else np.full(dyn.n, 1.0 / dyn.n)
        emission_max = float(np.max(col * tension))

        s_all = np.stack([zv, ze, dyn.prox], axis=1)
        l_val = float(np.mean(np.sum((s_all - s_all.mean(axis=0)) ** 2, axis=1)))

        self.gesture_ring.push(dyn.gesture)
        sync = float("nan")
        if self.gesture_ring.count >= 8:
            hist = self.gesture_ring.ordered().T      # (agents, k)
            res = hist @ _detrend_projector(hist.shape[1])
            active = np.std(res, axis=1) > 1e-9 * np.maximum(np.max(np.abs(hist), axis=1), 1.0)
            if active.any():
                phases = _analytic_phase_center(res[active])
                sync = float(np.abs(np.mean(np.exp(1j * phases))))

        # 1e-6 on lambda is far below the criticality term's sensitivity;
        # warm-starting from the previous mode keeps the hot loop short
        spec = power_iteration(w, tol=1e-6, max_iter=300, x0=self._mode)
        self._mode = spec.dominant_mode

        x = np.zeros(9)
        x[0] = float(np.max(attention))
        x[1] = t_mean
        x[2] = 0.0 if not math.isfinite(sync) else sync
        x[3] = emission_max
        x[4] = spec.stability_margin
        x[5] = l_val
        if self.x_ring.count >= 8:
            h = self.x_ring.ordered()[:, self._noise_cols]
            res = _detrend_projector(h.shape[0]) @ h
            x[7] = float(np.sum(res * res) / max(1, h.shape[0] - 2))
        x[8] = 0.0                      # boundary term sits out of the surrogate loop
        if self.prev_state is not None:
            keep = [0, 1, 2, 3, 4, 5, 7, 8]   # everything but momentum itself
            dt_step = t - self.prev_state.timestamp
            x[6] = float(np.linalg.norm(x[keep] - self.prev_state.components[keep]) / dt_step)
        sv = StateVector(timestamp=t, components=x)
        self.x_ring.push(sv.components)
        self.prev_state = sv
        return sv, evaluate_criticality(sv, cal)


@dataclass(frozen=True)
class Trajectory:
    """One realization: per-step bundles plus flat arrays for statistics."""

    intervention_id: str
    seed: int
    times: np.ndarray
    r_raw: np.ndarray
    r_index: np.ndarray
    st: np.ndarray
    tension_mean: np.ndarray
    states: tuple[StateVector, ...]
    criticalities: tuple[CriticalityReport, ...]
    frames: tuple[ValidatedFrame, ...] = ()
    field_frames: tuple[FieldFrame, ...] = ()
    blown_up: bool = False

    def path(self) -> ForecastPath:
        return ForecastPath(
            offsets=self.times - self.times[0],
            states=self.states,
            r_raw=self.r_raw,
        )


def simulate_trajectory(
    frame: ValidatedFrame,
    cal: CalibrationProfile,
    sp: SurrogateParams,
    u: InterventionSpec,
    seed: int,
    scene: Scene | None = None,
    collect_bundles: bool = False,
) -> Trajectory:
    """Integrate one stochastic trajectory from ``frame`` under ``u``.

    Deterministic given ``seed``. On divergence (any |z| above 1e3) the
    trajectory is truncated at the offending step, flagged, and padded with
    its last value so ensembles stay rectangular.
    """
    n_steps = sp.n_steps
    dyn = MicroDynamics(frame, cal, scene)
    runtime = _InterventionRuntime(u, dyn)
    ev = _StateEvaluator(cal, sp.dt, dyn.n)
    rng = np.random.default_rng(seed)

    t0 = frame.timestamp
    times = t0 + sp.dt * np.arange(n_steps + 1)
    states: list[StateVector] = []
    crits: list[CriticalityReport] = []
    frames: list[ValidatedFrame] = []
    ffs: list[FieldFrame] = []
    r_raw = np.zeros(n_steps + 1)
    r_idx = np.zeros(n_steps + 1)
    st = np.zeros(n_steps + 1)
    tmean = np.zeros(n_steps + 1)
    blown = False

    set_e, theta_t, pos_t, rho_scale, col_scale = runtime.overrides(0.0)
    w = dyn.build_w(col_scale)
    for k in range(n_steps + 1):
        t = float(times[k])
        sv, crit = ev.evaluate(t, dyn, w)
        states.append(sv)
        crits.append(crit)
        r_raw[k] = crit.r_raw
        r_idx[k] = crit.r_index
        st[k] = sv[IX_ST]
        tmean[k] = sv[1]
        if collect_bundles:
            vf = dyn.frame(t)
            frames.append(vf)
            ffs.append(_bundle_fields(vf, cal, w, sv))
        if k == n_steps:
            break
        dyn.step(w, sp.dt, sp.kappa, sp.rho_contagion * rho_scale,
                 sp.sigma_noise, rng, set_e_override=set_e,
                 theta_target=theta_t, pos_target=pos_t, sat_z=sp.sat_z)
        if dyn.z_extreme() > BLOWUP_Z:
            blown = True
            for kk in range(k + 1, n_steps + 1):
                r_raw[kk] = r_raw[k]
                r_idx[kk] = r_idx[k]
                st[kk] = st[k]
                tmean[kk] = tmean[k]
                states.append(states[-1])
                crits.append(crits[-1])
            break
        set_e, theta_t, pos_t, rho_scale, col_scale = runtime.overrides(t + sp.dt - t0)
        w = dyn.build_w(col_scale)

    return Trajectory(
        intervention_id=u.id,
        seed=seed,
        times=times,
        r_raw=r_raw,
        r_index=r_idx,
        st=st,
        tension_mean=tmean,
        states=tuple(states),
        criticalities=tuple(crits),
        frames=tuple(frames),
        field_frames=tuple(ffs),
        blown_up=blown,
    )


def _bundle_fields(vf: ValidatedFrame, cal: CalibrationProfile,
                   w: np.ndarray, sv: StateVector) -> FieldFrame:
    from .core import normalize_frame

    norm = normalize_frame(vf.frame, cal)
    im = InteractionMatrix(timestamp=vf.timestamp,
                           agent_order=vf.frame.agent_ids(), weights=w)
    ff = compute_instant_fields(vf, norm, im, cal, scene=None, with_grid=False)
    return replace(
        ff,
        synchrony=sv[2],
        synchrony_valid=bool(sv[2] != 0.0),
        momentum=sv[6],
        noise=sv[7],
        stability=sv[IX_ST],
    )


class EnsembleInvalid(RuntimeError):
    """Raised when too many realizations blow up to trust the statistics."""


@dataclass(frozen=True)
class EnsembleStats:
    intervention: InterventionSpec
    times: np.ndarray
    r_band: np.ndarray                 # (3, k+1): 10th / 50th / 90th percentiles
    st_band: np.ndarray
    escalation_probability: float
    tau: TauEstimate
    mean_r_horizon: float
    blowup_count: int
    n: int


def run_ensemble(
    frame: ValidatedFrame,
    cal: CalibrationProfile,
    sp: SurrogateParams,
    u: InterventionSpec,
    scene: Scene | None = None,
    danger: DangerSpec | None = None,
) -> EnsembleStats:
    """Ensemble forecast under one intervention.

    Realization k always uses seed ``rng_seed + k`` so ensembles for
    different interventions are coupled by common random numbers.
    """
    danger = danger or DangerSpec()
    trajs = [
        simulate_trajectory(frame, cal, sp, u, seed=sp.rng_seed + k, scene=scene)
        for k in range(sp.ensemble_size)
    ]
    blow = sum(t.blown_up for t in trajs)
    if blow >= 0.2 * len(trajs):
        raise EnsembleInvalid(
            f"{blow}/{len(trajs)} realizations diverged under {u.id!r}"
        )

    R = np.stack([t.r_index for t in trajs])
    ST = np.stack([t.st for t in trajs])
    paths = [t.path() for t in trajs]
    tau = time_to_threshold(paths, danger)
    already_in = np.array([
        danger.contains(t.states[0], float(t.r_raw[0])) for t in trajs
    ])
    entered = already_in | np.isfinite(tau.entry_times)

    return EnsembleStats(
        intervention=u,
        times=trajs[0].times,
        r_band=np.percentile(R, [10, 50, 90], axis=0),
        st_band=np.percentile(ST, [10, 50, 90], axis=0),
        escalation_probability=float(entered.mean()),
        tau=tau,
        mean_r_horizon=float(R[:, -1].mean()),
        blowup_count=int(blow),
        n=len(trajs),
    )


def cost_J(stats: EnsembleStats, cal: CalibrationProfile, horizon: float) -> float:
    """Total intervention cost: expected terminal risk plus delay and
    structural penalties. Lower is better."""
    u = stats.intervention
    delay_term = cal.w_delay * (u.execution_delay / horizon) if horizon > 0 else 0.0
    return stats.mean_r_horizon + delay_term + cal.w_struct * u.structural_cost


@dataclass(frozen=True)
class ScenarioItem:
    intervention: InterventionSpec
    stats: EnsembleStats | None
    cost: float
    recommended: bool
    valid: bool
    error: str | None = None


@dataclass(frozen=True)
class ScenarioResult:
    timestamp: float
    items: tuple[ScenarioItem, ...]
    recommended_id: str
    follow_up_id: str | None
    chain: "CausalChain | None" = None

    def item(self, intervention_id: str) -> ScenarioItem:
        for it in self.items:
            if it.intervention.id == intervention_id:
                return it
        raise KeyError(intervention_id)

    def to_json_dict(self) -> dict:
        def tau_dict(tau: TauEstimate):
            return {
                "tau": tau.tau,
                "tau_lo": None if math.isinf(tau.tau_lo) else tau.tau_lo,
                "tau_hi": None if math.isinf(tau.tau_hi) else tau.tau_hi,
                "entering_fraction": tau.entering_fraction,
            }

        items = []
        for it in self.items:
            d = {
                "intervention": it.intervention.to_json_dict(),
                "cost": it.cost,
                "recommended": it.recommended,
                "valid": it.valid,
                "error": it.error,
            }
            if it.stats is not None:
                d.update(
                    escalation_probability=it.stats.escalation_probability,
                    mean_r_horizon=it.stats.mean_r_horizon,
                    tau=tau_dict(it.stats.tau),
                    times=[float(x) for x in it.stats.times],
                    r_band=[[float(v) for v in row] for row in it.stats.r_band],
                    st_band=[[float(v) for v in row] for row in it.stats.st_band],
                )
            items.append(d)
        return {
            "timestamp": self.timestamp,
            "recommended_id": self.recommended_id,
            "follow_up_id": self.follow_up_id,
            "items": items,
            "chain": self.chain.to_json_dict() if self.chain else None,
        }


def select_intervention(
    candidates: Sequence[InterventionSpec],
    frame: ValidatedFrame,
    cal: CalibrationProfile,
    sp: SurrogateParams,
    scene: Scene | None = None,
    danger: DangerSpec | None = None,
    with_chain: bool = True,
) -> ScenarioResult:
    """Rank candidates by ensemble cost and recommend the argmin.

    The no-op is always evaluated even when absent from ``candidates`` so the
    recommendation is made against a do-nothing baseline. Ties break toward
    the smaller execution delay, then the lexically smaller id.
    """
    danger = danger or DangerSpec()
    pool: list[InterventionSpec] = []
    if not any(c.id == "no-op" for c in candidates):
        pool.append(no_op())
    pool.extend(candidates)

    items: list[ScenarioItem] = []
    for u in pool:
        try:
            stats = run_ensemble(frame, cal, sp, u, scene=scene, danger=danger)
            items.append(ScenarioItem(u, stats, cost_J(stats, cal, sp.horizon),
                                      recommended=False, valid=True))
        except EnsembleInvalid as exc:
            items.append(ScenarioItem(u, None, float("inf"),
                                      recommended=False, valid=False, error=str(exc)))

    valid = [it for it in items if it.valid]
    if not valid:
        raise EnsembleInvalid("every candidate ensemble was invalid")

    def order(it: ScenarioItem):
        return (it.cost, it.intervention.execution_delay, it.intervention.id)

    ranked = sorted(valid, key=order)
    winner = ranked[0].intervention.id
    follow = ranked[1].intervention.id if len(ranked) > 1 else None
    items = [replace(it, recommended=(it.intervention.id == winner)) for it in items]

    chain = None
    if with_chain:
        from .core import normalize_frame

        norm = normalize_frame(frame.frame, cal)
        W = build_interaction_matrix(frame, cal, scene)
        ff = compute_instant_fields(frame, norm, W, cal, scene, with_grid=False)
        spec = power_iteration(W)
        ff = replace(ff, stability=spec.stability_margin)
        sv = assemble_state_vector(ff, cal.attention_aggregator)
        crit = evaluate_criticality(sv, cal)
        result_tmp = ScenarioResult(frame.timestamp, tuple(items), winner, follow, None)
        chain = causal_chain(frame, W, ff, spec, crit, result_tmp, cal)

    return ScenarioResult(frame.timestamp, tuple(items), winner, follow, chain)


# ---------------------------------------------------------------------------
# Causal chain
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChainStep:
    index: int
    name: str
    summary: str
    values: tuple[tuple[str, float | str], ...] = ()

    def to_json_dict(self) -> dict:
        return {"index": self.index, "name": self.name,
                "summary": self.summary, "values": dict(self.values)}


@dataclass(frozen=True)
class CausalChain:
    steps: tuple[ChainStep, ...]
    limitations: tuple[str, ...]
    truncated: bool = False

    def to_json_dict(self) -> dict:
        return {
            "steps": [s.to_json_dict() for s in self.steps],
            "limitations": list(self.limitations),
            "truncated": self.truncated,
        }

    def render(self) -> str:
        lines = [f"{s.index}. {s.name}: {s.summary}" for s in self.steps]
        if self.truncated:
            lines.append("   (forecast steps unavailable: no scenario analysis attached)")
        lines.append("Limitations:")
        lines.extend(f"  - {l}" for l in self.limitations)
        return "\n".join(lines)


def _fmt_tau(tau: TauEstimate) -> str:
    if tau.tau is None:
        return "no predicted entry"
    hi = "inf" if math.isinf(tau.tau_hi) else f"{tau.tau_hi:.0f}s"
    return f"{tau.tau:.0f}s [{tau.tau_lo:.0f}s, {hi}]"


def causal_chain(
    frame: ValidatedFrame,
    W: InteractionMatrix,
    ff: FieldFrame,
    spectral,
    crit: CriticalityReport,
    scenario: ScenarioResult | None,
    cal: CalibrationProfile,
) -> CausalChain:
    """Ordered, numerically grounded explanation of the current assessment
    and of the recommended intervention's mechanism."""
    from .core import normalize_frame

    norm = normalize_frame(frame.frame, cal)
    ids = frame.frame.agent_ids()

    limitations = (
        "Signal content is not modeled; high kinematic activity can be contextually appropriate.",
        "Forecast entry times carry ensemble uncertainty; act on the interval, not the point value.",
        "Calibration baselines assume the deployment context resembles the baseline recordings.",
        "R measures proximity to the transition boundary only, not what unfolds beyond it.",
    )

    z_by_agent = []
    for s in norm:
        for channel, z in (("speed", s.speed_z), ("gesture", s.gesture_z)):
            z_by_agent.append((abs(z), s.agent_id, channel, z))
    z_top = max(z_by_agent)
    if z_top[0] < 2.0:
        steps = (ChainStep(1, "observable",
                           "no micro-signal deviates beyond 2 std from baseline; system reads as stable",
                           (("max_abs_z", z_top[0]),)),)
        return CausalChain(steps, limitations, truncated=False)

    steps: list[ChainStep] = []
    steps.append(ChainStep(
        1, "observable",
        f"agent {z_top[1]} {z_top[2]} at {z_top[3]:+.2f} std from baseline",
        (("agent", str(z_top[1])), ("channel", z_top[2]), ("z", z_top[3])),
    ))

    ti = int(np.argmax(ff.tension))
    tmin = float(np.min(ff.tension))
    ratio = float(ff.tension[ti] / max(tmin, 1e-9))
    steps.append(ChainStep(
        2, "intensity",
        f"tension peaks at agent {ids[ti]} ({ff.tension[ti]:.2f}), "
        f"{ratio:.0f}x the calmest agent",
        (("agent", str(ids[ti])), ("tension_max", float(ff.tension[ti])),
         ("tension_min", tmin), ("ratio", ratio)),
    ))

    i, j = np.unravel_index(int(np.argmax(W.weights)), W.weights.shape)
    steps.append(ChainStep(
        3, "structure",
        f"dominant influence channel {ids[j]} -> {ids[i]} at weight {W.weights[i, j]:.3f}",
        (("source", str(ids[j])), ("receiver", str(ids[i])),
         ("weight", float(W.weights[i, j]))),
    ))

    lam = spectral.lambda_max
    regime = "perturbations amplify" if spectral.stability_margin < 0 else "perturbations decay"
    steps.append(ChainStep(
        4, "spectral",
        f"lambda_max = {lam:.3f}, St = {spectral.stability_margin:.3f} ({regime}); "
        f"relaxation time {spectral.relaxation_time:.2f}s; zone {crit.zone} at R = {crit.r_index:.3f}",
        (("lambda_max", lam), ("stability_margin", spectral.stability_margin),
         ("relaxation_time", spectral.relaxation_time),
         ("zone", crit.zone), ("r_index", crit.r_index)),
    ))

    if scenario is None:
        return CausalChain(tuple(steps), limitations, truncated=True)

    noop = scenario.item("no-op")
    steps.append(ChainStep(
        5, "forecast",
        f"without intervention: P(escalation) = {noop.stats.escalation_probability:.2f}, "
        f"time to threshold {_fmt_tau(noop.stats.tau)}",
        (("p_escalation", noop.stats.escalation_probability),
         ("tau", noop.stats.tau.tau if noop.stats.tau.tau is not None else "none")),
    ))

    rec = scenario.item(scenario.recommended_id)
    mech_bits = []
    values: list[tuple[str, float | str]] = [("intervention", rec.intervention.id)]
    w_pred = None
    if rec.intervention.effects:
        dyn = MicroDynamics(frame, cal)
        for e in rec.intervention.effects:
            if e.channel == "gesture_setpoint" and e.target != "global":
                idx = list(ids).index(e.target)
                before = 1.0 + cal.beta_e * float(dyn.gesture[idx])
                after = 1.0 + cal.beta_e * float(e.value)
                mech_bits.append(
                    f"agent {e.target} expressivity factor {before:.2f} -> {after:.2f}"
                )
                values.append((f"factor_before_{e.target}", before))
                values.append((f"factor_after_{e.target}", after))
                dyn.gesture[idx] = float(e.value)
            elif e.channel == "orientation":
                mech_bits.append(f"orientations steered ({e.target} -> {e.value})")
        w_pred = power_iteration(dyn.build_w())
        values.append(("lambda_max_predicted", w_pred.lambda_max))
        mech_bits.append(f"predicted lambda_max {lam:.3f} -> {w_pred.lambda_max:.3f}")
    steps.append(ChainStep(
        6, "mechanism",
        f"{rec.intervention.id}: " + ("; ".join(mech_bits) if mech_bits else "no parameter changes"),
        tuple(values),
    ))

    steps.append(ChainStep(
        7, "effect",
        f"expected R at horizon {noop.stats.mean_r_horizon:.3f} -> {rec.stats.mean_r_horizon:.3f}; "
        f"P(escalation) {noop.stats.escalation_probability:.2f} -> {rec.stats.escalation_probability:.2f}; "
        f"time to threshold {_fmt_tau(noop.stats.tau)} -> {_fmt_tau(rec.stats.tau)}",
        (("r_horizon_noop", noop.stats.mean_r_horizon),
         ("r_horizon_recommended", rec.stats.mean_r_horizon),
         ("p_noop", noop.stats.escalation_probability),
         ("p_recommended", rec.stats.escalation_probability)),
    ))

    return CausalChain(tuple(steps), limitations, truncated=False)
