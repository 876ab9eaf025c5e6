"""The decision layer: criticality function g, index R, zones, and
time-to-threshold estimates from forecast ensembles.

R compresses proximity to the dangerous region into one monotone scalar. It
is a summary, not a substitute for the stability margin: a frame can sit in
the green zone while St is already negative, and the report surfaces both.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import CalibrationProfile
from .fields import IX_B, IX_N, IX_ST, IX_T, StateVector
from .spectral import EwsReport

__all__ = [
    "DangerSpec",
    "CriticalityReport",
    "ForecastPath",
    "TauEstimate",
    "criticality_g",
    "criticality_index",
    "classify_zone",
    "evaluate_criticality",
    "time_to_threshold",
]


@dataclass(frozen=True)
class DangerSpec:
    """Predicate defining the dangerous state set.

    Active criteria: raw criticality at or above ``r_crit``, stability margin
    at or below ``st_crit``, mean tension at or above ``t_crit``. ``rule``
    decides whether any one criterion suffices or all must hold.
    """

    r_crit: float | None = 0.60
    st_crit: float | None = None
    t_crit: float | None = None
    rule: str = "any"

    def __post_init__(self):
        if self.r_crit is None and self.st_crit is None and self.t_crit is None:
            raise ValueError("danger spec needs at least one active criterion")
        for v in (self.r_crit, self.st_crit, self.t_crit):
            if v is not None and not math.isfinite(v):
                raise ValueError("danger thresholds must be finite")
        if self.rule not in ("any", "all"):
            raise ValueError(f"unknown combination rule {self.rule!r}")

    def contains(self, x: StateVector, r_raw: float) -> bool:
        checks = []
        if self.r_crit is not None:
            checks.append(r_raw >= self.r_crit)
        if self.st_crit is not None:
            checks.append(x[IX_ST] <= self.st_crit)
        if self.t_crit is not None:
            checks.append(x[IX_T] >= self.t_crit)
        return any(checks) if self.rule == "any" else all(checks)


@dataclass(frozen=True)
class CriticalityReport:
    g_value: float
    r_raw: float                       # clamped g, mode-independent
    r_index: float                     # after the configured squash mode
    zone: str                          # green | amber | red
    contributions: tuple[tuple[str, float], ...]
    st_red_flag: bool                  # negative stability margin, never hidden by the zone
    tau: float | None = None
    tau_bounds: tuple[float, float] | None = None

    def with_tau(self, tau: float | None, bounds: tuple[float, float]) -> "CriticalityReport":
        return replace(self, tau=tau, tau_bounds=bounds)


def criticality_g(
    x: StateVector,
    cal: CalibrationProfile,
    ews: EwsReport | None = None,
) -> tuple[float, tuple[tuple[str, float], ...]]:
    """Empirical proximity-to-boundary score.

    g = a1 / (|St| + eps) + a2 * T_mean / t_scale + a3 * N / n_scale
        + a4 * B_max / b_scale

    Each term tracks a known early-warning channel: critical slowing down,
    kinematic intensity, fluctuation growth, spatial gradient growth. The
    magnitude |St| keeps the first term a positive proximity measure on both
    sides of the stability boundary; eps guards the pole. The optional EWS
    report is carried for context only and does not enter the formula.
    """
    a1, a2, a3, a4, eps = cal.r_weights
    del ews
    terms = (
        ("stability", a1 / (abs(x[IX_ST]) + eps)),
        ("tension", a2 * x[IX_T] / cal.t_norm_scale),
        ("noise", a3 * x[IX_N] / cal.n_norm_scale),
        ("boundary", a4 * x[IX_B] / cal.b_norm_scale),
    )
    return float(sum(v for _, v in terms)), terms


def criticality_index(
    g_value: float,
    mode: str = "identity",
    k: float = 4.0,
    g0: float = 0.5,
) -> float:
    """Squash g into [0, 1]; strictly monotone in g under either mode."""
    if mode == "identity":
        return min(1.0, max(0.0, g_value))
    if mode == "logistic":
        if k <= 0:
            raise ValueError("logistic slope must be positive")
        return 1.0 / (1.0 + math.exp(-k * (g_value - g0)))
    raise ValueError(f"unknown criticality mode {mode!r}")


def classify_zone(r: float, cal: CalibrationProfile) -> str:
    green_max, amber_max = cal.zone_thresholds
    if r < green_max:
        return "green"
    if r < amber_max:
        return "amber"
    return "red"


def evaluate_criticality(
    x: StateVector,
    cal: CalibrationProfile,
    ews: EwsReport | None = None,
) -> CriticalityReport:
    """Full decision-layer readout for one state vector."""
    g, contributions = criticality_g(x, cal, ews)
    r_raw = criticality_index(g, "identity")
    r_index = criticality_index(g, cal.risk_mode, cal.logistic_k, cal.logistic_g0)
    return CriticalityReport(
        g_value=g,
        r_raw=r_raw,
        r_index=r_index,
        zone=classify_zone(r_index, cal),
        contributions=contributions,
        st_red_flag=x[IX_ST] < 0.0,
    )


# ---------------------------------------------------------------------------
# Time to threshold
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ForecastPath:
    """One forecast trajectory: offsets from now, states, and raw R values."""

    offsets: np.ndarray                # s, strictly increasing, first > 0 entry matters
    states: tuple[StateVector, ...]
    r_raw: np.ndarray

    def first_entry(self, danger: DangerSpec) -> float:
        for dt, x, r in zip(self.offsets, self.states, self.r_raw):
            if dt <= 0.0:
                continue
            if danger.contains(x, float(r)):
                return float(dt)
        return float("inf")


@dataclass(frozen=True)
class TauEstimate:
    tau: float | None                  # median entry time over entering paths
    tau_lo: float                      # 10th percentile of entering paths
    tau_hi: float                      # 90th percentile, inf when many never enter
    entering_fraction: float
    entry_times: np.ndarray            # per path, inf when never entering


def time_to_threshold(
    paths: Sequence[ForecastPath],
    danger: DangerSpec,
) -> TauEstimate:
    """First-entry statistics of a forecast ensemble into the danger set.

    tau is the median over entering trajectories (robust to the heavy
    never-entering tail). The lower bound is the 10th percentile of entering
    times; the upper bound is the 90th percentile over all trajectories with
    never-entering ones counted as +inf, so it degrades to +inf honestly.
    """
    if len(paths) == 0:
        raise ValueError("time_to_threshold needs at least one trajectory")
    entries = np.array([p.first_entry(danger) for p in paths])
    entering = entries[np.isfinite(entries)]
    frac = entering.size / entries.size
    if entering.size == 0:
        return TauEstimate(None, float("inf"), float("inf"), 0.0, entries)
    tau = float(np.median(entering))
    tau_lo = float(np.percentile(entering, 10))
    # nearest-rank upper percentile: linear interpolation between two +inf
    # order statistics would produce NaN
    tau_hi = float(np.percentile(entries, 90, method="higher"))
    return TauEstimate(tau, tau_lo, tau_hi, float(frac), entries)
