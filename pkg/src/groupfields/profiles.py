"""Vertical configuration presets.

One engine, several domains: a vertical fixes the calibration profile and the
danger-set definition. The negotiation profile is the tuned default (its
baselines reproduce the canonical fixture); the other verticals ship as
starting points with the right structural emphasis and must be re-baselined
before real use.
"""
from __future__ import annotations

from .core import CalibrationProfile
from .criticality import DangerSpec

__all__ = ["NEGOTIATION", "VERTICALS", "danger_for", "profile_for"]

NEGOTIATION = CalibrationProfile()

CROWD_SAFETY = CalibrationProfile(
    vertical_name="crowd_safety",
    mu_v=0.9, sigma_v=0.5,
    mu_e=0.3, sigma_e=0.25,
    gamma_v=0.45, gamma_e=0.20, gamma_p=0.35,
    h_r=3.5, h_theta=1.4, beta_e=0.3,
    comfort_distance=0.6,
    r_weights=(0.35, 0.25, 0.15, 0.25, 0.10),
    smoothing_h=2.0,
    ews_window=20.0,
)

EDUCATION = CalibrationProfile(
    vertical_name="education",
    mu_v=0.05, sigma_v=0.05,
    mu_e=0.6, sigma_e=0.4,
    gamma_v=0.20, gamma_e=0.60, gamma_p=0.20,
    h_r=4.0, h_theta=0.9, beta_e=0.4,
    ews_window=60.0,
)

CRISIS_COMMAND = CalibrationProfile(
    vertical_name="crisis_command",
    mu_v=0.15, sigma_v=0.10,
    mu_e=0.8, sigma_e=0.5,
    gamma_v=0.30, gamma_e=0.50, gamma_p=0.20,
    ews_window=45.0,
)

CLINICAL_GROUPS = CalibrationProfile(
    vertical_name="clinical_groups",
    mu_v=0.05, sigma_v=0.05,
    mu_e=0.4, sigma_e=0.3,
    gamma_v=0.25, gamma_e=0.50, gamma_p=0.25,
    ews_window=120.0,
)

VERTICALS: dict[str, CalibrationProfile] = {
    p.vertical_name: p
    for p in (NEGOTIATION, CROWD_SAFETY, EDUCATION, CRISIS_COMMAND, CLINICAL_GROUPS)
}

_DANGER: dict[str, DangerSpec] = {
    # negotiation: sustained raw criticality
    "negotiation": DangerSpec(r_crit=0.60),
    # crowd: spectral margin collapse or a tension-gradient spike counts alone
    "crowd_safety": DangerSpec(r_crit=0.55, st_crit=-4.0, rule="any"),
    # education: attention collapse shows up as criticality drift
    "education": DangerSpec(r_crit=0.65),
    # crisis command: risk plus hard tension ceiling
    "crisis_command": DangerSpec(r_crit=0.60, t_crit=40.0, rule="any"),
    # clinical: tension rise is the primary episode precursor
    "clinical_groups": DangerSpec(r_crit=0.60, t_crit=30.0, rule="any"),
}


def profile_for(vertical: str) -> CalibrationProfile:
    try:
        return VERTICALS[vertical]
    except KeyError:
        raise KeyError(f"unknown vertical {vertical!r}; available: {sorted(VERTICALS)}")


def danger_for(vertical: str) -> DangerSpec:
    try:
        return _DANGER[vertical]
    except KeyError:
        raise KeyError(f"unknown vertical {vertical!r}; available: {sorted(_DANGER)}")
