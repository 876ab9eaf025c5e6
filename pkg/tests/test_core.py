import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groupfields import (
    AgentMicroState,
    CalibrationProfile,
    FrameRejected,
    MicroStateFrame,
    Scene,
    frame_from_json,
    frame_to_json,
    normalize_agent,
    validate_frame,
)
from groupfields.core import wrap_angle


def agent(aid=1, pos=(1.0, 1.0), vel=(0.0, 0.0), theta=0.0, gesture=0.0,
          prox=0.0, conf=1.0):
    return AgentMicroState(aid, pos, vel, theta, gesture, prox, conf)


# ---------------------------------------------------------------------------
# Calibration baselines: derived once by solving two-point z-score systems,
# with the third sample as a residual check; the solved values are the
# shipped negotiation defaults.
# ---------------------------------------------------------------------------

def test_speed_baseline_solves_reference_zscores(cal):
    a = np.array([[1.0, 1.30], [1.0, 2.40]])
    b = np.array([0.158, 0.224])
    mu, sigma = np.linalg.solve(a, b)
    assert mu == pytest.approx(0.08, abs=1e-12)
    assert sigma == pytest.approx(0.06, abs=1e-12)
    assert (0.0 - mu) / sigma == pytest.approx(-1.33, abs=5e-3)
    assert (cal.mu_v, cal.sigma_v) == (0.08, 0.06)


def test_gesture_baseline_solves_reference_zscores(cal):
    a = np.array([[1.0, 7.86], [1.0, 3.86]])
    b = np.array([3.20, 1.80])
    mu, sigma = np.linalg.solve(a, b)
    assert mu == pytest.approx(0.449, abs=1e-12)
    assert sigma == pytest.approx(0.35, abs=1e-12)
    assert (0.05 - mu) / sigma == pytest.approx(-1.14, abs=1e-9)
    assert (cal.mu_e, cal.sigma_e) == (0.449, 0.35)


def test_normalize_reference_speed(cal):
    a = agent(vel=(0.158, 0.0))
    assert normalize_agent(a, cal).speed_z == pytest.approx(1.30, abs=1e-9)


def test_normalize_at_baseline_is_zero(cal):
    a = agent(vel=(cal.mu_v, 0.0), gesture=cal.mu_e)
    ns = normalize_agent(a, cal)
    assert ns.speed_z == pytest.approx(0.0, abs=1e-12)
    assert ns.gesture_z == pytest.approx(0.0, abs=1e-12)


def test_normalize_gesture_example():
    c = CalibrationProfile(mu_e=0.45, sigma_e=0.35)
    z = normalize_agent(agent(gesture=3.20), c).gesture_z
    assert z == pytest.approx(7.857, abs=1e-3)


@given(lam=st.floats(-50, 50), dev=st.floats(0.001, 5))
def test_normalize_is_affine(lam, dev):
    c = CalibrationProfile()
    a = agent(vel=(c.mu_v + lam * dev, 0.0))
    z = normalize_agent(a, c).speed_z
    # speed is |v|, so the z-score is affine in the magnitude deviation
    expected = (abs(c.mu_v + lam * dev) - c.mu_v) / c.sigma_v
    assert z == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_normalized_state_carries_proxemic_and_confidence(cal):
    ns = normalize_agent(agent(prox=0.4, conf=0.7), cal)
    assert ns.proxemic == 0.4
    assert ns.confidence == 0.7


# ---------------------------------------------------------------------------
# Frame validation
# ---------------------------------------------------------------------------

def test_golden_fixture_validates_clean(golden):
    assert golden.warnings == ()
    assert golden.out_of_scene == ()
    assert golden.n == 7


def test_duplicate_agent_id_rejected(scene):
    f = MicroStateFrame(0.0, (agent(aid=3), agent(aid=3, pos=(2.0, 2.0))))
    with pytest.raises(FrameRejected) as err:
        validate_frame(f, scene)
    assert "3" in str(err.value)


def test_timestamp_regression_rejected(scene):
    f = MicroStateFrame(1.0, (agent(),))
    with pytest.raises(FrameRejected):
        validate_frame(f, scene, prev_timestamp=2.0)


def test_nan_rejected(scene):
    f = MicroStateFrame(0.0, (agent(vel=(float("nan"), 0.0)),))
    with pytest.raises(FrameRejected):
        validate_frame(f, scene)


def test_confidence_clamped_with_warning(scene):
    vf = validate_frame(MicroStateFrame(0.0, (agent(conf=1.2),)), scene)
    assert vf.agents[0].confidence == 1.0
    assert any("confidence" in w for w in vf.warnings)


def test_orientation_wrapped(scene):
    vf = validate_frame(MicroStateFrame(0.0, (agent(theta=7.0),)), scene)
    assert -math.pi < vf.agents[0].orientation <= math.pi
    assert vf.agents[0].orientation == pytest.approx(wrap_angle(7.0))


def test_negative_gesture_clamped(scene):
    vf = validate_frame(MicroStateFrame(0.0, (agent(gesture=-1.0),)), scene)
    assert vf.agents[0].gesture == 0.0


def test_out_of_scene_flagged_not_dropped(scene):
    vf = validate_frame(MicroStateFrame(0.0, (agent(pos=(99.0, 1.0)),)), scene)
    assert vf.n == 1
    assert vf.out_of_scene == (1,)


def test_validation_is_idempotent(scene):
    f = MicroStateFrame(0.0, (agent(conf=1.2, theta=7.0, gesture=-0.5),))
    once = validate_frame(f, scene)
    twice = validate_frame(once.frame, scene)
    assert twice.frame == once.frame
    assert twice.warnings == ()


# ---------------------------------------------------------------------------
# Wire format round trip
# ---------------------------------------------------------------------------

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=60)
@given(
    ts=finite,
    px=finite, py=finite, vx=finite, vy=finite,
    theta=st.floats(-math.pi + 1e-9, math.pi),
    gesture=st.floats(0, 1e6),
    prox=st.floats(0, 1),
    conf=st.floats(0, 1),
)
def test_frame_roundtrip_bit_exact(ts, px, py, vx, vy, theta, gesture, prox, conf):
    f = MicroStateFrame(ts, (AgentMicroState("a", (px, py), (vx, vy), theta,
                                             gesture, prox, conf, "role"),))
    assert frame_from_json(frame_to_json(f)) == f


def test_golden_roundtrip(golden):
    assert frame_from_json(frame_to_json(golden.frame)) == golden.frame


# ---------------------------------------------------------------------------
# Profiles and scene validation
# ---------------------------------------------------------------------------

def test_profile_rejects_bad_sigma():
    with pytest.raises(ValueError):
        CalibrationProfile(sigma_v=0.0)


def test_profile_rejects_bad_zone_order():
    with pytest.raises(ValueError):
        CalibrationProfile(zone_thresholds=(0.7, 0.3))


def test_profile_rejects_all_zero_gammas():
    with pytest.raises(ValueError):
        CalibrationProfile(gamma_v=0.0, gamma_e=0.0, gamma_p=0.0)


def test_profile_json_roundtrip(cal):
    again = CalibrationProfile.from_json(cal.to_json())
    assert again == cal


def test_scene_rejects_empty_bounds():
    with pytest.raises(ValueError):
        Scene(bounds=(0, 0, 0, 5))


def test_scene_rejects_polygon_outside_bounds():
    with pytest.raises(ValueError):
        Scene(bounds=(0, 0, 4, 4), obstacles=(((1, 1), (9, 1), (9, 2)),))


def test_scene_occlusion_helper():
    s = Scene(bounds=(0, 0, 10, 10),
              obstacles=(((4, 4), (6, 4), (6, 6), (4, 6)),))
    assert s.segment_occluded((1, 5), (9, 5))
    assert not s.segment_occluded((1, 1), (9, 1))
