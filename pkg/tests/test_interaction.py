import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groupfields import (
    AgentMicroState,
    CalibrationProfile,
    MicroStateFrame,
    Scene,
    bearing_gap,
    build_interaction_matrix,
    graph_summaries,
    kernel_eval,
    validate_frame,
)
from groupfields.interaction import InteractionMatrix, matrix_from_json_dict, matrix_to_json_dict


def agent(aid, pos, theta=0.0, gesture=0.0, conf=1.0, vel=(0.0, 0.0)):
    return AgentMicroState(aid, pos, vel, theta, gesture, 0.0, conf)


def frame_of(*agents, t=0.0):
    scene = Scene(bounds=(-100.0, -100.0, 100.0, 100.0))
    return validate_frame(MicroStateFrame(t, tuple(agents)), scene)


# ---------------------------------------------------------------------------
# Bearing gap
# ---------------------------------------------------------------------------

def test_bearing_gap_reference_pair():
    a2 = agent(2, (4.0, 3.8), theta=math.pi)
    a1 = agent(1, (1.5, 2.5))
    assert bearing_gap(a2, a1) == pytest.approx(0.479, abs=1e-3)


def test_bearing_gap_facing_target_is_zero():
    i = agent(1, (0.0, 0.0), theta=math.atan2(1.0, 2.0))
    j = agent(2, (2.0, 1.0))
    assert bearing_gap(i, j) == pytest.approx(0.0, abs=1e-12)


def test_bearing_gap_orthogonal_pair():
    a2 = agent(2, (4.0, 3.8), theta=math.pi)
    a5 = agent(5, (4.0, 1.2))
    assert bearing_gap(a2, a5) == pytest.approx(1.571, abs=1e-3)


def test_bearing_gap_coincident_positions_degenerates_to_zero():
    assert bearing_gap(agent(1, (1.0, 1.0), theta=2.0), agent(2, (1.0, 1.0))) == 0.0


def test_bearing_gap_range():
    rng = np.random.default_rng(5)
    for _ in range(200):
        i = agent(1, tuple(rng.uniform(-5, 5, 2)), theta=rng.uniform(-math.pi, math.pi))
        j = agent(2, tuple(rng.uniform(-5, 5, 2)))
        g = bearing_gap(i, j)
        assert 0.0 <= g <= math.pi


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

def test_kernel_proximity_reference():
    assert kernel_eval("proximity", 2.82, 2.50) == pytest.approx(0.530, abs=5e-3)


def test_kernel_proximity_cross_check():
    assert kernel_eval("proximity", 2.6, 2.50) == pytest.approx(0.582, abs=5e-3)


def test_kernel_peak_at_zero():
    assert kernel_eval("proximity", 0.0, 1.0) == 1.0
    assert kernel_eval("alignment", 0.0, 0.5) == 1.0


def test_kernel_alignment_reference():
    assert kernel_eval("alignment", 1.571, 1.047) == pytest.approx(0.325, abs=5e-3)


def test_kernel_rejects_bad_args():
    with pytest.raises(ValueError):
        kernel_eval("nope", 1.0, 1.0)
    with pytest.raises(ValueError):
        kernel_eval("proximity", 1.0, 0.0)


# ---------------------------------------------------------------------------
# Matrix construction: anchors and the independent oracle
# ---------------------------------------------------------------------------

def test_anchor_weights(golden, cal):
    w = build_interaction_matrix(golden, cal).weights
    assert w[1, 0] == pytest.approx(1.167, abs=0.010)   # influence of 1 on 2
    assert w[1, 4] == pytest.approx(0.234, abs=0.010)   # influence of 5 on 2


def test_engine_matches_brute_force_oracle(golden, cal, oracle_w):
    w = build_interaction_matrix(golden, cal).weights
    assert np.allclose(w, oracle_w, atol=1e-12)


def test_inconsistent_source_entries_pinned_to_oracle(golden, cal, oracle_w):
    # The source trace prints mutually inconsistent kernel values for these
    # two entries (see docs/FIXTURE_NOTES.md); the dense recomputation is the
    # authority and its values are pinned here.
    w = build_interaction_matrix(golden, cal).weights
    assert w[4, 1] == pytest.approx(oracle_w[4, 1], abs=1e-12)
    assert w[4, 1] == pytest.approx(0.644064, abs=1e-3)
    assert w[5, 0] == pytest.approx(0.644303, abs=1e-3)


def test_asymmetry_witness(golden, cal):
    w = build_interaction_matrix(golden, cal).weights
    assert w[4, 1] > w[1, 4]


def test_zero_diagonal(golden, cal):
    w = build_interaction_matrix(golden, cal).weights
    assert np.all(np.diagonal(w) == 0.0)


def test_empty_frame_rejected(cal, scene):
    vf = validate_frame(MicroStateFrame(0.0, ()), scene)
    with pytest.raises(ValueError):
        build_interaction_matrix(vf, cal)


def test_single_agent_zero_matrix(cal):
    vf = frame_of(agent(1, (0.0, 0.0)))
    m = build_interaction_matrix(vf, cal)
    assert m.weights.shape == (1, 1)
    assert m.weights[0, 0] == 0.0


def test_back_to_back_symmetry(cal):
    d = cal.h_r
    a = agent(1, (0.0, 0.0), theta=math.pi)
    b = agent(2, (d, 0.0), theta=0.0)
    w = build_interaction_matrix(frame_of(a, b), cal).weights
    expected = cal.alpha_w * math.exp(-0.5) * kernel_eval("alignment", math.pi, cal.h_theta)
    assert w[0, 1] == pytest.approx(expected, rel=1e-12)
    assert w[1, 0] == pytest.approx(expected, rel=1e-12)


def test_coincident_pair_flagged(cal):
    vf = frame_of(agent(1, (1.0, 1.0)), agent(2, (1.0, 1.0)))
    m = build_interaction_matrix(vf, cal)
    assert (0, 1) in m.degenerate_pairs and (1, 0) in m.degenerate_pairs


# ---------------------------------------------------------------------------
# Structural invariants
# ---------------------------------------------------------------------------

@settings(max_examples=50)
@given(r1=st.floats(0.5, 8.0), dr=st.floats(0.01, 5.0))
def test_distance_monotonicity(r1, dr):
    cal = CalibrationProfile()
    i = agent(1, (0.0, 0.0), theta=0.0)
    near = agent(2, (r1, 0.0))
    far = agent(2, (r1 + dr, 0.0))
    w_near = build_interaction_matrix(frame_of(i, near), cal).weights[0, 1]
    w_far = build_interaction_matrix(frame_of(i, far), cal).weights[0, 1]
    assert w_far <= w_near + 1e-15


@settings(max_examples=50)
@given(e1=st.floats(0.0, 10.0), de=st.floats(0.001, 10.0))
def test_gesture_monotonicity(e1, de):
    cal = CalibrationProfile()
    i = agent(1, (0.0, 0.0))
    w_lo = build_interaction_matrix(
        frame_of(i, agent(2, (1.0, 0.5), gesture=e1)), cal).weights[0, 1]
    w_hi = build_interaction_matrix(
        frame_of(i, agent(2, (1.0, 0.5), gesture=e1 + de)), cal).weights[0, 1]
    assert w_hi >= w_lo


@settings(max_examples=50)
@given(lam=st.floats(0.0, 1.0))
def test_confidence_linearity(lam):
    cal = CalibrationProfile()
    base = [agent(1, (0.0, 0.0)), agent(2, (1.0, 0.5), conf=1.0), agent(3, (0.5, 1.5))]
    w1 = build_interaction_matrix(frame_of(*base), cal).weights
    scaled = [base[0], agent(2, (1.0, 0.5), conf=lam), base[2]]
    w2 = build_interaction_matrix(frame_of(*scaled), cal).weights
    assert np.allclose(w2[:, 1], lam * w1[:, 1], atol=1e-14)
    assert np.allclose(w2[:, [0, 2]], w1[:, [0, 2]], atol=1e-14)


def test_occlusion_zeroes_blocked_pairs(cal):
    scene = Scene(bounds=(0, 0, 10, 10), obstacles=(((4, 4), (6, 4), (6, 6), (4, 6)),))
    a = agent(1, (1.0, 5.0))
    b = agent(2, (9.0, 5.0))
    c = agent(3, (1.0, 1.0))
    vf = validate_frame(MicroStateFrame(0.0, (a, b, c)), scene)
    w = build_interaction_matrix(vf, cal, scene).weights
    assert w[0, 1] == 0.0 and w[1, 0] == 0.0
    assert w[0, 2] > 0.0 and w[2, 0] > 0.0


# ---------------------------------------------------------------------------
# Graph summaries and export
# ---------------------------------------------------------------------------

def test_summaries_single_agent(cal):
    m = build_interaction_matrix(frame_of(agent(1, (0.0, 0.0))), cal)
    s = graph_summaries(m)
    assert s.total_weight == 0.0
    assert s.in_strength[0] == 0.0 and s.out_strength[0] == 0.0


def test_summaries_uniform_graph():
    w = np.ones((3, 3)) - np.eye(3)
    m = InteractionMatrix(0.0, (1, 2, 3), w)
    s = graph_summaries(m)
    assert np.allclose(s.in_strength, 2.0)
    assert np.allclose(s.out_strength, 2.0)
    assert s.total_weight == pytest.approx(6.0)


def test_golden_strength_ordering(golden, cal, oracle_w):
    # Pinned from the dense oracle: the team-A lead's column edges out the
    # facilitator's (they sit centrally); see docs/FIXTURE_NOTES.md.
    s = graph_summaries(build_interaction_matrix(golden, cal))
    cols = oracle_w.sum(axis=0)
    assert np.allclose(s.in_strength, cols, atol=1e-12)
    assert int(np.argmax(s.in_strength)) == 1
    assert s.in_strength[0] == pytest.approx(sorted(cols)[-2], abs=1e-12)


def test_matrix_json_roundtrip(golden, cal):
    m = build_interaction_matrix(golden, cal)
    again = matrix_from_json_dict(matrix_to_json_dict(m))
    assert again.agent_order == m.agent_order
    assert np.allclose(again.weights, m.weights, atol=0)


def test_matrix_rejects_negative_weights():
    with pytest.raises(ValueError):
        InteractionMatrix(0.0, (1, 2), np.array([[0.0, -1.0], [0.0, 0.0]]))


def test_matrix_rejects_nonzero_diagonal():
    with pytest.raises(ValueError):
        InteractionMatrix(0.0, (1, 2), np.array([[0.5, 0.0], [0.0, 0.0]]))
