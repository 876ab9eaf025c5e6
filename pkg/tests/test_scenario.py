import math
from dataclasses import replace

import numpy as np
import pytest

from groupfields import (
    AgentMicroState,
    CalibrationProfile,
    DangerSpec,
    EnsembleInvalid,
    MicroStateFrame,
    Scene,
    SurrogateParams,
    build_interaction_matrix,
    causal_chain,
    cost_J,
    golden_interventions,
    no_op,
    power_iteration,
    run_ensemble,
    select_intervention,
    simulate_trajectory,
    validate_frame,
)
from groupfields.scenario import EffectSpec, InterventionSpec

DANGER = DangerSpec(r_crit=0.60)
FAST = SurrogateParams(ensemble_size=8, horizon=30.0)


def baseline_frame(cal, n=4):
    scene = Scene()
    agents = tuple(
        AgentMicroState(i + 1, (2.0 + i, 2.0 + 0.3 * i),
                        (cal.mu_v, 0.0), 0.3 * i, cal.mu_e, 0.0, 1.0)
        for i in range(n)
    )
    return validate_frame(MicroStateFrame(0.0, agents), scene), scene


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------

def test_effect_rejects_unknown_channel():
    with pytest.raises(ValueError):
        EffectSpec(target=1, channel="volume", value=1.0)


def test_intervention_rejects_negative_delay():
    with pytest.raises(ValueError):
        InterventionSpec(id="x", execution_delay=-1.0)


def test_intervention_json_roundtrip():
    u = golden_interventions()[1]
    again = InterventionSpec.from_json_dict(u.to_json_dict())
    assert again == u


def test_surrogate_rejects_nondividing_dt():
    with pytest.raises(ValueError):
        SurrogateParams(dt=0.7, horizon=90.0).n_steps


def test_unknown_target_agent_rejected(golden, cal):
    bad = InterventionSpec(id="x", effects=(
        EffectSpec(target="ghost", channel="gesture_setpoint", value=1.0),))
    with pytest.raises(ValueError):
        simulate_trajectory(golden, cal, FAST, bad, seed=1)


# ---------------------------------------------------------------------------
# Determinism and coupling
# ---------------------------------------------------------------------------

def test_same_seed_bit_identical(golden, cal, scene):
    a = simulate_trajectory(golden, cal, FAST, no_op(), seed=5, scene=scene)
    b = simulate_trajectory(golden, cal, FAST, no_op(), seed=5, scene=scene)
    assert np.array_equal(a.r_raw, b.r_raw)
    assert np.array_equal(a.st, b.st)
    assert np.array_equal(a.tension_mean, b.tension_mean)


def test_different_seed_differs(golden, cal, scene):
    a = simulate_trajectory(golden, cal, FAST, no_op(), seed=5, scene=scene)
    b = simulate_trajectory(golden, cal, FAST, no_op(), seed=6, scene=scene)
    assert not np.array_equal(a.r_raw, b.r_raw)


def test_zero_noise_collapses_bands(golden, cal, scene):
    sp = replace(FAST, sigma_noise=0.0)
    stats = run_ensemble(golden, cal, sp, no_op(), scene=scene, danger=DANGER)
    assert np.allclose(stats.r_band[0], stats.r_band[2], atol=1e-12)
    assert np.allclose(stats.st_band[0], stats.st_band[2], atol=1e-12)


def test_noop_baseline_fixed_point(cal):
    vf, scene = baseline_frame(cal)
    sp = replace(FAST, sigma_noise=0.0)
    tr = simulate_trajectory(vf, cal, sp, no_op(), seed=3, scene=scene)
    assert np.allclose(tr.tension_mean, 0.0, atol=1e-12)
    assert not tr.blown_up


# ---------------------------------------------------------------------------
# Intervention mechanics
# ---------------------------------------------------------------------------

def test_expressivity_factor_scaling(golden, cal):
    calm = golden_interventions()[0]
    before = 1.0 + cal.beta_e * 3.20
    after = 1.0 + cal.beta_e * float(calm.effects[0].value)
    assert before == pytest.approx(2.60, abs=1e-12)
    assert after == pytest.approx(1.20, abs=1e-12)
    assert after / before == pytest.approx(1.20 / 2.60, rel=1e-12)


def test_damping_reduces_lambda(golden, cal, oracle_lambda):
    damped = [
        a if a.agent_id != 1 else replace(a, gesture=0.40)
        for a in golden.agents
    ]
    vf = validate_frame(MicroStateFrame(0.0, tuple(damped)), Scene())
    lam = power_iteration(build_interaction_matrix(vf, cal)).lambda_max
    assert lam < oracle_lambda
    assert lam == pytest.approx(2.272646, abs=1e-4)    # dense-oracle pin


def test_deterministic_damping_never_increases_lambda_pathwise(golden, cal, scene):
    sp = replace(FAST, sigma_noise=0.0, horizon=40.0)
    calm = golden_interventions()[0]
    base = simulate_trajectory(golden, cal, sp, no_op(), seed=1, scene=scene)
    damped = simulate_trajectory(golden, cal, sp, calm, seed=1, scene=scene)
    lam_base = -base.st
    lam_damped = -damped.st
    assert np.all(lam_damped <= lam_base + 1e-9)


def test_gesture_setpoint_reached(golden, cal, scene):
    sp = SurrogateParams(sigma_noise=0.0, horizon=90.0)
    calm = golden_interventions()[0]
    tr = simulate_trajectory(golden, cal, sp, calm, seed=1, scene=scene,
                             collect_bundles=True)
    final_gesture = tr.frames[-1].agents[0].gesture
    assert final_gesture == pytest.approx(0.40, abs=0.1)


def test_blowup_truncates_and_flags(golden, cal, scene):
    wild = SurrogateParams(kappa=1.8, rho_contagion=3.0, sigma_noise=0.0,
                           sat_z=1e9, horizon=60.0)
    tr = simulate_trajectory(golden, cal, wild, no_op(), seed=2, scene=scene)
    assert tr.blown_up
    assert len(tr.states) == wild.n_steps + 1          # padded to full length


def test_ensemble_invalid_on_mass_blowup(golden, cal, scene):
    wild = SurrogateParams(kappa=1.8, rho_contagion=3.0, sigma_noise=0.0,
                           sat_z=1e9, horizon=60.0, ensemble_size=5)
    with pytest.raises(EnsembleInvalid):
        run_ensemble(golden, cal, wild, no_op(), scene=scene, danger=DANGER)


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------

def test_horizon_zero_escalation_indicator(golden, cal, scene):
    sp = replace(FAST, horizon=0.0)
    calm_stats = run_ensemble(golden, cal, sp, no_op(), scene=scene,
                              danger=DangerSpec(r_crit=0.99))
    assert calm_stats.escalation_probability == 0.0
    hot_stats = run_ensemble(golden, cal, sp, no_op(), scene=scene,
                             danger=DangerSpec(r_crit=0.01))
    assert hot_stats.escalation_probability == 1.0


def test_danger_whole_space_probability_one(golden, cal, scene):
    stats = run_ensemble(golden, cal, FAST, no_op(), scene=scene,
                         danger=DangerSpec(r_crit=0.0))
    assert stats.escalation_probability == 1.0


def test_cost_monotone_in_delay(golden, cal, scene):
    slow = InterventionSpec(id="later", execution_delay=20.0)
    fast = InterventionSpec(id="sooner", execution_delay=1.0)
    s_slow = run_ensemble(golden, cal, FAST, slow, scene=scene, danger=DANGER)
    s_fast = run_ensemble(golden, cal, FAST, fast, scene=scene, danger=DANGER)
    # both are effect-free, so the trajectories (and R) are identical
    assert s_slow.mean_r_horizon == pytest.approx(s_fast.mean_r_horizon, abs=1e-12)
    assert cost_J(s_slow, cal, FAST.horizon) > cost_J(s_fast, cal, FAST.horizon)


def test_select_single_noop(golden, cal, scene):
    res = select_intervention([], golden, cal, FAST, scene=scene, danger=DANGER,
                              with_chain=False)
    assert res.recommended_id == "no-op"
    assert res.follow_up_id is None


def test_select_tie_breaks_by_delay_then_id(golden, cal, scene):
    a = InterventionSpec(id="zeta", execution_delay=0.0)
    b = InterventionSpec(id="alpha", execution_delay=0.0)
    res = select_intervention([a, b], golden, cal, FAST, scene=scene,
                              danger=DANGER, with_chain=False)
    # all three candidates are identical no-ops: lexically smallest id wins
    assert res.recommended_id == "alpha"


def test_exactly_one_recommended(golden, cal, scene):
    res = select_intervention(list(golden_interventions()), golden, cal, FAST,
                              scene=scene, danger=DANGER, with_chain=False)
    assert sum(it.recommended for it in res.items) == 1


def test_scenario_result_json_shape(golden, cal, scene):
    res = select_intervention([golden_interventions()[0]], golden, cal, FAST,
                              scene=scene, danger=DANGER, with_chain=True)
    d = res.to_json_dict()
    assert {"timestamp", "recommended_id", "follow_up_id", "items", "chain"} <= set(d)
    assert all("escalation_probability" in it for it in d["items"] if it["valid"])
    assert len(d["chain"]["steps"]) == 7
    assert len(d["chain"]["limitations"]) == 4


# ---------------------------------------------------------------------------
# Causal chain
# ---------------------------------------------------------------------------

def _chain_for(vf, cal, scene, scenario=None):
    from groupfields import compute_instant_fields, evaluate_criticality, normalize_frame
    from groupfields.fields import assemble_state_vector
    from dataclasses import replace as drep

    norm = normalize_frame(vf.frame, cal)
    w = build_interaction_matrix(vf, cal, scene)
    ff = compute_instant_fields(vf, norm, w, cal, scene, with_grid=False)
    spec = power_iteration(w)
    ff = drep(ff, stability=spec.stability_margin)
    x = assemble_state_vector(ff, cal.attention_aggregator)
    crit = evaluate_criticality(x, cal)
    return causal_chain(vf, w, ff, spec, crit, scenario, cal)


def test_chain_golden_structure_step(golden, cal, scene, oracle_w):
    chain = _chain_for(golden, cal, scene)
    step3 = chain.steps[2]
    v = dict(step3.values)
    i, j = np.unravel_index(int(np.argmax(oracle_w)), oracle_w.shape)
    assert v["source"] == str(golden.agents[j].agent_id)
    assert v["receiver"] == str(golden.agents[i].agent_id)
    assert v["weight"] == pytest.approx(float(oracle_w[i, j]), abs=0.01)
    assert v["weight"] == pytest.approx(1.482, abs=0.01)  # oracle-pinned argmax


def test_chain_golden_observable_step(golden, cal, scene):
    chain = _chain_for(golden, cal, scene)
    v = dict(chain.steps[0].values)
    assert v["agent"] == "1"
    assert v["channel"] == "gesture"
    assert v["z"] == pytest.approx(7.86, abs=0.01)


def test_chain_tension_ratio_from_engine_values(golden, cal, scene):
    chain = _chain_for(golden, cal, scene)
    v = dict(chain.steps[1].values)
    assert v["ratio"] == pytest.approx(34.486 / 0.417, rel=0.02)


def test_chain_truncates_without_scenario(golden, cal, scene):
    chain = _chain_for(golden, cal, scene, scenario=None)
    assert chain.truncated
    assert len(chain.steps) == 4


def test_chain_degenerates_on_calm_frame(cal):
    vf, scene = baseline_frame(cal)
    chain = _chain_for(vf, cal, scene)
    assert len(chain.steps) == 1
    assert "stable" in chain.steps[0].summary
    assert not chain.truncated


def test_chain_render_is_numbered(golden, cal, scene):
    text = _chain_for(golden, cal, scene).render()
    assert text.splitlines()[0].startswith("1. observable:")
    assert "Limitations:" in text
