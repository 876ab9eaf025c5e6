import io
import json
import math
from dataclasses import replace

import numpy as np
import pytest

from groupfields import (
    AgentMicroState,
    MicroStateFrame,
    Pipeline,
    PipelineOptions,
    Scene,
    StreamAborted,
    frame_to_json,
    generate_stream,
    golden_fixture,
    parse_stream,
    replay,
    run_pipeline,
    validate_frame,
)
from groupfields.fields import IX_ST, IX_T
from groupfields.synthetic import PRESETS


GOLDEN_LINE = frame_to_json(golden_fixture().frame)


# ---------------------------------------------------------------------------
# Stream parsing
# ---------------------------------------------------------------------------

def test_parse_golden_file(scene):
    stream = parse_stream(io.StringIO(GOLDEN_LINE + "\n"), scene)
    frames = list(stream)
    assert len(frames) == 1
    assert frames[0].n == 7
    assert stream.diagnostics == []


def test_parse_empty_source(scene):
    stream = parse_stream(io.StringIO(""), scene)
    assert list(stream) == []
    assert stream.diagnostics == []


def test_parse_recovers_from_one_corrupt_line(cal, scene):
    lines = []
    for k in range(100):
        f = replace(golden_fixture().frame, timestamp=float(k))
        lines.append(frame_to_json(f))
    lines[40] = '{"timestamp": oops'
    stream = parse_stream(lines, scene)
    frames = list(stream)
    assert len(frames) == 99
    assert len(stream.diagnostics) == 1
    assert "line 41" in stream.diagnostics[0].message


def test_parse_aborts_on_garbage(scene):
    stream = parse_stream(["not json"] * 30, scene)
    with pytest.raises(StreamAborted):
        list(stream)


def test_parse_counts_rejections_as_diagnostics(scene):
    good = frame_to_json(golden_fixture().frame)
    dup = golden_fixture().frame
    dup = replace(dup, timestamp=0.5,
                  agents=(dup.agents[0], dup.agents[0]))
    stream = parse_stream([good, frame_to_json(dup)], scene)
    frames = list(stream)
    assert len(frames) == 1
    assert "duplicate" in stream.diagnostics[0].message


# ---------------------------------------------------------------------------
# Pipeline over the golden frame
# ---------------------------------------------------------------------------

def test_run_pipeline_golden(golden, cal, scene):
    reports, summary = run_pipeline([golden], cal, scene, PipelineOptions())
    assert summary.n_failed == 0
    r = reports[0]
    assert r.fields.tension_mean == pytest.approx(6.88, abs=0.02)
    assert r.matrix.weights[1, 0] == pytest.approx(1.167, abs=0.01)
    assert r.criticality.zone == "green"
    assert r.criticality.st_red_flag
    assert r.criticality.r_index == pytest.approx(0.192, abs=0.005)  # oracle pin
    assert r.state[IX_ST] == pytest.approx(-2.6803, abs=1e-3)


def test_single_agent_stream(cal, scene):
    a = AgentMicroState(1, (2.0, 2.0), (0.0, 0.0), 0.0, 0.5, 0.0, 1.0)
    frames = [MicroStateFrame(float(k), (a,)) for k in range(3)]
    reports, summary = run_pipeline(frames, cal, scene, PipelineOptions(with_grid=False))
    assert summary.n_failed == 0
    r = reports[-1]
    assert r.matrix.weights.shape == (1, 1)
    assert "synchrony_undefined" in r.state.flags


def test_failed_frame_is_isolated(cal, scene):
    good = golden_fixture().frame
    bad = replace(good, timestamp=1.0, agents=(good.agents[0], good.agents[0]))
    later = replace(good, timestamp=2.0)
    reports, summary = run_pipeline([good, bad, later], cal, scene,
                                    PipelineOptions(with_grid=False))
    assert summary.n_frames == 3
    assert summary.n_failed == 1
    assert reports[1].failed and not reports[2].failed


def test_report_json_serializes(golden, cal, scene):
    reports, _ = run_pipeline([golden], cal, scene, PipelineOptions())
    d = reports[0].to_json_dict()
    text = json.dumps(d)
    back = json.loads(text)
    assert back["criticality"]["zone"] == "green"
    assert back["fields"]["tension_grid"]["nx"] == 32
    assert back["fields"]["tension_grid"]["ny"] == 20
    assert len(back["matrix"]["weights"]) == 49


def test_scenario_cadence(golden, cal, scene):
    from groupfields import SurrogateParams, golden_interventions

    frames = [replace(golden.frame, timestamp=float(t)) for t in range(4)]
    opts = PipelineOptions(
        with_grid=False,
        scenario_cadence_s=2.0,
        scenario_candidates=golden_interventions(),
        surrogate=SurrogateParams(ensemble_size=2, horizon=10.0),
    )
    reports, _ = run_pipeline(frames, cal, scene, opts)
    flags = [r.scenario is not None for r in reports]
    assert flags == [True, False, True, False]
    assert reports[0].criticality.tau is None or reports[0].criticality.tau > 0


# ---------------------------------------------------------------------------
# Dropout handling
# ---------------------------------------------------------------------------

def test_dropout_retains_agent_with_decaying_confidence(cal, scene):
    base = golden_fixture().frame
    frames = [base]
    for k in range(1, 4):
        frames.append(replace(base, timestamp=float(k), agents=base.agents[1:]))
    reports, _ = run_pipeline(frames, cal, scene, PipelineOptions(with_grid=False))
    assert reports[1].vframe.n == 7                    # ghost retained
    ids = [a.agent_id for a in reports[1].vframe.agents]
    assert 1 in ids
    ghost = next(a for a in reports[1].vframe.agents if a.agent_id == 1)
    assert ghost.confidence == pytest.approx(0.94 * 0.5, abs=1e-9)  # one half-life
    ghost3 = next(a for a in reports[3].vframe.agents if a.agent_id == 1)
    assert ghost3.confidence == pytest.approx(0.94 * 0.125, abs=1e-9)


def test_dropout_expires_after_window(cal, scene):
    base = golden_fixture().frame
    opts = PipelineOptions(with_grid=False, dropout_retention_s=2.0)
    frames = [base] + [replace(base, timestamp=float(k), agents=base.agents[1:])
                       for k in (1, 2, 5)]
    reports, _ = run_pipeline(frames, cal, scene, opts)
    assert reports[2].vframe.n == 7
    assert reports[3].vframe.n == 6                    # beyond retention


# ---------------------------------------------------------------------------
# Batch/replay equivalence and timing
# ---------------------------------------------------------------------------

def test_batch_and_replay_agree(cal):
    preset = replace(PRESETS["escalation-7"], duration_s=12.0)
    frames = list(generate_stream(preset, cal))
    opts = PipelineOptions(with_grid=False)

    batch_reports, _ = run_pipeline(frames, cal, preset.scene, opts)

    pipe = Pipeline(cal, preset.scene, opts)
    replay_reports = []
    prev = None
    for f in replay(frames, speed=0.0):
        vf = validate_frame(f, preset.scene, prev)
        prev = f.timestamp
        replay_reports.append(pipe.process(vf))

    for a, b in zip(batch_reports, replay_reports):
        assert a.state.components.tolist() == b.state.components.tolist()
        assert a.criticality.r_index == b.criticality.r_index


def test_replay_schedule_with_fake_clock():
    frames = [MicroStateFrame(float(t), ()) for t in (0.0, 1.0, 2.0, 3.5)]
    now = [100.0]
    sleeps = []

    def clock():
        return now[0]

    def sleep(dt):
        sleeps.append(dt)
        now[0] += dt

    out = list(replay(frames, speed=2.0, sleep=sleep, clock=clock))
    assert len(out) == 4
    assert sleeps == pytest.approx([0.5, 0.5, 0.75])   # gaps scaled by 1/speed


def test_replay_speed_zero_never_sleeps():
    frames = [MicroStateFrame(float(t), ()) for t in range(10)]
    called = []
    out = list(replay(frames, speed=0.0, sleep=lambda dt: called.append(dt)))
    assert len(out) == 10
    assert called == []


def test_replay_rejects_negative_speed():
    with pytest.raises(ValueError):
        list(replay([], speed=-1.0))


# ---------------------------------------------------------------------------
# Level-order audit: every stage demands its upstream product
# ---------------------------------------------------------------------------

def test_stage_signatures_enforce_level_order():
    import inspect

    from groupfields import (
        assemble_state_vector,
        build_interaction_matrix,
        compute_instant_fields,
        evaluate_criticality,
    )
    from groupfields.core import ValidatedFrame
    from groupfields.fields import FieldFrame, StateVector
    from groupfields.interaction import InteractionMatrix

    def ann(fn, name):
        return inspect.signature(fn).parameters[name].annotation

    assert "ValidatedFrame" in str(ann(build_interaction_matrix, "vframe"))
    assert "InteractionMatrix" in str(ann(compute_instant_fields, "W"))
    assert "FieldFrame" in str(ann(assemble_state_vector, "ff"))
    assert "StateVector" in str(ann(evaluate_criticality, "x"))

    # and no public constructor mints a downstream type from raw frames
    import groupfields.criticality as crit_mod
    sig = inspect.signature(crit_mod.criticality_g)
    assert "MicroStateFrame" not in str(sig)
