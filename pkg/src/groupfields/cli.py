"""Operator command line: batch runs, replay, synthetic streams, scenario
ranking, the canonical fixture trace, and the live service.

Exit codes: 0 ok, 1 input error, 2 pipeline error.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

from .core import CalibrationProfile, Scene
from .criticality import DangerSpec
from .pipeline import (
    FrameReport,
    PipelineOptions,
    StreamAborted,
    parse_stream,
    replay as replay_frames,
    run_pipeline,
)
from .profiles import danger_for, profile_for
from .scenario import InterventionSpec, ScenarioResult, SurrogateParams, select_intervention
from .synthetic import PRESETS, generate_stream, golden_fixture, golden_interventions, golden_scene

CONFIG_ENV = "GROUPFIELDS_CONFIG"

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_PIPELINE = 2


def _load_profile(args) -> CalibrationProfile:
    path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV)
    if path:
        return CalibrationProfile.from_json(Path(path).read_text())
    vertical = getattr(args, "vertical", None) or "negotiation"
    return profile_for(vertical)


def _danger(args, cal: CalibrationProfile) -> DangerSpec:
    try:
        return danger_for(cal.vertical_name)
    except KeyError:
        return DangerSpec()


def _fmt_report_line(r: FrameReport) -> str:
    if r.failed:
        return f"t={r.timestamp:8.2f}  FAILED: {r.error}"
    c = r.criticality
    st = r.state
    sync = f"{st[2]:.3f}" if "synchrony_undefined" not in st.flags else "  -  "
    flag = " St<0!" if c.st_red_flag else ""
    return (f"t={r.timestamp:8.2f}  zone={c.zone:5s} R={c.r_index:.3f} "
            f"St={st[4]:+7.3f} T={st[1]:7.3f} S={sync} N={st[7]:8.2f}{flag}")


def _print_summary(summary) -> None:
    d = summary.to_json_dict()
    occ = ", ".join(f"{k}={v:.1%}" for k, v in d["zone_occupancy"].items())
    print(f"frames: {d['n_frames']} ({d['n_failed']} failed)  zones: {occ}")
    if d["st_min"] is not None:
        print(f"stability margin range: [{d['st_min']:+.3f}, {d['st_max']:+.3f}]  "
              f"early-warning episodes: {d['ews_trend_episodes']}")


def _scenario_table(res: ScenarioResult) -> str:
    header = f"{'indicator':<22}" + "".join(
        f"{it.intervention.id:>16}" for it in res.items
    )
    lines = [header, "-" * len(header)]

    def row(label, fmt, getter):
        cells = []
        for it in res.items:
            v = getter(it)
            cells.append(f"{v:>16}" if isinstance(v, str) else f"{fmt % v:>16}")
        lines.append(f"{label:<22}" + "".join(cells))

    row("R at horizon", "%.3f", lambda it: it.stats.mean_r_horizon if it.stats else "n/a")
    row("St at horizon", "%.3f",
        lambda it: float(it.stats.st_band[1, -1]) if it.stats else "n/a")
    row("tau [s]", "%s",
        lambda it: ("-" if it.stats is None or it.stats.tau.tau is None
                    else f"{it.stats.tau.tau:.0f}"))
    row("P(escalation)", "%.2f",
        lambda it: it.stats.escalation_probability if it.stats else "n/a")
    row("delay [s]", "%.1f", lambda it: it.intervention.execution_delay)
    row("cost J", "%s",
        lambda it: f"{it.cost:.3f}" + (" *" if it.recommended else ""))
    return "\n".join(lines)


def _write_reports(reports, summary, path: str, with_grids: bool) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_json_dict(with_grids=with_grids)) + "\n")
        fh.write(json.dumps({"summary": summary.to_json_dict()}) + "\n")


def _cmd_run(args) -> int:
    cal = _load_profile(args)
    scene = golden_scene() if args.scene is None else Scene(**json.loads(Path(args.scene).read_text()))
    opts = PipelineOptions(
        with_grid=not args.no_grid,
        scenario_cadence_s=args.scenario_cadence,
        scenario_candidates=tuple(golden_interventions()) if args.scenario_cadence else (),
        danger=_danger(args, cal),
    )
    try:
        stream = parse_stream(args.file, scene)
        reports, summary = run_pipeline(stream, cal, scene, opts)
    except (StreamAborted, FileNotFoundError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    for r in reports:
        print(_fmt_report_line(r))
    for d in stream.diagnostics:
        print(f"diagnostic: {d.message}", file=sys.stderr)
    _print_summary(summary)
    if args.json:
        _write_reports(reports, summary, args.json, with_grids=not args.no_grid)
    if summary.n_frames == 0:
        return EXIT_OK
    return EXIT_PIPELINE if summary.n_failed == summary.n_frames else EXIT_OK


def _cmd_replay(args) -> int:
    cal = _load_profile(args)
    scene = golden_scene()
    try:
        frames = [vf.frame for vf in parse_stream(args.file, scene)]
    except (StreamAborted, FileNotFoundError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    opts = PipelineOptions(with_grid=not args.no_grid)
    from .pipeline import Pipeline
    from .core import validate_frame

    pipe = Pipeline(cal, scene, opts)
    prev_t = None
    for f in replay_frames(frames, speed=args.speed):
        vf = validate_frame(f, scene, prev_t)
        prev_t = f.timestamp
        print(_fmt_report_line(pipe.process(vf)))
    _print_summary(pipe.summary)
    return EXIT_OK


def _cmd_simulate(args) -> int:
    cal = _load_profile(args)
    if args.preset not in PRESETS:
        print(f"unknown preset {args.preset!r}; available: {sorted(PRESETS)}", file=sys.stderr)
        return EXIT_INPUT
    preset = PRESETS[args.preset]
    if args.seed is not None:
        from dataclasses import replace
        preset = replace(preset, seed=args.seed)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        from .core import frame_to_json
        for frame in generate_stream(preset, cal):
            out.write(frame_to_json(frame) + "\n")
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def _cmd_scenario(args) -> int:
    cal = _load_profile(args)
    scene = golden_scene()
    try:
        frames = list(parse_stream(args.file, scene))
        specs = json.loads(Path(args.interventions).read_text())
        candidates = [InterventionSpec.from_json_dict(d) for d in specs]
    except (StreamAborted, FileNotFoundError, OSError, KeyError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if not frames:
        print("input error: no frames in file", file=sys.stderr)
        return EXIT_INPUT
    vf = frames[args.frame_index]
    sp = SurrogateParams(ensemble_size=args.ensemble)
    try:
        res = select_intervention(candidates, vf, cal, sp, scene=scene, danger=_danger(args, cal))
    except Exception as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    print(_scenario_table(res))
    print()
    print(res.chain.render())
    if args.json:
        Path(args.json).write_text(json.dumps(res.to_json_dict(), indent=2))
    return EXIT_OK


def _cmd_golden(args) -> int:
    cal = _load_profile(args)
    scene = golden_scene()
    vf = golden_fixture()
    reports, summary = run_pipeline([vf], cal, scene, PipelineOptions())
    r = reports[0]
    if r.failed:
        print(f"pipeline error: {r.error}", file=sys.stderr)
        return EXIT_PIPELINE
    print(_fmt_report_line(r))
    w = r.matrix.weights
    print(f"anchor weights: W[2][1]={w[1, 0]:.3f}  W[2][5]={w[1, 4]:.3f}  "
          f"lambda_max={r.spectral.lambda_max:.3f}")
    sp = SurrogateParams(ensemble_size=args.ensemble)
    res = select_intervention(list(golden_interventions()), vf, cal, sp,
                              scene=scene, danger=_danger(args, cal))
    print()
    print(_scenario_table(res))
    print()
    print(res.chain.render())
    return EXIT_OK


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import GatewayConfig, create_app

    cal = _load_profile(args)
    cfg = GatewayConfig(
        cal=cal,
        preset=args.preset,
        replay_file=args.file,
        replay_speed=args.speed,
        with_grid=not args.no_grid,
    )
    app = create_app(cfg)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="groupfields",
        description="Behavioral-field engine: ingest kinematic frame streams, "
                    "compute interaction structure, fields, stability and risk, "
                    "and rank what-if interventions.",
    )
    p.add_argument("--config", help=f"calibration profile JSON (or ${CONFIG_ENV})")
    p.add_argument("--vertical", help="named vertical profile (default: negotiation)")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("run", help="batch-process a JSONL frame file")
    q.add_argument("file")
    q.add_argument("--json", help="write per-frame JSON reports to this path")
    q.add_argument("--scene", help="scene JSON file")
    q.add_argument("--no-grid", action="store_true")
    q.add_argument("--scenario-cadence", type=float, default=None,
                   help="run scenario analysis every N stream-seconds")
    q.set_defaults(fn=_cmd_run)

    q = sub.add_parser("replay", help="re-emit a recording at its own pace")
    q.add_argument("file")
    q.add_argument("--speed", type=float, default=1.0,
                   help="time multiplier; 0 means as fast as possible")
    q.add_argument("--no-grid", action="store_true")
    q.set_defaults(fn=_cmd_replay)

    q = sub.add_parser("simulate", help="emit a synthetic preset stream as JSONL")
    q.add_argument("--preset", required=True, choices=sorted(PRESETS))
    q.add_argument("--seed", type=int, default=None)
    q.add_argument("--out", help="output path (default stdout)")
    q.set_defaults(fn=_cmd_simulate)

    q = sub.add_parser("scenario", help="rank interventions for a recorded frame")
    q.add_argument("file")
    q.add_argument("--interventions", required=True,
                   help="JSON file: list of intervention specs")
    q.add_argument("--frame-index", type=int, default=-1)
    q.add_argument("--ensemble", type=int, default=50)
    q.add_argument("--json", help="write the scenario result JSON here")
    q.set_defaults(fn=_cmd_scenario)

    q = sub.add_parser("serve", help="start the live HTTP/WebSocket gateway")
    q.add_argument("--port", type=int, default=8077)
    q.add_argument("--host", default="127.0.0.1")
    q.add_argument("--preset", default="escalation-7")
    q.add_argument("--file", default=None, help="replay this JSONL file instead of simulating")
    q.add_argument("--speed", type=float, default=1.0)
    q.add_argument("--no-grid", action="store_true")
    q.set_defaults(fn=_cmd_serve)

    q = sub.add_parser("golden", help="trace the canonical 7-agent fixture end to end")
    q.add_argument("--ensemble", type=int, default=50)
    q.set_defaults(fn=_cmd_golden)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
