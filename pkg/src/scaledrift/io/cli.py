"""Command-line entry point: ``scaledrift {simulate,correct,evaluate,trace-scale}``.

Exit codes: 0 success, 1 usage error, 2 data error.  Set ``SCALEDRIFT_LOG``
to a logging level name (``DEBUG``, ``INFO``, ...) for diagnostics on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .. import __version__
from ..pipeline import MODES, ate2d_errors, run, scale_factor_trace
from ..sim import ScenarioSpec, generate
from .formats import (
    FormatError,
    Trajectory,
    atomic_write_text,
    load_config,
    load_stream,
    load_trajectory,
    save_events,
    save_scene,
    save_stream,
    save_trajectory,
    write_csv,
)
from .geodesy import LocalOrigin, latlon_to_utm

log = logging.getLogger("scaledrift")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

# a city-centre origin for simulated geo-tags; any point inside a UTM zone works
DEFAULT_ORIGIN = (36.7213, -4.4214)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scaledrift", description="Geo-registered scale-drift correction for monocular maps.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", help="write a synthetic scenario (stream, ground truth, spec)")
    s.add_argument("--out", required=True, type=Path, help="output directory")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--keyframes", type=int, help="number of keyframes")
    s.add_argument("--anchor-interval", type=int, help="keyframes between geo-tagged images")
    s.add_argument("--drift", type=float, help="final scale-drift factor")
    s.add_argument("--shape", choices=("city-grid", "straight", "arc"))
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="any scenario field")
    s.add_argument("--origin", type=float, nargs=2, default=DEFAULT_ORIGIN, metavar=("LAT", "LON"),
                   help="latitude/longitude of the world origin")

    c = sub.add_parser("correct", help="run drift correction over a keyframe stream")
    c.add_argument("stream", type=Path, help="stream.jsonl written by simulate or an exporter")
    c.add_argument("--out", required=True, type=Path, help="output directory")
    c.add_argument("--config", type=Path, help="key = value configuration file")
    c.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    c.add_argument("--mode", choices=MODES, help="shorthand for --set mode=...")
    c.add_argument("--seed", type=int, help="shorthand for --set ransac.seed=...")
    c.add_argument("--format", choices=("tum", "kitti"), default="tum", help="trajectory output format")

    e = sub.add_parser("evaluate", help="2D ATE of an estimate against ground truth")
    e.add_argument("estimate", type=Path)
    e.add_argument("ground_truth", type=Path)
    e.add_argument("--csv", type=Path, help="per-keyframe error CSV")

    t = sub.add_parser("trace-scale", help="scale-factor trace of an estimate against ground truth")
    t.add_argument("estimate", type=Path)
    t.add_argument("ground_truth", type=Path)
    t.add_argument("--out", required=True, type=Path, help="CSV output")
    t.add_argument("--window", type=int, default=5, help="median filter width in steps")
    t.add_argument("--band", type=float, nargs=2, default=(0.9, 1.1), metavar=("LO", "HI"))
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _simulate(a) -> int:
    fields = {}
    for item in a.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        fields[k.strip()] = v.strip()
    for key, val in (("n_keyframes", a.keyframes), ("anchor_interval", a.anchor_interval),
                     ("drift_factor", a.drift), ("shape", a.shape)):
        if val is not None:
            fields[key] = val
    fields["seed"] = a.seed
    try:
        spec = ScenarioSpec.from_dict(fields)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"bad scenario field: {exc}") from None
    sc = generate(spec)
    e, n, zone = latlon_to_utm(*a.origin)
    origin = LocalOrigin(e, n, zone)
    a.out.mkdir(parents=True, exist_ok=True)
    save_stream(a.out / "stream.jsonl", spec.camera, sc.stream, origin)
    save_trajectory(a.out / "ground_truth.txt", Trajectory.from_scene(sc.ground_truth), "tum")
    doc = {"schema": "scaledrift.scenario", "version": 1, "spec": spec.to_dict(), "origin": origin.to_dict()}
    atomic_write_text(a.out / "scenario.json", json.dumps(doc, indent=1) + "\n")
    print(f"wrote {len(sc.stream)} keyframes, {len(sc.geo_truth)} geo-tagged images to {a.out}")
    return EXIT_OK


def _correct(a) -> int:
    overrides = list(a.set)
    if a.mode:
        overrides.append(f"mode={a.mode}")
    if a.seed is not None:
        overrides.append(f"ransac.seed={a.seed}")
    cfg = load_config(a.config, overrides)
    stream = load_stream(a.stream)
    p = run(stream.keyframes, stream.camera, cfg)
    a.out.mkdir(parents=True, exist_ok=True)
    save_trajectory(a.out / f"trajectory.{a.format}", Trajectory.from_scene(p.scene), a.format)
    save_events(a.out / "events.jsonl", p.events)
    save_scene(p.scene, a.out / "scene.json")
    kinds = [e.kind for e in p.events]
    print(f"{len(p.scene.keyframes)} keyframes, {kinds.count('corrected')} corrections, "
          f"{sum(1 for e in p.events if e.note)} warnings; wrote {a.out}")
    return EXIT_OK


def _load_pair(a):
    est = load_trajectory(a.estimate).as_dict()
    gt = load_trajectory(a.ground_truth).as_dict()
    return est, gt


def _evaluate(a) -> int:
    est, gt = _load_pair(a)
    errs = ate2d_errors(est, gt)
    e = np.array(list(errs.values()))
    print(f"Ave {e.mean():.2f} SD {e.std():.2f}")
    if a.csv:
        write_csv(a.csv, "scaledrift.ate2d", ["keyframe_id", "error_m"], sorted(errs.items()))
    return EXIT_OK


def _trace_scale(a) -> int:
    if a.window < 1:
        raise UsageError("--window must be at least 1")
    est, gt = _load_pair(a)
    trace = scale_factor_trace(est, gt, a.window)
    write_csv(a.out, "scaledrift.scale_trace", ["keyframe_id", "scale_factor"], trace)
    lo, hi = a.band
    inside = sum(lo <= f <= hi for _, f in trace)
    print(f"{inside}/{len(trace)} keyframes with scale factor in [{lo}, {hi}]")
    return EXIT_OK


COMMANDS = {"simulate": _simulate, "correct": _correct, "evaluate": _evaluate, "trace-scale": _trace_scale}


def _setup_logging() -> None:
    name = os.environ.get("SCALEDRIFT_LOG", "WARNING").upper()
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    parser = _build_parser()
    try:
        a = parser.parse_args(argv)
        if a.command is None:
            raise UsageError("scaledrift: a subcommand is required (simulate, correct, evaluate, trace-scale)")
        return COMMANDS[a.command](a)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
