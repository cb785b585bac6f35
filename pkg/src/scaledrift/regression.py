"""Reproducibility harness: canned scenarios, regression bounds and the configuration reference.

Each :class:`RegressionCase` runs the pipeline under three ablations
(INIT only, INIT+PGO, INIT+PGO+BA) over a set of seeds and checks the
median ATE against ceilings and the expected ordering.  Orderings are
asserted on medians over seeds, never per seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ba import CHI2_2DOF_95
from .io.formats import atomic_write_text, config_items
from .pipeline import PipelineConfig, evaluate_ate2d, run, scale_factor_trace
from .sim import ScenarioSpec, generate

ABLATIONS = {"INIT": "init", "INIT+PGO": "init+pgo", "Ours": "full"}
REPORT_SCHEMA = "scaledrift.regression"


@dataclass
class RegressionCase:
    name: str
    spec: ScenarioSpec
    seeds: tuple[int, ...] = tuple(range(20))
    ate_ceiling: dict[str, float] = field(default_factory=dict)  # median Ave per ablation
    sd_ceiling: dict[str, float] = field(default_factory=dict)  # median SD per ablation
    ate_floor: dict[str, float] = field(default_factory=dict)  # e.g. the uncorrected baseline must be bad
    scale_band: tuple[float, float] = (0.9, 1.1)
    band_fraction: float | None = None  # required share of Ours' trace inside scale_band
    ordering: tuple[str, ...] = ()  # ablation names, best first
    ablations: tuple[str, ...] = tuple(ABLATIONS)


@dataclass
class SeedResult:
    ablation: str
    seed: int
    ate: float
    sd: float
    band_fraction: float
    seconds: float


@dataclass
class CaseResult:
    case: str
    results: list[SeedResult]
    checks: list[tuple[str, bool, str]]

    @property
    def passed(self) -> bool:
        return all(ok for _, ok, _ in self.checks)

    def median(self, ablation: str, attr: str = "ate") -> float:
        return float(np.median([getattr(r, attr) for r in self.results if r.ablation == ablation]))

    def as_dict(self) -> dict:
        return {
            "case": self.case,
            "passed": self.passed,
            "checks": [{"name": n, "passed": ok, "detail": d} for n, ok, d in self.checks],
            "results": [dataclasses.asdict(r) for r in self.results],
        }


def run_one(spec: ScenarioSpec, ablation: str, band=(0.9, 1.1)) -> SeedResult:
    sc = generate(spec)
    t0 = time.perf_counter()
    p = run(sc.stream, sc.spec.camera, PipelineConfig(mode=ABLATIONS[ablation]))
    dt = time.perf_counter() - t0
    ave, sd = evaluate_ate2d(p.scene, sc.ground_truth)
    trace = [f for _, f in scale_factor_trace(p.scene, sc.ground_truth)]
    frac = float(np.mean([band[0] <= f <= band[1] for f in trace])) if trace else 0.0
    return SeedResult(ablation, spec.seed, ave, sd, frac, dt)


def _job(args):
    spec_dict, ablation, band = args
    return run_one(ScenarioSpec.from_dict(spec_dict), ablation, band)


def run_regression(case: RegressionCase, workers: int | None = None) -> CaseResult:
    """Run every (ablation, seed) of ``case`` and evaluate its checks."""
    jobs = []
    for ab in case.ablations:
        for s in case.seeds:
            d = case.spec.to_dict()
            d["seed"] = int(s)
            jobs.append((d, ab, case.scale_band))
    workers = workers if workers is not None else min(len(jobs), os.cpu_count() or 1)
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    res = CaseResult(case.name, results, [])
    for ab, ceil in case.ate_ceiling.items():
        m = res.median(ab)
        res.checks.append((f"{ab} median ATE <= {ceil:g} m", m <= ceil, f"{m:.3f} m"))
    for ab, ceil in case.sd_ceiling.items():
        m = res.median(ab, "sd")
        res.checks.append((f"{ab} median SD <= {ceil:g} m", m <= ceil, f"{m:.3f} m"))
    for ab, floor in case.ate_floor.items():
        m = res.median(ab)
        res.checks.append((f"{ab} median ATE >= {floor:g} m", m >= floor, f"{m:.3f} m"))
    if case.band_fraction is not None:
        m = res.median("Ours", "band_fraction")
        lo, hi = case.scale_band
        res.checks.append((f"Ours scale factor in [{lo}, {hi}] for >= {case.band_fraction:.0%}",
                           m >= case.band_fraction, f"{m:.1%}"))
    for better, worse in zip(case.ordering[:-1], case.ordering[1:]):
        a, b = res.median(better), res.median(worse)
        res.checks.append((f"median ATE {better} <= {worse}", a <= b, f"{a:.3f} vs {b:.3f} m"))
    return res


# ---------------------------------------------------------------------------
# canned cases
# ---------------------------------------------------------------------------


def canned_cases() -> list[RegressionCase]:
    """Default suite, sized to finish in a few minutes on one core.

    Ceilings are about twice the medians measured with the committed defaults
    (zero-drift: 0.025 / 0.019 / 0.047 m; ramp-2x: INIT 10.6, INIT+PGO 0.99,
    Ours 0.95 m, Ours in band 88%).
    """
    return [
        RegressionCase(
            "zero-drift",
            ScenarioSpec(n_keyframes=60, drift_factor=1.0, anchor_noise=0.0),
            seeds=tuple(range(5)),
            ate_ceiling={"INIT": 0.05, "INIT+PGO": 0.04, "Ours": 0.1},
        ),
        RegressionCase(
            "ramp-2x",
            ScenarioSpec(n_keyframes=100, drift_factor=2.0),
            seeds=tuple(range(10)),
            ate_ceiling={"INIT+PGO": 2.0, "Ours": 1.9},
            ate_floor={"INIT": 5.0},
            band_fraction=0.8,
            ordering=("Ours", "INIT+PGO", "INIT"),
        ),
    ]


def interval_sweep_cases(intervals=(10, 20, 30, 40, 50), seeds=tuple(range(20))) -> list[RegressionCase]:
    """Anchor-interval sweep on the full 200-keyframe scenario (long: tens of minutes)."""
    return [
        RegressionCase(f"interval-{iv}", ScenarioSpec(anchor_interval=iv), seeds=tuple(seeds),
                       ordering=("Ours", "INIT+PGO", "INIT"))
        for iv in intervals
    ]


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def markdown_report(results: list[CaseResult]) -> str:
    out = ["# Regression report", ""]
    for r in results:
        out.append(f"## {r.case}: {'PASS' if r.passed else 'FAIL'}")
        out.append("")
        out.append("| ablation | median ATE (m) | median SD (m) | median scale band | seeds |")
        out.append("|---|---|---|---|---|")
        for ab in dict.fromkeys(x.ablation for x in r.results):
            n = sum(1 for x in r.results if x.ablation == ab)
            out.append(f"| {ab} | {r.median(ab):.2f} | {r.median(ab, 'sd'):.2f} | "
                       f"{r.median(ab, 'band_fraction'):.1%} | {n} |")
        out.append("")
        for name, ok, detail in r.checks:
            out.append(f"- [{'x' if ok else ' '}] {name} ({detail})")
        out.append("")
    return "\n".join(out)


def json_summary(results: list[CaseResult]) -> dict:
    return {"schema": REPORT_SCHEMA, "version": 1, "passed": all(r.passed for r in results),
            "cases": [r.as_dict() for r in results]}


def write_reports(results: list[CaseResult], directory) -> None:
    d = Path(directory)
    atomic_write_text(d / "regression.md", markdown_report(results) + "\n")
    atomic_write_text(d / "regression.json", json.dumps(json_summary(results), indent=1) + "\n")


# ---------------------------------------------------------------------------
# configuration reference
# ---------------------------------------------------------------------------

# key -> (meaning, sensitivity / rationale)
PIPELINE_DOC = {
    "init_index": ("Geo correspondence count that triggers the one-shot INIT registration.",
                   "Earlier INIT fits over a shorter, straighter path and can be rank deficient; it is "
                   "deferred automatically when the geometry is degenerate."),
    "window_size": ("Number of newest geo correspondences in the PGO/BA window (C2).",
                    "Larger windows smooth over more anchors but move more of the map per correction."),
    "mode": ("Ablation: init, init+pgo, init+ba or full (INIT+PGO+BA).", "See the ablation tables."),
    "camera_up": ("Camera-frame direction of world up, used to orient the ground-plane normal.",
                  "Only its sign matters for typical forward-looking cameras."),
    "height_offset": ("Constant y translation of the planar similarity.",
                      "0 means no vertical offset; a non-zero value lifts the registered map rigidly."),
    "pgo.lambda1": ("Weight of keyframe-keyframe relative Sim(3) edges.",
                    "With lambda3 = 1 the ratio decides how much shape is traded for anchor fit; "
                    "1e5 keeps the map rigid within a window."),
    "pgo.lambda2": ("Weight of keyframe-geo-image relative Sim(3) edges.", "As lambda1."),
    "pgo.lambda3": ("Weight of geo-image anchor edges (metres squared).",
                    "Only the ratio to lambda1/lambda2 matters."),
    "pgo.covisibility_threshold": ("Shared map points for a keyframe pair to enter C3.",
                                   "15 follows common covisibility practice; lower values add weak edges."),
    "pgo.full_history": ("Anchor every historical correspondence instead of the newest window.",
                         "Off by default: windowed optimisation as in the incremental method."),
    "pgo.fix_boundary": ("Hold covisible keyframes outside C1 fixed and tie C1 to them in attitude.",
                         "Without it a window whose anchors are nearly collinear may roll about the "
                         "anchor line by tens of degrees."),
    "ba.weight": ("BA anchor weight lambda (pixels squared per metre squared).",
                  "Measured on the 200-keyframe scenario, seeds 0-4 (median ATE of Ours): "
                  "{ba_weight_sensitivity}."),
    "ba.huber_delta": ("Huber threshold in pixels.",
                       f"sqrt({CHI2_2DOF_95}) = {math.sqrt(CHI2_2DOF_95):.2f} px, the chi-square 95% bound for "
                       "2 DoF at 1 px noise."),
    "ba.full_history": ("BA anchors over all correspondences instead of the window.", "Off by default."),
    "ba.min_parallax_deg": ("Points whose observing rays span less than this angle are held fixed in BA.",
                            "Depth along a narrow ray bundle is not observable; freeing such points let BA "
                            "slide them along their rays and broke later localisations. {parallax_sensitivity}"),
    "ransac.iterations": ("RANSAC iterations of the planar similarity fit.", "1000 is ample for 2-point samples."),
    "ransac.threshold": ("RANSAC inlier threshold in metres.", "Sized for Street-View-scale geo-tag noise."),
    "ransac.min_sample": ("Minimal sample size.", "Two correspondences fix (a, b, s, theta)."),
    "ransac.seed": ("Seed of the RANSAC sampler.", "Results are deterministic for a fixed seed."),
    "pnp.inlier_threshold": ("Squared reprojection error (px^2) for a PnP inlier.", "chi-square 95%, 2 DoF."),
    "pnp.min_inlier_ratio": ("Minimum inlier share for a localisation to be accepted.",
                             "Weaker matches are dropped and logged."),
    "pnp.min_matches": ("Minimum number of matches to attempt localisation.", "Four points fix a pose."),
    "solver.max_iterations": ("LM iteration cap.", "Windows converge well inside 100."),
    "solver.tol_gradient": ("Stop when the infinity norm of the gradient is below this.", ""),
    "solver.tol_cost": ("Stop when the relative cost decrease is below this.", ""),
    "solver.tol_step": ("Stop when the relative step is below this.", ""),
    "solver.initial_damping": ("Initial Marquardt damping.", ""),
    "solver.damping_decrease": ("Damping divisor after an accepted step.", ""),
    "solver.damping_increase": ("Damping multiplier after a rejected step.", ""),
    "solver.min_damping": ("Damping floor.", ""),
    "solver.max_damping": ("Damping ceiling; reaching it ends the solve.", ""),
    "solver.dense_below": ("Dense factorisation below this many tangent dimensions, sparse above.",
                           "Affects speed only."),
    "solver.numeric_step": ("Central-difference step for residuals without analytic Jacobians.", ""),
}

SCENARIO_DOC = {
    "shape": "Trajectory shape: city-grid, straight or arc.",
    "n_keyframes": "Number of keyframes.",
    "spacing": "Ground-truth distance between consecutive keyframes (m).",
    "drift_factor": "Scale drift reached at the last keyframe (exponential ramp from 1).",
    "drift_multipliers": "Explicit per-step drift multipliers (overrides drift_factor).",
    "points_per_keyframe": "New map points sampled ahead of each keyframe.",
    "pixel_noise": "Observation noise (px, standard deviation).",
    "anchor_interval": "Keyframes between geo-tagged images.",
    "anchor_noise": "Geo-tag position noise (m, standard deviation per axis).",
    "rotation_noise": "Per-step odometry rotation noise (rad).",
    "translation_noise": "Per-step odometry translation noise (relative).",
    "matches_per_anchor": "Map-point matches per geo-tagged image.",
    "outlier_fraction": "Share of geo-image matches replaced by random pixels.",
    "block_length": "City-grid block length (m).",
    "turn_radius": "City-grid corner radius (m).",
    "arc_turn": "Total heading change of the arc shape (rad).",
    "camera_height": "Camera height above the ground (m).",
    "max_depth": "Maximum visible depth (m).",
    "fx": "Focal length x (px).",
    "fy": "Focal length y (px).",
    "cx": "Principal point x (px).",
    "cy": "Principal point y (px).",
    "width": "Image width (px).",
    "height": "Image height (px).",
    "seed": "Master seed.",
}

CONSTANTS_DOC = [
    ("manifold small-angle threshold", "1e-6", "Below this rotation angle or |sigma| the W matrix uses Taylor limits."),
    ("pose convention", "world-from-camera", "Translation is the camera centre."),
    ("Sim(3) retraction", "left, exp(delta) * S", ""),
    ("relative-edge snapshot", "taken before each optimisation", "Edges vanish at the pre-optimisation state."),
    ("world frame", "x east, y height, z north", "Local metres around a UTM origin."),
    ("UTM series", "Krueger, 6th order", "Round trip below 1e-3 m; plain 6-degree zones."),
    ("stream format", "JSON lines, one record per keyframe", "Geo matches ride on the keyframe record."),
    ("simulator point corridor", "5-30 m lateral, 0-10 m high, 8-55 m ahead", ""),
    ("simulator drift", "applied to relative motions", "Exponential ramp reaching drift_factor."),
]

# measured with the committed defaults; see docs/configuration.md for the method
SENSITIVITY = {
    "ba_weight_sensitivity": "1e2: 0.77 m, 1e3: 0.80 m, 1e4: 0.71 m; flat within seed noise",
    "parallax_sensitivity": "Measured as for ba.weight: 0 deg (all points free) 1.36 m, 10 deg 0.80 m.",
}


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return "(" + ", ".join(f"{x:g}" if isinstance(x, float) else str(x) for x in v) + ")"
    if hasattr(v, "value"):
        return str(v.value)
    if isinstance(v, float):
        return f"{v:g}"
    return str(v)


def configuration_reference() -> str:
    """Markdown listing every configurable default with its meaning and sensitivity."""
    out = [
        "# Configuration reference",
        "",
        "Generated by `python -m scaledrift.regression --config-doc docs/configuration.md`.",
        "Pipeline keys are accepted by `scaledrift correct --config FILE` and `--set key=value`.",
        "",
        "## Pipeline",
        "",
        "| key | default | meaning | sensitivity |",
        "|---|---|---|---|",
    ]
    for k, v in config_items(PipelineConfig()).items():
        meaning, sens = PIPELINE_DOC.get(k, ("", ""))
        out.append(f"| `{k}` | {_fmt(v)} | {meaning} | {sens.format(**SENSITIVITY)} |")
    out += ["", "## Simulator (`scaledrift simulate --set key=value`)", "", "| key | default | meaning |", "|---|---|---|"]
    spec = ScenarioSpec()
    for f in dataclasses.fields(spec):
        out.append(f"| `{f.name}` | {_fmt(getattr(spec, f.name))} | {SCENARIO_DOC.get(f.name, '')} |")
    out += ["", "## Fixed conventions", "", "| item | value | note |", "|---|---|---|"]
    for name, val, note in CONSTANTS_DOC:
        out.append(f"| {name} | {val} | {note} |")
    return "\n".join(out) + "\n"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m scaledrift.regression", description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("regression-out"), help="report directory")
    ap.add_argument("--sweep", action="store_true", help="run the anchor-interval sweep instead (long)")
    ap.add_argument("--workers", type=int, default=None)
    ap.add_argument("--config-doc", type=Path, help="write the configuration reference and exit")
    a = ap.parse_args(argv)
    if a.config_doc:
        atomic_write_text(a.config_doc, configuration_reference())
        return 0
    cases = interval_sweep_cases() if a.sweep else canned_cases()
    results = [run_regression(c, a.workers) for c in cases]
    write_reports(results, a.out)
    print(markdown_report(results))
    return 0 if all(r.passed for r in results) else 1


if __name__ == "__main__":
    sys.exit(main())
