"""Command-line front end.

Commands: solve | descent | stability | pl-scan | check. A single JSON
configuration document describes the problem and the per-command tool
sections; ``--set key=value`` overrides entries by dotted path. Every run
writes plot-ready CSV plus a machine-readable summary and a manifest listing
each emitted file with its content digest.

Numbers in CSV files are written with 17 significant digits, comma
separators, a header row and LF line endings, so reruns with identical
configuration are byte-identical. Wall-clock time lives in the manifest
only, which is the one deliberately non-reproducible artifact.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, faults
from .checks import run_battery
from .linearization import pl_scan, stability_probe
from .measures import (
    ControlPath,
    ParticleMeasure,
    PriorMeasure,
    measure_to_csv,
    moment,
)
from .model import ConfigError, load_problem_config, rng_for
from .optimizer import (
    fp_descent_step,
    langevin_descent_step,
    picard_solve,
    sample_prior,
    total_cost,
)
from .trajectories import backward_solve, forward_solve

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NO_CONVERGENCE = 2
EXIT_INVARIANT = 3

_MEASURE_KEYS = {"res", "box_halfwidth"}
_SOLVE_KEYS = {"damping", "tol", "max_iters"}
_DESCENT_KEYS = {"backend", "steps", "step_size", "particles", "init_tilt"}
_STABILITY_KEYS = {"iters", "margin"}
_PL_KEYS = {"radius", "samples"}
_TOOL_SECTIONS = {
    "measure": _MEASURE_KEYS,
    "solve": _SOLVE_KEYS,
    "descent": _DESCENT_KEYS,
    "stability": _STABILITY_KEYS,
    "pl_scan": _PL_KEYS,
}


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _split_document(doc: dict):
    """Separate tool sections from the problem document; both strict."""
    if not isinstance(doc, dict):
        raise ConfigError("configuration document must be a JSON object")
    problem = {}
    tools = {}
    for key, value in doc.items():
        if key in _TOOL_SECTIONS:
            section = dict(value)
            for sub in section:
                if sub not in _TOOL_SECTIONS[key]:
                    raise ConfigError(f"unknown configuration key {key}.{sub!r}")
            tools[key] = section
        else:
            problem[key] = value
    return problem, tools


def _apply_override(doc: dict, dotted: str, raw: str):
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = doc
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot descend into configuration key {part!r}")
    node[parts[-1]] = value


def load_run_document(path: str, overrides, seed=None):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        _apply_override(doc, dotted, raw)
    if seed is not None:
        doc["seed"] = int(seed)
    problem_doc, tools = _split_document(doc)
    config = load_problem_config(problem_doc)
    return config, tools, doc


class RunWriter:
    """Collects emitted files and finalizes the run manifest."""

    def __init__(self, out_dir: Path, command: str, doc: dict, threads: int):
        self.out_dir = out_dir
        self.command = command
        self.doc = doc
        self.threads = threads
        self.started = time.monotonic()
        self.files = []
        out_dir.mkdir(parents=True, exist_ok=True)

    def write_text(self, name: str, content: str):
        path = self.out_dir / name
        data = content.encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(data)
        self.files.append({"name": name, "sha256": hashlib.sha256(data).hexdigest()})

    def write_json(self, name: str, payload: dict):
        self.write_text(name, json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def finalize(self):
        manifest = {
            "command": self.command,
            "config": self.doc,
            "seed": self.doc.get("seed", 0),
            "version": __version__,
            "threads": self.threads,
            "wall_clock_s": time.monotonic() - self.started,
            "files": self.files,
        }
        path = self.out_dir / "manifest.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _tool(tools, section, key, default):
    return tools.get(section, {}).get(key, default)


def _initial_grid_path(config, tools):
    res = int(_tool(tools, "measure", "res", 64))
    halfwidth = float(_tool(tools, "measure", "box_halfwidth", 4.0))
    prior = PriorMeasure.build(config.potential, halfwidth, res, config.field.dprime)
    return ControlPath.constant(config.grid, prior.measure), prior


def _path_to_csv(path: ControlPath) -> str:
    template = path.measures[0]
    coords = template.midpoints()
    lines = [
        "node," + ",".join(f"a{i}" for i in range(template.dprime)) + ",value"
    ]
    for k, nu in enumerate(path.measures):
        vals = nu.values.ravel()
        for row, v in zip(coords, vals):
            lines.append(
                str(k) + "," + ",".join(_fmt(c) for c in row) + "," + _fmt(v)
            )
    return "\n".join(lines) + "\n"


def cmd_solve(config, tools, writer) -> int:
    path, prior = _initial_grid_path(config, tools)
    result = picard_solve(
        config,
        path,
        damping=float(_tool(tools, "solve", "damping", 0.5)),
        tol=float(_tool(tools, "solve", "tol", 1e-8)),
        max_iters=int(_tool(tools, "solve", "max_iters", 500)),
    )
    lines = ["iteration,residual"]
    for i, r in enumerate(result.residual_history):
        lines.append(f"{i},{_fmt(r)}")
    writer.write_text("residuals.csv", "\n".join(lines) + "\n")
    writer.write_text("nu_star.csv", _path_to_csv(result.path))
    writer.write_json(
        "summary.json",
        {
            "converged": result.converged,
            "iterations": result.iterations,
            "residual": result.report.picard_residual,
            "cost": result.report.cost,
            "terminal": result.report.terminal,
            "entropy": result.report.entropy,
            "fisher": result.report.fisher,
        },
    )
    return EXIT_OK if result.converged else EXIT_NO_CONVERGENCE


def _tilted_start(config, prior, path, amplitude=0.3):
    """Deterministic perturbed start for descent runs."""
    from .measures import GridMeasure

    template = path.measures[0]
    mids = template.midpoints()
    psi = (np.cos(mids[:, 0]) - 0.4 * np.sin(0.7 * mids[:, 1])).reshape(
        template.values.shape
    )
    measures = [
        GridMeasure.from_log_values(
            template.halfwidth,
            template.res,
            np.log(np.maximum(nu.values, 1e-300)) + amplitude * psi,
        )
        for nu in path.measures
    ]
    return path.replace_measures(measures)


def cmd_descent(config, tools, writer) -> int:
    backend = _tool(tools, "descent", "backend", "grid")
    steps = int(_tool(tools, "descent", "steps", 100))
    h = float(_tool(tools, "descent", "step_size", 1e-3))
    tilt = float(_tool(tools, "descent", "init_tilt", 0.3))
    if backend == "grid":
        return _descent_grid(config, tools, writer, steps, h, tilt)
    if backend == "particle":
        return _descent_particle(config, tools, writer, steps, h, tilt)
    raise ConfigError(f"unknown descent backend {backend!r}")


def _descent_grid(config, tools, writer, steps, h, tilt) -> int:
    base, prior = _initial_grid_path(config, tools)
    path = _tilted_start(config, prior, base, amplitude=tilt)
    # dj_over_h uses the requested step; the halvings column flags steps the
    # positivity guard shortened, where that quotient is not meaningful
    rows = ["step,cost,terminal,entropy,fisher,dj_over_h,halvings"]
    prev_cost = None
    for k in range(steps):
        out = fp_descent_step(config, path, h, prior=prior)
        report = out.report
        dj = "" if prev_cost is None else _fmt((report.cost - prev_cost) / h)
        rows.append(
            f"{k},{_fmt(report.cost)},{_fmt(report.terminal)},"
            f"{_fmt(report.entropy)},{_fmt(report.fisher)},{dj},{out.halvings}"
        )
        prev_cost = report.cost
        path = out.path
    final = total_cost(config, path, with_fisher=True, prior=prior)
    dj = "" if prev_cost is None else _fmt((final.cost - prev_cost) / h)
    rows.append(
        f"{steps},{_fmt(final.cost)},{_fmt(final.terminal)},"
        f"{_fmt(final.entropy)},{_fmt(final.fisher)},{dj},0"
    )
    writer.write_text("series.csv", "\n".join(rows) + "\n")
    writer.write_text("final_state.csv", _path_to_csv(path))
    writer.write_json(
        "summary.json",
        {
            "backend": "grid",
            "steps": steps,
            "step_size": h,
            "final_cost": final.cost,
            "final_fisher": final.fisher,
        },
    )
    return EXIT_OK


def _descent_particle(config, tools, writer, steps, h, tilt) -> int:
    m = int(_tool(tools, "descent", "particles", 2000))
    rng = rng_for(config.seed, "descent-particle")
    points = sample_prior(config.potential, config.field.dprime, m, rng)
    path = ControlPath.constant(config.grid, ParticleMeasure(points))
    rows = []
    header = (
        "step,node,"
        + ",".join(f"mean_a{i}" for i in range(config.field.dprime))
        + ","
        + ",".join(f"var_a{i}" for i in range(config.field.dprime))
        + ",resampled"
    )
    rows.append(header)

    def emit(step, resampled):
        for k, nu in enumerate(path.measures):
            means = np.mean(nu.points, axis=0)
            variances = np.var(nu.points, axis=0)
            rows.append(
                f"{step},{k},"
                + ",".join(_fmt(v) for v in means)
                + ","
                + ",".join(_fmt(v) for v in variances)
                + f",{resampled}"
            )

    emit(0, 0)
    for s in range(steps):
        out = langevin_descent_step(config, path, h, rng)
        path = out.path
        emit(s + 1, out.resampled)
    writer.write_text("series.csv", "\n".join(rows) + "\n")
    import io

    buf = io.StringIO()
    measure_to_csv(path.measures[-1], buf)
    writer.write_text("final_particles.csv", buf.getvalue())
    writer.write_json(
        "summary.json",
        {
            "backend": "particle",
            "steps": steps,
            "step_size": h,
            "particles": m,
            "final_second_moment": moment(path.measures[-1], 2),
        },
    )
    return EXIT_OK


def _solved_state(config, tools):
    path, prior = _initial_grid_path(config, tools)
    result = picard_solve(
        config,
        path,
        damping=float(_tool(tools, "solve", "damping", 0.5)),
        tol=float(_tool(tools, "solve", "tol", 1e-8)),
        max_iters=int(_tool(tools, "solve", "max_iters", 500)),
    )
    if not result.converged:
        return None, None, None
    flow = forward_solve(config, result.path)
    flow = backward_solve(config, result.path, flow, with_hessian=True)
    return result, prior, flow


def cmd_stability(config, tools, writer) -> int:
    result, prior, flow = _solved_state(config, tools)
    if result is None:
        return EXIT_NO_CONVERGENCE
    report = stability_probe(
        config,
        result.path,
        flow,
        iters=int(_tool(tools, "stability", "iters", 10)),
        margin=float(_tool(tools, "stability", "margin", 0.1)),
        rng=rng_for(config.seed, "stability-probe"),
    )
    rows = ["index,ritz_value"]
    for i, val in enumerate(report.details["ritz"]):
        rows.append(f"{i},{_fmt(val)}")
    writer.write_text("ritz.csv", "\n".join(rows) + "\n")
    writer.write_json(
        "summary.json",
        {
            "dominant_eig": report.dominant_eig,
            "eta_residual": report.eta_residual,
            "margin_from_one": report.details["margin_from_one"],
            "stable_evidence": report.details["stable_evidence"],
            "cost": result.report.cost,
        },
    )
    return EXIT_OK


def cmd_pl_scan(config, tools, writer) -> int:
    result, prior, flow = _solved_state(config, tools)
    if result is None:
        return EXIT_NO_CONVERGENCE
    report = pl_scan(
        config,
        result.path,
        result.report.cost,
        radius=float(_tool(tools, "pl_scan", "radius", 0.1)),
        samples=int(_tool(tools, "pl_scan", "samples", 200)),
        rng=rng_for(config.seed, "pl-scan"),
        prior=prior,
    )
    rows = ["sample,entropy,cost,gap,fisher,ratio"]
    for row in report.details["rows"]:
        ratio = _fmt(row["ratio"]) if "ratio" in row else ""
        rows.append(
            f"{row['sample']},{_fmt(row['entropy'])},{_fmt(row['cost'])},"
            f"{_fmt(row['gap'])},{_fmt(row['fisher'])},{ratio}"
        )
    writer.write_text("samples.csv", "\n".join(rows) + "\n")
    ratio = report.pl_ratio
    writer.write_json(
        "summary.json",
        {
            "pl_ratio": None if (ratio is None or math.isnan(ratio)) else ratio,
            "samples": report.details["samples"],
            "radius": report.details["radius"],
            "optimal_cost": result.report.cost,
        },
    )
    return EXIT_OK


def cmd_check(config, tools, writer) -> int:
    results = run_battery(config)
    width = max(len(r.name) for r in results)
    lines = []
    for r in results:
        status = "pass" if r.ok else "FAIL"
        lines.append(f"{r.name:<{width}}  {status}  {r.detail}")
        print(lines[-1])
    writer.write_text("check_table.txt", "\n".join(lines) + "\n")
    writer.write_json(
        "summary.json",
        {
            "passed": sum(r.ok for r in results),
            "failed": sum(not r.ok for r in results),
            "results": [
                {"name": r.name, "ok": r.ok, "detail": r.detail} for r in results
            ],
        },
    )
    failures = [r.name for r in results if not r.ok]
    if failures:
        print(f"failing invariants: {', '.join(failures)}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


COMMANDS = {
    "solve": cmd_solve,
    "descent": cmd_descent,
    "stability": cmd_stability,
    "pl-scan": cmd_pl_scan,
    "check": cmd_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfoc",
        description=(
            "Solve, descend and probe entropically regularized mean-field "
            "control problems for continuous-depth networks."
        ),
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="JSON configuration document")
    parser.add_argument(
        "--out",
        default=None,
        help="output directory (falls back to $OUTPUT_DIR, then ./out)",
    )
    parser.add_argument("--seed", type=int, default=None, help="override the seed")
    parser.add_argument(
        "--threads",
        type=int,
        default=1,
        help="parallelism bound; all reductions are fixed-order, so results "
        "are identical for any value",
    )
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="K=V",
        help="override a configuration entry by dotted path (repeatable)",
    )
    parser.add_argument(
        "--inject-fault",
        default=None,
        choices=sorted(faults.KNOWN_FAULTS),
        help="testing aid: corrupt a named internal quantity",
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out or os.environ.get("OUTPUT_DIR", "out"))
    try:
        config, tools, doc = load_run_document(args.config, args.set, args.seed)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    writer = RunWriter(out_dir, args.command, doc, args.threads)
    if args.inject_fault:
        faults.inject(args.inject_fault)
    try:
        code = COMMANDS[args.command](config, tools, writer)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    finally:
        faults.clear()
        writer.finalize()
    return code


if __name__ == "__main__":
    sys.exit(main())
