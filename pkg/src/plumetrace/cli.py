"""Command-line entry point.

Subcommands: ``mesh`` (build or inspect a mesh, with a stability preview),
``simulate`` (write ground-truth and observation files), ``estimate`` (run
an estimator against an observation file) and ``compare`` (merge estimator
summaries into a table).  Configuration is a sectioned key-value text file;
unknown sections or keys are rejected rather than silently ignored, and a
scenario digest is embedded in every output so estimation against
mismatched observations fails loudly.

Exit codes: 0 on success, 2 on validation failure, 1 on runtime error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from pathlib import Path

import numpy as np

from plumetrace import experiment, fem, flowfield, mesh as meshmod, sensing

__all__ = ["main", "load_config"]


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {value!r}")


def _parse_dt(value: str):
    if value.strip().lower() == "auto":
        return None
    return float(value)


# section -> key -> (config attribute or tuple slot, converter)
_SCHEMA = {
    "mesh": {
        "file": ("mesh_file", str),
        "x0": (("domain", 0), float),
        "y0": (("domain", 1), float),
        "x1": (("domain", 2), float),
        "y1": (("domain", 3), float),
        "nx": ("nx", int),
        "ny": ("ny", int),
    },
    "flow": {
        "kind": ("flow_kind", str),
        "u": ("flow_u", float),
        "v": ("flow_v", float),
        "center_x": (("flow_center", 0), float),
        "center_y": (("flow_center", 1), float),
        "rate": ("flow_rate", float),
        "file": ("flow_file", str),
    },
    "physics": {
        "diffusivity": ("diffusivity", float),
        "auto_stabilise": ("auto_stabilise", _parse_bool),
        "dt": ("dt", _parse_dt),
        "steps": ("steps", int),
        "source_x": (("source", 0), float),
        "source_y": (("source", 1), float),
        "strength": ("strength", float),
        "field_noise": ("field_noise", float),
        "strength_walk": ("strength_walk", float),
    },
    "sensors": {
        "file": ("sensor_file", str),
        "layout": ("sensor_layout", str),
        "count": ("sensor_count", int),
        "detect_rate": ("detect_rate", float),
        "scale": ("quantiser_scale", float),
        "levels": ("quantiser_levels", int),
        "noise": ("sensor_noise", float),
    },
    "estimator": {
        "kind": ("estimator", str),
        "size": ("size", int),
        "init_cov": ("init_cov", float),
    },
    "run": {
        "trials": ("trials", int),
        "seed": ("seed", int),
        "node_stride": ("node_stride", int),
    },
}


def load_config(path) -> experiment.ScenarioConfig:
    """Parse a sectioned key-value config file into a ScenarioConfig.

    Unknown sections or keys raise ``ValueError`` so typos never pass
    silently.
    """
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#",)
    )
    if not Path(path).is_file():
        raise ValueError(f"config file {path} not found")
    parser.read(path, encoding="utf-8")
    config = experiment.ScenarioConfig()
    tuples = {
        "domain": list(config.domain),
        "flow_center": list(config.flow_center),
        "source": list(config.source),
    }
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ValueError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            target = _SCHEMA[section].get(key)
            if target is None:
                raise ValueError(
                    f"unknown key '{key}' in config section [{section}]"
                )
            attr, convert = target
            try:
                value = convert(raw)
            except ValueError as exc:
                raise ValueError(
                    f"bad value for [{section}] {key}: {exc}"
                ) from exc
            if isinstance(attr, tuple):
                name, slot = attr
                tuples[name][slot] = value
            else:
                setattr(config, attr, value)
    config.domain = tuple(tuples["domain"])
    config.flow_center = tuple(tuples["flow_center"])
    config.source = tuple(tuples["source"])
    config.validate()
    return config


def _apply_overrides(config: experiment.ScenarioConfig, args) -> None:
    if args.seed is not None:
        config.seed = args.seed
    if getattr(args, "force", False):
        config.force_dt = True


def _load_or_default(args) -> experiment.ScenarioConfig:
    config = (
        load_config(args.config) if args.config else experiment.ScenarioConfig()
    )
    _apply_overrides(config, args)
    return config


def _print_stability(report: fem.StabilityReport) -> None:
    print(
        f"stability: lambda_max={report.lambda_max:.6g} "
        f"critical_dt={report.critical_dt:.6g} "
        f"courant_dt={report.courant_dt:.6g} "
        f"diffusion_dt={report.diffusion_dt:.6g}"
    )
    print(f"peclet: max={report.max_peclet:.6g}")
    if report.max_peclet > 1.0:
        print(
            "warning: Pe > 1; suggested artificial diffusivity "
            f"lambda*={report.artificial_diffusivity:.6g}"
        )


def cmd_mesh(args) -> int:
    if args.infile:
        grid = meshmod.load_mesh(args.infile)
    else:
        if args.rect is None:
            raise ValueError("either --rect or --in is required")
        x0, y0, x1, y1 = args.rect
        grid = meshmod.build_structured_mesh(x0, y0, x1, y1, args.nx, args.ny)
    print(f"nodes {grid.node_count}  elements {grid.element_count}")
    if args.diffusivity is not None:
        flow = flowfield.UniformFlow(args.flow_u, args.flow_v)
        velocities = flowfield.element_velocities(flow, grid, 0.0)
        report = fem.stability_report(grid, velocities, args.diffusivity)
        _print_stability(report)
        if args.dt is not None:
            verdict = "stable" if report.approves(args.dt) else "UNSTABLE"
            print(f"dt={args.dt:g}: {verdict}")
    if args.out:
        meshmod.save_mesh(grid, args.out)
        print(f"wrote {args.out}")
    return 0


def cmd_simulate(args) -> int:
    config = _load_or_default(args)
    scenario = experiment.build_scenario(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    trajectories: dict[int, np.ndarray] = {}
    logs: dict[int, list] = {}
    for trial in range(config.trials):
        rng = np.random.default_rng(
            np.random.SeedSequence((config.seed, experiment.STREAM_TRUTH, trial))
        )
        states, observations = experiment.simulate_ground_truth(scenario, rng)
        trajectories[trial] = states
        logs[trial] = observations

    experiment.write_truth_csv(trajectories, out / "truth.csv", config)
    experiment.write_observations_csv(logs, out / "observations.csv", config)
    sensing.save_sensor_layout(scenario.network, out / "sensors.txt")
    print(
        f"simulated {config.trials} trial(s) x {config.steps} step(s), "
        f"dt={scenario.dt:g}, config {config.scenario_hash()}"
    )
    print(f"wrote {out / 'truth.csv'}, {out / 'observations.csv'}, "
          f"{out / 'sensors.txt'}")
    return 0


def cmd_estimate(args) -> int:
    config = _load_or_default(args)
    out = Path(args.out)
    obs_path = Path(args.obs) if args.obs else out / "observations.csv"
    if not obs_path.is_file():
        raise ValueError(f"observation file {obs_path} not found")
    file_hash, logs = experiment.load_observations_csv(obs_path)
    expected = config.scenario_hash()
    if file_hash != expected:
        raise ValueError(
            f"observation file {obs_path} was simulated under config "
            f"{file_hash}, but the current config hashes to {expected}"
        )
    out.mkdir(parents=True, exist_ok=True)
    scenario = experiment.build_scenario(config)
    results = [
        experiment.run_trial(config, trial, scenario=scenario,
                             observations=logs[trial])
        for trial in sorted(logs)
    ]
    results_path = out / f"estimates_{config.estimator}.csv"
    summary_path = out / f"summary_{config.estimator}.json"
    experiment.write_results_csv(results, results_path, config)
    doc = experiment.write_summary_json(results, summary_path, config)
    print(
        f"{config.estimator} size={config.size}: AEE={doc['aee']:.6g} over "
        f"{doc['trials']} trial(s)"
    )
    print(f"wrote {results_path}, {summary_path}")
    return 0


def cmd_compare(args) -> int:
    rows = []
    hashes = set()
    for path in args.summaries:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        hashes.add(doc["config_hash"])
        rows.append(
            (doc["estimator"], int(doc["size"]), float(doc["aee"]),
             float(doc["runtime_total"]))
        )
    if len(hashes) > 1:
        raise ValueError(
            f"summaries come from different scenarios (hashes {sorted(hashes)})"
        )
    header = ("method", "size", "aee", "runtime_s")
    widths = [10, 6, 14, 12]
    print("".join(h.ljust(w) for h, w in zip(header, widths)))
    for method, size, aee, runtime in rows:
        print(
            f"{method.ljust(widths[0])}{str(size).ljust(widths[1])}"
            f"{format(aee, '.6g').ljust(widths[2])}"
            f"{format(runtime, '.3g').ljust(widths[3])}"
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table_path = out / "comparison.csv"
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write(f"# config {next(iter(hashes))}\n")
        fh.write("method,size,aee,runtime_s\n")
        for method, size, aee, runtime in rows:
            fh.write(
                f"{method},{size},{format(aee, '.17g')},"
                f"{format(runtime, '.17g')}\n"
            )
    print(f"wrote {table_path}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario config file")
    common.add_argument("--seed", type=int, default=None,
                        help="override the master seed")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--force", action="store_true",
                        help="run even if the time step is unstable")
    common.add_argument("--threads", type=int, default=1,
                        help="worker processes for trial-level parallelism")

    parser = argparse.ArgumentParser(
        prog="plumetrace",
        description="Dispersion simulation and source-strength estimation "
                    "from quantised sensor networks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_mesh = sub.add_parser("mesh", parents=[common],
                            help="build or inspect a triangular mesh")
    p_mesh.add_argument("--rect", nargs=4, type=float,
                        metavar=("X0", "Y0", "X1", "Y1"),
                        help="rectangle corners")
    p_mesh.add_argument("--nx", type=int, default=10)
    p_mesh.add_argument("--ny", type=int, default=10)
    p_mesh.add_argument("--in", dest="infile", help="read a mesh file instead")
    p_mesh.add_argument("--diffusivity", type=float, default=None,
                        help="print a stability preview for this diffusivity")
    p_mesh.add_argument("--flow-u", type=float, default=0.0)
    p_mesh.add_argument("--flow-v", type=float, default=0.0)
    p_mesh.add_argument("--dt", type=float, default=None,
                        help="check this time step in the preview")
    p_mesh.set_defaults(func=cmd_mesh, out=None)

    p_sim = sub.add_parser("simulate", parents=[common],
                           help="simulate ground truth and observations")
    p_sim.set_defaults(func=cmd_simulate)

    p_est = sub.add_parser("estimate", parents=[common],
                           help="run an estimator on simulated observations")
    p_est.add_argument("--obs", default=None,
                       help="observation CSV (default: <out>/observations.csv)")
    p_est.set_defaults(func=cmd_estimate)

    p_cmp = sub.add_parser("compare", parents=[common],
                           help="merge estimator summaries into a table")
    p_cmp.add_argument("summaries", nargs="+", help="summary JSON files")
    p_cmp.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
