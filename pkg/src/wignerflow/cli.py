"""Command-line entry point: density/quantile curves, flow dumps, verify suites.

Outputs are plain CSV (curves, trajectories) and JSON (reports); plotting is
left to external tools.  Identical (config, seed) reproduce identical report
bytes; timestamps live only in the run manifest.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import det_approx as da
from . import flow as fl
from . import mde
from . import verify as vf

ENV_SEED = "WIGNERFLOW_SEED"


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    seed: int | None
    config_hash: str
    out_dir: str
    argv: list
    started: str
    finished: str | None = None

    def write(self, out_dir: Path) -> None:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())


def _hash_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list, rows) -> None:
    with path.open("w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(f"{x:.17g}" if isinstance(x, float) else str(x)
                              for x in row) + "\n")


def _load_deformation(path: str | None, parser: argparse.ArgumentParser) -> mde.Deformation:
    if path is None:
        return mde.Deformation.zero(2)
    p = Path(path)
    if not p.exists():
        parser.exit(2, f"deformation file not found: {path}\n")
    try:
        return mde.Deformation.from_json(p.read_text())
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        parser.exit(2, f"bad deformation file {path}: {exc}\n")


# ---------------------------------------------------------------------------
# mde subcommand


def cmd_mde(args, parser) -> int:
    D = _load_deformation(args.deformation, parser)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("mde", args.deformation, None,
                           _hash_text(json.dumps(D.to_json(), sort_keys=True)),
                           str(out), sys.argv[1:], _now())

    lo = float(D.eigenvalues.min() - 2.5)
    hi = float(D.eigenvalues.max() + 2.5)
    grid = np.linspace(lo, hi, args.grid)
    rho = mde.density_curve(D, grid)
    _write_csv(out / "density.csv", ["E", "rho"],
               ((float(e), float(r)) for e, r in zip(grid, rho)))

    if args.quantiles:
        gammas = mde.quantiles(D, args.quantiles)
        _write_csv(out / "quantiles.csv", ["i", "gamma"],
                   ((i + 1, float(g)) for i, g in enumerate(gammas)))

    intervals = mde.kappa_bulk(D, args.kappa, grid=max(args.grid, 1024))
    _write_json(out / "bulk.json", {
        "kappa": args.kappa,
        "intervals": [[a, b] for a, b in intervals],
    })
    manifest.finished = _now()
    manifest.write(out)
    return 0


# ---------------------------------------------------------------------------
# flow subcommand


def _parse_z(text: str, parser) -> complex:
    try:
        re_s, im_s = text.split(",")
        return complex(float(re_s), float(im_s))
    except ValueError:
        parser.exit(2, f"bad complex literal {text!r}; expected 're,im'\n")


def cmd_flow(args, parser) -> int:
    D = _load_deformation(args.deformation, parser)
    z0 = _parse_z(args.z0, parser)
    if z0.imag == 0:
        parser.exit(2, "flow requires Im z0 != 0\n")
    z0_second = _parse_z(args.z0_second, parser) if args.z0_second else np.conj(z0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("flow", args.deformation, None,
                           _hash_text(f"{z0}{z0_second}{args.t_final}{args.dt}"),
                           str(out), sys.argv[1:], _now())

    nu0 = da.SpectralPair.solve(D, z0)
    nu0b = da.SpectralPair.solve(D, complex(z0_second))
    traj = fl.flow_integrate(nu0, args.t_final, dt=args.dt)
    rows = []
    for state in traj.states:
        pair2 = fl.flow_map(nu0b, state.t).pair
        c = da.trace_prod(state.pair, pair2)
        f = max(2.0 * (c / (1.0 - c)).real, 0.0)
        beta_t = abs(1.0 - c)
        deviation = abs(state.z - fl.flow_closed_form(nu0, state.t))
        rows.append((float(state.t), state.z.real, state.z.imag,
                     state.sol.m.real, state.sol.m.imag, state.sol.rho,
                     float(f), float(beta_t), float(deviation)))
    _write_csv(out / "trajectory.csv",
               ["t", "re_z", "im_z", "re_m", "im_m", "rho", "f", "beta",
                "closed_form_deviation"], rows)
    _write_json(out / "flow.json", {
        "exited": traj.exited,
        "steps": len(traj.states) - 1,
        "final_t": traj.final.t,
        "final_z": [traj.final.z.real, traj.final.z.imag],
        "max_closed_form_deviation": max(r[-1] for r in rows),
    })
    manifest.finished = _now()
    manifest.write(out)
    return 0


# ---------------------------------------------------------------------------
# verify subcommand


def _resolve_config(args, parser) -> vf.ExperimentConfig:
    if args.config:
        p = Path(args.config)
        if not p.exists():
            parser.exit(2, f"config file not found: {args.config}\n")
        try:
            cfg = vf.ExperimentConfig.from_json(json.loads(p.read_text()))
        except (TypeError, ValueError, KeyError, json.JSONDecodeError) as exc:
            parser.exit(2, f"bad config {args.config}: {exc}\n")
    elif args.suite == "smoke":
        cfg = vf.smoke_config()
    else:
        cfg = vf.default_config()
    # precedence: flag > environment > config
    seed = args.seed
    if seed is None and os.environ.get(ENV_SEED):
        try:
            seed = int(os.environ[ENV_SEED])
        except ValueError:
            parser.exit(2, f"bad {ENV_SEED} value {os.environ[ENV_SEED]!r}\n")
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if overrides:
        from dataclasses import replace
        cfg = replace(cfg, **overrides)
    return cfg


def cmd_verify(args, parser) -> int:
    cfg = _resolve_config(args, parser)
    if args.test:
        names = list(args.test)
        unknown = [t for t in names if t not in vf.TESTS]
        if unknown:
            parser.exit(2, f"unknown test name(s): {', '.join(unknown)}\n")
    else:
        names = list(vf.SUITES[args.suite or "smoke"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("verify", args.config, cfg.seed, cfg.content_hash(),
                           str(out), sys.argv[1:], _now())
    _write_json(out / "config.json", cfg.to_json())

    reports = vf.run_tests(cfg, names)
    summary = {}
    for name, report in reports.items():
        _write_json(out / f"report_{name}.json", report)
        summary[name] = bool(report.get("pass", False))
        print(f"{name}: {'PASS' if summary[name] else 'FAIL'}")
    _write_json(out / "summary.json", {"tests": summary,
                                       "all_pass": all(summary.values()),
                                       "seed": cfg.seed,
                                       "config_hash": cfg.content_hash()})
    if args.dump_samples:
        vf.dump_overlap_samples(cfg, out / "overlap_samples.csv")
    manifest.finished = _now()
    manifest.write(out)
    if not all(summary.values()):
        failing = [k for k, v in summary.items() if not v]
        print(f"FAILED: {', '.join(failing)}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wignerflow",
        description="Deformed Wigner matrices: MDE densities, characteristic "
                    "flow, and Monte Carlo verification suites.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_mde = sub.add_parser("mde", help="density, quantiles and bulk intervals")
    p_mde.add_argument("--deformation", help="deformation JSON file")
    p_mde.add_argument("--grid", type=int, default=2048)
    p_mde.add_argument("--quantiles", type=int, default=0)
    p_mde.add_argument("--kappa", type=float, default=0.05)
    p_mde.add_argument("--out", default="out")

    p_flow = sub.add_parser("flow", help="characteristic-flow trajectory dump")
    p_flow.add_argument("--deformation", help="deformation JSON file")
    p_flow.add_argument("--z0", default="0.0,2.0", help="initial z as 're,im'")
    p_flow.add_argument("--z0-second", dest="z0_second",
                        help="partner trajectory start (default: conj z0)")
    p_flow.add_argument("-T", "--time", dest="t_final", type=float, default=1.0)
    p_flow.add_argument("--dt", type=float, default=1e-3)
    p_flow.add_argument("--out", default="out")

    p_ver = sub.add_parser("verify", help="run acceptance suites")
    p_ver.add_argument("--config", help="experiment config JSON")
    p_ver.add_argument("--suite", choices=sorted(vf.SUITES))
    p_ver.add_argument("--test", action="append",
                       help="run a single named test (repeatable)")
    p_ver.add_argument("--seed", type=int)
    p_ver.add_argument("--out", default="out")
    p_ver.add_argument("--workers", type=int)
    p_ver.add_argument("--dump-samples", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "mde":
        return cmd_mde(args, parser)
    if args.command == "flow":
        return cmd_flow(args, parser)
    if args.command == "verify":
        return cmd_verify(args, parser)
    parser.error(f"unknown command {args.command!r}")
    return 2


if __name__ == "__main__":
    sys.exit(main())
