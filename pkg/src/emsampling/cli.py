"""``emsampling`` command-line interface.

Exit codes: 0 success, 1 invalid input (usage, config, file format), 2 solver
failure, 3 degenerate reconstruction.  Output files are written to a
temporary name and renamed into place, so failures leave no partial files.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import verify
from .config import ConfigError, load_config
from .datasets import FormatError, NoiseSpec, add_noise, read_ffp, write_ffp, write_volume
from .forward import THREADS_ENV, ScatteringProblem, SolverError, assemble_far_field_data
from .imaging import (METHODS, DegenerateVolumeError, SamplingGrid, isovalue, normalize_volume,
                      sweep)

logger = logging.getLogger("emsampling")

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_DEGENERATE = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="emsampling",
                     description="Sampling-method imaging from electromagnetic far-field data.",
                     epilog=f"Set {THREADS_ENV} to the number of worker threads for solves.")
    parser.add_argument("-q", "--quiet", action="store_true", help="only report errors")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="solve the forward problem and write FFP1 data")
    p.add_argument("--config", required=True, help="scene and run configuration (INI)")
    p.add_argument("--out", required=True, help="output FFP1 file")
    p.add_argument("--full", action="store_true", help="also store full 3x3 far-field matrices")

    p = sub.add_parser("noise", help="add seeded uniform noise to FFP1 data")
    p.add_argument("--in", dest="inp", required=True, help="input FFP1 file")
    p.add_argument("--delta", type=float, required=True, help="relative noise level")
    p.add_argument("--seed", type=_u64, required=True, help="generator seed (u64)")
    p.add_argument("--out", required=True, help="output FFP1 file")

    p = sub.add_parser("reconstruct", help="sweep an imaging functional over a cube")
    p.add_argument("--data", required=True, help="input FFP1 file")
    p.add_argument("--method", required=True, type=str.lower,
                   choices=[m.lower() for m in METHODS])
    p.add_argument("--grid-extent", type=float, default=1.0,
                   help="half side of the sampling cube (default 1)")
    p.add_argument("--grid-spacing", type=float, default=None,
                   help="lattice spacing (default: wavelength / 10)")
    p.add_argument("--out", required=True, help="output VTK volume")

    p = sub.add_parser("verify", help="run numerical verification suites")
    p.add_argument("suite", choices=list(verify.SUITES) + ["all"])
    p.add_argument("--scale", choices=list(verify.SCALES), default="desk")
    return parser


def cmd_simulate(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        logger.error("config error in %s: %s", args.config, exc)
        return EXIT_INPUT
    full = cfg.full or args.full
    ds_obs, ds_inc = cfg.direction_sets()
    problem = ScatteringProblem(cfg.scene, cfg.k, cfg=cfg.solver)
    if "warning" in problem.metadata:
        logger.warning(problem.metadata["warning"])
    logger.info("k = %g, %d x %d directions, grid %s, %d support cells", cfg.k, len(ds_obs),
                len(ds_inc), "x".join(map(str, problem.grid.dims)), problem.n_support)
    try:
        data = assemble_far_field_data(cfg.scene, ds_obs, ds_inc, cfg.p, cfg.k, cfg.solver,
                                       full=full, problem=problem)
    except SolverError as exc:
        direction = "unknown" if exc.direction is None else np.array2string(exc.direction)
        logger.error("solver failed for incident direction %s: %s", direction, exc)
        return EXIT_SOLVER
    for j, res in enumerate(data.metadata.get("residuals", [])):
        logger.info("direction %4d  d = %s  residual %.3e", j,
                    np.array2string(ds_inc.nodes[j], precision=4), res)
    if cfg.noise is not None:
        data = add_noise(data, cfg.noise)
        logger.info("added noise: delta = %g, seed = %d", cfg.noise.delta, cfg.noise.seed)
    write_ffp(data, args.out)
    logger.info("wrote %s", args.out)
    return EXIT_OK


def cmd_noise(args) -> int:
    try:
        spec = NoiseSpec(args.delta, args.seed)
    except ValueError as exc:
        logger.error("%s", exc)
        return EXIT_INPUT
    try:
        data = read_ffp(args.inp)
    except (FormatError, OSError) as exc:
        logger.error("cannot read %s: %s", args.inp, exc)
        return EXIT_INPUT
    write_ffp(add_noise(data, spec), args.out)
    logger.info("wrote %s (delta = %g, seed = %d)", args.out, spec.delta, spec.seed)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    try:
        data = read_ffp(args.data)
    except (FormatError, OSError) as exc:
        logger.error("cannot read %s: %s", args.data, exc)
        return EXIT_INPUT
    spacing = args.grid_spacing if args.grid_spacing is not None else 2 * np.pi / data.k / 10
    try:
        grid = SamplingGrid.cube(args.grid_extent, spacing)
    except ValueError as exc:
        logger.error("invalid sampling grid: %s", exc)
        return EXIT_INPUT
    vol = sweep(data, grid, args.method)
    try:
        vol = normalize_volume(vol)
    except DegenerateVolumeError as exc:
        logger.error("%s", exc)
        return EXIT_DEGENERATE
    write_volume(vol, args.out)
    peak = vol.argmax_point()
    print(f"method {vol.method}, grid {'x'.join(map(str, grid.dims))}, spacing {grid.spacing:.6g}")
    print(f"maximum {vol.metadata['normalized_by']:.6e} at "
          f"({peak[0]:.6f}, {peak[1]:.6f}, {peak[2]:.6f})")
    vmax = vol.metadata["normalized_by"]
    for label, frac in (("1/3", 1 / 3), ("1/2", 1 / 2)):
        level = isovalue(vol, frac)
        print(f"isovalue {label}: {level:.6f} (unnormalized {level * vmax:.6e})")
    return EXIT_OK


def cmd_verify(args) -> int:
    checks = verify.run_suite(args.suite, verify.SCALES[args.scale])
    print(verify.format_table(checks))
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_OK if not failed else EXIT_INPUT


COMMANDS = {"simulate": cmd_simulate, "noise": cmd_noise, "reconstruct": cmd_reconstruct,
            "verify": cmd_verify}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s: %(message)s", stream=sys.stderr, force=True)
    try:
        return COMMANDS[args.command](args)
    except OSError as exc:
        logger.error("%s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
