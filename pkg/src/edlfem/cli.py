"""Command line interface.

Subcommands: run, preset-list, capacitance, convergence, compare-np, diode2d.
Exit codes: 0 success, 2 configuration error, 3 solver non-convergence,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .errors import ConfigurationError
from .scenarios import PRESETS, Scenario, load_config, load_preset, run_scenario


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--preset", help="start from a named preset scenario")
    parser.add_argument("--config", help="INI config file applied on top of the preset")
    parser.add_argument("--out", default="out", help="output directory (default: ./out)")
    parser.add_argument("--bias", type=float, help="applied potential jump")
    parser.add_argument("--molarity", type=float, help="bulk molarity in mol/L (symmetric ternary)")
    parser.add_argument("--kappa", type=float, help="solvation number for every ion")
    parser.add_argument("--bulk-modulus", type=float,
                        help="dimensionless bulk modulus K (omit for incompressible)")
    parser.add_argument("--cells", type=int, help="1D cell count")
    parser.add_argument("--gamma", type=float, help="Newton damping factor in (0, 1]")
    parser.add_argument("--delta-max", type=float, help="largest continuation bias step")


def _build_scenario(args, default_preset: str, kind: str | None) -> Scenario:
    scenario = load_preset(args.preset) if args.preset else load_preset(default_preset)
    if args.config:
        scenario = load_config(args.config, base=scenario)
    if kind is not None:
        scenario = replace(scenario, kind=kind)
    if args.bias is not None:
        # an explicit numeric bias is dimensionless unless --bias-in-volts is set
        scenario = replace(scenario, boundary=replace(scenario.boundary, bias=args.bias),
                           bias_in_volts=bool(args.bias_in_volts))
    elif args.bias_in_volts:
        scenario = replace(scenario, bias_in_volts=True)
    if args.molarity is not None:
        scenario = replace(scenario, boundary=replace(scenario.boundary, molarity=args.molarity))
    if args.kappa is not None:
        kappas = (args.kappa,) * len(scenario.mixture.charges)
        scenario = replace(scenario, mixture=replace(scenario.mixture, kappas=kappas))
    if args.bulk_modulus is not None:
        scenario = replace(scenario, mixture=replace(scenario.mixture, bulk_modulus=args.bulk_modulus))
    if args.cells is not None:
        scenario = replace(scenario, mesh=replace(scenario.mesh, cells=args.cells))
    if args.gamma is not None:
        scenario = replace(scenario, solver=replace(scenario.solver, gamma=args.gamma))
    if args.delta_max is not None:
        scenario = replace(scenario, solver=replace(scenario.solver, delta_max=args.delta_max))
    if getattr(args, "sigma", None) is not None:
        scenario = replace(scenario, boundary=replace(scenario.boundary, sigma=args.sigma))
    if getattr(args, "nx", None) is not None:
        scenario = replace(scenario, mesh=replace(scenario.mesh, nx=args.nx))
    if getattr(args, "ny", None) is not None:
        scenario = replace(scenario, mesh=replace(scenario.mesh, ny=args.ny))
    if getattr(args, "step", None) is not None:
        scenario = replace(scenario, cap_step=args.step)
    if getattr(args, "bias_max", None) is not None:
        scenario = replace(scenario, cap_max=args.bias_max)
    if getattr(args, "study_cells", None):
        cells = tuple(int(c) for c in args.study_cells.split(","))
        scenario = replace(scenario, conv_cells=cells)
    if getattr(args, "reference", None) is not None:
        scenario = replace(scenario, conv_reference=args.reference)
    return scenario


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="edlfem",
        description="Electrolyte double-layer finite element solver",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_list = sub.add_parser("preset-list", help="list available presets")

    p_run = sub.add_parser("run", help="execute a preset or configured scenario")
    _add_common(p_run)
    p_run.add_argument("--bias-in-volts", action="store_true",
                       help="interpret --bias in volts (converted via the thermal voltage)")

    p_cap = sub.add_parser("capacitance", help="differential capacitance sweep")
    _add_common(p_cap)
    p_cap.add_argument("--bias-max", type=float, help="sweep limit (default 10)")
    p_cap.add_argument("--step", type=float, help="sweep bias step (default 0.1)")

    p_conv = sub.add_parser("convergence", help="mesh convergence study")
    _add_common(p_conv)
    p_conv.add_argument("--study-cells", help="comma list of study cell counts")
    p_conv.add_argument("--reference", type=int, help="reference mesh cell count")

    p_cmp = sub.add_parser("compare-np", help="profiles against the Nernst-Planck comparator")
    _add_common(p_cmp)
    p_cmp.add_argument("--bias-in-volts", action="store_true",
                       help="interpret --bias in volts (converted via the thermal voltage)")
    p_cmp.add_argument("--bias-in-thermal", action="store_true",
                       help="interpret the preset bias as already dimensionless")

    p_diode = sub.add_parser("diode2d", help="2D electrolytic diode")
    _add_common(p_diode)
    p_diode.add_argument("--sigma", type=float, help="stripe surface-charge magnitude")
    p_diode.add_argument("--nx", type=int, help="horizontal subdivisions")
    p_diode.add_argument("--ny", type=int, help="vertical subdivisions")

    args = parser.parse_args(argv)

    if args.command == "preset-list":
        for name in sorted(PRESETS):
            print(name)
        return 0

    defaults = {
        "run": ("ternary-default", None),
        "capacitance": ("capacitance", "capacitance"),
        "convergence": ("convergence", "convergence"),
        "compare-np": ("validation", "compare-np"),
        "diode2d": ("diode", "diode2d"),
    }
    default_preset, kind = defaults[args.command]
    if not hasattr(args, "bias_in_volts"):
        args.bias_in_volts = False
    try:
        scenario = _build_scenario(args, default_preset, kind)
        if getattr(args, "bias_in_thermal", False):
            scenario = replace(scenario, bias_in_volts=False)
    except ConfigurationError as exc:
        print(f"error [configure]: {exc}", file=sys.stderr)
        return 2
    return run_scenario(scenario, args.out)


if __name__ == "__main__":
    sys.exit(main())
