"""Scenario configuration, presets, batch execution and CSV emission.

A Scenario bundles mixture, mesh, boundary data and solver settings with a
run kind (profile | capacitance | convergence | compare-np | diode2d |
mixtures).  Presets are embedded so the package runs without external
assets; a scenario can also be loaded from an INI-style config file and
overridden by CLI flags.
"""

from __future__ import annotations

import configparser
import csv
import json
import math
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    capacitance_sweep,
    convergence_study,
    pressure_tv_excess,
    total_charge,
)
from .comparator import PBProblem, np_free_charge, solve_poisson_boltzmann
from .errors import ConfigurationError, DomainError, FeasibilityError, SolverError
from .fem import PHI, PRESSURE, BoundaryConditionSet, fraction_field
from .mesh import FieldOnMesh, Mesh, build_interval_mesh, build_rectangle_mesh
from .physics import (
    BOLTZMANN,
    ELEMENTARY_CHARGE,
    BulkModulus,
    Incompressible,
    Mixture,
    Species,
    fraction_from_molarity,
    number_density,
)
from .solver import (
    NewtonConfig,
    Problem,
    SolveReport,
    continuation_solve,
    default_initial_guess,
    newton_solve,
    least_squares_rescue,
)

# thermal voltage k*T/e0 at the baseline temperature, for volt -> dimensionless
THERMAL_VOLTAGE = BOLTZMANN * 293.75 / ELEMENTARY_CHARGE

DEFAULT_LAMBDA2 = 8.553e-6
DEFAULT_A2 = 7.5412e-4

RUN_KINDS = ("profile", "capacitance", "convergence", "compare-np", "diode2d", "mixtures")


@dataclass
class MixtureSpec:
    charges: tuple[int, ...] = (-1, 1)
    kappas: tuple[float, ...] = (0.0, 0.0)
    lambda2: float = DEFAULT_LAMBDA2
    a2: float = DEFAULT_A2
    bulk_modulus: float | None = None        # None = incompressible

    def build(self) -> Mixture:
        if len(self.kappas) != len(self.charges):
            raise ConfigurationError("kappas must match charges in length")
        species = tuple(
            Species(z=int(z), kappa=float(k)) for z, k in zip(self.charges, self.kappas)
        ) + (Species(z=0),)
        comp = Incompressible() if self.bulk_modulus is None else BulkModulus(self.bulk_modulus)
        return Mixture(species=species, lambda2=self.lambda2, a2=self.a2, compressibility=comp)


@dataclass
class MeshSpec:
    dim: int = 1
    x0: float = 0.0
    x1: float = 1.0
    cells: int = 2048
    lx: float = 0.02
    ly: float = 0.1
    nx: int = 64
    ny: int = 320

    def build(self) -> Mesh:
        if self.dim == 1:
            return build_interval_mesh(self.x0, self.x1, self.cells)
        return build_rectangle_mesh(self.lx, self.ly, self.nx, self.ny)


@dataclass
class BoundarySpec:
    bias: float = 0.0              # phi jump: left minus right (1D), top minus bottom (2D)
    phi_right: float = 0.0
    p_right: float = 0.0
    y_right: tuple[float, ...] = (1 / 3, 1 / 3)
    molarity: float | None = None  # symmetric ternary override: y = M / 55 for both ions
    sigma: float = 0.0             # diode stripe magnitude

    def fractions(self, n_ions: int) -> tuple[float, ...]:
        if self.molarity is not None:
            if n_ions != 2:
                raise ConfigurationError("molarity shorthand needs a binary (ternary) mixture")
            y = fraction_from_molarity(self.molarity)
            return (y, y)
        if len(self.y_right) != n_ions:
            raise ConfigurationError(
                f"y_right has {len(self.y_right)} entries, mixture has {n_ions} ions"
            )
        return tuple(self.y_right)


@dataclass
class SolverSpec:
    gamma: float = 0.25
    tol_abs: float = 1e-10
    tol_step: float = 1e-12
    max_iter: int = 200
    delta_max: float = 1.0
    y_floor: float = 1e-12
    accelerate: bool = True
    switch_threshold: float = 1e-3

    def config(self) -> NewtonConfig:
        return NewtonConfig(
            gamma=self.gamma,
            tol_abs=self.tol_abs,
            tol_step=self.tol_step,
            max_iter=self.max_iter,
            y_floor=self.y_floor,
            accelerate=self.accelerate,
            switch_threshold=self.switch_threshold,
        )


@dataclass
class Scenario:
    name: str = "custom"
    kind: str = "profile"
    mixture: MixtureSpec = field(default_factory=MixtureSpec)
    mesh: MeshSpec = field(default_factory=MeshSpec)
    boundary: BoundarySpec = field(default_factory=BoundarySpec)
    solver: SolverSpec = field(default_factory=SolverSpec)
    # capacitance sweep grid
    cap_max: float = 10.0
    cap_step: float = 0.1
    # convergence study
    conv_cells: tuple[int, ...] = (128, 256, 512, 1024, 2048)
    conv_reference: int = 65536
    # compare-np solvation variants
    compare_kappas: tuple[float, ...] = (0.0, 8.0)
    # validation bias interpretation: bias given in volts?
    bias_in_volts: bool = False

    def validate(self):
        if self.kind not in RUN_KINDS:
            raise ConfigurationError(f"unknown run kind {self.kind!r}; valid: {RUN_KINDS}")
        mix = self.mixture.build()
        if self.kind != "diode2d":
            y = np.array(self.boundary.fractions(mix.n_ions))
            if (y <= 0).any() or y.sum() >= 1:
                raise ConfigurationError(f"bulk fractions must be positive with sum < 1: {y}")
            neutrality = float(mix.charges @ y)
            if abs(neutrality) > 1e-10:
                raise ConfigurationError(f"bulk data is not electroneutral: sum z*y = {neutrality:g}")

    @property
    def bias_dimensionless(self) -> float:
        return self.boundary.bias / THERMAL_VOLTAGE if self.bias_in_volts else self.boundary.bias


# ---------------------------------------------------------------------------
# presets


# empirically robust damping choices per scenario family; gamma = 0.25 (the
# conservative NewtonConfig default) also converges everywhere, just slower
_FAST_SOLVER = SolverSpec(gamma=0.75, switch_threshold=0.1)
_SATURATED_SOLVER = SolverSpec(gamma=0.5, switch_threshold=0.1, y_floor=1e-25, max_iter=600)


def _ternary_default() -> Scenario:
    return Scenario(name="ternary-default", kind="profile",
                    boundary=BoundarySpec(bias=6.0, y_right=(1 / 3, 1 / 3)),
                    solver=replace(_FAST_SOLVER))


def _validation() -> Scenario:
    y = fraction_from_molarity(0.5)
    return Scenario(
        name="validation",
        kind="compare-np",
        mixture=MixtureSpec(lambda2=2.4e-6, a2=7.5e-4),
        mesh=MeshSpec(cells=4096),
        boundary=BoundarySpec(bias=0.6, y_right=(y, y)),
        solver=replace(_SATURATED_SOLVER),
        compare_kappas=(0.0, 8.0),
        bias_in_volts=True,
    )


def _capacitance() -> Scenario:
    return Scenario(
        name="capacitance",
        kind="capacitance",
        mesh=MeshSpec(cells=2048),
        boundary=BoundarySpec(molarity=0.01),
        solver=replace(_FAST_SOLVER),
    )


def _convergence() -> Scenario:
    # coarse meshes under-resolve the double layer; their discrete solutions
    # oscillate into deep saturation, so they need the small fraction floor
    return Scenario(name="convergence", kind="convergence",
                    boundary=BoundarySpec(bias=6.0, y_right=(1 / 3, 1 / 3)),
                    solver=replace(_SATURATED_SOLVER, gamma=0.75))


def _mixture_case(name, charges, fractions) -> Scenario:
    return Scenario(
        name=name,
        kind="profile",
        mixture=MixtureSpec(charges=charges, kappas=(0.0,) * len(charges)),
        mesh=MeshSpec(cells=2048),
        boundary=BoundarySpec(bias=10.0, y_right=fractions),
        solver=replace(_SATURATED_SOLVER),
    )


def _diode() -> Scenario:
    return Scenario(
        name="diode",
        kind="diode2d",
        mixture=MixtureSpec(charges=(-1, 1), kappas=(5.0, 5.0)),
        mesh=MeshSpec(dim=2, lx=0.02, ly=0.1, nx=64, ny=320),
        boundary=BoundarySpec(bias=10.0, y_right=(0.01, 0.01), sigma=350.0),
        solver=SolverSpec(gamma=0.5, switch_threshold=0.1, max_iter=600),
    )


PRESETS = {
    "ternary-default": _ternary_default,
    "validation": _validation,
    "capacitance": _capacitance,
    "convergence": _convergence,
    "mixture-caseA": lambda: _mixture_case("mixture-caseA", (-1, 1, 2), (3 / 6, 1 / 6, 1 / 6)),
    "mixture-caseB": lambda: _mixture_case("mixture-caseB", (-2, -1, 1), (1 / 6, 1 / 6, 3 / 6)),
    "mixture-caseC": lambda: _mixture_case(
        "mixture-caseC", (-2, -1, 1, 2), (1 / 5, 1 / 5, 1 / 5, 1 / 5)
    ),
    "mixture-caseD": lambda: _mixture_case(
        "mixture-caseD", (-4, -3, -2, -1, 1), (1 / 23, 1 / 23, 1 / 23, 1 / 23, 10 / 23)
    ),
    "mixtures": lambda: replace(_ternary_default(), name="mixtures", kind="mixtures"),
    "diode": _diode,
}


def load_preset(name: str) -> Scenario:
    if name not in PRESETS:
        raise ConfigurationError(
            f"unknown preset {name!r}; valid presets: {', '.join(sorted(PRESETS))}"
        )
    return PRESETS[name]()


# ---------------------------------------------------------------------------
# problem construction


def stripe_flux(sigma: float, ly: float):
    """Diode surface-charge data on the right wall: -sigma on the lower
    stripe [ly/4, ly/2), +sigma on the upper stripe [ly/2, 3*ly/4]."""

    def h(coords: np.ndarray) -> np.ndarray:
        y = np.asarray(coords)[:, 1]
        out = np.zeros_like(y)
        out[(y >= 0.25 * ly) & (y < 0.5 * ly)] = -sigma
        out[(y >= 0.5 * ly) & (y <= 0.75 * ly)] = sigma
        return out

    return h


def build_problem(scenario: Scenario, mesh: Mesh, mixture: Mixture, bias: float) -> Problem:
    bc = scenario.boundary
    if mesh.dim == 1:
        dirichlet = {
            ("left", PHI): bc.phi_right + bias,
            ("right", PHI): bc.phi_right,
            ("right", PRESSURE): bc.p_right,
        }
        for k, y in enumerate(bc.fractions(mixture.n_ions)):
            dirichlet[("right", fraction_field(k))] = y
        bcs = BoundaryConditionSet(dirichlet=dirichlet)
    else:
        y_bath = bc.fractions(mixture.n_ions)
        dirichlet = {
            ("bottom", PHI): bc.phi_right,
            ("top", PHI): bc.phi_right + bias,
        }
        for k, y in enumerate(y_bath):
            dirichlet[("bottom", fraction_field(k))] = y
            dirichlet[("top", fraction_field(k))] = y
        neumann = {("right", PHI): stripe_flux(bc.sigma, scenario.mesh.ly)}
        bcs = BoundaryConditionSet(
            dirichlet=dirichlet,
            neumann=neumann,
            pins=((PRESSURE, (0.0, scenario.mesh.ly / 2.0), bc.p_right),),
        )
    return Problem(mesh, mixture, bcs)


def solve_scenario(scenario: Scenario, mesh: Mesh | None = None,
                   mixture: Mixture | None = None) -> tuple[FieldOnMesh, SolveReport]:
    """Continuation solve of a profile-style scenario at its target bias."""
    mixture = mixture or scenario.mixture.build()
    mesh = mesh or scenario.mesh.build()
    cfg = scenario.solver.config()
    if scenario.kind == "diode2d" or mesh.dim == 2:
        return solve_diode(scenario, mesh, mixture)
    return continuation_solve(
        scenario.bias_dimensionless,
        lambda b: build_problem(scenario, mesh, mixture, b),
        cfg,
        delta_max=scenario.solver.delta_max,
    )


def make_refining_solver(scenario: Scenario, mixture: Mixture):
    """Mesh-refinement solver for convergence studies: each solve warm-starts
    from the previous solution interpolated onto the new mesh, where Newton
    converges undamped; falls back to the continuation ramp if that fails."""
    from .mesh import interpolate_p1

    cfg = scenario.solver.config()
    bias = scenario.bias_dimensionless
    last: dict[str, FieldOnMesh | None] = {"state": None}

    def solve_on(n_cells: int) -> FieldOnMesh:
        spec = replace(scenario, mesh=replace(scenario.mesh, cells=n_cells))
        mesh = spec.mesh.build()
        n_dofs = mesh.n_nodes * (mixture.n_ions + 2)
        problem = build_problem(spec, mesh, mixture, bias)
        if n_dofs <= 1500:
            # meshes that under-resolve the double layer stall the damped
            # iteration away from their knife-edge discrete solution; go
            # straight to the dense trust-region solve while it is cheap
            start = (
                interpolate_p1(last["state"], mesh)
                if last["state"] is not None
                else default_initial_guess(problem)
            )
            rescue = least_squares_rescue(start, problem, cfg)
            if rescue is not None and rescue[1] < 1e-2:
                last["state"] = rescue[0]
                return rescue[0]
        if last["state"] is not None:
            guess = interpolate_p1(last["state"], mesh)
            try:
                state, rep = newton_solve(guess, problem, replace(cfg, gamma=1.0))
            except (SolverError, FeasibilityError):
                rep = None
            if rep is not None and rep.converged:
                last["state"] = state
                return state
        state, rep = solve_scenario(spec, mesh=mesh, mixture=mixture)
        last["state"] = state
        return state

    return solve_on


def solve_diode(scenario: Scenario, mesh: Mesh, mixture: Mixture) -> tuple[FieldOnMesh, SolveReport]:
    """Ramp the stripe charge at zero bias, then the bias itself."""
    cfg = scenario.solver.config()
    sigma = scenario.boundary.sigma
    report = SolveReport()
    sigma_steps = max(1, math.ceil(abs(sigma) / 100.0))
    state = None
    for k in range(sigma_steps):
        part = replace(scenario, boundary=replace(scenario.boundary, sigma=sigma * (k + 1) / sigma_steps))
        problem = build_problem(part, mesh, mixture, 0.0)
        if state is None:
            state = default_initial_guess(problem)
        state, rep = newton_solve(state, problem, cfg)
        report.extend(rep, 0.0)
    bias = scenario.bias_dimensionless
    if bias != 0.0:
        state, rep = continuation_solve(
            bias,
            lambda b: build_problem(scenario, mesh, mixture, b),
            cfg,
            delta_max=scenario.solver.delta_max,
            initial=state,
            start_bias=0.0,
        )
        report.continuation_steps = report.continuation_steps + rep.continuation_steps
        report.iterations += rep.iterations
        report.residual_history.extend(rep.residual_history)
        report.damping_events += rep.damping_events
        report.converged = rep.converged
    return state, report


# ---------------------------------------------------------------------------
# CSV output


def _fmt(x: float) -> str:
    return repr(float(x))


def write_profile_csv(path: Path, state: FieldOnMesh, mixture: Mixture, model: str,
                      append: bool = False):
    mesh = state.mesh
    coords = ["x", "y"][: mesh.dim]
    n_ion = mixture.n_ions
    header = [*coords, "phi", "p", *[f"y_{k + 1}" for k in range(n_ion + 1)], "nF", "n", "model"]
    mode = "a" if append and path.exists() else "w"
    with path.open(mode, newline="") as fh:
        w = csv.writer(fh)
        if mode == "w":
            w.writerow(header)
        phi = state.values[:, PHI]
        p = state.values[:, PRESSURE]
        y = state.values[:, 2:]
        y_n = 1.0 - y.sum(axis=1)
        n = number_density(p, mixture)
        nf = n * (y @ mixture.charges)
        for i in range(mesh.n_nodes):
            row = [*mesh.nodes[i], phi[i], p[i], *y[i], y_n[i], nf[i], n[i]]
            w.writerow([_fmt(v) for v in row] + [model])
    return path


def write_np_profile_csv(path: Path, phi: FieldOnMesh, y: FieldOnMesh, charges, model="nernst-planck"):
    """Comparator rows in the shared profile schema (no pressure, n = 1)."""
    mesh = phi.mesh
    coords = ["x", "y"][: mesh.dim]
    n_ion = y.n_components
    header = [*coords, "phi", "p", *[f"y_{k + 1}" for k in range(n_ion + 1)], "nF", "n", "model"]
    mode = "a" if path.exists() else "w"
    with path.open(mode, newline="") as fh:
        w = csv.writer(fh)
        if mode == "w":
            w.writerow(header)
        nf = np_free_charge(y.values, charges)
        y_n = 1.0 - y.values.sum(axis=1)
        for i in range(mesh.n_nodes):
            row = [*mesh.nodes[i], phi.values[i, 0], math.nan, *y.values[i], y_n[i], nf[i], 1.0]
            w.writerow([_fmt(v) for v in row] + [model])
    return path


def write_report_csv(path: Path, report: SolveReport):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "bias", "iteration", "residual_inf"])
        pos = 0
        steps = report.continuation_steps or [(math.nan, report.iterations)]
        for s, (bias, iters) in enumerate(steps):
            history = report.residual_history[pos: pos + iters + 1]
            pos += iters + 1
            for it, r in enumerate(history):
                w.writerow([s, _fmt(bias), it, _fmt(r)])
    return path


def report_summary(report: SolveReport) -> dict:
    return {
        "converged": bool(report.converged),
        "stalled": bool(report.stalled),
        "iterations": int(report.iterations),
        "damping_events": int(report.damping_events),
        "final_residual": float(report.residual_history[-1]) if report.residual_history else None,
        "continuation_steps": [[float(b), int(i)] for b, i in report.continuation_steps],
    }


def write_manifest(outdir: Path, scenario: Scenario, outputs: dict, extra: dict | None = None):
    manifest = {
        "version": __version__,
        "name": scenario.name,
        "kind": scenario.kind,
        "scenario": asdict(scenario),
        "bias_dimensionless": scenario.bias_dimensionless,
        "outputs": outputs,
    }
    if scenario.kind == "diode2d":
        manifest["notes"] = (
            "left wall (x=0): homogeneous Neumann for phi and zero species flux; "
            "pressure pinned at (0, Ly/2)"
        )
    if extra:
        manifest.update(extra)
    path = outdir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# run kinds


def _run_profile(scenario: Scenario, outdir: Path) -> dict:
    mixture = scenario.mixture.build()
    state, report = solve_scenario(scenario, mixture=mixture)
    write_profile_csv(outdir / "profile.csv", state, mixture, model="mixture")
    write_report_csv(outdir / "report.csv", report)
    return {
        "outputs": {"profile": "profile.csv", "report": "report.csv"},
        "report": report_summary(report),
        "pressure_tv_excess": pressure_tv_excess(state),
    }


def _run_capacitance(scenario: Scenario, outdir: Path) -> dict:
    mixture = scenario.mixture.build()
    mesh = scenario.mesh.build()
    half = int(round(scenario.cap_max / scenario.cap_step))
    grid = np.linspace(-scenario.cap_max, scenario.cap_max, 2 * half + 1)
    curve, report = capacitance_sweep(
        grid,
        lambda b: build_problem(scenario, mesh, mixture, b),
        scenario.solver.config(),
    )
    curve.to_csv(outdir / "capacitance.csv")
    write_report_csv(outdir / "report.csv", report)
    return {
        "outputs": {"capacitance": "capacitance.csv", "report": "report.csv"},
        "report": report_summary(report),
    }


def _run_convergence(scenario: Scenario, outdir: Path) -> dict:
    mixture = scenario.mixture.build()
    field_names = ["phi", "p"] + [f"y_{k + 1}" for k in range(mixture.n_ions)]
    table = convergence_study(
        make_refining_solver(scenario, mixture),
        scenario.conv_cells,
        scenario.conv_reference,
        field_names,
    )
    table.to_csv(outdir / "convergence.csv")
    return {
        "outputs": {"convergence": "convergence.csv"},
        "slopes": {f"{f}:{n}": s for (f, n), s in table.slopes.items()},
    }


def _run_compare_np(scenario: Scenario, outdir: Path) -> dict:
    mesh = scenario.mesh.build()
    bias = scenario.bias_dimensionless
    profile = outdir / "profile.csv"
    if profile.exists():
        profile.unlink()
    summaries = {}
    for kappa in scenario.compare_kappas:
        spec = replace(
            scenario,
            mixture=replace(scenario.mixture, kappas=(kappa,) * len(scenario.mixture.charges)),
        )
        mixture = spec.mixture.build()
        state, report = continuation_solve(
            bias,
            lambda b: build_problem(spec, mesh, mixture, b),
            spec.solver.config(),
            delta_max=spec.solver.delta_max,
        )
        label = f"mixture-kappa{kappa:g}"
        write_profile_csv(profile, state, mixture, model=label, append=True)
        summaries[label] = report_summary(report)

    mixture = scenario.mixture.build()
    y_r = np.array(scenario.boundary.fractions(mixture.n_ions))
    pb = PBProblem(
        mesh=mesh,
        lambda2=scenario.mixture.lambda2,
        charges=mixture.charges,
        y_bulk=y_r,
        phi_dirichlet={"left": scenario.boundary.phi_right + bias, "right": scenario.boundary.phi_right},
        phi_bulk=scenario.boundary.phi_right,
    )
    phi, y, report = solve_poisson_boltzmann(pb, scenario.solver.config(),
                                             delta_max=scenario.solver.delta_max)
    write_np_profile_csv(profile, phi, y, mixture.charges)
    summaries["nernst-planck"] = report_summary(report)
    return {"outputs": {"profile": "profile.csv"}, "report": summaries}


def _run_diode(scenario: Scenario, outdir: Path) -> dict:
    mixture = scenario.mixture.build()
    mesh = scenario.mesh.build()
    state, report = solve_diode(scenario, mesh, mixture)
    write_profile_csv(outdir / "profile.csv", state, mixture, model="mixture")
    write_report_csv(outdir / "report.csv", report)
    return {
        "outputs": {"profile": "profile.csv", "report": "report.csv"},
        "report": report_summary(report),
    }


def _run_mixtures(scenario: Scenario, outdir: Path) -> dict:
    cases = ["mixture-caseA", "mixture-caseB", "mixture-caseC", "mixture-caseD"]
    sub_outputs = {}
    for name in cases:
        sub = load_preset(name)
        subdir = outdir / name.removeprefix("mixture-")
        subdir.mkdir(parents=True, exist_ok=True)
        extra = _run_profile(sub, subdir)
        write_manifest(subdir, sub, extra.pop("outputs"), extra)
        sub_outputs[name] = str(subdir.relative_to(outdir))
    return {"outputs": {"cases": sub_outputs}}


def run_scenario(scenario: Scenario, outdir: str | Path) -> int:
    """Execute a scenario; returns the process exit status.

    0 success, 2 configuration error, 3 solver non-convergence,
    4 I/O failure.  Error text names the failing stage.
    """
    stage = "configure"
    try:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        scenario.validate()
        runner = {
            "profile": _run_profile,
            "capacitance": _run_capacitance,
            "convergence": _run_convergence,
            "compare-np": _run_compare_np,
            "diode2d": _run_diode,
            "mixtures": _run_mixtures,
        }[scenario.kind]
        stage = "solve"
        extra = runner(scenario, outdir)
        stage = "write"
        write_manifest(outdir, scenario, extra.pop("outputs"), extra)
        return 0
    except (ConfigurationError, DomainError, ValueError) as exc:
        print(f"error [{stage}]: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"error [{stage}]: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error [{stage}]: {exc}", file=sys.stderr)
        return 4


# ---------------------------------------------------------------------------
# config files


def _parse_tuple(text: str, cast):
    return tuple(cast(part.strip()) for part in text.split(",") if part.strip())


def load_config(path: str | Path, base: Scenario | None = None) -> Scenario:
    """Scenario from an INI file with sections [run], [mixture], [mesh],
    [boundary], [solver]; unknown keys are configuration errors."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigurationError(f"cannot read config file {path}")
    scenario = base
    run_items = dict(parser.items("run")) if parser.has_section("run") else {}
    if "preset" in run_items:
        scenario = load_preset(run_items.pop("preset"))
    scenario = scenario or Scenario()

    handlers = {
        "run": {
            "name": ("name", str),
            "kind": ("kind", str),
            "cap_max": ("cap_max", float),
            "cap_step": ("cap_step", float),
            "conv_cells": ("conv_cells", lambda t: _parse_tuple(t, int)),
            "conv_reference": ("conv_reference", int),
            "bias_in_volts": ("bias_in_volts", lambda t: t.lower() in ("1", "true", "yes")),
        },
        "mixture": {
            "charges": ("charges", lambda t: _parse_tuple(t, int)),
            "kappas": ("kappas", lambda t: _parse_tuple(t, float)),
            "lambda2": ("lambda2", float),
            "a2": ("a2", float),
            "bulk_modulus": ("bulk_modulus", lambda t: None if t in ("inf", "none") else float(t)),
        },
        "mesh": {
            "dim": ("dim", int), "x0": ("x0", float), "x1": ("x1", float),
            "cells": ("cells", int), "lx": ("lx", float), "ly": ("ly", float),
            "nx": ("nx", int), "ny": ("ny", int),
        },
        "boundary": {
            "bias": ("bias", float), "phi_right": ("phi_right", float),
            "p_right": ("p_right", float),
            "y_right": ("y_right", lambda t: _parse_tuple(t, float)),
            "molarity": ("molarity", float), "sigma": ("sigma", float),
        },
        "solver": {
            "gamma": ("gamma", float), "tol_abs": ("tol_abs", float),
            "tol_step": ("tol_step", float), "max_iter": ("max_iter", int),
            "delta_max": ("delta_max", float),
            "accelerate": ("accelerate", lambda t: t.lower() in ("1", "true", "yes")),
        },
    }
    sub_of = {"mixture": "mixture", "mesh": "mesh", "boundary": "boundary", "solver": "solver"}
    for section in parser.sections():
        if section not in handlers:
            raise ConfigurationError(f"unknown config section [{section}]")
        items = run_items if section == "run" else dict(parser.items(section))
        for key, text in items.items():
            if key not in handlers[section]:
                raise ConfigurationError(f"unknown key {key!r} in section [{section}]")
            attr, cast = handlers[section][key]
            try:
                value = cast(text)
            except ValueError as exc:
                raise ConfigurationError(f"bad value for [{section}] {key}: {text!r}") from exc
            if section == "run":
                scenario = replace(scenario, **{attr: value})
            else:
                sub = getattr(scenario, sub_of[section])
                scenario = replace(scenario, **{sub_of[section]: replace(sub, **{attr: value})})
    return scenario
