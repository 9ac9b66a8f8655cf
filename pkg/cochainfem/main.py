#!/usr/bin/env python3
"""
CochainFEM - Experiment Controller
==================================
Configuration-driven runner for covariant solves, canonical simulations,
structure verification suites and refinement studies. Every command writes
report.json plus CSV tables under --out.

Exit codes: 0 all checks passed, 1 configuration error, 2 check failure,
3 solver failure.
"""

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from cochainfem import canonical, covariant, structures
from cochainfem.config import ConfigInvalid, ExperimentConfig, SystemConfig
from cochainfem.feec import CochainComplex
from cochainfem.lagrangian import (
    InconsistentDerivatives, LagrangianDensity, SymmetryGenerator, builtin_nonlinear_wave_poisson,
    builtin_shift_symmetric_wave, builtin_so2_pair, cubic_action, polynomial_potential,
    rotation_generator, shift_generator, zero_generator,
)
from cochainfem.logging_config import setup_logging
from cochainfem.mesh import IntervalMesh, TensorMesh2D, build_tensor_mesh, rectangle_region
from cochainfem.report_writer import CheckFailed, RunReport, write_csv, write_json, write_report
from cochainfem.utils import (
    EXIT_CHECK, EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, CochainFEMError, Timer, exit_code_for,
    relative_to, strictly_decreasing,
)

logger = logging.getLogger(__name__)

QUARTIC = (0.0, 0.0, 0.0, 0.0, 0.25)
MANUFACTURED_POTENTIAL = (0.0, 0.0, 0.0, 0.0, -0.25)


# =============================================================================
# BUILDERS
# =============================================================================

def build_density(config: ExperimentConfig) -> LagrangianDensity:
    """Builtin density named by the problem section."""
    problem = config.problem
    eps = problem.epsilon
    if problem.density == "shift_symmetric_wave":
        return builtin_shift_symmetric_wave(eps)
    if problem.density == "nonlinear_wave_poisson":
        return builtin_nonlinear_wave_poisson(eps, *polynomial_potential(problem.potential))
    if problem.density == "manufactured":
        density, _ = covariant.manufactured_problem(eps, problem.potential or MANUFACTURED_POTENTIAL)
        return density
    G = polynomial_potential(problem.potential)
    if problem.density == "so2_pair":
        return builtin_so2_pair(*G, eps=eps)
    return builtin_so2_pair(*G, eps=eps, breaking=polynomial_potential(problem.breaking))


def build_mesh(config: ExperimentConfig) -> TensorMesh2D:
    mesh = config.mesh
    return build_tensor_mesh(tuple(mesh.t_range), tuple(mesh.x_range), mesh.M, mesh.N, mesh.periodic_x)


def boundary_trace(config: ExperimentConfig, m: int) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Trace (t, x) -> (P, m); component a of a travelling wave is shifted by a quarter period."""
    boundary = config.boundary
    A, k = boundary.amplitude, boundary.wavenumber

    def trace(t, x):
        t, x = np.asarray(t, dtype=float), np.asarray(x, dtype=float)
        if boundary.kind == "zero":
            columns = [np.zeros_like(t) for _ in range(m)]
        elif boundary.kind == "constant":
            columns = [np.full_like(t, boundary.value) for _ in range(m)]
        elif boundary.kind == "harmonic":
            columns = [A * np.exp(t) * np.cos(x) for _ in range(m)]
        else:
            columns = [A * np.sin(k * (x - t) + 0.5 * np.pi * a) for a in range(m)]
        return np.column_stack(columns)
    return trace


def build_generator(name: str, m: int):
    if name == "shift":
        return shift_generator(m)
    if name == "rotation":
        return rotation_generator()
    if name == "zero":
        return zero_generator(m)
    return cubic_action()


def _degree(coefficients) -> int:
    coeffs = np.trim_zeros(np.asarray(coefficients, dtype=float), "b")
    return max(0, len(coeffs) - 1)


def has_linear_equations(config: ExperimentConfig) -> bool:
    """True when the configured density gives linear Euler-Lagrange equations."""
    problem = config.problem
    if problem.density == "shift_symmetric_wave":
        return True
    if problem.density == "nonlinear_wave_poisson":
        return _degree(problem.potential) <= 2
    if problem.density == "so2_pair":
        return _degree(problem.potential) <= 1
    if problem.density == "broken_pair":
        return _degree(problem.potential) <= 1 and _degree(problem.breaking) <= 2
    return False


# =============================================================================
# CONTROLLER
# =============================================================================

class ExperimentController:
    """Runs one command against a validated configuration."""

    def __init__(self, config: ExperimentConfig, out_dir: str):
        self.config = config
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.rng = np.random.default_rng(config.seed)
        self.density = build_density(config)
        self.m = self.density.n_components
        self.stats: Dict[str, Any] = {"command": None, "checks": 0, "failed": 0, "outputs": []}

    def run(self, command: str) -> RunReport:
        handlers = {
            "solve": self.cmd_solve_covariant,
            "simulate": self.cmd_simulate_canonical,
            "verify": self.cmd_verify,
            "converge": self.cmd_converge,
        }
        self.stats["command"] = command
        report = RunReport(command, config=self.config.to_dict())
        logger.info("=" * 60)
        logger.info(f"[>>] {command} | density {self.density.name} | seed {self.config.seed}")
        logger.info("=" * 60)
        try:
            with Timer(command, logger):
                handlers[command](report)
        except CochainFEMError as e:
            report.results["error"] = {"type": type(e).__name__, "message": str(e)}
            self._write(report)
            raise
        self._write(report)
        self.stats["checks"] = len(report.checks)
        self.stats["failed"] = len(report.failures())
        logger.info(f"[OK] {command} done: {self.stats['checks']} checks, {self.stats['failed']} failed")
        return report

    def _write(self, report: RunReport):
        self.stats["outputs"].append(str(write_report(self.out_dir, report)))

    def _table(self, report: RunReport, name: str, filename: str, rows: List[Dict[str, Any]]):
        report.tables[name] = rows
        self.stats["outputs"].append(str(write_csv(self.out_dir / filename, rows)))

    # -- covariant solve ---------------------------------------------------------
    def _solve(self, report: RunReport) -> Tuple[CochainComplex, np.ndarray]:
        solver = self.config.solver
        mesh = build_mesh(self.config)
        complex_ = CochainComplex.build(mesh, self.density.metric)
        dirichlet = covariant.boundary_dirichlet(complex_, self.m, boundary_trace(self.config, self.m))
        fields, solve_report = covariant.newton_solve(
            complex_, self.density, None, dirichlet, tol=solver.tol,
            max_iter=solver.max_iter, dense_limit=solver.dense_limit,
        )
        coeffs = np.concatenate([f.coefficients for f in fields])
        report.results["solve"] = solve_report.to_dict()
        report.add_check("interior_residual", solve_report.residual_norm, solver.tol)
        return complex_, coeffs

    def cmd_solve_covariant(self, report: RunReport):
        complex_, coeffs = self._solve(report)
        mesh: TensorMesh2D = complex_.mesh
        report.results["action"] = covariant.assemble_action(complex_, self.density, coeffs)
        if self.config.problem.density == "manufactured":
            potential = self.config.problem.potential or MANUFACTURED_POTENTIAL
            _, exact = covariant.manufactured_problem(self.config.problem.epsilon, potential)
            report.results["l2_error"] = covariant.l2_error(complex_, coeffs, exact)

        values = coeffs.reshape(self.m, mesh.n_nodes)
        rows = []
        for node, (t, x) in enumerate(mesh.node_coords):
            row = {"node": node, "t": float(t), "x": float(x)}
            row.update({f"value_{a}": float(values[a, node]) for a in range(self.m)})
            rows.append(row)
        self.stats["outputs"].append(str(write_csv(self.out_dir / "solution.csv", rows)))

    # -- canonical simulation ------------------------------------------------------
    def _spatial_space(self, periodic: Optional[bool] = None) -> canonical.SpatialSpace:
        mesh = self.config.mesh
        periodic = mesh.periodic_x if periodic is None else periodic
        return canonical.SpatialSpace(IntervalMesh(mesh.x_range[0], mesh.x_range[1], mesh.N, periodic))

    def _initial_state(self, system: canonical.HamiltonianSystem) -> canonical.PhaseState:
        """Trace and its central time difference on the slice at the initial time."""
        t0 = self.config.mesh.t_range[0]
        x = system.space.mesh.node_coords
        trace = boundary_trace(self.config, system.m)
        delta = 1e-6
        phi = trace(np.full_like(x, t0), x).T.ravel()
        phidot = ((trace(np.full_like(x, t0 + delta), x) - trace(np.full_like(x, t0 - delta), x))
                  / (2 * delta)).T.ravel()
        return canonical.PhaseState(phi, canonical.legendre_transform(system, phi, phidot, t0), t0)

    def _symmetry_generators(self) -> List[SymmetryGenerator]:
        generators = [build_generator(name, self.m) for name in self.config.verify.generators]
        return [g for g in generators if isinstance(g, SymmetryGenerator) and g.n_components == self.m]

    def cmd_simulate_canonical(self, report: RunReport):
        settings = self.config.canonical
        system = canonical.HamiltonianSystem.build(self._spatial_space(), self.density)
        state = self._initial_state(system)
        generators = self._symmetry_generators()

        trajectory = canonical.simulate(system, state, settings.dt, settings.steps, settings.stepper)
        rows, snapshots = [], []
        for step, s in enumerate(trajectory.states):
            row = {"step": step, "t": s.t, "H": canonical.hamiltonian(system, s)}
            for g in generators:
                row[f"J_{g.name}"] = canonical.momentum_map(system, s, g)
            row["phi_norm"] = float(np.max(np.abs(s.phi)))
            row["pi_norm"] = float(np.max(np.abs(s.pi)))
            rows.append(row)
            if settings.snapshots and step % settings.snapshot_every == 0:
                snapshots.append({"step": step, "t": s.t, "phi": s.phi, "pi": s.pi})
        self._table(report, "trajectory", "trajectory.csv", rows)
        if settings.snapshots:
            self.stats["outputs"].append(str(write_json(self.out_dir / "snapshots.json", {"snapshots": snapshots})))

        H0 = rows[0]["H"]
        drift = max(abs(r["H"] - H0) for r in rows)
        if self.config.problem.density == "manufactured":
            logger.info("[SKIP] energy drift: the manufactured source depends on time")
        else:
            energy_tol = settings.energy_rtol if has_linear_equations(self.config) else 1e-4
            report.add_check("energy_drift", relative_to(drift, H0), energy_tol)
        for g in generators:
            key = f"J_{g.name}"
            report.add_check(f"momentum_drift[{g.name}]",
                             max(abs(r[key] - rows[0][key]) for r in rows), settings.momentum_tol)

        if settings.symplecticity_steps:
            deviation = canonical.symplecticity_check(system, state, settings.dt,
                                                      settings.symplecticity_steps, settings.stepper)
            report.add_check("symplecticity", deviation, settings.symplecticity_tol)

        worst = 0.0
        for _ in range(self.config.verify.random_probes):
            probe = canonical.PhaseState(0.3 * self.rng.standard_normal(system.size),
                                         0.3 * self.rng.standard_normal(system.size), state.t)
            H = canonical.hamiltonian(system, probe)
            V = canonical.hamiltonian_extended_vector(system, probe)
            worst = max(worst, relative_to(canonical.energy_momentum_pairing(system, probe, V) - H, H))
        report.add_check("energy_momentum_pairing", worst, 1e-12)
        report.results["final_time"] = trajectory.states[-1].t

    # -- structure verification ----------------------------------------------------------
    def _verify_region(self, index: int, box: List[int], complex_: CochainComplex, coeffs: np.ndarray,
                       seed: np.random.SeedSequence) -> Dict[str, Any]:
        """Region-local checks; pure given its inputs, so regions run concurrently."""
        verify, tol = self.config.verify, self.config.solver.tol
        rng = np.random.default_rng(seed)
        region = rectangle_region(complex_.mesh, *box)
        size = self.m * complex_.space(0).n_dofs
        out: Dict[str, Any] = {"checks": [], "noether": [], "multisymplectic": []}

        if "cartan" in verify.checks:
            V = rng.standard_normal(size)
            coefficient = structures.cartan_form(complex_, self.density, region, coeffs, V, tol=tol)
            quadrature = structures.cartan_form_quadrature(complex_, self.density, region, coeffs, V)
            out["checks"].append((f"cartan[{index}]", relative_to(coefficient - quadrature, coefficient),
                                  verify.cartan_rtol, None))

        if "multisymplectic" in verify.checks:
            basis = structures.first_variation_basis(complex_, self.density, region, coeffs)
            matrix, H_norm = structures.multisymplectic_matrix(complex_, self.density, region, coeffs, basis)
            sizes = np.array([np.max(np.abs(v.coefficients)) for v in basis])
            scaled = np.abs(matrix) / max(1e-300, H_norm) / np.outer(sizes, sizes) if basis else np.zeros((0, 0))
            worst = float(scaled.max()) if scaled.size else 0.0
            out["checks"].append((f"multisymplectic[{index}]", worst, verify.multisymplectic_rtol, None))

            control = 0.0
            if basis:
                W = rng.standard_normal(size)
                value = structures.multisymplectic_residual(complex_, self.density, region, coeffs, basis[0], W)
                control = abs(value) / max(1e-300, structures.multisymplectic_scale(H_norm, basis[0], W))
                out["checks"].append((f"multisymplectic_control[{index}]", control, 1e-4, control > 1e-4))
            out["multisymplectic"].append({"region": index, "basis_size": len(basis), "max_scaled_residual": worst,
                                           "control": control, "hessian_norm": H_norm})

        if "noether" in verify.checks:
            broken = self.density.parameters.get("broken", False)
            for name in verify.generators:
                generator = build_generator(name, self.m)
                if not isinstance(generator, SymmetryGenerator) or generator.n_components != self.m:
                    continue
                noether = structures.noether_check(complex_, self.density, region, coeffs, generator,
                                                   tol=tol, equivariance_tol=verify.equivariance_tol)
                measured = abs(noether.cartan_pairing) / noether.scale
                if broken:
                    out["checks"].append((f"noether_control[{index},{name}]", measured, verify.noether_rtol,
                                          measured > verify.noether_rtol))
                else:
                    out["checks"].append((f"noether[{index},{name}]", measured, verify.noether_rtol, None))
                out["checks"].append((f"noether_identity[{index},{name}]",
                                      noether.identity_defect / noether.scale, 1e-12, None))
                out["noether"].append({"region": index, **noether.to_dict()})
        return out

    def cmd_verify(self, report: RunReport):
        verify = self.config.verify
        checks = verify.checks

        if "derivatives" in checks:
            try:
                worst = self.density.check_derivatives(self.rng)
                report.add_check("derivatives", worst, 1e-6)
            except InconsistentDerivatives as e:
                report.add_check("derivatives", e.error, e.tolerance)

        complex_, coeffs = self._solve(report)
        mesh: TensorMesh2D = complex_.mesh

        if "equivariance" in checks:
            for name in verify.generators:
                generator = build_generator(name, self.m)
                residual = structures.equivariance_check(complex_, generator, rng=self.rng, n_components=self.m)
                if generator.claimed_equivariant:
                    report.add_check(f"equivariance[{name}]", residual, verify.equivariance_tol)
                else:
                    report.add_check(f"equivariance_control[{name}]", residual, verify.equivariance_tol,
                                     residual > verify.equivariance_tol)

        regions = [rectangle_region(mesh, *box) for box in verify.regions]
        if "localized" in checks:
            rows = structures.localized_residual_check(complex_, self.density, coeffs, regions)
            report.results["localized"] = rows
            for row in rows:
                report.add_check(f"localized[{row['region']}]", row["global_residual"],
                                 10.0 * self.config.solver.tol)

        seeds = np.random.SeedSequence(self.config.seed).spawn(len(verify.regions))
        with ThreadPoolExecutor(max_workers=verify.max_workers) as executor:
            futures = [executor.submit(self._verify_region, k, box, complex_, coeffs, seeds[k])
                       for k, box in enumerate(verify.regions)]
            outcomes = [future.result() for future in futures]

        noether_rows, ms_rows = [], []
        for outcome in outcomes:
            for name, measured, tolerance, passed in outcome["checks"]:
                report.add_check(name, measured, tolerance, passed)
            noether_rows.extend(outcome["noether"])
            ms_rows.extend(outcome["multisymplectic"])
        if "noether" in checks:
            self._table(report, "noether", "noether.csv", noether_rows)
        if "multisymplectic" in checks:
            self._table(report, "multisymplectic", "multisymplectic.csv", ms_rows)

        if "tensor_equivalence" in checks:
            space = canonical.SpatialSpace(mesh.x_mesh)
            worst = 0.0
            for _ in range(verify.random_probes):
                probe = 0.5 * self.rng.standard_normal(coeffs.size)
                gap = canonical.tensor_product_equivalence(space, mesh.t_mesh, self.density, probe)
                worst = max(worst, gap["difference"] / gap["scale"])
            report.add_check("tensor_equivalence", worst, verify.equivalence_rtol)

        if "quadrature_ordering" in checks:
            quartic = builtin_nonlinear_wave_poisson(self.config.problem.epsilon, *polynomial_potential(QUARTIC))
            qcomplex = CochainComplex.build(mesh, quartic.metric)
            probe = 0.8 * self.rng.standard_normal(mesh.n_nodes)
            nodal = covariant.ordering_gap(qcomplex, quartic, probe, None, covariant.nodal_vertex_rule(mesh))
            gauss = covariant.ordering_gap(qcomplex, quartic, probe, None, covariant.gauss_rule(mesh, 1))
            report.add_check("ordering_nodal_vertex", nodal["vector_gap"] / nodal["scale"], 1e-12)
            report.add_check("ordering_control_gauss1", gauss["vector_gap"], 1e-8, gauss["vector_gap"] > 1e-8)

        if "stencil" in checks and not mesh.periodic_x and mesh.M >= 2 and mesh.N >= 2:
            linear = builtin_shift_symmetric_wave(self.config.problem.epsilon)
            lcomplex = CochainComplex.build(mesh, linear.metric)
            row = covariant.stencil_row(lcomplex, linear, mesh.M // 2, mesh.N // 2)
            expected = covariant.nine_point_stencil(mesh.dt, mesh.dx, linear.metric.epsilon)
            error = float(np.max(np.abs(row - expected)) / np.max(np.abs(expected)))
            report.add_check("stencil", error, 1e-13)

    # -- refinement studies -----------------------------------------------------------------
    def _rate_check(self, report: RunReport, name: str, rates: List[Optional[float]], floor: float,
                    ceiling: Optional[float] = None, extra: bool = True) -> bool:
        """Worst observed rate against [floor, ceiling]; no finite rate fails the check."""
        finite = [r for r in rates if r is not None and np.isfinite(r)]
        if not finite:
            logger.warning(f"[WARN] {name}: no finite rate between consecutive levels")
            return report.add_check(name, float("nan"), floor, False)
        passed = extra and len(finite) == len(rates) and all(
            floor <= r and (ceiling is None or r <= ceiling) for r in finite)
        return report.add_check(name, min(finite), floor, passed)

    def cmd_converge(self, report: RunReport):
        study = self.config.study
        eps = self.config.problem.epsilon
        low, high = study.rate_band

        if "manufactured" in study.studies:
            potential = self.config.problem.potential or MANUFACTURED_POTENTIAL
            rows = covariant.manufactured_study(study.levels, eps, potential,
                                                tol=self.config.solver.tol, max_iter=self.config.solver.max_iter,
                                                dense_limit=self.config.solver.dense_limit)
            self._table(report, "manufactured", "convergence_manufactured.csv", rows)
            self._rate_check(report, "manufactured_rate", [r["rate"] for r in rows[1:]], low, high)

        if "noether_current" in study.studies:
            rows = structures.noether_current_study(study.levels, eps, analytic=study.reference == "analytic",
                                                    tol=self.config.solver.tol)
            self._table(report, "noether_current", "convergence_noether_current.csv", rows)
            for key in ("l2_distance", "dual_norm"):
                self._rate_check(report, f"noether_current_rate[{key}]", [r[f"{key}_rate"] for r in rows[1:]],
                                 study.min_rate, extra=strictly_decreasing([r[key] for r in rows]))

        if "cartan_ring" in study.studies:
            rows = structures.cartan_ring_study(study.ring_levels, tuple(study.ring_box), eps,
                                                tol=self.config.solver.tol)
            self._table(report, "cartan_ring", "convergence_cartan_ring.csv", rows)
            self._rate_check(report, "cartan_ring_rate", [r["rate"] for r in rows[1:]], study.ring_min_rate,
                             extra=strictly_decreasing([r["ratio"] for r in rows]))

        if "phase" in study.studies:
            space = self._spatial_space(periodic=True)
            rows = canonical.midpoint_phase_error(space, builtin_shift_symmetric_wave(-1), study.dts,
                                                  self.config.canonical.mode)
            self._table(report, "phase", "convergence_phase.csv", rows)
            self._rate_check(report, "phase_rate", [r["rate"] for r in rows[1:]], low)
            report.add_check("phase_prediction", max(abs(r["numerical"] - r["predicted"]) for r in rows), 1e-9)

        if "trajectory_equivalence" in study.studies:
            space = self._spatial_space(periodic=True)
            density = self.density if self.density.metric.epsilon == -1 else builtin_shift_symmetric_wave(-1)
            system = canonical.HamiltonianSystem.build(space, density)
            state = self._initial_state(system)
            horizon = 10 * study.dts[0]
            rows = []
            for dt in study.dts:
                trajectory = canonical.simulate(system, state, dt, int(round(horizon / dt)))
                rows.append({"dt": dt, "residual": canonical.trajectory_residual_norm(system, trajectory)})
            for row, rate in zip(rows, _rates([r["residual"] for r in rows], study.dts)):
                row["rate"] = rate
            self._table(report, "trajectory_equivalence", "convergence_trajectory_equivalence.csv", rows)
            self._rate_check(report, "trajectory_equivalence_rate", [r["rate"] for r in rows[1:]], low)


def _rates(errors: List[float], steps: List[float]) -> List[Optional[float]]:
    rates: List[Optional[float]] = [None]
    for k in range(1, len(errors)):
        if errors[k - 1] > 0 and errors[k] > 0:
            rates.append(float(np.log(errors[k - 1] / errors[k]) / np.log(steps[k - 1] / steps[k])))
        else:
            rates.append(None)
    return rates


# =============================================================================
# CLI INTERFACE
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cochainfem",
        description="CochainFEM - structure-preserving finite element experiments",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python run.py solve --config configs/solve.json --out out/solve
  python run.py verify --config configs/verify.json --out out/verify --seed 7
  python run.py simulate --config configs/simulate.json --out out/simulate
  python run.py converge --config configs/converge.json --out out/converge
        """,
    )
    parser.add_argument("command", choices=["solve", "simulate", "verify", "converge"])
    parser.add_argument("--config", required=True, help="Experiment configuration (JSON)")
    parser.add_argument("--out", required=True, help="Output directory")
    parser.add_argument("--seed", type=int, default=None, help="Override the configured random seed")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point with argument parsing."""
    args = build_parser().parse_args(argv)

    try:
        config = ExperimentConfig(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigInvalid(args.config, "--seed must be non-negative")
            config.seed = args.seed
    except ConfigInvalid as e:
        system = SystemConfig()
        setup_logging(log_dir=system.log_dir, level=system.log_level)
        logger.error(f"[ERR] {e}")
        return EXIT_CONFIG

    setup_logging(log_dir=config.system.log_dir, level=config.system.log_level)
    try:
        controller = ExperimentController(config, args.out)
        report = controller.run(args.command)
        report.require_all()
        return EXIT_OK
    except CheckFailed as e:
        logger.error(f"[FAIL] {e}")
        return EXIT_CHECK
    except CochainFEMError as e:
        logger.error(f"[ERR] {type(e).__name__}: {e}")
        return exit_code_for(e)
    except KeyboardInterrupt:
        logger.warning("[STOP] Interrupted by user")
        return 130
    except Exception as e:
        logger.exception(f"[ERR] Unexpected failure: {e}")
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
