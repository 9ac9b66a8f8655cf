#!/usr/bin/env python3
"""
CochainFEM - Canonical Formulation Tests
========================================
Run with: python tests/test_canonical.py
"""

import os
import sys
import unittest
from dataclasses import replace

import numpy as np

# Add project root to path
TEST_DIR = os.path.dirname(os.path.abspath(__file__))
PROJECT_ROOT = os.path.dirname(TEST_DIR)
sys.path.insert(0, PROJECT_ROOT)


def _wave_system(N=16, periodic=True):
    from cochainfem.canonical import HamiltonianSystem, SpatialSpace
    from cochainfem.lagrangian import builtin_shift_symmetric_wave
    from cochainfem.mesh import IntervalMesh
    space = SpatialSpace(IntervalMesh(0.0, 1.0, N, periodic=periodic))
    return HamiltonianSystem.build(space, builtin_shift_symmetric_wave(-1))


def _wave_state(system):
    from cochainfem.canonical import PhaseState
    x = system.space.mesh.node_coords
    return PhaseState(0.1 * np.cos(2 * np.pi * x) + 0.05, 0.02 * np.sin(2 * np.pi * x) + 0.01)


def _pair_system(N=8):
    from cochainfem.canonical import HamiltonianSystem, PhaseState, SpatialSpace
    from cochainfem.lagrangian import builtin_so2_pair, polynomial_potential
    from cochainfem.mesh import IntervalMesh
    space = SpatialSpace(IntervalMesh(0.0, 1.0, N, periodic=True))
    system = HamiltonianSystem.build(space, builtin_so2_pair(*polynomial_potential([0, 0.5, 0.1])))
    x = space.mesh.node_coords
    phi = np.concatenate([0.3 * np.cos(2 * np.pi * x), 0.3 * np.sin(2 * np.pi * x)])
    pi = np.concatenate([-0.2 * np.sin(2 * np.pi * x), 0.2 * np.cos(2 * np.pi * x) + 0.1])
    return system, PhaseState(phi, pi)


class TestPhaseSpace(unittest.TestCase):
    """Legendre transform and Hamiltonian."""

    def test_unit_kinetic_legendre_is_identity(self):
        """Test pi equals phi_dot for unit-kinetic densities."""
        from cochainfem.canonical import legendre_transform
        system = _wave_system()
        phidot = np.random.default_rng(0).standard_normal(system.size)
        np.testing.assert_allclose(legendre_transform(system, np.zeros(system.size), phidot), phidot, atol=1e-12)

    def test_general_legendre_round_trip(self):
        """Test the Newton inversion recovers the velocities."""
        from cochainfem.canonical import HamiltonianSystem, inverse_legendre, legendre_transform
        system = _wave_system()
        general = HamiltonianSystem.build(system.space, replace(system.density, unit_kinetic=False))
        rng = np.random.default_rng(1)
        phi, phidot = rng.standard_normal(general.size), rng.standard_normal(general.size)
        pi = legendre_transform(general, phi, phidot)
        np.testing.assert_allclose(inverse_legendre(general, phi, pi), phidot, atol=1e-10)

    def test_hamiltonian_of_linear_wave(self):
        """Test H = 1/2 pi^T M pi + 1/2 phi^T K phi for the linear wave."""
        from cochainfem.canonical import hamiltonian
        system = _wave_system()
        state = _wave_state(system)
        M, K = system.M, system.space.stiffness
        expected = 0.5 * state.pi @ (M @ state.pi) + 0.5 * state.phi @ (K @ state.phi)
        self.assertAlmostEqual(hamiltonian(system, state), float(expected), places=13)

    def test_energy_momentum_pairing_with_flow(self):
        """Test pairing the energy-momentum map with X_H gives H."""
        from cochainfem.canonical import energy_momentum_pairing, hamiltonian, hamiltonian_extended_vector
        system, state = _pair_system()
        pairing = energy_momentum_pairing(system, state, hamiltonian_extended_vector(system, state))
        self.assertAlmostEqual(pairing, hamiltonian(system, state), places=12)

    def test_symplectic_form_antisymmetric(self):
        """Test omega(U, V) = -omega(V, U)."""
        from cochainfem.canonical import symplectic_form
        system = _wave_system(N=6)
        rng = np.random.default_rng(3)
        U = (rng.standard_normal(system.size), rng.standard_normal(system.size))
        V = (rng.standard_normal(system.size), rng.standard_normal(system.size))
        self.assertAlmostEqual(symplectic_form(system, U, V), -symplectic_form(system, V, U), places=13)

    def test_state_shape_checked(self):
        """Test phi and pi must have equal length."""
        from cochainfem.canonical import PhaseState
        from cochainfem.utils import InputError
        with self.assertRaises(InputError):
            PhaseState(np.zeros(3), np.zeros(4))


class TestSteppers(unittest.TestCase):
    """Implicit midpoint and explicit Euler."""

    def test_midpoint_conserves_quadratic_energy(self):
        """Test the midpoint rule keeps the linear-wave energy."""
        from cochainfem.canonical import hamiltonian, simulate
        system = _wave_system()
        trajectory = simulate(system, _wave_state(system), 0.01, 50)
        energies = np.array([hamiltonian(system, s) for s in trajectory.states])
        self.assertEqual(len(trajectory), 51)
        self.assertAlmostEqual(trajectory.times[-1], 0.5, places=12)
        self.assertLess(float(np.max(np.abs(energies - energies[0]))), 1e-9 * energies[0])

    def test_euler_drifts(self):
        """Test explicit Euler gains energy on the same problem."""
        from cochainfem.canonical import hamiltonian, simulate
        system = _wave_system()
        trajectory = simulate(system, _wave_state(system), 0.01, 50, stepper="euler")
        first, last = hamiltonian(system, trajectory.states[0]), hamiltonian(system, trajectory.states[-1])
        self.assertGreater((last - first) / first, 1e-3)

    def test_midpoint_conserves_momenta(self):
        """Test shift and rotation momenta stay constant under the midpoint rule."""
        from cochainfem.canonical import momentum_map, simulate
        from cochainfem.lagrangian import shift_generator
        system = _wave_system()
        trajectory = simulate(system, _wave_state(system), 0.01, 30)
        shift = [momentum_map(system, s, shift_generator(1)) for s in trajectory.states]
        self.assertLess(max(abs(j - shift[0]) for j in shift), 1e-12)

        pair, state = _pair_system()
        rotation = pair.density.generator("rotation")
        trajectory = simulate(pair, state, 0.02, 30)
        values = [momentum_map(pair, s, rotation) for s in trajectory.states]
        self.assertGreater(abs(values[0]), 1e-3)
        self.assertLess(max(abs(j - values[0]) for j in values), 1e-10)

    def test_momentum_rejects_unclaimed(self):
        """Test the momentum map refuses generators not claimed equivariant."""
        from cochainfem.canonical import momentum_map
        from cochainfem.lagrangian import SymmetryGenerator
        from cochainfem.structures import NotEquivariant
        system = _wave_system()
        unclaimed = SymmetryGenerator("scale", np.eye(1), np.zeros(1), claimed_equivariant=False)
        with self.assertRaises(NotEquivariant):
            momentum_map(system, _wave_state(system), unclaimed)

    def test_symplecticity(self):
        """Test the midpoint flow map is symplectic and Euler is not."""
        from cochainfem.canonical import symplecticity_check
        system, state = _pair_system(N=4)
        self.assertLess(symplecticity_check(system, state, 0.05, 3), 1e-6)
        self.assertGreater(symplecticity_check(system, state, 0.05, 3, stepper="euler"), 1e-4)
        self.assertEqual(symplecticity_check(system, state, 0.05, 0), 0.0)

    def test_stepper_arguments(self):
        """Test unknown steppers and non-positive steps are rejected."""
        from cochainfem.canonical import simulate, step_implicit_midpoint
        from cochainfem.utils import InputError
        system = _wave_system(N=6)
        state = _wave_state(system)
        with self.assertRaises(InputError):
            simulate(system, state, 0.01, 2, stepper="rk4")
        with self.assertRaises(InputError):
            step_implicit_midpoint(system, state, 0.0)


class TestEquivalence(unittest.TestCase):
    """Semi-discrete versus covariant formulations."""

    def test_tensor_product_equivalence(self):
        """Test the temporal Galerkin residual equals the covariant one."""
        from cochainfem.canonical import SpatialSpace, tensor_product_equivalence
        from cochainfem.lagrangian import builtin_nonlinear_wave_poisson, polynomial_potential
        from cochainfem.mesh import IntervalMesh
        density = builtin_nonlinear_wave_poisson(-1, *polynomial_potential([0, 0, 0, 0, 0.25]))
        space = SpatialSpace(IntervalMesh(0.0, 1.0, 5))
        t_mesh = IntervalMesh(0.0, 0.4, 4)
        coeffs = np.random.default_rng(6).uniform(-1.0, 1.0, t_mesh.n_nodes * space.n)
        result = tensor_product_equivalence(space, t_mesh, density, coeffs)
        self.assertLess(result["difference"], 1e-12 * result["scale"])

    def test_basis_mismatch(self):
        """Test periodic time meshes and other quadrature orders are rejected."""
        from cochainfem.canonical import BasisMismatch, SpatialSpace, tensor_product_equivalence
        from cochainfem.lagrangian import builtin_shift_symmetric_wave
        from cochainfem.mesh import IntervalMesh
        density = builtin_shift_symmetric_wave(-1)
        with self.assertRaises(BasisMismatch):
            tensor_product_equivalence(SpatialSpace(IntervalMesh(0.0, 1.0, 4)),
                                       IntervalMesh(0.0, 1.0, 4, periodic=True), density, np.zeros(20))
        with self.assertRaises(BasisMismatch):
            tensor_product_equivalence(SpatialSpace(IntervalMesh(0.0, 1.0, 4), quadrature_points=5),
                                       IntervalMesh(0.0, 1.0, 3), density, np.zeros(20))

    def test_trajectory_residual_second_order(self):
        """Test the semi-discrete residual of midpoint trajectories shrinks like dt^2."""
        from cochainfem.canonical import simulate, trajectory_residual_norm
        system = _wave_system()
        norms = []
        for dt in (0.02, 0.01):
            trajectory = simulate(system, _wave_state(system), dt, int(round(0.2 / dt)))
            norms.append(trajectory_residual_norm(system, trajectory))
        self.assertGreater(norms[0] / norms[1], 3.0)

    def test_insufficient_samples(self):
        """Test too few samples are rejected."""
        from cochainfem.canonical import InsufficientSamples, semidiscrete_residual
        system = _wave_system(N=6)
        with self.assertRaises(InsufficientSamples):
            semidiscrete_residual(system.space, system.density, np.array([0.0, 0.1]), np.zeros((2, system.size)))
        with self.assertRaises(InsufficientSamples):
            semidiscrete_residual(system.space, system.density, np.linspace(0, 0.3, 4), np.zeros((4, system.size)))


class TestPhaseStudy(unittest.TestCase):
    """Midpoint phase error of a single Fourier mode."""

    def test_phase_matches_prediction(self):
        """Test the measured frequency matches 2/dt arctan(omega dt / 2) and converges at rate two."""
        from cochainfem.canonical import SpatialSpace, midpoint_phase_error
        from cochainfem.lagrangian import builtin_shift_symmetric_wave
        from cochainfem.mesh import IntervalMesh
        space = SpatialSpace(IntervalMesh(0.0, 1.0, 32, periodic=True))
        rows = midpoint_phase_error(space, builtin_shift_symmetric_wave(-1), [0.02, 0.01])
        for row in rows:
            self.assertAlmostEqual(row["numerical"], row["predicted"], places=9)
        self.assertAlmostEqual(rows[0]["omega"], 2 * np.pi, places=1)
        self.assertGreater(rows[1]["rate"], 1.9)
        self.assertLess(rows[1]["rate"], 2.1)

    def test_phase_needs_periodic_slice(self):
        """Test open slices are rejected."""
        from cochainfem.canonical import SpatialSpace, midpoint_phase_error
        from cochainfem.lagrangian import builtin_shift_symmetric_wave
        from cochainfem.mesh import IntervalMesh
        from cochainfem.utils import InputError
        with self.assertRaises(InputError):
            midpoint_phase_error(SpatialSpace(IntervalMesh(0.0, 1.0, 8)), builtin_shift_symmetric_wave(-1), [0.1])


def run_tests():
    """Run all tests with detailed output."""
    loader = unittest.TestLoader()
    suite = unittest.TestSuite()
    for test_class in [TestPhaseSpace, TestSteppers, TestEquivalence, TestPhaseStudy]:
        suite.addTests(loader.loadTestsFromTestCase(test_class))

    runner = unittest.TextTestRunner(verbosity=2)
    result = runner.run(suite)

    print("\n" + "=" * 60)
    print("TEST SUMMARY")
    print("=" * 60)
    print(f"Tests run: {result.testsRun}")
    print(f"Failures: {len(result.failures)}")
    print(f"Errors: {len(result.errors)}")
    print("=" * 60)
    return result.wasSuccessful()


if __name__ == "__main__":
    sys.exit(0 if run_tests() else 1)
