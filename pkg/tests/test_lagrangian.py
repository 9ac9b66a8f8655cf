#!/usr/bin/env python3
"""
CochainFEM - Lagrangian Density Tests
=====================================
Run with: python tests/test_lagrangian.py
"""

import os
import sys
import unittest
from dataclasses import replace

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

# Add project root to path
TEST_DIR = os.path.dirname(os.path.abspath(__file__))
PROJECT_ROOT = os.path.dirname(TEST_DIR)
sys.path.insert(0, PROJECT_ROOT)


def _quartic_wave():
    from cochainfem.lagrangian import builtin_nonlinear_wave_poisson, polynomial_potential
    return builtin_nonlinear_wave_poisson(-1, *polynomial_potential([0, 0, 0, 0, 0.25]))


class TestPotentials(unittest.TestCase):
    """Polynomial potentials."""

    def test_polynomial_values(self):
        """Test N, N' and N'' of 1 + 2 phi + 3 phi^2 at phi = 2."""
        from cochainfem.lagrangian import polynomial_potential
        N, dN, d2N = polynomial_potential([1, 2, 3])
        self.assertAlmostEqual(float(N(2.0)), 17.0)
        self.assertAlmostEqual(float(dN(2.0)), 14.0)
        self.assertAlmostEqual(float(d2N(2.0)), 6.0)

    def test_empty_potential_is_zero(self):
        """Test no coefficients give the zero potential."""
        from cochainfem.lagrangian import polynomial_potential
        N, dN, d2N = polynomial_potential([])
        values = np.array([-1.0, 0.5, 3.0])
        for fn in (N, dN, d2N):
            np.testing.assert_allclose(fn(values), 0.0)


class TestDerivativeCheck(unittest.TestCase):
    """Finite-difference cross-checks of supplied partials."""

    def test_builtins_consistent(self):
        """Test every builtin density passes its own derivative check."""
        from cochainfem.lagrangian import builtin_shift_symmetric_wave, builtin_so2_pair, polynomial_potential
        rng = np.random.default_rng(3)
        densities = [
            _quartic_wave(),
            builtin_shift_symmetric_wave(1),
            builtin_so2_pair(*polynomial_potential([0, 0.5, 0.1])),
            builtin_so2_pair(*polynomial_potential([0, 0.5]), breaking=polynomial_potential([0, 0, 0.5])),
        ]
        for density in densities:
            self.assertLess(density.check_derivatives(rng), 1e-6, density.name)

    def test_wrong_first_partial_detected(self):
        """Test a doubled d2L is reported with its label."""
        from cochainfem.lagrangian import InconsistentDerivatives
        density = _quartic_wave()
        original = density.d2
        broken = replace(density, d2=lambda x, phi, psi: 2.0 * original(x, phi, psi))
        with self.assertRaises(InconsistentDerivatives) as ctx:
            broken.check_derivatives()
        self.assertEqual(ctx.exception.which, "d2L[0]")
        self.assertGreater(ctx.exception.error, ctx.exception.tolerance)

    def test_wrong_potential_derivative_at_build(self):
        """Test a builtin built with an inconsistent N' raises on construction."""
        from cochainfem.lagrangian import InconsistentDerivatives, builtin_nonlinear_wave_poisson
        N = np.polynomial.Polynomial([0, 0, 0, 0, 0.25])
        wrong = np.polynomial.Polynomial([0, 0, 3.0])
        with self.assertRaises(InconsistentDerivatives):
            builtin_nonlinear_wave_poisson(-1, N, wrong, wrong.deriv())

    def test_without_second_partials(self):
        """Test the stripped copy keeps first partials only."""
        from cochainfem.lagrangian import without_second_partials
        density = _quartic_wave()
        stripped = without_second_partials(density)
        self.assertTrue(density.has_second_partials)
        self.assertFalse(stripped.has_second_partials)
        self.assertEqual(stripped.name, density.name)


class TestDensityValues(unittest.TestCase):
    """Pointwise values of the builtins."""

    def test_wave_value_and_raised_momentum(self):
        """Test L and the metric-raised d3L of the Lorentzian scalar density."""
        density = _quartic_wave()
        x = np.zeros((1, 2))
        phi = np.array([[2.0]])
        psi = np.array([[[3.0, 1.0]]])
        self.assertAlmostEqual(float(density.value(x, phi, psi)[0]), 0.5 * (9.0 - 1.0) - 4.0)
        np.testing.assert_allclose(density.d3(x, phi, psi), [[[3.0, -1.0]]])
        np.testing.assert_allclose(density.d2(x, phi, psi), [[-8.0]])

    def test_source_enters_linearly(self):
        """Test the forcing adds -s(x) phi to L."""
        from cochainfem.lagrangian import builtin_nonlinear_wave_poisson, polynomial_potential
        density = builtin_nonlinear_wave_poisson(
            1, *polynomial_potential([]), source=lambda x: x[:, 0] + 1.0)
        x = np.array([[1.0, 0.0]])
        self.assertAlmostEqual(float(density.value(x, np.array([[2.0]]), np.zeros((1, 1, 2)))[0]), -4.0)
        self.assertTrue(density.parameters["forced"])

    def test_broken_pair_named(self):
        """Test the breaking term renames the pair and marks it broken."""
        from cochainfem.lagrangian import builtin_so2_pair, polynomial_potential
        pair = builtin_so2_pair(*polynomial_potential([0, 0.5]))
        broken = builtin_so2_pair(*polynomial_potential([0, 0.5]), breaking=polynomial_potential([0, 0, 0.5]))
        self.assertEqual((pair.name, pair.parameters["broken"]), ("so2_pair", False))
        self.assertEqual((broken.name, broken.parameters["broken"]), ("broken_pair", True))

    @settings(max_examples=40, deadline=None)
    @given(
        angle=st.floats(min_value=-np.pi, max_value=np.pi),
        values=st.lists(st.floats(min_value=-1.5, max_value=1.5), min_size=6, max_size=6),
    )
    def test_so2_pair_rotation_invariant(self, angle, values):
        """Test L(R phi, R dphi) = L(phi, dphi) for rotations R."""
        from cochainfem.lagrangian import builtin_so2_pair, polynomial_potential
        density = builtin_so2_pair(*polynomial_potential([0, 0.5, 0.1]), check=False)
        rotation = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
        x = np.zeros((1, 2))
        phi = np.array([values[:2]])
        psi = np.array(values[2:]).reshape(1, 2, 2)
        rphi = phi @ rotation.T
        rpsi = np.einsum("ab,pbm->pam", rotation, psi)
        self.assertAlmostEqual(float(density.value(x, rphi, rpsi)[0]),
                               float(density.value(x, phi, psi)[0]), places=10)


class TestGenerators(unittest.TestCase):
    """Vertical symmetry generators and their flows."""

    def test_rotation_flow_quarter_turn(self):
        """Test the rotation flow at pi/2 maps (1, 0) to (0, 1)."""
        from cochainfem.lagrangian import rotation_generator
        out = rotation_generator().flow(np.pi / 2, np.array([[1.0, 0.0]]))
        np.testing.assert_allclose(out, [[0.0, 1.0]], atol=1e-14)

    def test_shift_flow(self):
        """Test the shift flow adds s to its component."""
        from cochainfem.lagrangian import shift_generator
        gen = shift_generator(2, component=1)
        out = gen.flow(0.3, np.array([[1.0, 2.0]]))
        np.testing.assert_allclose(out, [[1.0, 2.3]], atol=1e-14)
        np.testing.assert_allclose(gen.flow_coefficients(0.3, np.zeros(4)), [0, 0, 0.3, 0.3], atol=1e-14)

    def test_vector_field_is_component_stacked(self):
        """Test the coefficient map applies the pointwise matrix per node."""
        from cochainfem.lagrangian import rotation_generator
        np.testing.assert_allclose(rotation_generator().vector_field([1.0, 2.0, 3.0, 4.0]), [-3, -4, 1, 2])

    def test_zero_generator(self):
        """Test the zero generator is flagged and fixes every field."""
        from cochainfem.lagrangian import zero_generator
        gen = zero_generator(1)
        self.assertTrue(gen.is_zero)
        np.testing.assert_allclose(gen.flow(5.0, np.array([[0.7]])), [[0.7]])

    def test_cubic_action_unclaimed(self):
        """Test the cube control is not claimed equivariant."""
        from cochainfem.lagrangian import cubic_action
        action = cubic_action()
        self.assertFalse(action.claimed_equivariant)
        np.testing.assert_allclose(action.flow_coefficients(0.5, [2.0]), [6.0])

    def test_shape_mismatch(self):
        """Test matrix and offset sizes must agree."""
        from cochainfem.lagrangian import SymmetryGenerator
        from cochainfem.utils import InputError
        with self.assertRaises(InputError):
            SymmetryGenerator("bad", np.eye(2), np.zeros(1))

    def test_generator_lookup(self):
        """Test declared generators are found by name and others rejected."""
        from cochainfem.lagrangian import builtin_so2_pair, polynomial_potential
        from cochainfem.utils import InputError
        density = builtin_so2_pair(*polynomial_potential([0, 0.5]))
        self.assertEqual(density.generator("rotation").name, "rotation")
        with self.assertRaises(InputError):
            density.generator("shift")


def run_tests():
    """Run all tests with detailed output."""
    loader = unittest.TestLoader()
    suite = unittest.TestSuite()
    for test_class in [TestPotentials, TestDerivativeCheck, TestDensityValues, TestGenerators]:
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
