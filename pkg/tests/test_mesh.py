#!/usr/bin/env python3
"""
CochainFEM - Mesh and Region Tests
==================================
Run with: python tests/test_mesh.py
"""

import os
import sys
import unittest

import numpy as np

# Add project root to path
TEST_DIR = os.path.dirname(os.path.abspath(__file__))
PROJECT_ROOT = os.path.dirname(TEST_DIR)
sys.path.insert(0, PROJECT_ROOT)


class TestIntervalMesh(unittest.TestCase):
    """Uniform interval meshes."""

    def test_nodes_and_spacing(self):
        """Test node coordinates of an open interval mesh."""
        from cochainfem.mesh import IntervalMesh
        mesh = IntervalMesh(0.0, 2.0, 4)
        self.assertAlmostEqual(mesh.h, 0.5)
        np.testing.assert_allclose(mesh.node_coords, [0.0, 0.5, 1.0, 1.5, 2.0])
        self.assertEqual(mesh.n_nodes, 5)

    def test_periodic_identifies_ends(self):
        """Test the last element of a periodic mesh wraps to node 0."""
        from cochainfem.mesh import IntervalMesh
        mesh = IntervalMesh(0.0, 1.0, 4, periodic=True)
        self.assertEqual(mesh.n_nodes, 4)
        self.assertEqual(tuple(mesh.element_node_pairs[-1]), (3, 0))

    def test_degenerate_range(self):
        """Test zero-length ranges are rejected."""
        from cochainfem.mesh import DegenerateRange, IntervalMesh
        with self.assertRaises(DegenerateRange):
            IntervalMesh(1.0, 1.0, 3)
        with self.assertRaises(DegenerateRange):
            IntervalMesh(1.0, 0.0, 3)

    def test_periodic_needs_two_elements(self):
        """Test a one-element periodic mesh is rejected."""
        from cochainfem.mesh import IntervalMesh
        from cochainfem.utils import InputError
        with self.assertRaises(InputError):
            IntervalMesh(0.0, 1.0, 1, periodic=True)

    def test_locate_tie_break(self):
        """Test interior nodes belong to the element on their right, the end to the last element."""
        from cochainfem.mesh import IntervalMesh
        mesh = IntervalMesh(0.0, 1.0, 4)
        element, local = mesh.locate([0.0, 0.25, 0.3, 1.0])
        np.testing.assert_array_equal(element, [0, 1, 1, 3])
        np.testing.assert_allclose(local, [0.0, 0.0, 0.2, 1.0], atol=1e-12)

    def test_locate_outside(self):
        """Test points outside the mesh raise."""
        from cochainfem.mesh import IntervalMesh, PointOutsideMesh
        mesh = IntervalMesh(0.0, 1.0, 4)
        with self.assertRaises(PointOutsideMesh):
            mesh.locate([1.5])


class TestTensorMesh(unittest.TestCase):
    """Spacetime tensor meshes."""

    def test_time_major_numbering(self):
        """Test node (i, j) has index i * n_x + j and local order of element 0."""
        from cochainfem.mesh import build_tensor_mesh
        mesh = build_tensor_mesh((0.0, 0.3), (0.0, 1.0), 3, 4)
        self.assertEqual(mesh.n_nodes, 20)
        self.assertEqual(int(mesh.node_index(2, 3)), 13)
        self.assertEqual(tuple(mesh.element_nodes[0]), (0, 5, 1, 6))
        np.testing.assert_allclose(mesh.node_coords[13], [0.2, 0.75])

    def test_periodic_element_nodes(self):
        """Test the last column of a periodic mesh wraps to x-node 0."""
        from cochainfem.mesh import build_tensor_mesh
        mesh = build_tensor_mesh((0.0, 1.0), (0.0, 1.0), 2, 3, periodic_x=True)
        last = mesh.element_index(0, 2)
        self.assertEqual(tuple(mesh.element_nodes[last]), (2, 5, 0, 3))

    def test_neighbors(self):
        """Test neighbours across sides, None on the boundary, wrap when periodic."""
        from cochainfem.mesh import build_tensor_mesh
        mesh = build_tensor_mesh((0.0, 1.0), (0.0, 1.0), 3, 4)
        self.assertIsNone(mesh.neighbor(0, "t-"))
        self.assertIsNone(mesh.neighbor(0, "x-"))
        self.assertEqual(mesh.neighbor(0, "t+"), 4)
        self.assertEqual(mesh.neighbor(0, "x+"), 1)
        periodic = build_tensor_mesh((0.0, 1.0), (0.0, 1.0), 3, 4, periodic_x=True)
        self.assertEqual(periodic.neighbor(0, "x-"), 3)
        self.assertEqual(periodic.neighbor(3, "x+"), 0)

    def test_locate_points(self):
        """Test spacetime location returns element and local coordinates."""
        from cochainfem.mesh import build_tensor_mesh
        mesh = build_tensor_mesh((0.0, 1.0), (0.0, 2.0), 2, 4)
        element, local = mesh.locate([[0.75, 1.25]])
        self.assertEqual(int(element[0]), 1 * 4 + 2)
        np.testing.assert_allclose(local[0], [0.5, 0.5])


class TestRegularRegions(unittest.TestCase):
    """Regularity validation and boundary dof classification."""

    def test_single_element_is_not_regular(self):
        """Test one element has no interior node and fails regularity."""
        from cochainfem.mesh import NotRegular, build_tensor_mesh, classify_region
        mesh = build_tensor_mesh((0.0, 1.0), (0.0, 1.0), 4, 4)
        with self.assertRaises(NotRegular) as ctx:
            classify_region(mesh, [(1, 1)])
        self.assertEqual(ctx.exception.witness, mesh.element_index(1, 1))

    def test_block_is_regular(self):
        """Test a 2x2 block is regular with one interior node."""
        from cochainfem.mesh import build_tensor_mesh, rectangle_region
        mesh = build_tensor_mesh((0.0, 1.0), (0.0, 1.0), 4, 4)
        region = rectangle_region(mesh, 1, 3, 1, 3)
        self.assertEqual(region.n_elements, 4)
        self.assertEqual(region.interior_nodes, frozenset({int(mesh.node_index(2, 2))}))

    def test_l_shape_is_regular(self):
        """Test a 3x3 block missing a corner is still regular."""
        from cochainfem.mesh import build_tensor_mesh, classify_region
        mesh = build_tensor_mesh((0.0, 1.0), (0.0, 1.0), 5, 5)
        cells = [(i, j) for i in range(1, 4) for j in range(1, 4) if (i, j) != (3, 3)]
        region = classify_region(mesh, cells)
        self.assertEqual(region.n_elements, 8)
        self.assertEqual(len(region.interior_nodes), 3)

    def test_dangling_element_witness(self):
        """Test a detached element is reported as the witness."""
        from cochainfem.mesh import NotRegular, build_tensor_mesh, classify_region
        mesh = build_tensor_mesh((0.0, 1.0), (0.0, 1.0), 5, 5)
        cells = [(0, 0), (0, 1), (1, 0), (1, 1), (3, 3)]
        with self.assertRaises(NotRegular) as ctx:
            classify_region(mesh, cells)
        self.assertEqual(ctx.exception.witness, 18)

    def test_full_region_contains_boundary_nodes(self):
        """Test every node of the whole domain is interior in the touching sense."""
        from cochainfem.mesh import build_tensor_mesh, full_region
        mesh = build_tensor_mesh((0.0, 1.0), (0.0, 1.0), 2, 2)
        region = full_region(mesh)
        self.assertEqual(len(region.interior_nodes), mesh.n_nodes)
        self.assertEqual(len(region.boundary_faces), 8)

    def test_empty_region_rejected(self):
        """Test an empty element set is rejected."""
        from cochainfem.mesh import build_tensor_mesh, classify_region
        from cochainfem.utils import InputError
        mesh = build_tensor_mesh((0.0, 1.0), (0.0, 1.0), 2, 2)
        with self.assertRaises(InputError):
            classify_region(mesh, [])

    def test_zero_form_boundary_dofs(self):
        """Test the ring of a 3x3 block carries 12 boundary nodes around 4 interior ones."""
        from cochainfem.feec import FESpace
        from cochainfem.mesh import boundary_dof_sets, build_tensor_mesh, rectangle_region
        mesh = build_tensor_mesh((0.0, 1.0), (0.0, 1.0), 5, 5)
        region = rectangle_region(mesh, 1, 4, 1, 4)
        sets = boundary_dof_sets(region, FESpace(mesh, 0))
        self.assertEqual(len(sets.boundary_dofs), 12)
        self.assertEqual(len(sets.interior_dofs), 4)
        self.assertEqual(len(sets.boundary_elements), 8)
        self.assertNotIn(mesh.element_index(2, 2), set(sets.boundary_elements.tolist()))

    def test_one_form_boundary_dofs(self):
        """Test the boundary edges of a 3x3 block are its 12 perimeter edges."""
        from cochainfem.feec import FESpace
        from cochainfem.mesh import boundary_dof_sets, build_tensor_mesh, rectangle_region
        mesh = build_tensor_mesh((0.0, 1.0), (0.0, 1.0), 5, 5)
        region = rectangle_region(mesh, 1, 4, 1, 4)
        sets = boundary_dof_sets(region, FESpace(mesh, 1))
        self.assertEqual(len(sets.boundary_dofs), 12)
        self.assertEqual(len(sets.interior_dofs), 24 - 12)

    def test_space_mismatch(self):
        """Test a space on another mesh is rejected."""
        from cochainfem.feec import FESpace
        from cochainfem.mesh import SpaceMismatch, boundary_dof_sets, build_tensor_mesh, rectangle_region
        mesh = build_tensor_mesh((0.0, 1.0), (0.0, 1.0), 4, 4)
        other = build_tensor_mesh((0.0, 1.0), (0.0, 1.0), 4, 5)
        region = rectangle_region(mesh, 0, 2, 0, 2)
        with self.assertRaises(SpaceMismatch):
            boundary_dof_sets(region, FESpace(other, 0))


def run_tests():
    """Run all tests with detailed output."""
    loader = unittest.TestLoader()
    suite = unittest.TestSuite()
    for test_class in [TestIntervalMesh, TestTensorMesh, TestRegularRegions]:
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
