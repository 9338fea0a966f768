import os
import shutil
import sys
import tempfile
import unittest

import numpy as np

# Adjust path to import from src
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, os.path.join(project_root, 'src'))

from qmr_motion.bspline import (ControlGrid, DisplacementField, basis_matrix, bending_energy, bending_energy_gradient,
                                compose_displacements, cubic_basis, ffd_basis, ffd_upsample, grid_size,
                                jacobian_determinant, load_field, sample_bilinear, save_field, warp_frames,
                                warp_image, warp_stack)
from qmr_motion.errors import ConfigError, FormatError, ValidationError
from qmr_motion.stack import ImageStack, save_stack


class TestBasis(unittest.TestCase):

    def test_cubic_basis_values(self):
        """The four weights sum to one; at u = 0 they are 1/6, 4/6, 1/6, 0."""
        np.testing.assert_allclose(cubic_basis(0.0), (1 / 6, 4 / 6, 1 / 6, 0.0))
        for u in (0.1, 0.37, 0.5, 0.99):
            self.assertAlmostEqual(sum(cubic_basis(u)), 1.0, places=12)
        with self.assertRaises(ValidationError):
            cubic_basis(1.0)

    def test_grid_size(self):
        self.assertEqual(grid_size(112, 4), 31)
        self.assertEqual(grid_size(32, 16), 5)
        with self.assertRaises(ConfigError):
            grid_size(10, 0)

    def test_basis_matrix_rows(self):
        """Value rows sum to one, derivative rows to zero."""
        np.testing.assert_allclose(basis_matrix(20, 4, 0).sum(axis=1), 1.0)
        np.testing.assert_allclose(basis_matrix(20, 4, 1).sum(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(basis_matrix(20, 4, 2).sum(axis=1), 0.0, atol=1e-12)

    def test_linear_coefficients_reproduce_linear_field(self):
        """Control values (k - 1) * spacing along rows give u_y(y, x) = y and no bending."""
        spacing, height, width = 4, 17, 13
        gy, gx = grid_size(height, spacing), grid_size(width, spacing)
        coefficients = np.zeros((1, gy, gx, 2))
        coefficients[0, :, :, 0] = ((np.arange(gy) - 1) * spacing)[:, None]
        grid = ControlGrid(coefficients, spacing)
        field = ffd_upsample(grid, height, width)
        np.testing.assert_allclose(field.u[0, :, :, 0], np.arange(height)[:, None] * np.ones(width), atol=1e-10)
        np.testing.assert_allclose(field.u[0, :, :, 1], 0.0)
        self.assertAlmostEqual(bending_energy(grid, height, width), 0.0, places=18)

    def test_constant_coefficients_give_constant_field(self):
        grid = ControlGrid(np.full((2, grid_size(12, 4), grid_size(12, 4), 2), 0.75), 4)
        np.testing.assert_allclose(ffd_upsample(grid, 12, 12).u, 0.75)

    def test_grid_shape_mismatch(self):
        with self.assertRaises(ConfigError):
            ffd_upsample(ControlGrid.zeros(1, 16, 16, 4), 20, 16)

    def test_adjoint_is_transpose_of_upsample(self):
        rng = np.random.default_rng(0)
        basis = ffd_basis(14, 11, 4)
        coefficients = rng.standard_normal((2,) + basis.grid_shape + (2,))
        dense = rng.standard_normal((2, 14, 11, 2))
        left = np.sum(basis.upsample(coefficients) * dense)
        right = np.sum(coefficients * basis.adjoint(dense))
        self.assertAlmostEqual(left, right, places=9)

    def test_bending_gradient_matches_finite_differences(self):
        """The bending energy is quadratic, so central differences must agree with the analytic gradient."""
        rng = np.random.default_rng(1)
        height = width = 12
        shape = (2, grid_size(height, 4), grid_size(width, 4), 2)
        coefficients = rng.standard_normal(shape)
        direction = rng.standard_normal(shape)
        gradient = bending_energy_gradient(ControlGrid(coefficients, 4), height, width)
        h = 1e-3
        plus = bending_energy(ControlGrid(coefficients + h * direction, 4), height, width)
        minus = bending_energy(ControlGrid(coefficients - h * direction, 4), height, width)
        self.assertAlmostEqual((plus - minus) / (2 * h), float(np.sum(gradient * direction)), places=6)

    def test_weights_sum_to_one_everywhere(self):
        for u in np.random.default_rng(2).uniform(0.0, 1.0, size=1000):
            self.assertLess(abs(sum(cubic_basis(float(u))) - 1.0), 1e-14)

    def test_upsampling_is_linear(self):
        rng = np.random.default_rng(3)
        basis = ffd_basis(19, 15, 4)
        first = rng.standard_normal((2,) + basis.grid_shape + (2,))
        second = rng.standard_normal((2,) + basis.grid_shape + (2,))
        np.testing.assert_allclose(basis.upsample(1.5 * first - 0.25 * second),
                                   1.5 * basis.upsample(first) - 0.25 * basis.upsample(second), atol=1e-12)

    def test_single_control_point_gives_the_tensor_kernel(self):
        """A unit coefficient at control point (k, l) peaks at (4/6)^2 on pixel ((k - 1)s, (l - 1)s)."""
        spacing, size, k, l = 4, 17, 3, 4
        coefficients = np.zeros((1, grid_size(size, spacing), grid_size(size, spacing), 2))
        coefficients[0, k, l, 1] = 1.0
        field = ffd_upsample(ControlGrid(coefficients, spacing), size, size).u[0]

        def kernel(t):
            t = np.abs(t)
            return np.where(t < 1, (4 - 6 * t ** 2 + 3 * t ** 3) / 6, np.where(t < 2, (2 - t) ** 3 / 6, 0.0))

        pixels = np.arange(size) / spacing
        expected = np.outer(kernel(pixels - (k - 1)), kernel(pixels - (l - 1)))
        np.testing.assert_allclose(field[:, :, 1], expected, atol=1e-14)
        np.testing.assert_array_equal(field[:, :, 0], 0.0)
        peak = np.unravel_index(np.argmax(field[:, :, 1]), (size, size))
        self.assertEqual(peak, ((k - 1) * spacing, (l - 1) * spacing))
        self.assertAlmostEqual(float(field[:, :, 1].max()), (4 / 6) ** 2, places=14)

    def test_bending_terms_match_finite_differences_of_the_field(self):
        """
        Second derivatives of the spline agree with central differences taken
        on a 64x finer evaluation of the same spline, away from knot pixels.
        """
        spacing, size, refine = 4, 17, 64
        coefficients = np.random.default_rng(4).standard_normal((1, grid_size(size, spacing),
                                                                 grid_size(size, spacing), 2))
        coarse = ffd_basis(size, size, spacing)
        fine = ffd_basis((size - 1) * refine + 1, (size - 1) * refine + 1, spacing * refine)
        self.assertEqual(fine.grid_shape, coarse.grid_shape)
        dense = fine.upsample(coefficients)[0]

        pixels = np.array([p for p in range(1, size - 1) if p % spacing])
        r = refine * pixels[:, None]
        c = refine * pixels[None, :]
        h2 = refine ** 2
        u_yy = (dense[r + 1, c] - 2 * dense[r, c] + dense[r - 1, c]) * h2
        u_xx = (dense[r, c + 1] - 2 * dense[r, c] + dense[r, c - 1]) * h2
        u_xy = (dense[r + 1, c + 1] - dense[r + 1, c - 1] - dense[r - 1, c + 1] + dense[r - 1, c - 1]) * h2 / 4
        grid = np.ix_(pixels, pixels)
        np.testing.assert_allclose(u_yy, coarse.upsample(coefficients, 2, 0)[0][grid], atol=1e-6)
        np.testing.assert_allclose(u_xx, coarse.upsample(coefficients, 0, 2)[0][grid], atol=1e-6)
        np.testing.assert_allclose(u_xy, coarse.upsample(coefficients, 1, 1)[0][grid], atol=1e-4)


class TestSampling(unittest.TestCase):

    def setUp(self):
        self.image = np.arange(64, dtype=np.float64).reshape(1, 8, 8)

    def test_integer_and_half_coordinates(self):
        rows = np.array([[[2.0, 2.5]]])
        cols = np.array([[[3.0, 3.5]]])
        values = sample_bilinear(self.image, rows, cols)
        self.assertEqual(values[0, 0, 0], self.image[0, 2, 3])
        self.assertAlmostEqual(values[0, 0, 1], (19 + 20 + 27 + 28) / 4.0)

    def test_clamped_samples_have_zero_gradient(self):
        """Coordinates outside the image repeat the border and carry no gradient."""
        rows = np.array([[[-2.0, 3.5]]])
        cols = np.array([[[1.5, 9.0]]])
        values, grad_r, grad_c = sample_bilinear(self.image, rows, cols, with_gradient=True)
        self.assertAlmostEqual(values[0, 0, 0], 1.5)
        self.assertAlmostEqual(values[0, 0, 1], 3.5 * 8 + 7)
        self.assertEqual(grad_r[0, 0, 0], 0.0)
        self.assertEqual(grad_c[0, 0, 1], 0.0)
        self.assertAlmostEqual(grad_c[0, 0, 0], 1.0)
        self.assertAlmostEqual(grad_r[0, 0, 1], 8.0)

    def test_zero_field_is_identity(self):
        frames = np.random.default_rng(2).random((3, 9, 10))
        np.testing.assert_array_equal(warp_frames(frames, np.zeros((3, 9, 10, 2))), frames)

    def test_warp_image_integer_shift(self):
        """Backward warping by +1 column reads the right neighbour."""
        image = self.image[0]
        field = np.zeros((8, 8, 2))
        field[..., 1] = 1.0
        warped = warp_image(image, field)
        np.testing.assert_array_equal(warped[:, :-1], image[:, 1:])
        np.testing.assert_array_equal(warped[:, -1], image[:, -1])

    def test_warp_image_validates_inputs(self):
        with self.assertRaises(ValidationError):
            warp_image(self.image[0], np.zeros((8, 7, 2)))
        field = np.zeros((8, 8, 2))
        field[0, 0, 0] = np.nan
        with self.assertRaises(ValidationError):
            warp_image(self.image[0], field)

    def test_warp_stack_uses_field(self):
        field = DisplacementField.zeros(1, 8, 8)
        np.testing.assert_array_equal(warp_stack(self.image, field), self.image)


class TestFieldOperations(unittest.TestCase):

    def test_compose_constant_shifts_adds_them(self):
        outer = DisplacementField(np.full((2, 10, 10, 2), 0.5))
        inner = DisplacementField(np.full((2, 10, 10, 2), 0.25))
        np.testing.assert_allclose(compose_displacements(outer, inner).u, 0.75)

    def test_compose_matches_sequential_warps(self):
        """Warping by the composed field equals warping by inner and then by outer, away from borders."""
        rows, cols = np.mgrid[0:24, 0:24].astype(np.float64)
        image = np.sin(rows / 4.0) + np.cos(cols / 5.0)
        inner = np.zeros((1, 24, 24, 2))
        inner[..., 0] = 0.3 * np.sin(cols / 6.0)
        outer = np.zeros((1, 24, 24, 2))
        outer[..., 1] = 0.4 * np.cos(rows / 7.0)
        composed = compose_displacements(DisplacementField(outer), DisplacementField(inner))

        sequential = warp_frames(warp_frames(image[None], inner), outer)
        direct = warp_frames(image[None], composed.u)
        # bilinear resampling twice versus once differs only by interpolation error
        np.testing.assert_allclose(direct[0, 3:-3, 3:-3], sequential[0, 3:-3, 3:-3], atol=0.05)

    def test_compose_shape_mismatch(self):
        with self.assertRaises(ValidationError):
            compose_displacements(DisplacementField.zeros(1, 8, 8), DisplacementField.zeros(2, 8, 8))

    def test_jacobian_of_smooth_fields(self):
        np.testing.assert_allclose(jacobian_determinant(DisplacementField.zeros(1, 8, 8)), 1.0)
        scaled = np.zeros((1, 8, 8, 2))
        scaled[0, :, :, 0] = 0.5 * np.arange(8)[:, None]
        np.testing.assert_allclose(jacobian_determinant(DisplacementField(scaled)), 1.5)

    def test_field_validation(self):
        with self.assertRaises(ValidationError):
            DisplacementField(np.zeros((1, 8, 8, 3)))
        with self.assertRaises(ValidationError):
            ControlGrid(np.zeros((1, 3, 5, 2)))


class TestFieldFiles(unittest.TestCase):

    def setUp(self):
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_field_round_trip(self):
        path = os.path.join(self.test_dir, "field.qmr")
        u = np.arange(2 * 8 * 9 * 2, dtype=np.float64).reshape(2, 8, 9, 2) / 4.0
        save_field(DisplacementField(u), path)
        np.testing.assert_array_equal(load_field(path).u, u)

    def test_stack_file_is_not_a_field(self):
        path = os.path.join(self.test_dir, "stack.qmr")
        save_stack(ImageStack(np.zeros((2, 8, 8))), path)
        with self.assertRaises(FormatError):
            load_field(path)


if __name__ == '__main__':
    unittest.main()
