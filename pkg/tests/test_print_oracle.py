import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from errors import ArgumentError, ConfigError, OutOfChamberError
from geometry_core import PointCloud
from print_oracle import (
    OraclePredictor,
    WarpSpec,
    oracle_compensation,
    radial_fraction,
    simulate_print,
    warp_displacement,
    warp_field,
    warp_jacobian,
)


class TestWarpField:
    def test_centre_gets_the_base_amplitude(self, noiseless_warp, chamber):
        np.testing.assert_allclose(warp_displacement(chamber.center, noiseless_warp), [0.0, 0.0, 1.0])

    def test_only_z_moves(self, noiseless_warp, rng, chamber):
        points = rng.uniform(chamber.min_corner, chamber.max_corner, size=(50, 3))
        field = warp_field(points, noiseless_warp)
        np.testing.assert_array_equal(field[:, :2], 0.0)

    def test_edges_bend_more_than_the_centre(self, noiseless_warp, chamber):
        # same dome phase, one at the centre and one near the chamber floor corner
        centre = chamber.center
        edge = centre - np.array([0.0, 130.0, 180.0])
        assert radial_fraction(edge, noiseless_warp)[0] > 0.5
        assert warp_displacement(edge, noiseless_warp)[2] > 1.5 * warp_displacement(centre, noiseless_warp)[2]

    def test_outside_the_chamber(self, noiseless_warp):
        with pytest.raises(OutOfChamberError):
            warp_field(np.array([[-1.0, 10.0, 10.0]]), noiseless_warp)

    def test_jacobian_matches_finite_differences(self, noiseless_warp, rng, chamber):
        points = rng.uniform(chamber.min_corner + 10.0, chamber.max_corner - 10.0, size=(10, 3))
        jac = warp_jacobian(points, noiseless_warp)
        h = 1e-5
        for b in range(3):
            step = np.zeros(3)
            step[b] = h
            numeric = (warp_field(points + step, noiseless_warp) - warp_field(points - step, noiseless_warp)) / (2 * h)
            np.testing.assert_allclose(jac[:, :, b], numeric, atol=1e-7)

    def test_jacobian_is_continuous(self, noiseless_warp, rng, chamber):
        points = rng.uniform(chamber.min_corner + 10.0, chamber.max_corner - 10.0, size=(40, 3))
        points[0] = chamber.center
        for size in (1e-2, 1e-4):
            step = rng.normal(size=points.shape)
            step *= size / np.linalg.norm(step, axis=1, keepdims=True)
            change = warp_jacobian(points + step, noiseless_warp) - warp_jacobian(points, noiseless_warp)
            assert np.abs(change).max() <= 0.2 * size

    @pytest.mark.parametrize("x_offset", [0.0, 20.0, 60.0])
    def test_magnitude_grows_with_radial_fraction(self, noiseless_warp, chamber, x_offset):
        direction = np.array([0.0, 0.6, 0.8])
        t = np.linspace(0.0, 170.0, 60)
        points = chamber.center + np.array([x_offset, 0.0, 0.0]) + t[:, None] * direction
        radial = radial_fraction(points, noiseless_warp)
        magnitude = np.abs(warp_field(points, noiseless_warp)[:, 2])
        assert np.all(np.diff(radial) > 0)
        assert np.all(np.diff(magnitude) >= 0)
        assert magnitude[-1] > magnitude[0]

    def test_rejects_bad_parameters(self):
        with pytest.raises(ConfigError):
            WarpSpec(wavelength=0.0)
        with pytest.raises(ConfigError):
            WarpSpec(noise=-0.1)

    def test_fingerprint_tracks_parameters(self):
        assert WarpSpec().fingerprint() == WarpSpec().fingerprint()
        assert WarpSpec().fingerprint() != WarpSpec(amplitude=2.0).fingerprint()


class TestSimulatePrint:
    def test_noiseless_is_cad_plus_warp(self, noiseless_warp, box_graph):
        cad = box_graph.cloud()
        printed = simulate_print(cad, noiseless_warp)
        np.testing.assert_allclose(printed.points, cad.points + warp_field(cad.points, noiseless_warp))

    def test_noise_is_seeded(self, box_graph):
        warp = WarpSpec(noise=0.05, seed=3)
        a = simulate_print(box_graph.cloud(), warp).points
        b = simulate_print(box_graph.cloud(), warp).points
        c = simulate_print(box_graph.cloud(), warp, seed=4).points
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)


class TestOracleCompensation:
    def test_prints_back_to_the_cad(self, noiseless_warp, cube_shell_graph):
        cad = cube_shell_graph.cloud()
        compensated = oracle_compensation(cad, noiseless_warp)
        printed = simulate_print(compensated, noiseless_warp)
        np.testing.assert_allclose(printed.points, cad.points, atol=1e-9)

    def test_zero_amplitude_is_identity(self, chamber, box_graph):
        warp = WarpSpec(amplitude=0.0, noise=0.0, chamber=chamber)
        cad = box_graph.cloud()
        np.testing.assert_array_equal(oracle_compensation(cad, warp).points, cad.points)


class TestOraclePredictor:
    def test_forward_is_the_noiseless_print(self, noiseless_warp, box_graph):
        oracle = OraclePredictor(noiseless_warp)
        cad = box_graph.cloud()
        np.testing.assert_allclose(
            oracle.forward(cad, box_graph).points, simulate_print(cad, noiseless_warp).points
        )

    def test_always_frozen(self, noiseless_warp):
        assert OraclePredictor(noiseless_warp).frozen
        with pytest.raises(ArgumentError):
            OraclePredictor(noiseless_warp, frozen=False)

    def test_checksum_is_the_warp_fingerprint(self, noiseless_warp):
        assert OraclePredictor(noiseless_warp).checksum() == noiseless_warp.fingerprint()

    def test_out_of_chamber_input(self, noiseless_warp):
        cloud = PointCloud([[500.0, 0.0, 0.0]])
        with pytest.raises(OutOfChamberError):
            OraclePredictor(noiseless_warp).forward(cloud, None)
