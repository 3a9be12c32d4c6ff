import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from plumetrace.mesh import build_structured_mesh
from plumetrace.sensing import (
    QuantisedObservation,
    Quantiser,
    SensorNetwork,
    build_measurement_matrix,
    cell_probability,
    fence_positions,
    generate_positions,
    load_sensor_layout,
    log_cell_probability,
    log_observation_likelihood,
    observation_likelihood,
    save_sensor_layout,
    simulate_measurement,
)

quantisers = st.builds(
    Quantiser,
    scale=st.floats(0.5, 2000.0),
    num_levels=st.integers(1, 11000),
)


class TestQuantiser:
    def test_validation(self):
        with pytest.raises(ValueError, match="scale"):
            Quantiser(scale=0.0, num_levels=10)
        with pytest.raises(ValueError, match="level count"):
            Quantiser(scale=1.0, num_levels=0)
        with pytest.raises(ValueError, match="level count"):
            Quantiser(scale=1.0, num_levels=2.5)

    @given(quantisers)
    def test_level_values(self, q):
        levels = q.level_values()
        assert levels.shape == (q.num_levels,)
        assert levels[0] == pytest.approx(-q.scale + q.cell_half_width)
        assert levels[-1] == pytest.approx(q.scale - q.cell_half_width)
        if q.num_levels > 1:
            np.testing.assert_allclose(
                np.diff(levels), 2.0 * q.cell_half_width, rtol=1e-9
            )
        assert abs(levels.mean()) < 1e-9 * q.scale  # symmetric about zero

    @given(quantisers, st.floats(-1.0, 1.0))
    def test_error_bounded_by_half_cell(self, q, frac):
        y = frac * q.scale
        assert abs(q.quantise(y) - y) <= q.cell_half_width * (1.0 + 1e-12)

    @given(quantisers, st.floats(-1.0, 1.0))
    def test_idempotent(self, q, frac):
        v = q.quantise(frac * q.scale)
        assert q.quantise(v) == v

    @given(quantisers)
    def test_monotone(self, q):
        y = np.linspace(-1.5 * q.scale, 1.5 * q.scale, 501)
        assert (np.diff(q.quantise(y)) >= 0.0).all()

    def test_saturation(self):
        q = Quantiser(scale=2.0, num_levels=4)
        np.testing.assert_allclose(q.level_values(), [-1.5, -0.5, 0.5, 1.5])
        assert q.quantise(10.0) == 1.5
        assert q.quantise(-10.0) == -1.5
        assert q.quantise(2.0) == 1.5  # upper boundary maps to the top level

    def test_scalar_and_array_forms(self):
        q = Quantiser(scale=1.0, num_levels=10)
        out = q.quantise(0.3)
        assert isinstance(out, float)
        arr = q.quantise(np.array([[0.3, -0.3], [0.9, 0.0]]))
        assert arr.shape == (2, 2)


class TestCellProbability:
    @given(st.floats(-5.0, 5.0), st.floats(0.01, 4.0))
    def test_matches_gaussian_cdf_difference(self, mean, var):
        q = Quantiser(scale=3.0, num_levels=7)
        level = float(q.level_values()[2])
        w = q.cell_half_width
        sd = np.sqrt(var)
        expected = norm.cdf(level + w, mean, sd) - norm.cdf(level - w, mean, sd)
        assert cell_probability(q, level, mean, var) == pytest.approx(
            expected, abs=1e-13
        )

    def test_far_tail_log_mass_stays_finite(self):
        q = Quantiser(scale=2000.0, num_levels=10_000)
        # a cell 50+ standard deviations from the mean
        lp = log_cell_probability(q, 1000.0, 0.0, 5e-3)
        assert np.isfinite(lp) and lp < -1e5

    def test_log_is_monotone_in_distance(self):
        q = Quantiser(scale=100.0, num_levels=1000)
        levels = q.level_values()[500:]
        lp = log_cell_probability(q, levels, 0.0, 1.0)
        assert (np.diff(lp) < 0.0).all()

    def test_partition_sums_to_one(self):
        rng = np.random.default_rng(7)
        for levels in (3, 100, 2000):
            q = Quantiser(scale=5.0, num_levels=levels)
            for _ in range(5):
                z = rng.normal(0.0, 3.0)
                var = rng.uniform(0.001, 4.0)
                sd = np.sqrt(var)
                total = cell_probability(q, q.level_values(), z, var).sum()
                total += norm.cdf((-5.0 - z) / sd) + norm.sf((5.0 - z) / sd)
                assert abs(total - 1.0) < 1e-10

    def test_variance_must_be_positive(self):
        q = Quantiser(scale=1.0, num_levels=4)
        with pytest.raises(ValueError, match="variance"):
            log_cell_probability(q, 0.0, 0.0, 0.0)


class TestObservationLikelihood:
    @given(st.floats(-2.0, 2.0), st.floats(-2.0, 2.0), st.floats(0.01, 1.0),
           st.floats(0.0, 1.0))
    def test_mixture_composition(self, y_frac, z, var, rate):
        q = Quantiser(scale=3.0, num_levels=25)
        y_hat = q.quantise(y_frac)
        detect = cell_probability(q, y_hat, z, var)
        miss = cell_probability(q, y_hat, 0.0, var)
        expected = rate * detect + (1.0 - rate) * miss
        assert observation_likelihood(q, y_hat, z, var, rate) == pytest.approx(
            expected, abs=1e-13
        )

    def test_degenerate_rates(self):
        q = Quantiser(scale=3.0, num_levels=25)
        y_hat = q.quantise(1.0)
        full = log_observation_likelihood(q, y_hat, 0.7, 0.1, 1.0)
        assert full == pytest.approx(log_cell_probability(q, y_hat, 0.7, 0.1))
        none = log_observation_likelihood(q, y_hat, 0.7, 0.1, 0.0)
        assert none == pytest.approx(log_cell_probability(q, y_hat, 0.0, 0.1))


class TestMeasurementMatrix:
    def setup_method(self):
        self.mesh = build_structured_mesh(0.0, 0.0, 1.0, 1.0, 5, 5)

    def test_rows_are_interpolation_weights(self):
        positions = np.array([[0.13, 0.42], [0.77, 0.9], [0.5, 0.5]])
        h = build_measurement_matrix(self.mesh, positions)
        assert h.shape == (3, self.mesh.node_count + 1)
        np.testing.assert_allclose(h.sum(axis=1), 1.0)
        assert (h[:, -1] == 0.0).all()
        assert ((h != 0.0).sum(axis=1) <= 3).all()

    def test_linear_field_sampled_exactly(self):
        positions = np.array([[0.13, 0.42], [0.77, 0.9]])
        h = build_measurement_matrix(self.mesh, positions)
        field = 2.0 + 3.0 * self.mesh.nodes[:, 0] - self.mesh.nodes[:, 1]
        state = np.append(field, 7.0)  # strength must not leak into readings
        expected = 2.0 + 3.0 * positions[:, 0] - positions[:, 1]
        np.testing.assert_allclose(h @ state, expected, atol=1e-12)

    def test_outside_position_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            build_measurement_matrix(self.mesh, [[1.2, 0.5]])


class TestPositionGenerators:
    def test_random_positions_inside_and_reproducible(self):
        mesh = build_structured_mesh(0, 0, 2, 1, 4, 4)
        a = generate_positions(mesh, 17, np.random.default_rng(3))
        b = generate_positions(mesh, 17, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)
        assert a.shape == (17, 2)
        from plumetrace.mesh import locate_point
        assert all(locate_point(mesh, p) is not None for p in a)

    def test_zero_count(self):
        mesh = build_structured_mesh(0, 0, 1, 1, 2, 2)
        assert generate_positions(mesh, 0, np.random.default_rng(0)).shape == (0, 2)

    def setup_method(self):
        self.desk = build_structured_mesh(0, 0, 1000, 1000, 20, 20)
        self.center = np.array([250.0, 500.0])

    def test_fence_ring_structure(self):
        pos = fence_positions(self.desk, self.center, 40)
        assert pos.shape == (40, 2)
        assert len(np.unique(pos, axis=0)) == 40
        rings = np.max(np.abs(pos - self.center), axis=1)
        counts = {50.0: 4, 100.0: 16, 150.0: 12}
        for radius, expected in counts.items():
            assert int((rings == radius).sum()) == expected
        assert int((rings > 150.0).sum()) == 8  # background grid

    def test_fence_snaps_to_nodes_on_matching_grid(self):
        pos = fence_positions(self.desk, self.center, 32)  # rings only
        for p in pos:
            nearest = np.abs(self.desk.nodes - p).max(axis=1).min()
            assert nearest == 0.0

    def test_fence_corner_positions(self):
        pos = fence_positions(self.desk, self.center, 4)
        expected = {(200.0, 450.0), (200.0, 550.0), (300.0, 450.0), (300.0, 550.0)}
        assert {tuple(p) for p in pos} == expected

    def test_fence_partial_ring_is_evenly_thinned(self):
        pos = fence_positions(self.desk, self.center, 25)
        rings = np.max(np.abs(pos - self.center), axis=1)
        assert int((rings == 150.0).sum()) == 5

    def test_fence_near_boundary_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            fence_positions(self.desk, (50.0, 500.0), 40)

    def test_fence_needs_four_sensors(self):
        with pytest.raises(ValueError, match="at least 4"):
            fence_positions(self.desk, self.center, 3)


class TestSimulateMeasurement:
    def test_formula(self):
        h = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
        x = np.array([3.0, 4.0, 9.0])
        alpha = np.array([1.0, 0.0])
        noise = np.array([0.1, -0.2])
        np.testing.assert_allclose(
            simulate_measurement(h, x, alpha, noise), [3.1, -0.2]
        )

    def test_scalar_row(self):
        out = simulate_measurement(np.array([0.5, 0.5]), np.array([2.0, 4.0]),
                                   1.0, 0.25)
        assert out == pytest.approx(3.25)
        assert isinstance(out, float)


class TestSensorNetwork:
    def setup_method(self):
        self.mesh = build_structured_mesh(0.0, 0.0, 1.0, 1.0, 4, 4)
        self.positions = np.array([[0.2, 0.2], [0.6, 0.7], [0.85, 0.3]])
        self.net = SensorNetwork.build(
            self.mesh, self.positions, noise_var=5e-3, detect_rate=0.85,
            scale=2.0, levels=100,
        )

    def test_build_broadcasts_scalars(self):
        assert self.net.count == 3
        np.testing.assert_array_equal(self.net.noise_var, np.full(3, 5e-3))
        np.testing.assert_array_equal(self.net.detect_rate, np.full(3, 0.85))
        np.testing.assert_array_equal(self.net.levels, np.full(3, 100))
        np.testing.assert_allclose(self.net.cell_half_width, 2.0 / 100)
        np.testing.assert_allclose(
            self.net.proposal_log_density, np.log(100 / 4.0)
        )

    def test_quantise_matches_per_sensor_quantisers(self):
        y = np.array([0.513, -1.99, 3.7])
        expected = [self.net.quantiser(j).quantise(y[j]) for j in range(3)]
        np.testing.assert_allclose(self.net.quantise(y), expected)

    def test_log_likelihood_matches_scalar_form(self):
        rng = np.random.default_rng(0)
        y_hat = self.net.quantise(rng.normal(0, 1, 3))
        z = rng.normal(0, 1, (4, 3))
        out = self.net.log_likelihood(y_hat, z)
        assert out.shape == (4, 3)
        for m in range(4):
            for j in range(3):
                expected = log_observation_likelihood(
                    self.net.quantiser(j), y_hat[j], z[m, j], 5e-3, 0.85
                )
                assert out[m, j] == pytest.approx(expected, abs=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError, match="noise"):
            SensorNetwork.build(self.mesh, self.positions, noise_var=0.0,
                                detect_rate=0.85, scale=2.0, levels=100)
        with pytest.raises(ValueError, match="detection"):
            SensorNetwork.build(self.mesh, self.positions, noise_var=1e-3,
                                detect_rate=1.5, scale=2.0, levels=100)
        with pytest.raises(ValueError, match="scalar or shape"):
            SensorNetwork.build(self.mesh, self.positions, noise_var=[1e-3, 1e-3],
                                detect_rate=0.85, scale=2.0, levels=100)
        h = self.net.H.copy()
        h[0, -1] = 0.5
        with pytest.raises(ValueError, match="strength column"):
            SensorNetwork(positions=self.positions.copy(), H=h,
                          noise_var=np.full(3, 1e-3),
                          detect_rate=np.full(3, 0.85),
                          scale=np.full(3, 2.0), levels=np.full(3, 100))

    def test_arrays_are_frozen(self):
        with pytest.raises(ValueError):
            self.net.H[0, 0] = 1.0

    def test_layout_round_trip(self, tmp_path):
        path = tmp_path / "sensors.txt"
        save_sensor_layout(self.net, path)
        loaded = load_sensor_layout(path, self.mesh)
        np.testing.assert_array_equal(loaded.positions, self.net.positions)
        np.testing.assert_array_equal(loaded.H, self.net.H)
        np.testing.assert_array_equal(loaded.noise_var, self.net.noise_var)
        np.testing.assert_array_equal(loaded.detect_rate, self.net.detect_rate)
        np.testing.assert_array_equal(loaded.levels, self.net.levels)

    def test_layout_file_errors(self, tmp_path):
        path = tmp_path / "sensors.txt"
        path.write_text("# only comments\n")
        with pytest.raises(ValueError, match="no sensors"):
            load_sensor_layout(path, self.mesh)
        path.write_text("0.5 0.5 2.0 100\n")
        with pytest.raises(ValueError, match="6 fields"):
            load_sensor_layout(path, self.mesh)

    def test_observation_container_defaults(self):
        obs = QuantisedObservation(values=np.zeros(3))
        assert obs.detections is None and obs.raw is None
