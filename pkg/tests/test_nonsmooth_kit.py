"""Tests for the nonsmooth_kit module."""

import math

import numpy as np
import pytest

from wassprox.measure_core import (
    CotangentSample,
    CovectorField,
    ParticleMeasure,
    VelocityField,
    wasserstein2,
)
from wassprox.models import translation_value
from wassprox.nonsmooth_kit import (
    EmpiricalModulus,
    ShiftProbe,
    SubgradientProbe,
    ValueDictionary,
    check_directional_subgradient,
    check_prox_subgradient,
    dictionary_probes,
    displacement_cone_check,
    envelope_gap,
    moreau_yosida_inf,
    moreau_yosida_sup,
    proximal_pair,
    proximal_pair_from_anchor,
    random_directions,
    random_pair_probes,
    shift_inequality_check,
)
from wassprox.utils.validators import ValidationError


def second_moment(t, m):
    """phi(t, m) = integral of |x|^2 dm."""
    return m.integrate(lambda x: np.einsum("ij,ij->i", x, x))


def time_plus_moment(t, m):
    """phi(t, m) = t + integral of |x|^2 dm."""
    return t + second_moment(t, m)


@pytest.fixture
def two_entry_dictionary():
    """Entries (0, delta_0, 0) and (1, delta_0, 1)."""
    origin = ParticleMeasure.dirac([0.0])
    return ValueDictionary([(0.0, origin, 0.0), (1.0, origin, 1.0)])


@pytest.fixture
def interior_dictionary():
    """t + second moment on Diracs around the anchor (0.49, delta_0.5)."""
    return ValueDictionary.translate_grid(
        time_plus_moment,
        [0.47, 0.48, 0.49, 0.5, 0.51],
        ParticleMeasure.dirac([0.0]),
        [0.25, 0.375, 0.5, 0.625, 0.75],
    )


@pytest.fixture
def moment_dictionary():
    """Second moment tabulated on Diracs at t = 0 over [-4, 4]."""
    return ValueDictionary.translate_grid(
        second_moment, [0.0], ParticleMeasure.dirac([0.0]), np.linspace(-4.0, 4.0, 81)
    )


class TestValueDictionary:
    """Tests for ValueDictionary."""

    def test_rejects_empty(self):
        """Test that a dictionary needs an entry."""
        with pytest.raises(ValidationError):
            ValueDictionary([])

    def test_rejects_small_c0(self, two_entry_dictionary):
        """Test that c0 must bound every value."""
        with pytest.raises(ValidationError) as exc_info:
            ValueDictionary(two_entry_dictionary.entries, c0=0.5)
        assert "c0" in str(exc_info.value)

    def test_rejects_mixed_dimensions(self):
        """Test that all entries share one dimension."""
        with pytest.raises(ValidationError):
            ValueDictionary(
                [(0.0, ParticleMeasure.dirac([0.0]), 0.0), (0.0, ParticleMeasure.dirac([0.0, 0.0]), 0.0)]
            )

    def test_conflicting_duplicates(self):
        """Test that coinciding entries with different values are rejected."""
        origin = ParticleMeasure.dirac([0.0])
        table = ValueDictionary([(0.0, origin, 0.0), (0.0, origin, 1.0)])
        with pytest.raises(ValidationError) as exc_info:
            table.modulus
        assert "coincide" in str(exc_info.value)

    def test_value_at(self, two_entry_dictionary):
        """Test lookups on and off the table."""
        assert two_entry_dictionary(1.0, ParticleMeasure.dirac([0.0])) == 1.0
        assert two_entry_dictionary.index_of(0.5, ParticleMeasure.dirac([0.0])) is None
        with pytest.raises(ValidationError):
            two_entry_dictionary.value_at(0.0, ParticleMeasure.dirac([1.0]))

    def test_shifted_keeps_terminal_entries(self, two_entry_dictionary):
        """Test that a shift leaves entries at the horizon alone."""
        shifted = two_entry_dictionary.shifted(0.5, horizon=1.0)
        np.testing.assert_array_equal(shifted.values, [0.5, 1.0])
        np.testing.assert_array_equal(two_entry_dictionary.shifted(0.5).values, [0.5, 1.5])

    def test_with_values_length(self, two_entry_dictionary):
        """Test that the new values must match the grid."""
        with pytest.raises(ValidationError):
            two_entry_dictionary.with_values([1.0])

    def test_anchor_radius(self, two_entry_dictionary):
        """Test kappa * sqrt(2 * oscillation)."""
        assert two_entry_dictionary.anchor_radius(0.5) == pytest.approx(0.5 * math.sqrt(2.0))
        assert two_entry_dictionary.rho1(0.5) <= two_entry_dictionary.anchor_radius(0.5)

    def test_rows(self, two_entry_dictionary):
        """Test CSV rows."""
        assert two_entry_dictionary.rows() == [[0, 0.0, 0.0, 1], [1, 1.0, 1.0, 1]]


class TestEmpiricalModulus:
    """Tests for EmpiricalModulus."""

    def test_concave_hull(self):
        """Test the piecewise linear majorant through the observed peaks."""
        omega = EmpiricalModulus(np.array([1.0, 2.0]), np.array([1.0, 1.5]))
        assert omega(0.5) == pytest.approx(0.5)
        assert omega(1.5) == pytest.approx(1.25)
        assert omega(3.0) == pytest.approx(1.5)

    def test_majorizes_observations(self):
        """Test that dominated knots are dropped but still majorized."""
        omega = EmpiricalModulus(np.array([1.0, 2.0]), np.array([0.2, 2.0]))
        assert omega(1.0) == pytest.approx(1.0)
        assert omega(1.0) >= 0.2

    def test_empty(self):
        """Test the zero modulus."""
        assert EmpiricalModulus(np.array([]), np.array([]))(1.0) == 0.0


class TestMoreauYosida:
    """Tests for moreau_yosida_inf and moreau_yosida_sup functions."""

    def test_inf_envelope(self, two_entry_dictionary):
        """Test the inf-envelope value and anchor."""
        result = moreau_yosida_inf(two_entry_dictionary, 0.0, ParticleMeasure.dirac([1.0]), 1.0)
        assert result.value == pytest.approx(0.5)
        assert result.anchor_index == 0
        assert result.diagnostics.anchor_distance == pytest.approx(1.0)
        assert result.diagnostics.query_index is None

    def test_sup_envelope(self, two_entry_dictionary):
        """Test the sup-envelope value and anchor."""
        result = moreau_yosida_sup(two_entry_dictionary, 0.0, ParticleMeasure.dirac([1.0]), 1.0)
        assert result.value == pytest.approx(0.0)
        assert result.anchor_index == 1
        assert result.sign == "super"

    def test_envelope_below_value_on_table(self, two_entry_dictionary):
        """Test phi_kappa <= phi at an entry with a nonnegative Ekeland residual."""
        result = moreau_yosida_inf(two_entry_dictionary, 1.0, ParticleMeasure.dirac([0.0]), 1.0)
        assert result.value == pytest.approx(0.5)
        assert result.diagnostics.query_index == 1
        assert result.diagnostics.ekeland_residuals[0] == pytest.approx(0.5)

    def test_anchor_distance_bounds(self, moment_dictionary):
        """Test anchor distance <= min(kappa sqrt(2 c0), rho1) for on-table queries."""
        for kappa in (1.0, 0.5, 0.25):
            for k in (0, 13, 40, 62, 80):
                mu = moment_dictionary.measures[k]
                result = moreau_yosida_inf(moment_dictionary, 0.0, mu, kappa)
                diagnostics = result.diagnostics
                assert diagnostics.query_index == k
                bound = min(kappa * math.sqrt(2.0 * moment_dictionary.c0), diagnostics.rho1)
                assert diagnostics.anchor_distance <= bound + 1e-12
                assert diagnostics.within_bounds
                assert diagnostics.ekeland_residuals[0] >= 0.0

    def test_ties_go_to_lowest_index(self):
        """Test the tie-breaking rule."""
        table = ValueDictionary(
            [(0.0, ParticleMeasure.dirac([-1.0]), 0.0), (0.0, ParticleMeasure.dirac([1.0]), 0.0)]
        )
        result = moreau_yosida_inf(table, 0.0, ParticleMeasure.dirac([0.0]), 1.0)
        assert result.anchor_index == 0

    def test_dimension_mismatch(self, two_entry_dictionary):
        """Test that the query must match the dictionary dimension."""
        with pytest.raises(ValidationError):
            moreau_yosida_inf(two_entry_dictionary, 0.0, ParticleMeasure.dirac([0.0, 0.0]), 1.0)

    def test_invalid_kappa(self, two_entry_dictionary):
        """Test that kappa must be positive."""
        with pytest.raises(ValidationError):
            moreau_yosida_inf(two_entry_dictionary, 0.0, ParticleMeasure.dirac([0.0]), 0.0)


class TestProximalPair:
    """Tests for proximal_pair and proximal_pair_from_anchor functions."""

    def test_sub_pair(self, two_entry_dictionary):
        """Test a = (s - t) / kappa^2 and q = (x - y) / kappa^2 at the anchor."""
        envelope, pair = proximal_pair(two_entry_dictionary, 0.0, ParticleMeasure.dirac([1.0]), 1.0)
        assert envelope.anchor_index == 0
        assert pair.a == pytest.approx(0.0)
        np.testing.assert_allclose(pair.gamma.points[:, 0], [0.0])
        np.testing.assert_allclose(pair.gamma.covectors[:, 0], [1.0])
        np.testing.assert_allclose(pair.source_covector().values[:, 0], [1.0])

    def test_super_pair(self, two_entry_dictionary):
        """Test the flipped signs of a supergradient pair."""
        _, pair = proximal_pair(
            two_entry_dictionary, 0.0, ParticleMeasure.dirac([1.0]), 1.0, sign="super"
        )
        assert pair.a == pytest.approx(1.0)
        np.testing.assert_allclose(pair.gamma.covectors[:, 0], [-1.0])

    def test_gate(self):
        """Test that a flat dictionary gates interior queries only."""
        origin = ParticleMeasure.dirac([0.0])
        table = ValueDictionary([(1.0, origin, 0.0), (1.0, ParticleMeasure.dirac([1.0]), 0.0)])
        _, inside = proximal_pair(table, 1.0, origin, 0.5, horizon=2.0)
        _, edge = proximal_pair(table, 0.0, origin, 0.5, horizon=2.0)
        assert inside.gated
        assert not edge.gated

    def test_anchor_covector_order(self):
        """Test that the anchor covector follows the anchor's point order."""
        anchor = ParticleMeasure.from_points([1.0, -1.0])
        mu = ParticleMeasure.from_points([3.0, 0.0])
        _, plan = wasserstein2(mu, anchor)
        pair = proximal_pair_from_anchor(0.0, mu, 0.0, anchor, plan, 1.0)
        field = pair.anchor_covector()
        assert field.measure is anchor
        np.testing.assert_allclose(field.values[:, 0], [2.0, 1.0])
        np.testing.assert_allclose(pair.barycenter().measure.points[:, 0], [-1.0, 1.0])
        np.testing.assert_allclose(pair.barycenter().values[:, 0], [1.0, 2.0])

    def test_plan_must_match(self):
        """Test that the plan must couple the query to the anchor."""
        mu = ParticleMeasure.dirac([0.0])
        other = ParticleMeasure.dirac([1.0])
        _, plan = wasserstein2(other, mu)
        with pytest.raises(ValidationError):
            proximal_pair_from_anchor(0.0, mu, 0.0, mu, plan, 1.0)


class TestCheckProxSubgradient:
    """Tests for check_prox_subgradient function."""

    def test_exact_anchor_passes(self, moment_dictionary):
        """Test that the envelope pair is a proximal subgradient of a convex phi."""
        kappa = 0.5
        envelope, pair = proximal_pair(moment_dictionary, 0.0, ParticleMeasure.dirac([3.0]), kappa)
        assert envelope.anchor_measure.points[0, 0] == pytest.approx(2.0)
        probes = dictionary_probes(pair, moment_dictionary)
        probes += random_pair_probes(pair, np.random.default_rng(7), count=20)
        report = check_prox_subgradient(
            second_moment, pair.anchor_t, pair.anchor_measure, pair, probes, sigma=0.0
        )
        assert report.passed()
        assert len(report.margins) == len(probes)
        assert not report.sigma_fitted

    def test_gated_interior_pair(self, interior_dictionary):
        """Test that a gated pair at an interior time passes random probes."""
        envelope, pair = proximal_pair(
            interior_dictionary, 0.5, ParticleMeasure.dirac([0.51]), 0.1, horizon=1.0
        )
        assert pair.gated
        assert pair.anchor_t == pytest.approx(0.49)
        assert envelope.anchor_measure.points[0, 0] == 0.5
        probes = random_pair_probes(pair, np.random.default_rng(11), count=50, horizon=1.0)
        assert all(0.0 <= probe.t <= 1.0 for probe in probes)
        report = check_prox_subgradient(
            time_plus_moment, pair.anchor_t, pair.anchor_measure, pair, probes, sigma=0.0
        )
        assert len(report.margins) == 50
        assert report.passed()

    def test_probe_times_stay_in_horizon(self, two_entry_dictionary):
        """Test that perturbed probe times are clipped to [0, T]."""
        _, pair = proximal_pair(two_entry_dictionary, 0.0, ParticleMeasure.dirac([1.0]), 1.0)
        probes = random_pair_probes(
            pair, np.random.default_rng(2), count=200, scale=5.0, horizon=1.0
        )
        times = np.array([probe.t for probe in probes])
        assert times.min() == 0.0
        assert times.max() == 1.0
        unbounded = random_pair_probes(pair, np.random.default_rng(2), count=200, scale=5.0)
        assert min(probe.t for probe in unbounded) == 0.0
        assert max(probe.t for probe in unbounded) > 1.0

    def test_wrong_anchor_fails(self):
        """Test that a covector off the gradient is refuted."""
        anchor = ParticleMeasure.dirac([1.0])
        mu = ParticleMeasure.dirac([3.0])
        _, plan = wasserstein2(mu, anchor)
        pair = proximal_pair_from_anchor(0.0, mu, 0.0, anchor, plan, 0.5)
        table = ValueDictionary.translate_grid(
            second_moment, [0.0], ParticleMeasure.dirac([0.0]), [1.5]
        )
        probes = dictionary_probes(pair, table)
        report = check_prox_subgradient(second_moment, 0.0, anchor, pair, probes, sigma=0.0)
        assert report.worst == pytest.approx(2.25 - 1.0 - 8.0 * 0.5)
        assert not report.passed()

    def test_fitted_sigma(self):
        """Test that fitting sigma makes every probe pass."""
        anchor = ParticleMeasure.dirac([1.0])
        mu = ParticleMeasure.dirac([3.0])
        _, plan = wasserstein2(mu, anchor)
        pair = proximal_pair_from_anchor(0.0, mu, 0.0, anchor, plan, 0.5)
        probes = random_pair_probes(pair, np.random.default_rng(3), count=10)
        report = check_prox_subgradient(second_moment, 0.0, anchor, pair, probes)
        assert report.sigma_fitted
        assert report.sigma > 0
        assert report.passed()

    def test_malformed_probe_rejected(self, moment_dictionary):
        """Test that a probe with wrong marginals is listed, not fatal."""
        _, pair = proximal_pair(moment_dictionary, 0.0, ParticleMeasure.dirac([3.0]), 0.5)
        bad = SubgradientProbe(
            t=0.0,
            measure=ParticleMeasure.dirac([1.0]),
            base_points=pair.gamma.points,
            probe_points=np.array([[1.0]]),
            covectors=pair.gamma.covectors,
            masses=np.array([0.5]),
        )
        report = check_prox_subgradient(second_moment, 0.0, pair.anchor_measure, pair, [bad])
        assert report.margins == ()
        assert len(report.rejected) == 1
        assert report.rows()[0][2].startswith("rejected")


class TestCheckDirectionalSubgradient:
    """Tests for check_directional_subgradient function."""

    def test_gradient_passes(self):
        """Test that the gradient of the second moment passes every direction."""
        mu = ParticleMeasure.from_points([1.0, -2.0])
        p = CovectorField(mu, [2.0, -4.0])
        directions = random_directions(mu, np.random.default_rng(0), count=10)
        report = check_directional_subgradient(second_moment, 0.0, mu, 0.0, p, 0.0, directions)
        assert report.passed()

    def test_proximal_pair_barycenter(self, interior_dictionary):
        """Test that the pair's (a, barycenter) is a directional subgradient at the anchor."""
        _, pair = proximal_pair(
            interior_dictionary, 0.5, ParticleMeasure.dirac([0.51]), 0.1, horizon=1.0
        )
        p = pair.anchor_covector()
        np.testing.assert_allclose(p.values, pair.barycenter().values)
        directions = random_directions(pair.anchor_measure, np.random.default_rng(5), count=20)
        report = check_directional_subgradient(
            time_plus_moment, pair.anchor_t, pair.anchor_measure, pair.a, p, 0.0, directions
        )
        assert len(report.margins) == 20
        assert report.passed()

    def test_wrong_covector_fails(self):
        """Test that an overestimated slope is refuted."""
        mu = ParticleMeasure.dirac([1.0])
        p = CovectorField(mu, [3.0])
        directions = [(0.0, VelocityField(mu, [1.0]))]
        report = check_directional_subgradient(second_moment, 0.0, mu, 0.0, p, 0.0, directions)
        assert not report.passed()

    def test_epsilon_slack(self):
        """Test that epsilon absorbs a small slope error."""
        mu = ParticleMeasure.dirac([1.0])
        p = CovectorField(mu, [2.5])
        directions = [(0.0, VelocityField(mu, [1.0]))]
        report = check_directional_subgradient(second_moment, 0.0, mu, 0.0, p, 0.6, directions)
        assert report.passed()

    def test_zero_direction_skipped(self):
        """Test that a zero direction is reported as skipped."""
        mu = ParticleMeasure.dirac([1.0])
        p = CovectorField(mu, [2.0])
        report = check_directional_subgradient(
            second_moment, 0.0, mu, 0.0, p, 0.0, [(0.0, VelocityField.zeros(mu))]
        )
        assert report.rejected == ((0, "zero direction skipped"),)

    def test_bad_h_sequence(self):
        """Test that the h sequence must decrease."""
        mu = ParticleMeasure.dirac([1.0])
        p = CovectorField(mu, [2.0])
        with pytest.raises(ValidationError):
            check_directional_subgradient(
                second_moment, 0.0, mu, 0.0, p, 0.0, [], h_sequence=[0.1, 0.2]
            )


class TestShiftInequality:
    """Tests for shift_inequality_check function."""

    def test_nonnegative_slack(self, two_entry_dictionary):
        """Test the first-order expansion bound at shifted points."""
        mu = ParticleMeasure.dirac([1.0])
        probes = []
        for s_prime, x in [(0.1, 0.5), (0.3, 2.0), (0.0, -1.0)]:
            target = ParticleMeasure.dirac([x])
            probes.append(ShiftProbe(s_prime, target, wasserstein2(mu, target)[1]))
        report = shift_inequality_check(two_entry_dictionary, 0.0, mu, 1.0, probes)
        assert len(report.margins) == 3
        assert report.passed()

    def test_foreign_plan_rejected(self, two_entry_dictionary):
        """Test that a plan from another measure is rejected."""
        mu = ParticleMeasure.dirac([1.0])
        other = ParticleMeasure.dirac([5.0])
        target = ParticleMeasure.dirac([2.0])
        probe = ShiftProbe(0.0, target, wasserstein2(other, target)[1])
        report = shift_inequality_check(two_entry_dictionary, 0.0, mu, 1.0, [probe])
        assert len(report.rejected) == 1


class TestEnvelopeGap:
    """Tests for envelope_gap function."""

    def test_within_bound(self):
        """Test the envelope gap of the translation value against rho3."""
        table = ValueDictionary.translate_grid(
            translation_value(1.0),
            np.linspace(0.0, 1.0, 11),
            ParticleMeasure.dirac([0.0]),
            np.linspace(-4.0, 4.0, 81),
        )
        result = envelope_gap(table, 0.4)
        assert np.all(result.gaps >= 0.0)
        assert result.within_bound

    def test_shrinks_with_kappa(self):
        """Test that the gap shrinks with kappa and stays below rho3 at every kappa."""
        table = ValueDictionary.translate_grid(
            translation_value(1.0),
            np.linspace(0.0, 1.0, 11),
            ParticleMeasure.dirac([0.0]),
            np.linspace(-4.0, 4.0, 81),
        )
        results = [envelope_gap(table, kappa) for kappa in (1.0, 0.5, 0.25)]
        for result in results:
            assert result.gap <= result.rho3 + 1e-12
            assert result.within_bound
        for wide, narrow in zip(results, results[1:]):
            assert narrow.gap <= wide.gap + 1e-12
            assert np.all(narrow.gaps <= wide.gaps + 1e-12)


class TestDisplacementConeCheck:
    """Tests for displacement_cone_check function."""

    def test_given_scale(self):
        """Test membership for a monotone and a crossing induced map."""
        mu = ParticleMeasure.from_points([0.0, 1.0])
        gamma = CotangentSample.from_field(mu, [[2.0], [-2.0]])
        assert displacement_cone_check(gamma, mu, scale=8.0).member
        assert not displacement_cone_check(gamma, mu, scale=1.0).member

    def test_smallest_scale(self):
        """Test the bisected smallest admissible scale."""
        mu = ParticleMeasure.from_points([0.0, 1.0])
        gamma = CotangentSample.from_field(mu, [[2.0], [-2.0]])
        result = displacement_cone_check(gamma, mu)
        assert result.member
        assert result.scale == pytest.approx(4.0, rel=1e-6)

    def test_plus_cone(self):
        """Test the mirrored cone."""
        mu = ParticleMeasure.from_points([0.0, 1.0])
        gamma = CotangentSample.from_field(mu, [[-2.0], [2.0]])
        assert displacement_cone_check(gamma, mu, scale=8.0, cone="plus").member
        assert not displacement_cone_check(gamma, mu, scale=1.0, cone="plus").member

    def test_not_a_map(self):
        """Test that split covectors at one base point are not induced by a map."""
        mu = ParticleMeasure.dirac([0.0])
        gamma = CotangentSample([[0.0], [0.0]], [[1.0], [-1.0]], [0.5, 0.5])
        result = displacement_cone_check(gamma, mu)
        assert not result.member
        assert "not a function" in result.reason

    def test_base_mismatch(self):
        """Test that the base marginal must be mu."""
        gamma = CotangentSample.from_field(ParticleMeasure.dirac([1.0]), [[1.0]])
        with pytest.raises(ValidationError):
            displacement_cone_check(gamma, ParticleMeasure.dirac([0.0]))
