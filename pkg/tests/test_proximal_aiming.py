"""Tests for the proximal_aiming module."""

import math

import numpy as np
import pytest

from wassprox.measure_core import ParticleMeasure
from wassprox.models import translation
from wassprox.nonsmooth_kit import ValueDictionary
from wassprox.proximal_aiming import (
    AUDIT_COLUMNS,
    BOUND_COLUMNS,
    FeedbackStrategy,
    ParameterComplex,
    Partition,
    aim_control,
    lower_bound_check,
    payoff_feedback,
    process_payoff,
    run_process,
    search_parameter_complex,
    upper_bound_check,
)
from wassprox.utils.validators import HypothesisError, NumericalError, ValidationError

KAPPA = 0.4
N_STEPS = 10


@pytest.fixture(scope="module")
def model():
    """Translation benchmark on [0, 1]."""
    return translation()


@pytest.fixture(scope="module")
def dictionary(model):
    """Exact value on 11 times by 81 Dirac positions in [-4, 4]."""
    return ValueDictionary.translate_grid(
        model.exact_value,
        np.linspace(0.0, 1.0, 11),
        ParticleMeasure.dirac([0.0]),
        np.linspace(-4.0, 4.0, 81),
    )


@pytest.fixture(scope="module")
def scenarios():
    """Start points delta_3 (Val 4) and delta_-2 (Val 1) at s = 0."""
    return [(0.0, ParticleMeasure.dirac([3.0])), (0.0, ParticleMeasure.dirac([-2.0]))]


class TestPartition:
    """Tests for Partition."""

    def test_uniform(self):
        """Test a uniform partition and its step bounds."""
        partition = Partition.uniform(0.0, 1.0, 4)
        assert partition.n == 4
        assert partition.min_step == pytest.approx(0.25)
        assert partition.fits(0.25, 0.25)
        assert not partition.fits(0.3, 1.0)

    def test_rejects_unordered(self):
        """Test that times must strictly increase."""
        with pytest.raises(ValidationError):
            Partition(np.array([0.0, 0.5, 0.5, 1.0]))

    def test_rejects_single_time(self):
        """Test that a partition needs two times."""
        with pytest.raises(ValidationError):
            Partition(np.array([0.0]))
        with pytest.raises(ValidationError):
            Partition.uniform(0.0, 1.0, 0)


class TestParameterComplex:
    """Tests for ParameterComplex."""

    def test_valid(self):
        """Test a consistent complex."""
        found = ParameterComplex(kappa=0.4, epsilon=0.01, alpha_lo=0.1, alpha_hi=0.1, eta=0.2)
        assert found.as_dict()["epsilon"] == 0.01

    def test_epsilon_above_alpha_squared(self):
        """Test that epsilon must not exceed alpha_lo^2."""
        with pytest.raises(ValidationError) as exc_info:
            ParameterComplex(kappa=0.4, epsilon=0.02, alpha_lo=0.1, alpha_hi=0.1, eta=0.2)
        assert "alpha_lo^2" in str(exc_info.value)

    def test_alpha_order(self):
        """Test that alpha_lo may not exceed alpha_hi."""
        with pytest.raises(ValidationError):
            ParameterComplex(kappa=0.4, epsilon=0.0, alpha_lo=0.2, alpha_hi=0.1, eta=0.2)

    def test_gate(self, dictionary):
        """Test the rho1 < 1 gate for a small and a large kappa."""
        small = ParameterComplex(kappa=0.1, epsilon=0.01, alpha_lo=0.1, alpha_hi=0.1, eta=0.2)
        assert small.check_gate(dictionary) < 1.0
        large = ParameterComplex(kappa=5.0, epsilon=0.01, alpha_lo=0.1, alpha_hi=0.1, eta=0.2)
        with pytest.raises(ValidationError):
            large.check_gate(dictionary)


class TestFeedbackStrategy:
    """Tests for FeedbackStrategy and aim_control."""

    def test_aims_toward_origin(self, model, dictionary):
        """Test that a far Dirac is pushed toward the origin."""
        strategy = FeedbackStrategy(model, dictionary, KAPPA)
        right = aim_control(strategy, 0.0, ParticleMeasure.dirac([3.0]))
        left = aim_control(strategy, 0.0, ParticleMeasure.dirac([-3.0]))
        np.testing.assert_array_equal(right, [-1.0])
        np.testing.assert_array_equal(left, [1.0])
        assert strategy.choose(0.0, ParticleMeasure.dirac([3.0])).index == 1

    def test_rests_on_flat_region(self, model, dictionary):
        """Test that a zero covector picks the resting control."""
        strategy = FeedbackStrategy(model, dictionary, KAPPA)
        choice = strategy.choose(0.0, ParticleMeasure.dirac([0.5]))
        assert choice.index == 0
        assert choice.objective == pytest.approx((0.0, 0.0, 0.0))

    def test_dimension_mismatch(self, dictionary):
        """Test that the dictionary must match the model dimension."""
        with pytest.raises(ValidationError):
            FeedbackStrategy(translation(dimension=2), dictionary, KAPPA)

    def test_invalid_sign(self, model, dictionary):
        """Test that the envelope side is validated."""
        with pytest.raises(ValidationError):
            FeedbackStrategy(model, dictionary, KAPPA, sign="both")


class TestRunProcess:
    """Tests for run_process, payoff_feedback and process_payoff functions."""

    def test_reaches_value(self, model, dictionary):
        """Test that the sample-and-hold process pays close to the value."""
        strategy = FeedbackStrategy(model, dictionary, KAPPA)
        mu = ParticleMeasure.dirac([3.0])
        process = run_process(strategy, 0.0, mu, Partition.uniform(0.0, 1.0, N_STEPS))
        assert len(process.audit) == N_STEPS
        assert process.trajectory.final.points[0, 0] == pytest.approx(2.0)
        assert process_payoff(model, process) == pytest.approx(4.0)
        assert all(len(row) == len(AUDIT_COLUMNS) for row in process.audit_rows())

    def test_payoff_feedback_matches(self, model, dictionary):
        """Test that the recorded control reproduces the process payoff."""
        strategy = FeedbackStrategy(model, dictionary, KAPPA)
        mu = ParticleMeasure.dirac([-2.0])
        partition = Partition.uniform(0.0, 1.0, N_STEPS)
        process = run_process(strategy, 0.0, mu, partition)
        assert payoff_feedback(strategy, 0.0, mu, partition) == pytest.approx(
            process_payoff(model, process)
        )

    def test_partition_window(self, model, dictionary):
        """Test that the partition must span [s*, T]."""
        strategy = FeedbackStrategy(model, dictionary, KAPPA)
        with pytest.raises(ValidationError):
            run_process(strategy, 0.0, ParticleMeasure.dirac([1.0]), Partition.uniform(0.0, 0.5, 5))


class TestSearchParameterComplex:
    """Tests for search_parameter_complex function."""

    def test_finds_complex(self, model, dictionary, scenarios):
        """Test that the search returns an admissible complex."""
        result = search_parameter_complex(
            model,
            dictionary,
            scenarios,
            eta=0.5,
            kappa_grid=(0.8, 0.4, 0.2),
            partition_steps=(10,),
            epsilon_grid=(1e-2, 1e-3),
        )
        found = result.complex
        assert found.kappa <= 0.5
        assert found.epsilon <= found.alpha_lo**2 + 1e-15
        assert result.partition_steps == 10
        assert min(result.margins) >= 0.0

    def test_strategy_carries_epsilon(self, model, dictionary, scenarios):
        """Test that the searched epsilon reaches every pair of the aiming runs."""
        result = search_parameter_complex(
            model,
            dictionary,
            scenarios,
            eta=0.5,
            kappa_grid=(0.4,),
            partition_steps=(10,),
            epsilon_grid=(1e-2, 1e-3),
        )
        strategy = result.strategy
        assert strategy.kappa == result.complex.kappa
        assert strategy.epsilon == result.complex.epsilon > 0.0
        s, mu = scenarios[0]
        process = run_process(strategy, s, mu, Partition.uniform(s, 1.0, result.partition_steps))
        assert all(record.pair.epsilon == result.complex.epsilon for record in process.audit)

    def test_exhausted(self, model, dictionary, scenarios):
        """Test that an unattainable bound raises with the best margins."""
        lowered = dictionary.shifted(-1.0, horizon=1.0)
        with pytest.raises(NumericalError) as exc_info:
            search_parameter_complex(
                model, lowered, scenarios, eta=0.0, kappa_grid=(0.4,), partition_steps=(10,)
            )
        assert "Best margins" in str(exc_info.value)

    def test_no_scenarios(self, model, dictionary):
        """Test that at least one scenario is required."""
        with pytest.raises(ValidationError):
            search_parameter_complex(model, dictionary, [], eta=0.5)


class TestUpperBoundCheck:
    """Tests for upper_bound_check function."""

    def test_sandwich(self, model, dictionary, scenarios):
        """Test J <= phi + eta and Val <= phi + eta on the exact dictionary."""
        report = upper_bound_check(
            model, dictionary, scenarios, eta=0.2, kappa=KAPPA, partition_steps=N_STEPS
        )
        assert report.passed
        assert [row.value for row in report.rows] == pytest.approx([4.0, 1.0])
        assert all(len(row) == len(BOUND_COLUMNS) for row in report.csv_rows())
        assert len(report.audits) == 2

    def test_lowered_dictionary_fails(self, model, dictionary, scenarios):
        """Test that a dictionary one unit below the value is refuted."""
        lowered = dictionary.shifted(-1.0, horizon=1.0)
        report = upper_bound_check(
            model, lowered, scenarios, eta=0.2, kappa=KAPPA, partition_steps=N_STEPS
        )
        assert not report.passed
        assert report.worst <= -0.8 + 1e-6

    def test_terminal_hypothesis(self, model, dictionary, scenarios):
        """Test that terminal values below G violate the hypothesis."""
        with pytest.raises(HypothesisError):
            upper_bound_check(
                model,
                dictionary.shifted(-1.0),
                scenarios,
                eta=0.2,
                kappa=KAPPA,
                partition_steps=N_STEPS,
            )

    def test_missing_terminal_entries(self, model, scenarios):
        """Test that a dictionary without entries at T is rejected."""
        early = ValueDictionary.translate_grid(
            model.exact_value, [0.0, 0.5], ParticleMeasure.dirac([0.0]), np.linspace(-4, 4, 81)
        )
        with pytest.raises(HypothesisError):
            upper_bound_check(model, early, scenarios, eta=0.2, kappa=KAPPA, partition_steps=2)

    def test_scenario_at_horizon(self, model, dictionary):
        """Test that start points must lie before T."""
        with pytest.raises(ValidationError):
            upper_bound_check(
                model,
                dictionary,
                [(1.0, ParticleMeasure.dirac([0.0]))],
                eta=0.2,
                kappa=KAPPA,
                partition_steps=N_STEPS,
            )


class TestLowerBoundCheck:
    """Tests for lower_bound_check function."""

    def test_sandwich(self, model, dictionary, scenarios):
        """Test Val >= psi - tol on the exact dictionary."""
        report = lower_bound_check(model, dictionary, scenarios, n_steps=N_STEPS, kappa=KAPPA)
        assert report.passed
        assert report.worst == pytest.approx(0.0, abs=1e-6)
        assert len(report.cone_members) == 2 * N_STEPS
        assert all(math.isnan(row.feedback_margin) for row in report.rows)

    def test_raised_dictionary_fails(self, model, dictionary, scenarios):
        """Test that a dictionary one unit above the value is refuted."""
        raised = dictionary.shifted(1.0, horizon=1.0)
        report = lower_bound_check(model, raised, scenarios, n_steps=N_STEPS, kappa=KAPPA)
        assert not report.passed
        assert report.worst == pytest.approx(-1.0, abs=1e-6)

    def test_terminal_hypothesis(self, model, dictionary, scenarios):
        """Test that terminal values above G violate the hypothesis."""
        with pytest.raises(HypothesisError):
            lower_bound_check(model, dictionary.shifted(1.0), scenarios, n_steps=N_STEPS, kappa=KAPPA)

    def test_epsilon_above_alpha_squared(self, model, dictionary, scenarios):
        """Test that epsilon must stay below the squared step."""
        with pytest.raises(ValidationError):
            lower_bound_check(
                model, dictionary, scenarios, n_steps=N_STEPS, kappa=KAPPA, epsilon=0.02
            )
