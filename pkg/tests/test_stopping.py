import math

import numpy as np
import pytest
from pydantic import ValidationError

from src.errors import ControllerError
from src.stopping import (
    ControllerKind,
    ControllerSpec,
    HybridController,
    NeverStopController,
    PlateauController,
    ThresholdController,
    build_controller,
    suggest_thresholds,
)


def stop_index(controller, losses):
    """1-based observation at which the controller stops, or None."""
    for index, loss in enumerate(losses, start=1):
        decision = controller.observe(loss)
        if decision.stop:
            return index
    return None


def brute_force_plateau(losses, patience):
    for i in range(patience + 1, len(losses) + 1):
        best_before = min(losses[: i - patience])
        if all(value >= best_before for value in losses[i - patience : i]):
            return i
    return None


def brute_force_threshold(losses, threshold):
    for index, loss in enumerate(losses):
        if loss < threshold:
            return index + 1
    return None


def random_sequences(count, seed=2024):
    """Loss-like sequences with frequent ties and plateaus."""
    rng = np.random.default_rng(seed)
    for _ in range(count):
        length = int(rng.integers(1, 40))
        values = np.round(rng.uniform(0, 1, size=length), 1) * float(rng.choice([1.0, 1e-3]))
        yield [float(v) for v in values]


class TestThreshold:
    def test_stops_on_first_value_below(self):
        controller = ThresholdController(0.001)
        assert stop_index(controller, [0.5, 0.01, 0.0005]) == 3
        assert controller.early_stop

    def test_strict_inequality(self):
        decision = ThresholdController(0.001).observe(0.001)
        assert not decision.stop
        assert decision.cause is None

    def test_cause(self):
        assert ThresholdController(1.0).observe(0.5).cause == "threshold"

    def test_matches_first_index_below(self):
        for losses in random_sequences(200):
            assert stop_index(ThresholdController(0.05), losses) == brute_force_threshold(losses, 0.05)

    def test_monotone_in_threshold(self):
        for losses in random_sequences(200, seed=9):
            indices = [stop_index(ThresholdController(t), losses) for t in (0.01, 0.1, 0.5, 1.0)]
            finite = [math.inf if i is None else i for i in indices]
            assert finite == sorted(finite, reverse=True)


class TestPlateau:
    def test_two_non_improvements(self):
        controller = PlateauController(2)
        assert stop_index(controller, [5, 4, 4, 4]) == 4

    def test_improvement_resets_wait(self):
        controller = PlateauController(2)
        assert stop_index(controller, [5, 4, 4, 3]) is None
        assert controller.wait == 0
        assert controller.best == 3

    def test_equal_loss_counts_toward_plateau(self):
        assert stop_index(PlateauController(1), [2.0, 2.0]) == 2

    def test_state_invariants(self):
        for losses in random_sequences(200, seed=5):
            controller = PlateauController(3)
            previous_best = math.inf
            for loss in losses:
                decision = controller.observe(loss)
                assert controller.wait <= 3
                assert controller.best <= previous_best
                previous_best = controller.best
                if decision.stop:
                    break

    def test_equivalent_to_brute_force_rescan(self):
        for losses in random_sequences(1000):
            for patience in (1, 2, 5):
                expected = brute_force_plateau(losses, patience)
                assert stop_index(PlateauController(patience), losses) == expected, (losses, patience)

    def test_monotone_in_patience(self):
        for losses in random_sequences(300, seed=77):
            indices = [stop_index(PlateauController(p), losses) for p in (1, 2, 3, 5, 8)]
            finite = [math.inf if i is None else i for i in indices]
            assert finite == sorted(finite)


class TestHybrid:
    def test_plateau_fires_when_threshold_never_does(self):
        controller = HybridController(0.001, 2)
        decisions = [controller.observe(v) for v in (5, 5, 5)]
        assert [d.stop for d in decisions] == [False, False, True]
        assert decisions[-1].cause == "plateau"

    def test_threshold_checked_first(self):
        controller = HybridController(1.0, 1)
        controller.observe(0.5 + 1.0)
        decision = controller.observe(0.5)
        assert decision.cause == "threshold"

    def test_stop_index_is_min_of_rules(self):
        for losses in random_sequences(500, seed=31):
            threshold_only = stop_index(ThresholdController(0.05), losses)
            plateau_only = stop_index(PlateauController(3), losses)
            candidates = [i for i in (threshold_only, plateau_only) if i is not None]
            expected = min(candidates) if candidates else None
            assert stop_index(HybridController(0.05, 3), losses) == expected


class TestLifecycle:
    def test_never_stops(self):
        controller = NeverStopController()
        assert stop_index(controller, [0.0] * 50) is None

    def test_observe_after_stop(self):
        controller = ThresholdController(1.0)
        controller.observe(0.1)
        with pytest.raises(ControllerError):
            controller.observe(0.1)

    @pytest.mark.parametrize("bad", [float("nan"), float("inf"), -1.0])
    def test_rejects_invalid_loss(self, bad):
        with pytest.raises(ControllerError):
            PlateauController(2).observe(bad)

    def test_reset_after_stop(self):
        controller = PlateauController(1)
        stop_index(controller, [1.0, 1.0])
        controller.reset()
        assert not controller.early_stop
        assert controller.observe(1.0).stop is False

    def test_reset_of_fresh_controller(self):
        controller = HybridController(0.1, 4)
        before = (controller.wait, controller.plateau_start, controller.best, controller.early_stop)
        controller.reset()
        assert (controller.wait, controller.plateau_start, controller.best, controller.early_stop) == before

    def test_replay_after_reset_matches_new_controller(self):
        losses = [3.0, 2.0, 2.5, 2.0, 2.2, 1.0, 1.0, 1.0]
        used = HybridController(0.5, 2)
        stop_index(used, [9.0, 9.0, 9.0])
        used.reset()
        fresh = HybridController(0.5, 2)
        assert [used.observe(v) for v in losses[:4]] == [fresh.observe(v) for v in losses[:4]]


class TestControllerSpec:
    def test_labels(self):
        assert ControllerSpec().label == "never"
        assert ControllerSpec(kind="threshold", threshold=1e-5).label == "threshold-T1e-05"
        assert ControllerSpec(kind="plateau", patience=15).label == "plateau-P15"
        assert ControllerSpec(kind="hybrid", threshold=1e-5, patience=15).label == "hybrid-T1e-05-P15"

    def test_parameters_required_by_kind(self):
        with pytest.raises(ValidationError):
            ControllerSpec(kind="hybrid", threshold=1e-5)
        with pytest.raises(ValidationError):
            ControllerSpec(kind="threshold")
        with pytest.raises(ValidationError):
            ControllerSpec(kind="never", patience=3)
        with pytest.raises(ValidationError):
            ControllerSpec(kind="plateau", patience=0)
        with pytest.raises(ValidationError):
            ControllerSpec(kind="threshold", threshold=-1.0)

    def test_build_controller(self):
        spec = ControllerSpec(kind=ControllerKind.HYBRID, threshold=0.01, patience=4)
        controller = build_controller(spec)
        assert isinstance(controller, HybridController)
        assert controller.spec == spec
        assert isinstance(build_controller(ControllerSpec()), NeverStopController)


class TestSuggestThresholds:
    def test_decades_from_successful_median(self):
        histories = [[1.0, 3e-6], [1.0, 5e-6], [1.0, 8e-6], [1.0, 0.5]]
        assert suggest_thresholds(histories, [True, True, True, False]) == [1e-5, 1e-6, 1e-7, 1e-8]

    def test_falls_back_to_all_runs(self):
        assert suggest_thresholds([[0.02], [0.04]], [False, False], count=2) == [0.1, 0.01]

    def test_errors(self):
        with pytest.raises(ControllerError):
            suggest_thresholds([], [])
        with pytest.raises(ControllerError):
            suggest_thresholds([[1.0]], [True, False])
        with pytest.raises(ControllerError):
            suggest_thresholds([[1.0]], [True], count=0)
