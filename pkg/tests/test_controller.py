import math
import os
import sys
import unittest
from dataclasses import replace
from unittest.mock import Mock

import numpy as np

# Add src to path for imports
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from src.controller import (
    CONTROLLERS, Actuator, ControllerState, ControlPhase, MonitorOnlyController, NotConverged,
    ThresholdController, Unwrappable,
    get_controller, run_feedback_cycle, step_x1, step_x2, voltage_to_rotation, wrap_voltage
)
from src.models.scenario import CONTROLLER_NAMES, ActuatorConfig, ControlSettings, Thresholds
from src.polarization import (
    H, S2_AXIS, V, EstimatedSOP, PoincareRotation, compose, random_rotation, rotate
)

CFG = ActuatorConfig()
THRESHOLDS = Thresholds()


def make_plant(birefringence, noise=0.0, rng=None, cfg=CFG):
    """Expected-value plant: H through the fiber and the actuators, optional uniform noise"""
    def plant(state):
        s = rotate(H, compose(birefringence, state.actuator_rotation(cfg)))
        s1, s2 = s.s1, s.s2
        if noise:
            s1 += rng.uniform(-noise, noise)
            s2 += rng.uniform(-noise, noise)
        return EstimatedSOP(s1, s2)
    return plant


def grid_rotations(step_deg=10):
    """Rotations on a 10° grid of axis direction and angle, without duplicate poles"""
    axes = [(0.0, 0.0, 1.0), (0.0, 0.0, -1.0)]
    for polar in range(step_deg, 180, step_deg):
        for azimuth in range(0, 360, step_deg):
            theta, phi = math.radians(polar), math.radians(azimuth)
            axes.append((math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta)))
    rotations = [PoincareRotation.identity()]
    for axis in axes:
        for angle in range(step_deg, 180, step_deg):
            rotations.append(PoincareRotation(axis, math.radians(angle)))
    return rotations


class TestActuators(unittest.TestCase):
    """Test voltage to retardance mapping and wrap-around"""

    def test_zero_voltage_is_identity(self):
        r = voltage_to_rotation(0.0, Actuator.X1, CFG)
        np.testing.assert_allclose(r.matrix(), np.eye(3), atol=1e-12)

    def test_two_pi_voltage_is_identity(self):
        r = voltage_to_rotation(52.2, Actuator.X1, CFG)
        np.testing.assert_allclose(r.matrix(), np.eye(3), atol=1e-9)

    def test_half_wave_x1_maps_h_to_v(self):
        """Test that 26.1 V on X1 is a π rotation about QR"""
        r = voltage_to_rotation(26.1, Actuator.X1, CFG)
        self.assertEqual(r.axis, S2_AXIS)
        np.testing.assert_allclose(rotate(H, r).as_array(), V.as_array(), atol=1e-12)

    def test_x2_leaves_h_fixed(self):
        r = voltage_to_rotation(30.0, Actuator.X2, CFG)
        np.testing.assert_allclose(rotate(H, r).as_array(), H.as_array(), atol=1e-12)

    def test_wrap_examples(self):
        self.assertEqual(wrap_voltage(75.0, Actuator.X1, CFG), 75.0)
        self.assertAlmostEqual(wrap_voltage(155.0, Actuator.X1, CFG), 102.8)
        self.assertAlmostEqual(wrap_voltage(-10.0, Actuator.X2, CFG), 39.0)
        self.assertAlmostEqual(wrap_voltage(400.0, Actuator.X2, CFG), 400.0 - 6 * 49.0)

    def test_wrap_keeps_rotation(self):
        """Test that wrapping changes the applied rotation by a multiple of 2π only"""
        for v in (-120.0, -10.0, 151.0, 310.5):
            for which in (Actuator.X1, Actuator.X2):
                wrapped = wrap_voltage(v, which, CFG)
                self.assertTrue(CFG.v_min <= wrapped <= CFG.v_max)
                np.testing.assert_allclose(voltage_to_rotation(wrapped, which, CFG).matrix(),
                                           voltage_to_rotation(v, which, CFG).matrix(), atol=1e-9)

    def test_unwrappable_range(self):
        narrow = ActuatorConfig.model_construct(v_2pi_x1=52.2, v_2pi_x2=49.0, v_min=0.0, v_max=40.0)
        with self.assertRaises(Unwrappable):
            wrap_voltage(45.0, Actuator.X1, narrow)


class TestSteps(unittest.TestCase):
    """Test single X1 and X2 steps"""

    def setUp(self):
        self.state = ControllerState.initial(CFG, THRESHOLDS)

    def test_x2_deadband(self):
        self.assertEqual(step_x2(self.state, 0.01, CFG).v_x2, self.state.v_x2)

    def test_x2_first_step_tests_sign(self):
        """Test that the first X2 step of a cycle applies the +1 V sign test step"""
        st = step_x2(self.state, 0.4, CFG)
        self.assertAlmostEqual(st.v_x2, self.state.v_x2 + CFG.sign_test_voltage)
        self.assertEqual(st.trial_s2, 0.4)
        self.assertIsNone(st.sign_x2)

    def test_x2_sign_test_sets_sign(self):
        st = replace(self.state, trial_s2=0.4)
        st = step_x2(st, 0.45, CFG)
        self.assertEqual(st.sign_x2, 1)
        self.assertAlmostEqual(st.v_x2, self.state.v_x2 - CFG.gain_x2 * 0.45)
        st = replace(self.state, trial_s2=0.4)
        self.assertEqual(step_x2(st, 0.3, CFG).sign_x2, -1)

    def test_x2_proportional_step(self):
        """Test |Δv| = gain·|s2| with gain 20 and s2 = 0.5"""
        cfg = ActuatorConfig(gain_x2=20.0)
        st = replace(self.state, sign_x2=1)
        self.assertAlmostEqual(step_x2(st, 0.5, cfg).v_x2, self.state.v_x2 - 10.0)
        st = replace(self.state, sign_x2=-1)
        self.assertAlmostEqual(step_x2(st, 0.5, cfg).v_x2, self.state.v_x2 + 10.0)

    def test_x1_satisfied(self):
        st = step_x1(self.state, 0.97, CFG)
        self.assertEqual(st.v_x1, self.state.v_x1)
        self.assertEqual(st.dir_x1, self.state.dir_x1)

    def test_x1_step(self):
        st = step_x1(self.state, 0.5, CFG)
        self.assertAlmostEqual(st.v_x1, self.state.v_x1 + CFG.gain_x1 * 0.5)
        self.assertEqual(st.last_x1_s1, 0.5)

    def test_x1_direction_reverses_when_s1_falls_below_t3(self):
        """Test that S1 falling 0.95 -> 0.90 with t3 = 0.94 reverses X1"""
        st = replace(self.state, last_x1_s1=0.95)
        st = step_x1(st, 0.90, CFG)
        self.assertEqual(st.dir_x1, -1)
        self.assertAlmostEqual(st.v_x1, self.state.v_x1 - CFG.gain_x1 * 0.10)

    def test_x1_keeps_direction_while_improving(self):
        st = replace(self.state, last_x1_s1=0.2)
        self.assertEqual(step_x1(st, 0.5, CFG).dir_x1, 1)

    def test_voltages_stay_in_range(self):
        st = replace(self.state, v_x1=149.0, v_x2=0.5, sign_x2=1)
        st = step_x1(st, -1.0, CFG)
        st = step_x2(st, 0.9, CFG)
        self.assertTrue(CFG.v_min <= st.v_x1 <= CFG.v_max)
        self.assertTrue(CFG.v_min <= st.v_x2 <= CFG.v_max)


class TestFeedbackCycle(unittest.TestCase):
    """Test closed-loop control cycles"""

    def setUp(self):
        self.state = ControllerState.initial(CFG, THRESHOLDS)

    def _aligned(self):
        return self.state.actuator_rotation(CFG).inverse()

    def test_plant_already_at_h(self):
        """Test that an aligned plant converges on the two confirmation samples"""
        result = run_feedback_cycle(make_plant(self._aligned()), self.state, CFG)
        self.assertTrue(result.converged)
        self.assertEqual(result.iterations, 2)
        self.assertEqual(result.state.v_x1, self.state.v_x1)
        self.assertEqual(result.state.phase, ControlPhase.CONVERGED)
        self.assertEqual(len(result.confirmed_samples), 2)

    def test_x2_is_stepped_first(self):
        birefringence = compose(PoincareRotation((0.0, 0.0, 1.0), 0.6), self._aligned())
        result = run_feedback_cycle(make_plant(birefringence), self.state, CFG)
        self.assertEqual(result.trace[0].action, 'x2')
        self.assertEqual(result.trace[1].action, 'x1')

    def test_small_qr_rotation_converges(self):
        birefringence = compose(PoincareRotation(S2_AXIS, 0.5), self._aligned())
        result = run_feedback_cycle(make_plant(birefringence), self.state, CFG)
        self.assertTrue(result.converged)
        last = result.samples[-1]
        self.assertGreater(last.s1_hat, THRESHOLDS.t1)
        self.assertLess(abs(last.s2_hat), THRESHOLDS.t2)

    def test_not_converged_carries_result(self):
        """Test NotConverged when the plant never reaches H"""
        plant = Mock(return_value=EstimatedSOP(-0.9, 0.3))
        with self.assertRaises(NotConverged) as ctx:
            run_feedback_cycle(plant, self.state, CFG, max_iters=10)
        result = ctx.exception.result
        self.assertFalse(result.converged)
        self.assertEqual(result.iterations, 10)
        self.assertEqual(plant.call_count, 10)
        self.assertEqual(result.state.phase, ControlPhase.IDLE)

    def test_converged_exit_satisfies_thresholds(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            result = run_feedback_cycle(make_plant(random_rotation(rng)), self.state, CFG)
            for sample in result.samples[-2:]:
                self.assertGreater(sample.s1_hat, THRESHOLDS.t1)
                self.assertLess(abs(sample.s2_hat), THRESHOLDS.t2)

    def test_random_rotations_noiseless(self):
        """Test 100% convergence and median of at most 40 samples over 500 random rotations"""
        rng = np.random.default_rng(500)
        iterations = []
        for _ in range(500):
            result = run_feedback_cycle(make_plant(random_rotation(rng)), self.state, CFG)
            iterations.append(result.iterations)
        self.assertLessEqual(float(np.median(iterations)), 40)

    def test_grid_convergence_certificate(self):
        """Test that every start rotation on a 10° grid converges without noise"""
        failures = []
        for birefringence in grid_rotations():
            try:
                run_feedback_cycle(make_plant(birefringence), self.state, CFG)
            except NotConverged:
                failures.append(birefringence)
        self.assertEqual(failures, [])

    def test_noisy_measurements(self):
        """Test ≥ 99% convergence with ±3% measurement noise over 1000 trials"""
        rng = np.random.default_rng(1000)
        converged = 0
        for _ in range(1000):
            plant = make_plant(random_rotation(rng), noise=0.03, rng=rng)
            try:
                run_feedback_cycle(plant, self.state, CFG, max_iters=120)
                converged += 1
            except NotConverged:
                pass
        self.assertGreaterEqual(converged / 1000, 0.99)


class TestControllerRegistry(unittest.TestCase):
    """Test controller lookup"""

    def test_threshold_controller(self):
        controller = get_controller('threshold', CFG, THRESHOLDS, ControlSettings(max_iters=50))
        self.assertIsInstance(controller, ThresholdController)
        state = controller.initial_state()
        self.assertEqual((state.v_x1, state.v_x2), (CFG.v_init_x1, CFG.v_init_x2))
        aligned = controller.actuator_rotation(state).inverse()
        result = controller.run_cycle(make_plant(aligned), state)
        self.assertTrue(result.converged)

    def test_unknown_controller(self):
        with self.assertRaises(ValueError) as ctx:
            get_controller('gradient', CFG, THRESHOLDS)
        self.assertIn('threshold', str(ctx.exception))

    def test_registry_matches_scenario_names(self):
        self.assertEqual(sorted(CONTROLLERS), sorted(CONTROLLER_NAMES))

    def test_monitor_only_controller(self):
        """Test that the uncontrolled baseline takes one sample and never moves the voltages"""
        controller = get_controller('none', CFG, THRESHOLDS)
        self.assertIsInstance(controller, MonitorOnlyController)
        state = controller.initial_state()
        plant = Mock(return_value=EstimatedSOP(0.2, -0.6))
        result = controller.run_cycle(plant, state)
        plant.assert_called_once_with(state)
        self.assertIs(result.state, state)
        self.assertEqual(result.iterations, 1)
        self.assertFalse(result.converged)
        self.assertEqual(result.trace[0].action, 'monitor')
        self.assertEqual(result.confirmed_samples, [])


if __name__ == '__main__':
    test_suite = unittest.TestSuite()
    loader = unittest.TestLoader()

    test_suite.addTest(loader.loadTestsFromTestCase(TestActuators))
    test_suite.addTest(loader.loadTestsFromTestCase(TestSteps))
    test_suite.addTest(loader.loadTestsFromTestCase(TestFeedbackCycle))
    test_suite.addTest(loader.loadTestsFromTestCase(TestControllerRegistry))

    runner = unittest.TextTestRunner(verbosity=2)
    result = runner.run(test_suite)

    sys.exit(0 if result.wasSuccessful() else 1)
