import json
import os
import shutil
import socket
import sys
import tempfile
import threading
import unittest
from unittest.mock import Mock, patch

from click.testing import CliRunner

# Add src to path for imports
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from src.config import Config, _float_env, _int_env
from src.main import cli
from src.models.scenario import RunConfig
from src.reporting import QBER_COLUMNS, TRACE_COLUMNS, duty_from_trace, read_trace
from src.session import SessionAborted, SessionOutcome
from src.simulator import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, Simulator
from src.transport import ConnectionLost

SHORT = ('control_interval_s=20', 'gain_x1=4', 'gain_x2=4')


def free_port():
    spare = socket.create_server(('127.0.0.1', 0))
    port = spare.getsockname()[1]
    spare.close()
    return port


class TestConfig(unittest.TestCase):
    """Test configuration management"""

    def setUp(self):
        # Store original values
        self.original = {name: getattr(Config, name) for name in
                         ('LOG_LEVEL', 'PORT', 'FAILURE_BUDGET', 'SOCKET_TIMEOUT', 'PRESETS_DIR', 'LOG_FILE', 'DEBUG',
                          'ENV_ERRORS')}

    def tearDown(self):
        # Restore original values
        for name, value in self.original.items():
            setattr(Config, name, value)

    def test_config_validation_valid(self):
        Config.LOG_LEVEL = 'INFO'
        Config.PORT = 7117
        Config.FAILURE_BUDGET = 3
        Config.SOCKET_TIMEOUT = 30.0
        Config.PRESETS_DIR = None
        Config.LOG_FILE = 'pqkd_sim.log'
        Config.DEBUG = False
        Config.ENV_ERRORS = []

        validation = Config.validate_config()
        self.assertTrue(validation['valid'])
        self.assertEqual(validation['errors'], [])
        self.assertEqual(validation['warnings'], [])

    def test_config_validation_errors(self):
        Config.LOG_LEVEL = 'LOUD'
        Config.PORT = 70000
        Config.FAILURE_BUDGET = -1
        Config.SOCKET_TIMEOUT = 0.0
        Config.PRESETS_DIR = '/nonexistent/presets'
        Config.ENV_ERRORS = []

        validation = Config.validate_config()
        self.assertFalse(validation['valid'])
        self.assertEqual(len(validation['errors']), 5)
        self.assertIn("PQKD_PORT must be between 1 and 65535, got 70000", validation['errors'])

    def test_unparseable_env_values_are_errors(self):
        """Test that a non-numeric PQKD_PORT or timeout keeps the default and fails validation"""
        errors = []
        with patch.dict(os.environ, {'PQKD_PORT': 'seven', 'PQKD_SOCKET_TIMEOUT': 'soon'}):
            self.assertEqual(_int_env('PQKD_PORT', 7117, errors), 7117)
            self.assertEqual(_float_env('PQKD_SOCKET_TIMEOUT', 30.0, errors), 30.0)
        self.assertEqual(errors, ["PQKD_PORT must be an integer, got 'seven'",
                                  "PQKD_SOCKET_TIMEOUT must be a number, got 'soon'"])

        Config.ENV_ERRORS = errors
        Config.LOG_LEVEL = 'INFO'
        Config.PORT = 7117
        Config.FAILURE_BUDGET = 3
        Config.SOCKET_TIMEOUT = 30.0
        Config.PRESETS_DIR = None
        validation = Config.validate_config()
        self.assertFalse(validation['valid'])
        self.assertEqual(validation['errors'], errors)

    def test_warnings(self):
        Config.LOG_FILE = ''
        Config.DEBUG = True
        Config.LOG_LEVEL = 'INFO'
        validation = Config.validate_config()
        self.assertTrue(validation['valid'])
        self.assertEqual(len(validation['warnings']), 2)

    def test_log_level(self):
        Config.DEBUG = False
        Config.LOG_LEVEL = 'WARNING'
        self.assertEqual(Config.log_level(), 30)
        Config.DEBUG = True
        self.assertEqual(Config.log_level(), 10)


class TestSimulator(unittest.TestCase):
    """Test run orchestration, exit codes and artifacts"""

    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def _cfg(self, name='run', **kwargs):
        values = dict(scenario='fiber50', seed=11, duration_s=40, overrides=SHORT,
                      output_dir=os.path.join(self.tmp, name))
        values.update(kwargs)
        return RunConfig(**values)

    def test_single_mode_writes_artifacts(self):
        result = Simulator(failure_budget=3).run(self._cfg())
        self.assertTrue(result['success'])
        self.assertEqual(result['exit_code'], EXIT_OK)
        for path in result['artifacts'].values():
            self.assertTrue(os.path.isfile(path))

        trace = read_trace(result['artifacts']['trace'])
        self.assertEqual(list(trace.columns), TRACE_COLUMNS)
        with open(result['artifacts']['qber'], encoding='utf-8') as handle:
            self.assertEqual(handle.readline().strip().split(','), QBER_COLUMNS)
        with open(result['artifacts']['summary'], encoding='utf-8') as handle:
            summary = json.load(handle)
        self.assertEqual(summary['intervals'], 2)
        self.assertEqual(summary['seed'], 11)
        self.assertAlmostEqual(summary['duty'], duty_from_trace(trace))
        self.assertEqual(summary['config']['fiber']['control_interval_s'], 20)

    def test_same_seed_same_trace_bytes(self):
        first = Simulator().run(self._cfg('first'))
        second = Simulator().run(self._cfg('second'))
        for name in ('trace', 'qber'):
            with open(first['artifacts'][name], 'rb') as a, open(second['artifacts'][name], 'rb') as b:
                self.assertEqual(a.read(), b.read())

    def test_unknown_scenario_is_config_error(self):
        result = Simulator().run(self._cfg(scenario='fiber9000'))
        self.assertFalse(result['success'])
        self.assertEqual(result['exit_code'], EXIT_CONFIG)

    def test_bad_override_is_config_error(self):
        result = Simulator().run(self._cfg(overrides=('length_km=-5',)))
        self.assertEqual(result['exit_code'], EXIT_CONFIG)
        self.assertIn('length_km', result['error'])

    def test_failure_budget(self):
        result = Simulator(failure_budget=1).run(self._cfg(overrides=SHORT + ('max_iters=1',)))
        self.assertFalse(result['success'])
        self.assertEqual(result['exit_code'], EXIT_RUNTIME)
        self.assertTrue(os.path.isfile(result['artifacts']['summary']))

    @patch('src.simulator.run_session')
    def test_aborted_session_writes_partial_artifacts(self, mock_run_session):
        mock_run_session.side_effect = SessionAborted('peer went away', SessionOutcome(train_key=1))
        result = Simulator().run(self._cfg())
        self.assertEqual(result['exit_code'], EXIT_RUNTIME)
        self.assertEqual(result['error'], 'peer went away')
        self.assertTrue(os.path.isfile(result['artifacts']['trace']))

    @patch('src.simulator.connect')
    def test_bob_without_peer(self, mock_connect):
        mock_connect.side_effect = ConnectionLost('refused')
        result = Simulator(socket_timeout=1).run(self._cfg(mode='bob', peer_address='127.0.0.1:1'))
        self.assertEqual(result['exit_code'], EXIT_RUNTIME)
        mock_connect.assert_called_once()

    @patch('src.simulator.listen')
    def test_alice_without_peer(self, mock_listen):
        mock_listen.side_effect = ConnectionLost('nobody came')
        result = Simulator(socket_timeout=1).run(self._cfg(mode='alice', peer_address='127.0.0.1:1'))
        self.assertEqual(result['exit_code'], EXIT_RUNTIME)
        self.assertEqual(result['message'], 'No peer connected')

    def test_two_processes_match_single(self):
        """Test that Alice and Bob as separate stations reproduce the single-process artifacts"""
        port = free_port()
        address = f'127.0.0.1:{port}'
        results = {}
        alice = threading.Thread(target=lambda: results.setdefault(
            'alice', Simulator(socket_timeout=20).run(self._cfg('alice', mode='alice', peer_address=address))))
        alice.start()
        results['bob'] = Simulator(socket_timeout=20).run(self._cfg('bob', mode='bob', peer_address=address))
        alice.join(30)
        single = Simulator().run(self._cfg('single'))

        self.assertEqual(results['alice']['exit_code'], EXIT_OK)
        self.assertEqual(results['bob']['exit_code'], EXIT_OK)
        for name in ('trace', 'qber'):
            with open(results['bob']['artifacts'][name], 'rb') as a, open(single['artifacts'][name], 'rb') as b:
                self.assertEqual(a.read(), b.read())


class TestCli(unittest.TestCase):
    """Test the command line entry point"""

    def setUp(self):
        self.runner = CliRunner()
        self.log_file = patch.object(Config, 'LOG_FILE', '')
        self.log_file.start()

    def tearDown(self):
        self.log_file.stop()

    def test_simulate(self):
        with self.runner.isolated_filesystem():
            result = self.runner.invoke(cli, ['simulate', '--scenario', 'fiber50', '--seed', '3',
                                              '--duration', '30', '--out', 'out', '--set', 'control_interval_s=15'])
            self.assertEqual(result.exit_code, 0, result.output)
            self.assertIn('intervals=2', result.output)
            self.assertTrue(os.path.isfile(os.path.join('out', 'summary.json')))

    def test_bob_needs_peer(self):
        result = self.runner.invoke(cli, ['simulate', '--mode', 'bob'])
        self.assertEqual(result.exit_code, EXIT_CONFIG)

    def test_seed_out_of_range(self):
        result = self.runner.invoke(cli, ['simulate', '--seed', str(2 ** 64)])
        self.assertEqual(result.exit_code, 2)

    @patch('src.main.Simulator')
    def test_exit_code_from_simulator(self, mock_simulator):
        mock_simulator.return_value.run.return_value = {
            'success': False, 'exit_code': EXIT_RUNTIME, 'message': 'Transport failure', 'error': 'reset'
        }
        result = self.runner.invoke(cli, ['simulate', '--mode', 'bob', '--peer', '127.0.0.1:7117'])
        self.assertEqual(result.exit_code, EXIT_RUNTIME)
        cfg = mock_simulator.return_value.run.call_args[0][0]
        self.assertEqual(cfg.peer_address, '127.0.0.1:7117')

    @patch('src.main.Config.validate_config', Mock(return_value={'valid': False, 'errors': ['bad'], 'warnings': []}))
    def test_invalid_environment(self):
        result = self.runner.invoke(cli, ['simulate'])
        self.assertEqual(result.exit_code, EXIT_CONFIG)


if __name__ == '__main__':
    test_suite = unittest.TestSuite()
    loader = unittest.TestLoader()

    test_suite.addTest(loader.loadTestsFromTestCase(TestConfig))
    test_suite.addTest(loader.loadTestsFromTestCase(TestSimulator))
    test_suite.addTest(loader.loadTestsFromTestCase(TestCli))

    runner = unittest.TextTestRunner(verbosity=2)
    result = runner.run(test_suite)

    sys.exit(0 if result.wasSuccessful() else 1)
