import logging
from typing import Dict, Optional, Tuple

from pydantic import ValidationError

from src.config import Config
from src.models.scenario import RunConfig, ScenarioBundle
from src.reporting import summarize, write_artifacts
from src.scenarios import ScenarioParseError, UnknownPreset, load_scenario
from src.session import (
    AliceStation, BobStation, ProtocolViolation, SessionAborted, SessionOutcome, derive_session_streams,
    derive_train_key, run_session
)
from src.qkd_protocol import PulseTrain
from src.transport import ConnectionLost, FrameError, connect, listen, parse_address

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

# Bob retries the initial connection while Alice's process starts listening
CONNECT_ATTEMPTS = 20


class Simulator:
    """Runs one simulation and writes its artifacts"""

    def __init__(self, presets_dir: Optional[str] = None, failure_budget: Optional[int] = None,
                 socket_timeout: Optional[float] = None, port: Optional[int] = None):
        self.presets_dir = presets_dir if presets_dir is not None else Config.PRESETS_DIR
        self.failure_budget = failure_budget if failure_budget is not None else Config.FAILURE_BUDGET
        self.socket_timeout = socket_timeout if socket_timeout is not None else Config.SOCKET_TIMEOUT
        self.port = port if port is not None else Config.PORT

    def run(self, cfg: RunConfig) -> Dict:
        """
        Run a session in the configured mode

        Args:
            cfg: Validated run configuration

        Returns:
            Dict with success flag, exit_code, message and artifact paths
        """
        try:
            bundle = load_scenario(cfg.scenario, cfg.overrides, self.presets_dir)
        except (UnknownPreset, ScenarioParseError, ValidationError, OSError) as e:
            logger.error(f"Configuration error: {e}")
            return {
                'success': False,
                'exit_code': EXIT_CONFIG,
                'message': 'Configuration error',
                'error': str(e)
            }

        logger.info(f"Running {cfg.mode} simulation of '{bundle.name}' for {cfg.duration_s:g} s, seed {cfg.seed}")
        if cfg.mode == 'alice':
            return self._run_alice(cfg)

        try:
            outcome = self._run_receiver(cfg, bundle)
        except SessionAborted as e:
            _, artifacts = self._write(e.outcome, bundle, cfg)
            return {
                'success': False,
                'exit_code': EXIT_RUNTIME,
                'message': f'Session aborted after {len(e.outcome.records)} intervals',
                'error': str(e),
                'artifacts': artifacts
            }
        except (ConnectionLost, FrameError) as e:
            logger.error(f"Transport failure: {e}")
            return {
                'success': False,
                'exit_code': EXIT_RUNTIME,
                'message': 'Transport failure',
                'error': str(e)
            }

        summary, artifacts = self._write(outcome, bundle, cfg)
        if outcome.failures > self.failure_budget:
            logger.error(f"{outcome.failures} control cycles did not converge, budget is {self.failure_budget}")
            return {
                'success': False,
                'exit_code': EXIT_RUNTIME,
                'message': 'Failure budget exceeded',
                'error': f'{outcome.failures} non-converged control cycles (budget {self.failure_budget})',
                'artifacts': artifacts
            }

        return {
            'success': True,
            'exit_code': EXIT_OK,
            'message': f'Simulated {len(outcome.records)} intervals',
            'artifacts': artifacts,
            'summary': summary
        }

    def _run_receiver(self, cfg: RunConfig, bundle: ScenarioBundle) -> SessionOutcome:
        if cfg.mode == 'single':
            return run_session(bundle, cfg.seed, cfg.duration_s, transport='loopback')

        host, port = parse_address(cfg.peer_address, self.port)
        endpoint = connect(host, port, timeout=self.socket_timeout, attempts=CONNECT_ATTEMPTS)
        rng, train_key = derive_session_streams(cfg.seed)
        bob = BobStation(bundle, rng, train_key, endpoint, timeout=self.socket_timeout)
        try:
            return bob.run(cfg.duration_s)
        finally:
            endpoint.close()

    def _run_alice(self, cfg: RunConfig) -> Dict:
        host, port = parse_address(cfg.peer_address, self.port)
        try:
            endpoint = listen(host, port, timeout=self.socket_timeout)
        except (ConnectionLost, OSError) as e:
            logger.error(f"Alice could not accept a connection on {host}:{port}: {e}")
            return {
                'success': False,
                'exit_code': EXIT_RUNTIME,
                'message': 'No peer connected',
                'error': str(e)
            }
        alice = AliceStation(endpoint, PulseTrain(derive_train_key(cfg.seed)))
        try:
            alice.serve(self.socket_timeout)
        except (ConnectionLost, FrameError, ProtocolViolation) as e:
            logger.error(f"Alice lost the connection: {e}")
            return {
                'success': False,
                'exit_code': EXIT_RUNTIME,
                'message': 'Transport failure',
                'error': str(e)
            }
        finally:
            endpoint.close()
        return {
            'success': True,
            'exit_code': EXIT_OK,
            'message': f'Served {alice.reference_requests} control cycles and '
                       f'{alice.reveals_answered} basis reveals',
            'artifacts': {}
        }

    def _write(self, outcome: SessionOutcome, bundle: ScenarioBundle, cfg: RunConfig) -> Tuple[Dict, Dict[str, str]]:
        summary = summarize(outcome, bundle, cfg.seed, cfg.duration_s, self.failure_budget)
        return summary, write_artifacts(outcome, summary, cfg.output_dir)
