import logging
import os
from typing import List, Optional
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()


def _int_env(name: str, default: int, errors: List[str]) -> int:
    raw = os.getenv(name)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        errors.append(f"{name} must be an integer, got '{raw}'")
        return default


def _float_env(name: str, default: float, errors: List[str]) -> float:
    raw = os.getenv(name)
    if raw is None:
        return default
    try:
        return float(raw)
    except ValueError:
        errors.append(f"{name} must be a number, got '{raw}'")
        return default


class Config:
    """Process settings for the QKD simulator (scenario physics live in the presets)"""

    # Unparseable numeric variables, reported by validate_config
    ENV_ERRORS: List[str] = []

    # Output
    OUTPUT_DIR: str = os.getenv('PQKD_OUTPUT_DIR', 'runs')

    # Logging; an empty log file name disables the file handler
    LOG_FILE: str = os.getenv('PQKD_LOG_FILE', 'pqkd_sim.log')
    LOG_LEVEL: str = os.getenv('PQKD_LOG_LEVEL', 'INFO').upper()

    # Two-process mode
    PORT: int = _int_env('PQKD_PORT', 7117, ENV_ERRORS)
    SOCKET_TIMEOUT: float = _float_env('PQKD_SOCKET_TIMEOUT', 30.0, ENV_ERRORS)

    # Non-converged control cycles tolerated per run before exiting nonzero
    FAILURE_BUDGET: int = _int_env('PQKD_FAILURE_BUDGET', 3, ENV_ERRORS)

    PRESETS_DIR: Optional[str] = os.getenv('PQKD_PRESETS_DIR') or None

    DEBUG: bool = os.getenv('DEBUG', 'false').lower() == 'true'

    @classmethod
    def validate_config(cls) -> dict:
        """Validate configuration and return status"""
        errors = list(cls.ENV_ERRORS)
        warnings = []

        if cls.LOG_LEVEL not in ('CRITICAL', 'ERROR', 'WARNING', 'INFO', 'DEBUG'):
            errors.append(f"PQKD_LOG_LEVEL '{cls.LOG_LEVEL}' is not a logging level")

        if not 0 < cls.PORT < 65536:
            errors.append(f"PQKD_PORT must be between 1 and 65535, got {cls.PORT}")

        if cls.FAILURE_BUDGET < 0:
            errors.append("PQKD_FAILURE_BUDGET must be nonnegative")

        if cls.SOCKET_TIMEOUT <= 0:
            errors.append("PQKD_SOCKET_TIMEOUT must be positive")

        if cls.PRESETS_DIR and not os.path.isdir(cls.PRESETS_DIR):
            errors.append(f"PQKD_PRESETS_DIR '{cls.PRESETS_DIR}' is not a directory")

        if not cls.LOG_FILE:
            warnings.append("PQKD_LOG_FILE is empty, logging to the console only")

        if cls.DEBUG and cls.LOG_LEVEL != 'DEBUG':
            warnings.append("DEBUG is set but PQKD_LOG_LEVEL is not DEBUG")

        return {
            'valid': len(errors) == 0,
            'errors': errors,
            'warnings': warnings
        }

    @classmethod
    def log_level(cls) -> int:
        return logging.DEBUG if cls.DEBUG else getattr(logging, cls.LOG_LEVEL, logging.INFO)
