import logging
import yaml
import os
import json
import hashlib
import threading
from pathlib import Path
from datetime import datetime
from functools import wraps
from contextlib import contextmanager
from typing import Any, Dict, Iterable, Optional
import traceback

from dotenv import load_dotenv


def setup_logger(name, log_file=None, level=logging.INFO):
    logger = logging.getLogger(name)
    logger.setLevel(level)

    # Prevent duplicate handlers - if logger already has handlers, return it as-is
    if logger.handlers:
        return logger

    if log_file:
        log_dir = os.path.dirname(log_file)
        if log_dir and not os.path.exists(log_dir):
            os.makedirs(log_dir, exist_ok=True)

        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(level)
        file_formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
        )
        file_handler.setFormatter(file_formatter)
        logger.addHandler(file_handler)

    console_handler = logging.StreamHandler()
    console_handler.setLevel(level)
    console_formatter = logging.Formatter(
        '%(asctime)s - %(levelname)s - %(message)s'
    )
    console_handler.setFormatter(console_formatter)
    logger.addHandler(console_handler)

    return logger


# Error handling decorator
def handle_errors(func):
    @wraps(func)
    def wrapper(*args, **kwargs):
        logger = logging.getLogger(func.__module__)
        func_name = func.__qualname__

        try:
            logger.debug(f"ENTER: {func_name}")
            result = func(*args, **kwargs)
            logger.debug(f"EXIT: {func_name} - Success")
            return result

        except Exception as e:
            error_msg = f"ERROR in {func_name}: {str(e)}"
            logger.error(error_msg)
            logger.debug(f"Traceback:\n{traceback.format_exc()}")
            raise  # Re-raise so caller can handle

    return wrapper


# ============================================================================
# ERRORS
# ============================================================================

class MoeSearchError(Exception):
    """Base class for every error raised by the framework"""


class ConfigError(MoeSearchError):
    """Invalid configuration, search space, schedule or missing input file"""


class GeneParseError(MoeSearchError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class ShapeError(MoeSearchError, ValueError):
    pass


class NumericalError(MoeSearchError):
    """Non-finite loss or parameter; training halts with diagnostics"""

    def __init__(self, message: str, diagnostics: Optional[Dict] = None,
                 last_checkpoint: Optional[str] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
        self.last_checkpoint = last_checkpoint


class InfeasibleConstraintError(MoeSearchError):
    pass


class HarnessBusyError(MoeSearchError):
    pass


# CLI exit codes per error family
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_INFEASIBLE = 4


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, InfeasibleConstraintError):
        return EXIT_INFEASIBLE
    if isinstance(error, (ConfigError, GeneParseError, FileNotFoundError)):
        return EXIT_CONFIG
    return EXIT_RUNTIME


# ============================================================================
# CONFIGURATION
# ============================================================================

def load_env_config(env_file_path='env.yaml'):
    # Look for env.yaml in project root
    if not os.path.exists(env_file_path):
        project_root = Path(__file__).parent.parent
        env_file_path = project_root / 'env.yaml'

    try:
        with open(env_file_path, 'r') as f:
            config = yaml.safe_load(f)
        logger = logging.getLogger(__name__)
        logger.info(f"Configuration loaded from {env_file_path}")
        return config
    except FileNotFoundError:
        raise FileNotFoundError(f"env.yaml not found at {env_file_path}")
    except yaml.YAMLError as e:
        raise ValueError(f"Error parsing env.yaml: {e}")


def get_output_root(config: Optional[Dict] = None) -> Path:
    """
    Resolve the directory every run writes under

    MOESEARCH_OUTPUT_ROOT (environment or .env) wins over OUTPUT.ROOT in env.yaml.
    """
    load_dotenv()
    root = os.getenv('MOESEARCH_OUTPUT_ROOT')
    if not root:
        root = (config or {}).get('OUTPUT', {}).get('ROOT', 'runs')
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def read_yaml(path) -> Dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"File not found: {path}")
    with open(path, 'r') as f:
        data = yaml.safe_load(f)
    return data if data is not None else {}


def write_yaml(path, data: Dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        yaml.safe_dump(data, f, sort_keys=False, default_flow_style=None)
    return path


# ============================================================================
# JSONL LOGS AND HASHING
# ============================================================================

def append_jsonl(path, record: Dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'a') as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def write_jsonl(path, records: Iterable[Dict]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, 'w') as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")
            count += 1
    return count


def read_jsonl(path) -> list:
    with open(path, 'r') as f:
        return [json.loads(line) for line in f if line.strip()]


def stable_hash(payload: Any, length: int = 12) -> str:
    text = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(text.encode('utf-8')).hexdigest()[:length]


def timestamp() -> str:
    return datetime.now().strftime('%Y-%m-%d %H:%M:%S')


def to_plain(value):
    """numpy scalars and tuples -> plain Python values for YAML"""
    if isinstance(value, dict):
        return {k: to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    if hasattr(value, 'item') and getattr(value, 'shape', None) == ():
        return value.item()
    return value


# ============================================================================
# WORKER ACCOUNTING
# ============================================================================
# Parallel fitness workers register here so the latency harness can refuse to
# time while they run.

_worker_lock = threading.Lock()
_active_workers = 0


@contextmanager
def worker_slot():
    global _active_workers
    with _worker_lock:
        _active_workers += 1
    try:
        yield
    finally:
        with _worker_lock:
            _active_workers -= 1


def active_workers() -> int:
    with _worker_lock:
        return _active_workers


# Initialize logger at module level; module loggers (logging.getLogger(__name__)) propagate here
logger = setup_logger(
    name='',
    log_file='logs/moesearch.log',
    level=logging.INFO
)


def configure_logging(config: Optional[Dict] = None, level: Optional[str] = None) -> logging.Logger:
    """Apply LOG.LEVEL from env.yaml (or an explicit level) to the shared handlers"""
    name = level or (config or {}).get('LOG', {}).get('LEVEL', 'INFO')
    numeric = getattr(logging, str(name).upper(), None)
    if not isinstance(numeric, int):
        raise ConfigError(f"Unknown log level {name!r}")
    logger.setLevel(numeric)
    for handler in logger.handlers:
        handler.setLevel(numeric)
    return logger
