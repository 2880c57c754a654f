import yaml
import logging
from datetime import datetime
import os
from typing import Optional, Dict, Any, Iterable


class RPError(Exception):
    """Base class for every error raised by the robust-processing lab"""


class ConfigError(RPError, ValueError):
    """Invalid configuration value, unknown key or unknown name"""


class ModelMismatchError(ConfigError):
    """A model, pipeline or attack was combined with an incompatible counterpart"""


class ShapeMismatchError(RPError, ValueError):
    """Operand shapes are not valid for the requested operation"""


class DataError(RPError):
    """Malformed or unreadable data file"""


class BadMagicError(DataError):
    """File does not start with the expected magic number"""


class TruncatedDataError(DataError):
    """File ends before the payload its header announces"""


class DimensionMismatchError(DataError):
    """Header dimensions disagree with each other or with a companion file"""


class VersionMismatchError(DataError):
    """File was written by an unsupported format version"""


class ThermometerDecodeError(DataError):
    """A thermometer word is not of the form 0...01...1"""


class NumericFailure(RPError, ArithmeticError):
    """A loss or gradient became non-finite"""


def setup_logger(name: str, run_id: Optional[str] = None) -> logging.Logger:
    """
    Set up logger with file handler only

    Parameters:
    - name: Name of the module/logger
    - run_id: Optional run label to include in log filename

    Returns:
    Configured logger instance
    """
    logger = logging.getLogger(name if run_id is None else f"{name}.{run_id}")

    # If logger already has handlers, return it
    if logger.handlers:
        return logger

    logger.setLevel(logging.DEBUG)

    log_dir = os.environ.get('RP_LOG_DIR') or os.path.join('workdir', 'logs')
    os.makedirs(log_dir, exist_ok=True)

    date_str = datetime.now().strftime('%Y-%m-%d')
    filename = f"{run_id or 'rp'}_{date_str}.log"
    log_file = os.path.join(log_dir, filename)

    file_handler = logging.FileHandler(log_file)
    file_handler.setLevel(logging.INFO)

    formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    file_handler.setFormatter(formatter)

    logger.addHandler(file_handler)

    return logger


# Create default logger for this module
logger = setup_logger(__name__)


def _find_config_path() -> Optional[str]:
    """Search the usual locations for config/config.yaml"""
    override = os.environ.get('RP_CONFIG')
    if override:
        return override if os.path.exists(override) else None

    possible_paths = [
        os.path.join('config', 'config.yaml'),  # Relative to current directory
        os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'config', 'config.yaml')  # Relative to this file
    ]
    for path in possible_paths:
        if os.path.exists(path):
            return path

    # Walk up from the working directory
    current_dir = os.getcwd()
    while current_dir != os.path.dirname(current_dir):
        test_path = os.path.join(current_dir, 'config', 'config.yaml')
        if os.path.exists(test_path):
            return test_path
        current_dir = os.path.dirname(current_dir)
    return None


def load_config(path: Optional[str] = None) -> Dict[str, Any]:
    """
    Load configuration from config/config.yaml

    Parameters:
    - path: Explicit config path; searched for when omitted

    Returns:
    Dictionary containing configuration
    """
    try:
        config_path = path or _find_config_path()
        if not config_path or not os.path.exists(config_path):
            logger.error(f"Config file not found (explicit path: {path}, cwd: {os.getcwd()})")
            raise FileNotFoundError("Config file config/config.yaml not found in any expected location")

        logger.info(f"Using config file at: {config_path}")
        with open(config_path, 'r') as f:
            config = yaml.safe_load(f) or {}

        if not isinstance(config, dict):
            raise ConfigError(f"Config file {config_path} must hold a mapping at the top level")
        return config

    except Exception as e:
        logger.error(f"Error loading config: {e}")
        raise


def config_section(config: Dict[str, Any], name: str) -> Dict[str, Any]:
    """Return a config section, empty when absent"""
    section = config.get(name) or {}
    if not isinstance(section, dict):
        raise ConfigError(f"Config section '{name}' must be a mapping")
    return section


def load_run_config(path: str, allowed_keys: Iterable[str]) -> Dict[str, str]:
    """
    Parse a plain `key = value` run file

    Parameters:
    - path: Run file path
    - allowed_keys: Keys accepted in this file (dashes and underscores are equivalent)

    Returns:
    Mapping normalised key -> raw string value
    """
    allowed = {key.replace('-', '_') for key in allowed_keys}
    values: Dict[str, str] = {}
    try:
        with open(path, 'r') as f:
            lines = f.readlines()
    except OSError as e:
        raise ConfigError(f"Cannot read run config {path}: {e}") from e

    for number, raw in enumerate(lines, start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"{path}:{number}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split('=', 1))
        key = key.replace('-', '_')
        if key not in allowed:
            raise ConfigError(f"{path}:{number}: unknown key '{key}'")
        if key in values:
            raise ConfigError(f"{path}:{number}: duplicate key '{key}'")
        values[key] = value

    logger.info(f"Loaded {len(values)} run settings from {path}")
    return values


def parse_bool(value: Any) -> bool:
    """Interpret config-file booleans ('1', 'true', 'yes', 'on')"""
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ('1', 'true', 'yes', 'on'):
        return True
    if text in ('0', 'false', 'no', 'off', ''):
        return False
    raise ConfigError(f"Not a boolean: '{value}'")
