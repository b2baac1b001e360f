import json
import logging
import platform
from pathlib import Path

import torch

from config import DETERMINISTIC, DEVICE, FORMAT_VERSION, VERSION, WORKDIR
from models import ConfigError

logger = logging.getLogger(__name__)

RUN_RECORD_NAME = 'run.json'


def resolve_path(path, workdir=WORKDIR):
    """Relative paths resolve against the working directory"""
    if path is None:
        return None
    path = Path(path)
    return path if path.is_absolute() else Path(workdir) / path


def resolve_device(name=DEVICE):
    """
    Map a device setting to a torch device string

    Args:
        name (str): 'auto', 'cpu', 'cuda' or 'cuda:N'

    Returns:
        str: Device usable with tensor.to()
    """
    if name in (None, 'auto'):
        return 'cuda' if torch.cuda.is_available() else 'cpu'
    if name.startswith('cuda') and not torch.cuda.is_available():
        raise ConfigError(f"Device {name} requested but CUDA is not available")
    if name != 'cpu' and not name.startswith('cuda'):
        raise ConfigError(f"Unknown device: {name}")
    return name


def load_json_config(path, allowed_keys):
    """
    Read a JSON config file and reject keys that are not recognised

    Args:
        path (str | Path | None): Config file, None gives an empty dict
        allowed_keys (iterable): Keys the caller understands

    Returns:
        dict: Parsed config

    Raises:
        ConfigError: On a missing file, invalid JSON or unknown keys
    """
    if path is None:
        return {}
    path = Path(path)
    try:
        with open(path) as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {str(e)}")
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    unknown = sorted(set(data) - set(allowed_keys))
    if unknown:
        raise ConfigError(f"Unknown keys in {path}: {unknown}")
    return data


def merge_config(defaults, file_config=None, flags=None):
    """defaults < JSON file < explicit CLI flags (flags set to None are ignored)"""
    resolved = dict(defaults)
    resolved.update(file_config or {})
    resolved.update({key: value for key, value in (flags or {}).items() if value is not None})
    return resolved


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    return str(value)


def write_run_record(out_dir, command, config, device='cpu', seed=None):
    """
    Write run.json capturing the resolved configuration of a subcommand

    Args:
        out_dir (str | Path): Output directory of the subcommand
        command (str): Subcommand name
        config (dict): Fully resolved configuration
        device (str): Device actually used
        seed (int, optional): Governing seed

    Returns:
        Path: Path of run.json
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        'command': command,
        'version': VERSION,
        'format_version': FORMAT_VERSION,
        'config': _jsonable(config),
        'seed': seed,
        'device': device,
        # GPU kernels may stay non-deterministic even when requested
        'deterministic': bool(DETERMINISTIC and (device == 'cpu' or torch.are_deterministic_algorithms_enabled())),
        'torch': torch.__version__,
        'python': platform.python_version(),
    }
    path = out_dir / RUN_RECORD_NAME
    with open(path, 'w') as f:
        json.dump(record, f, indent=2)
    logger.debug(f"Wrote run record to {path}")
    return path
