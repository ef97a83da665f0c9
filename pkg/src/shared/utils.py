import logging
import os
import zlib
from typing import Dict, List

import numpy as np

from shared.errors import ConfigError

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_logging(verbose: bool = False) -> None:
    """Configures root logging for CLI runs."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
    )


def derive_seed(seed: int, name: str) -> int:
    """
    Derives a named sub-seed ("data", "init", "shuffle", ...) from a run seed.
    The same (seed, name) pair always gives the same value.
    """
    sequence = np.random.SeedSequence(
        entropy=seed, spawn_key=(zlib.crc32(name.encode()),)
    )
    return int(sequence.generate_state(1)[0])


def read_text(path: str) -> str:
    """Reads a UTF-8 file; the error message always carries the path."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"File not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return f.read()


def write_text(path: str, content: str) -> None:
    dir_path = os.path.dirname(path)
    if dir_path:
        os.makedirs(dir_path, exist_ok=True)
    # newline="" keeps "\n" line endings on every platform
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(content)


def parse_key_value_config(text: str) -> Dict[str, str]:
    """
    Parses `key=value` lines. Blank lines and `#` comments are skipped.
    Raises ConfigError on a line without '=' or a repeated key.
    """
    values: Dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"Line {line_no}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"Line {line_no}: empty key")
        if key in values:
            raise ConfigError(f"Line {line_no}: duplicate key {key!r}")
        values[key] = value
    return values


def parse_int_list(text: str) -> List[int]:
    """Parses "4,16" into [4, 16]."""
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"Expected comma-separated integers, got {text!r}") from None


def parse_float_list(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"Expected comma-separated numbers, got {text!r}") from None
