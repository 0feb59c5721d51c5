import logging
import os
from dataclasses import dataclass
from pathlib import Path

from dotenv import load_dotenv

from errors import ConfigValidationError

# Load environment variables from .env file
load_dotenv()


@dataclass(frozen=True)
class LabSettings:
    output_dir: Path
    workers: int
    log_level: str
    reproducible: bool
    host: str
    port: int


def _env_flag(name: str, default: str = "false") -> bool:
    return os.getenv(name, default).strip().lower() in {"1", "true", "yes", "on"}


def _env_int(name: str, default: str, minimum: int) -> int:
    raw = os.getenv(name, default)
    try:
        value = int(raw)
    except ValueError:
        raise ConfigValidationError(f"{name} must be an integer, got '{raw}'") from None
    if value < minimum:
        raise ConfigValidationError(f"{name} must be >= {minimum}, got {value}")
    return value


def get_settings() -> LabSettings:
    """Read lab settings from the environment; malformed values raise ConfigValidationError"""
    workers = _env_int("LAB_WORKERS", "1", 1)
    return LabSettings(
        output_dir=Path(os.getenv("LAB_OUTPUT_DIR", "runs")),
        workers=workers,
        log_level=os.getenv("LAB_LOG_LEVEL", "INFO").upper(),
        reproducible=_env_flag("LAB_REPRODUCIBLE"),
        host=os.getenv("LAB_HOST", "0.0.0.0"),
        port=_env_int("LAB_PORT", "8001", 1),
    )


def configure_logging(level: str = None) -> None:
    settings_level = level or os.getenv("LAB_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, settings_level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
