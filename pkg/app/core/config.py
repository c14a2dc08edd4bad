from pathlib import Path
from pydantic_settings import BaseSettings, SettingsConfigDict
from dotenv import dotenv_values
from typing import Dict, Optional, Type
from pydantic import BaseModel, ValidationError
import logging

from .errors import ConfigError, InputError

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Process-wide settings, read from the environment and an optional .env file."""

    model_config = SettingsConfigDict(
        env_prefix="DPQ_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore",
    )

    # Base Paths
    BASE_DIR: Path = Path(__file__).parent.parent.parent
    DATA_DIR: Path = BASE_DIR / "data"
    CONFIG_PATH: Path = DATA_DIR / "default.cfg"

    # Runtime
    LOG_LEVEL: str = "INFO"
    THREADS: int = 0
    SEED: int = 0
    RECORD_TIMING: bool = False

    # Map compression
    MAX_MAP_POINTS: int = 50000

    @property
    def log_level(self) -> int:
        """Numeric logging level, falling back to INFO on unknown names"""
        level = logging.getLevelName(self.LOG_LEVEL.upper())
        if not isinstance(level, int):
            logger.warning(f"Unknown log level {self.LOG_LEVEL!r}, using INFO")
            return logging.INFO
        return level


def read_flat_config(path: Path) -> Dict[str, str]:
    """Read a flat key=value file with '#' comments into a dict of raw strings"""
    path = Path(path)
    if not path.exists():
        raise InputError(f"Config file not found: {path}")
    values = dotenv_values(path, encoding="utf-8")
    missing = [key for key, value in values.items() if value is None]
    if missing:
        raise ConfigError(f"Config keys without a value in {path}: {', '.join(missing)}")
    logger.info(f"Read {len(values)} config keys from {path}")
    return dict(values)


def build_config(model: Type[BaseModel], path: Optional[Path] = None, **overrides) -> BaseModel:
    """Build a pydantic config: defaults < file values < non-None overrides.

    Keys in the file must match the model's field names exactly.
    """
    raw: Dict[str, object] = {}
    if path is not None:
        raw.update(read_flat_config(path))
        unknown = sorted(set(raw) - set(model.model_fields))
        if unknown:
            raise ConfigError(f"Unknown {model.__name__} keys in {path}: {', '.join(unknown)}")
    raw.update({key: value for key, value in overrides.items() if value is not None})
    try:
        return model(**raw)
    except ValidationError as e:
        raise ConfigError(validation_message(e)) from e


def validation_message(e: ValidationError) -> str:
    """First pydantic error as one line naming the model and field"""
    first = e.errors()[0]
    field = ".".join(str(part) for part in first["loc"]) or e.title
    return f"Invalid {e.title} value for {field}: {first['msg']}"


# Initialize settings with error handling
try:
    settings = Settings()
except Exception as e:
    logger.error(f"Failed to initialize settings: {e}", exc_info=True)
    raise
