import json
import logging
import os
import weakref
from datetime import date, datetime
from typing import Any, Dict, Literal, Optional

from pydantic import BaseModel, ValidationError, field_validator

from app.core.config import get_settings

VALID_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
VALID_MODES = ["exact", "threshold"]

CONFIG_FILE = "log_config.json"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


class LogLevelConfig(BaseModel):
    """Level settings persisted in log_config.json."""

    current_level: str = "WARNING"
    filtering_mode: Literal["exact", "threshold"] = "threshold"
    last_updated: str = datetime.now().isoformat()

    @field_validator("current_level")
    @classmethod
    def known_level(cls, value: str) -> str:
        value = value.upper()
        if value not in VALID_LEVELS:
            raise ValueError(f"Invalid log level. Must be one of: {', '.join(VALID_LEVELS)}")
        return value


class LevelFilter(logging.Filter):
    """
    exact: only records of the configured level pass.
    threshold: the configured level and above pass.
    """

    def __init__(self, level_name: str, mode: str):
        super().__init__()
        self.levelno = getattr(logging, level_name)
        self.exact = mode == "exact"

    def filter(self, record: logging.LogRecord) -> bool:
        if self.exact:
            return record.levelno == self.levelno
        return record.levelno >= self.levelno


_config = LogLevelConfig()
# weak refs so that loggers dropped elsewhere are not kept alive here
_loggers: "weakref.WeakSet[logging.Logger]" = weakref.WeakSet()
_active_files: Dict[str, Optional[str]] = {}


def load_log_config() -> LogLevelConfig:
    global _config
    if not os.path.exists(CONFIG_FILE):
        return _config
    try:
        with open(CONFIG_FILE, encoding="utf-8") as f:
            _config = LogLevelConfig(**{**_config.model_dump(), **json.load(f)})
    except (OSError, ValueError, ValidationError) as e:
        logging.getLogger(__name__).warning(f"ignoring unreadable {CONFIG_FILE}: {e}")
    return _config


def save_log_config() -> None:
    try:
        with open(CONFIG_FILE, "w", encoding="utf-8") as f:
            json.dump(_config.model_dump(), f, indent=2)
    except OSError as e:
        logging.getLogger(__name__).warning(f"could not write {CONFIG_FILE}: {e}")


def get_current_log_level() -> Dict[str, Any]:
    cfg = load_log_config()
    return {"log_level": cfg.current_level, "filtering_mode": cfg.filtering_mode, "last_updated": cfg.last_updated}


def get_daily_log_filename(day: Optional[date] = None) -> str:
    day = day or date.today()
    return os.path.join(get_settings().log_dir, f"log-{day:%Y-%m-%d}.log")


def _refilter(logger: logging.Logger) -> None:
    for handler in logger.handlers:
        handler.filters.clear()
        handler.addFilter(LevelFilter(_config.current_level, _config.filtering_mode))


def update_log_level(new_level: str, mode: Optional[str] = None, persist: bool = True) -> Dict[str, Any]:
    """Changes the level of every live logger; persist also rewrites log_config.json."""
    global _config
    if mode is not None and mode not in VALID_MODES:
        raise ValueError(f"Invalid filtering mode. Must be one of: {', '.join(VALID_MODES)}")
    previous = _config.current_level
    try:
        _config = LogLevelConfig(current_level=new_level, filtering_mode=mode or _config.filtering_mode,
                                 last_updated=datetime.now().isoformat())
    except ValidationError as e:
        raise ValueError(e.errors()[0]["msg"].removeprefix("Value error, ")) from None
    if persist:
        save_log_config()
    for logger in list(_loggers):
        _refilter(logger)
    return {
        "log_level": _config.current_level,
        "previous_level": previous,
        "filtering_mode": _config.filtering_mode,
        "updated_at": _config.last_updated,
    }


def setup_logger(name: str = "app_logger") -> logging.Logger:
    """
    Logger with a console handler and, unless GRIDGUARD_LOG_TO_FILE=0, a
    handler on the daily file. Handlers are rebuilt when the day rolls over.
    """
    logger = logging.getLogger(name)
    log_file = get_daily_log_filename() if get_settings().log_to_file else None
    if logger.handlers and _active_files.get(name) == log_file:
        return logger

    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()
    formatter = logging.Formatter(fmt=LOG_FORMAT, datefmt=DATE_FORMAT)
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        os.makedirs(os.path.dirname(log_file) or ".", exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    for handler in handlers:
        handler.setFormatter(formatter)
        logger.addHandler(handler)
    _refilter(logger)

    # handler filters decide what is shown
    logger.setLevel(logging.DEBUG)
    logger.propagate = False
    _active_files[name] = log_file
    _loggers.add(logger)
    return logger


load_log_config()
