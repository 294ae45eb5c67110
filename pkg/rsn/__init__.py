# rsn/__init__.py
"""Range sparse net: range-image segmentation followed by sparse-convolution 3D detection."""
from dataclasses import dataclass
from pathlib import Path
import logging
import sys

from pythonjsonlogger.json import JsonFormatter

from .config import Config

__version__ = "0.4.0"

_LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"


@dataclass(frozen=True)
class RsnApp:
    """Resolved runtime settings handed to the command-line layer."""
    threads: int
    output_dir: Path
    feature_cache_size: int
    log_level: str
    log_json: bool


def configure_logging(level: str = "INFO", use_json: bool = False) -> None:
    """Install a single stderr handler on the root logger."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, "_rsn_handler", False):
            root.removeHandler(handler)

    handler = logging.StreamHandler(sys.stderr)
    if use_json:
        handler.setFormatter(JsonFormatter(_LOG_FORMAT))
    else:
        handler.setFormatter(logging.Formatter(_LOG_FORMAT))
    handler._rsn_handler = True
    root.addHandler(handler)
    root.setLevel(level)


def create_app(config_class=Config, **overrides) -> RsnApp:
    """Application factory."""
    app = RsnApp(
        threads=max(1, int(overrides.get("threads", config_class.THREADS))),
        output_dir=Path(overrides.get("output_dir", config_class.OUTPUT_DIR)),
        feature_cache_size=int(overrides.get("feature_cache_size", config_class.FEATURE_CACHE_SIZE)),
        log_level=str(overrides.get("log_level", config_class.LOG_LEVEL)),
        log_json=bool(overrides.get("log_json", config_class.LOG_JSON)),
    )
    configure_logging(app.log_level, app.log_json)
    logging.getLogger(__name__).debug(
        "rsn %s ready (threads=%d, output_dir=%s)", __version__, app.threads, app.output_dir
    )
    return app
