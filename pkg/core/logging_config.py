"""
Logging setup shared by the CLI, agents and demos.
"""

import logging
import os
import sys
from typing import Optional

from dotenv import load_dotenv
from pythonjsonlogger import jsonlogger

PLAIN_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
JSON_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"


def configure_logging(level: Optional[str] = None, json_logs: bool = False) -> logging.Logger:
    """
    Install one root handler on stderr.

    Args:
        level: Level name; falls back to BRIDGE_AUDIT_LOG_LEVEL, then INFO
        json_logs: Emit one JSON object per record (extra= fields included)

    Returns:
        The configured root logger
    """
    load_dotenv()
    level_name = (level or os.getenv("BRIDGE_AUDIT_LOG_LEVEL") or "INFO").upper()

    handler = logging.StreamHandler(sys.stderr)
    if json_logs:
        handler.setFormatter(jsonlogger.JsonFormatter(JSON_FORMAT))
    else:
        handler.setFormatter(logging.Formatter(PLAIN_FORMAT))

    root = logging.getLogger()
    for existing in list(root.handlers):
        root.removeHandler(existing)
    root.addHandler(handler)
    root.setLevel(getattr(logging, level_name, logging.INFO))
    return root
