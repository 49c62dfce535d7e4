import json
import logging
import os
from typing import Any


logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: str | int = logging.INFO) -> None:
    logging.basicConfig(level=level, format=LOG_FORMAT)


def log_event(event_type: str, payload: dict[str, Any]) -> None:
    """Emit structured usage logs for downstream analytics."""
    logger.info(
        "usage_event=%s payload=%s",
        event_type,
        json.dumps(payload, ensure_ascii=False, sort_keys=True, default=str),
    )


def enable_langsmith(project: str, endpoint: str | None = None) -> None:
    """Enable LangSmith tracing via environment variables."""
    os.environ["LANGSMITH_TRACING"] = "true"
    os.environ["LANGSMITH_PROJECT"] = project
    if endpoint:
        os.environ["LANGSMITH_ENDPOINT"] = endpoint


def disable_langsmith() -> None:
    os.environ["LANGSMITH_TRACING"] = "false"


def is_langsmith_configured() -> bool:
    return bool(os.getenv("LANGSMITH_API_KEY"))
