"""
Logging utilities for the SemSentry library.

Designed to work as a library component that respects the application's
logging configuration through the logger hierarchy. Only the CLI installs
handlers (see ``configure_cli_logging``).
"""

import logging
import sys
import threading
from collections import Counter
from typing import Any, Dict, Optional

# Define SUMMARY level between INFO (20) and WARNING (30)
SUMMARY = 25
logging.addLevelName(SUMMARY, "SUMMARY")

ROOT_LOGGER = "semsentry"


def summary(self: logging.Logger, message: str, *args: Any, **kwargs: Any) -> None:
    """Log a summary message at SUMMARY level"""
    if self.isEnabledFor(SUMMARY):
        self._log(SUMMARY, message, args, **kwargs)


logging.Logger.summary = summary  # type: ignore


def sql(
    self: logging.Logger, query: str, params: Any = None, elapsed_ms: Optional[float] = None
) -> None:
    """Log SQL statements at DEBUG level with parameters and timing"""
    if not self.isEnabledFor(logging.DEBUG):
        return

    formatted_query = " ".join(query.strip().split())
    timing = f" ({elapsed_ms:.1f}ms)" if elapsed_ms is not None else ""
    suffix = f" | params: {_abbreviate(params)}" if params else ""
    self.debug(f"🔍 SQL{timing}: {formatted_query}{suffix}")


logging.Logger.sql = sql  # type: ignore


def _abbreviate(value: Any, limit: int = 120) -> str:
    text = str(value)
    return text if len(text) <= limit else text[:limit] + "..."


def get_logger(name: str) -> logging.Logger:
    """
    Get a SemSentry logger that inherits from application configuration.

    Args:
        name: Component name (e.g., "monitor", "baselines", "cache")

    Returns:
        Logger instance under the parent "semsentry" logger
    """
    return logging.getLogger(f"{ROOT_LOGGER}.{name}")


def log_with_context(logger: logging.Logger, level: int, message: str, **context: Any) -> None:
    """
    Log a message with structured context.

    The context dict is attached to the record as ``semsentry_context`` so
    formatters can render it.
    """
    if not logger.isEnabledFor(level):
        return
    record = logger.makeRecord(logger.name, level, "", 0, message, (), None)
    record.semsentry_context = context
    logger.handle(record)


def log_backend_call(
    backend: str,
    template: str,
    elapsed_ms: float,
    cached: bool = False,
    **context: Any,
) -> None:
    """Log a single backend round trip at DEBUG level"""
    logger = get_logger("backends")
    emoji = "📼" if cached else "🛰️"
    ctx = {"backend": backend, "template": template, "cached": cached}
    ctx.update(context)
    message = f"{emoji} {backend.upper()} ({elapsed_ms:.1f}ms)"
    log_with_context(logger, logging.DEBUG, message, **ctx)


def log_fit_stats(model: str, stats: Dict[str, Any], **context: Any) -> None:
    """Log model fitting statistics"""
    logger = get_logger("baselines")
    ctx = dict(stats)
    ctx.update(context)
    rendered = ", ".join(f"{k}={v}" for k, v in stats.items())
    log_with_context(logger, SUMMARY, f"📐 FIT {model.upper()}: {rendered}", **ctx)


def log_performance_warning(
    component: str,
    operation: str,
    duration_ms: float,
    threshold_ms: float = 1000.0,
    **context: Any,
) -> None:
    """Log performance warnings for slow operations"""
    if duration_ms < threshold_ms:
        return

    logger = get_logger("performance")
    message = f"⚠️ SLOW {operation.upper()} ({duration_ms:.1f}ms > {threshold_ms:.1f}ms)"
    ctx = {"component": component, "duration_ms": duration_ms, "threshold_ms": threshold_ms}
    ctx.update(context)
    log_with_context(logger, logging.WARNING, message, **ctx)


def log_error_with_context(
    component: str, error: Exception, operation: str = "", **context: Any
) -> None:
    """Log errors with full context for debugging"""
    logger = get_logger(component)

    message = "💥 ERROR"
    if operation:
        message += f" in {operation.upper()}"
    message += f": {error}"

    ctx = {"error_type": type(error).__name__, "error_msg": str(error)}
    ctx.update(context)
    log_with_context(logger, logging.ERROR, message, **ctx)


class WarningTally:
    """
    Counted warnings for conditions that recur many times per run.

    The first occurrence of a key is logged at WARNING, repeats at DEBUG.
    Counts are kept per key so commands can summarise them at the end.
    """

    def __init__(self, component: str):
        self.logger = get_logger(component)
        self._counts: Counter[str] = Counter()
        self._lock = threading.Lock()

    def warn(self, key: str, message: str) -> None:
        with self._lock:
            self._counts[key] += 1
            first = self._counts[key] == 1
        self.logger.log(logging.WARNING if first else logging.DEBUG, f"⚠️ {message}")

    def count(self, key: Optional[str] = None) -> int:
        """Occurrences of ``key``, or of all keys when omitted"""
        with self._lock:
            if key is None:
                return sum(self._counts.values())
            return self._counts[key]

    def counts(self) -> Dict[str, int]:
        with self._lock:
            return dict(self._counts)

    def reset(self) -> None:
        with self._lock:
            self._counts.clear()

    def log_summary(self) -> None:
        """Emit one SUMMARY line per warning kind seen since the last reset"""
        for key, n in sorted(self.counts().items()):
            self.logger.summary(f"⚠️ {key}: {n} occurrence(s)")


class EmojiFormatter(logging.Formatter):
    """Formatter for terminal output: bare messages for SUMMARY, levels otherwise"""

    def __init__(self, include_timestamp: bool = False):
        if include_timestamp:
            fmt = "%(asctime)s [%(levelname)s] %(message)s"
        else:
            fmt = "[%(levelname)s] %(message)s"
        super().__init__(fmt, datefmt="%H:%M:%S")

    def format(self, record: logging.LogRecord) -> str:
        if record.levelno == SUMMARY:
            return record.getMessage()
        if record.levelno == logging.DEBUG and record.getMessage().startswith("🔍"):
            return record.getMessage()
        return super().format(record)


def configure_cli_logging(verbosity: int = 0, stream: Any = None) -> None:
    """
    Install a single stream handler on the "semsentry" logger.

    verbosity: -1 quiet (WARNING), 0 SUMMARY, 1 INFO, 2+ DEBUG.
    """
    logger = logging.getLogger(ROOT_LOGGER)
    logger.handlers.clear()

    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(EmojiFormatter(include_timestamp=verbosity >= 2))
    logger.addHandler(handler)
    logger.propagate = False

    levels = {-1: logging.WARNING, 0: SUMMARY, 1: logging.INFO}
    logger.setLevel(levels.get(verbosity, logging.DEBUG if verbosity > 1 else logging.WARNING))


def configure_for_tests(brief: bool = False) -> None:
    """Set the "semsentry" logger level for test runs"""
    logger = logging.getLogger(ROOT_LOGGER)
    logger.setLevel(SUMMARY if brief else logging.INFO)
