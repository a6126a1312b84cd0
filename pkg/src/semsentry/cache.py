"""
Record/replay cache for backend responses, backed by SQLite.

Responses are keyed by a hash of (template name, prompt text). One
connection is shared across threads; every statement runs under a lock, so
reads may be issued concurrently and writes are serialized.
"""

from __future__ import annotations

import hashlib
import sqlite3
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator, Optional

from .exceptions import BackendError
from .logging_utils import get_logger

SCHEMA_VERSION = 1


def prompt_key(template_name: str, prompt: str) -> str:
    """Cache key for a rendered prompt"""
    digest = hashlib.sha256()
    digest.update(template_name.encode("utf-8"))
    digest.update(b"\0")
    digest.update(prompt.encode("utf-8"))
    return digest.hexdigest()


@dataclass(frozen=True, slots=True)
class CachedResponse:
    key: str
    template_name: str
    text: str
    latency_s: float
    prompt_tokens: Optional[int]
    completion_tokens: Optional[int]
    created_at: float


class ReplayCache:
    """Persistent response store"""

    def __init__(self, db_path: Optional[str] = None, allowed_base_dir: Optional[str] = None):
        # None -> in-memory, "path" -> persistent file
        raw_path = ":memory:" if db_path is None else str(db_path)
        self.db_path = self._validate_db_path(raw_path, allowed_base_dir)
        self.logger = get_logger("cache")
        self._lock = threading.RLock()

        start_time = time.time()
        if self.db_path != ":memory:":
            Path(self.db_path).parent.mkdir(parents=True, exist_ok=True)
        self.conn = sqlite3.connect(self.db_path, check_same_thread=False)
        self.conn.row_factory = sqlite3.Row

        elapsed_ms = (time.time() - start_time) * 1000
        if self._needs_initialization():
            self._initialize_schema()
            self.logger.info(
                f"🏗️ Replay cache initialized ({elapsed_ms:.0f}ms): {self.db_path}"
            )
        else:
            self.logger.info(
                f"📼 Replay cache opened ({elapsed_ms:.1f}ms, {len(self)} responses): "
                f"{self.db_path}"
            )

    def _validate_db_path(self, db_path: str, allowed_base_dir: Optional[str] = None) -> str:
        """Validate the cache path against directory traversal

        Raises:
            ValueError: If path contains traversal sequences or is outside allowed directory
        """
        if db_path == ":memory:":
            return db_path

        if ".." in Path(db_path).parts:
            raise ValueError(
                f"Path traversal detected in cache path: {db_path}. "
                "Use absolute paths or paths without '..' sequences."
            )

        try:
            path_obj = Path(db_path).resolve()
        except (OSError, RuntimeError) as e:
            raise ValueError(f"Invalid cache path: {e}")

        if allowed_base_dir is not None:
            base_path = Path(allowed_base_dir).resolve()
            try:
                path_obj.relative_to(base_path)
            except ValueError:
                raise ValueError(
                    f"Cache path must be within {base_path}. Attempted path: {path_obj}"
                )

        return str(path_obj)

    def __execute(self, sql: str, params: Any = None) -> Optional[sqlite3.Row]:
        """Execute SQL with logging; the first result row is fetched under the lock"""
        start_time = time.time()
        with self._lock:
            cursor = self.conn.execute(sql) if params is None else self.conn.execute(sql, params)
            result = cursor.fetchone()
        elapsed_ms = (time.time() - start_time) * 1000
        self.logger.sql(sql, params, elapsed_ms)
        return result

    def _needs_initialization(self) -> bool:
        row = self.__execute(
            "SELECT name FROM sqlite_master WHERE type='table' AND name='response'"
        )
        return row is None

    def _initialize_schema(self) -> None:
        with self.transaction():
            self.__execute(
                """
                CREATE TABLE IF NOT EXISTS response (
                    key TEXT PRIMARY KEY,
                    template_name TEXT NOT NULL,
                    text TEXT NOT NULL,
                    latency_s REAL NOT NULL,
                    prompt_tokens INTEGER,
                    completion_tokens INTEGER,
                    created_at REAL NOT NULL
                )
            """
            )
            self.__execute(
                """
                CREATE TABLE IF NOT EXISTS cache_metadata (
                    k TEXT PRIMARY KEY,
                    v TEXT NOT NULL
                )
            """
            )
            self.__execute(
                "INSERT OR REPLACE INTO cache_metadata (k, v) VALUES (?, ?)",
                ("schema_version", str(SCHEMA_VERSION)),
            )

    @contextmanager
    def transaction(self) -> Iterator[None]:
        """Commit on successful exit, roll back on exception"""
        with self._lock:
            try:
                yield
                self.conn.commit()
            except Exception:
                self.conn.rollback()
                raise

    def get(self, key: str) -> Optional[CachedResponse]:
        row = self.__execute(
            "SELECT key, template_name, text, latency_s, prompt_tokens, completion_tokens, "
            "created_at FROM response WHERE key = ?",
            (key,),
        )
        if row is None:
            return None
        return CachedResponse(
            key=row["key"],
            template_name=row["template_name"],
            text=row["text"],
            latency_s=row["latency_s"],
            prompt_tokens=row["prompt_tokens"],
            completion_tokens=row["completion_tokens"],
            created_at=row["created_at"],
        )

    def put(
        self,
        key: str,
        template_name: str,
        text: str,
        latency_s: float = 0.0,
        prompt_tokens: Optional[int] = None,
        completion_tokens: Optional[int] = None,
    ) -> None:
        """Store a response; an existing entry for ``key`` is kept"""
        try:
            with self.transaction():
                self.__execute(
                    "INSERT OR IGNORE INTO response (key, template_name, text, latency_s, "
                    "prompt_tokens, completion_tokens, created_at) VALUES (?, ?, ?, ?, ?, ?, ?)",
                    (
                        key,
                        template_name,
                        text,
                        float(latency_s),
                        prompt_tokens,
                        completion_tokens,
                        time.time(),
                    ),
                )
        except sqlite3.Error as e:
            raise BackendError(f"Failed to record response: {e}", backend="replay", orig=e) from e

    def __contains__(self, key: object) -> bool:
        return (
            isinstance(key, str)
            and self.__execute("SELECT 1 FROM response WHERE key = ?", (key,)) is not None
        )

    def __len__(self) -> int:
        row = self.__execute("SELECT COUNT(*) FROM response")
        return int(row[0]) if row is not None else 0

    def close(self) -> None:
        with self._lock:
            self.conn.close()

    def __enter__(self) -> ReplayCache:
        return self

    def __exit__(self, exc_type: Any, exc_val: Any, exc_tb: Any) -> None:
        self.close()
