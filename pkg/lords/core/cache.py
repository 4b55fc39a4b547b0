"""
SQLite-based run cache with versioning support.
Stores packed refine artifacts and their reports, keyed by the SHA-256 of the
input weights and the refine configuration.
"""

import hashlib
import json
import sqlite3
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from .refine import RefineReport


def weights_digest(w: np.ndarray) -> str:
    """SHA-256 over shape and float64 bytes of a weight matrix."""
    h = hashlib.sha256()
    h.update(f"{w.shape[0]}x{w.shape[1]}".encode())
    h.update(np.ascontiguousarray(w, dtype=np.float64).tobytes())
    return h.hexdigest()


@dataclass
class CachedRun:
    """One stored refine run"""
    digest: str
    config_key: str
    version: int
    artifact: bytes
    report: RefineReport
    created_at: datetime


class RunCache:
    """SQLite cache for refine runs with versioning."""

    def __init__(self, cache_dir: Path):
        """
        Initialize cache with SQLite database.

        Args:
            cache_dir: Directory to store cache database
        """
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.db_path = self.cache_dir / "runs.db"
        self._init_db()

    def _init_db(self):
        """Initialize SQLite database with required tables."""
        with sqlite3.connect(self.db_path) as conn:
            conn.execute("""
                CREATE TABLE IF NOT EXISTS runs (
                    digest TEXT NOT NULL,
                    config_key TEXT NOT NULL,
                    version INTEGER NOT NULL,
                    rows INTEGER NOT NULL,
                    cols INTEGER NOT NULL,
                    artifact BLOB NOT NULL,
                    report TEXT NOT NULL,  -- JSON object
                    created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
                    PRIMARY KEY (digest, config_key, version)
                )
            """)
            conn.execute("""
                CREATE INDEX IF NOT EXISTS idx_runs_date
                ON runs(created_at DESC)
            """)
            conn.commit()

    def get_run(self, digest: str, config_key: str) -> Optional[CachedRun]:
        """
        Get the latest cached run for weights and configuration.

        Returns:
            CachedRun if found, None otherwise
        """
        with sqlite3.connect(self.db_path) as conn:
            conn.row_factory = sqlite3.Row
            cursor = conn.execute("""
                SELECT * FROM runs
                WHERE digest = ? AND config_key = ?
                ORDER BY version DESC
                LIMIT 1
            """, (digest, config_key))

            row = cursor.fetchone()
            if not row:
                return None

            return CachedRun(
                digest=row["digest"],
                config_key=row["config_key"],
                version=row["version"],
                artifact=bytes(row["artifact"]),
                report=RefineReport.from_dict(json.loads(row["report"])),
                created_at=datetime.fromisoformat(row["created_at"]),
            )

    def store_run(self, digest: str, config_key: str, shape, artifact: bytes, report: RefineReport) -> int:
        """
        Store a run with automatic version increment.

        Returns:
            Version number assigned
        """
        with sqlite3.connect(self.db_path) as conn:
            cursor = conn.execute("""
                SELECT COALESCE(MAX(version), 0) + 1 AS next_version
                FROM runs
                WHERE digest = ? AND config_key = ?
            """, (digest, config_key))
            next_version = cursor.fetchone()[0]

            conn.execute("""
                INSERT INTO runs (digest, config_key, version, rows, cols, artifact, report, created_at)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?)
            """, (
                digest,
                config_key,
                next_version,
                int(shape[0]),
                int(shape[1]),
                sqlite3.Binary(artifact),
                json.dumps(report.to_dict()),
                datetime.now().isoformat(),
            ))
            conn.commit()
            return next_version

    def clear(self) -> int:
        """
        Clear all cached runs.

        Returns:
            Number of entries cleared
        """
        with sqlite3.connect(self.db_path) as conn:
            cursor = conn.execute("DELETE FROM runs")
            deleted = cursor.rowcount
            conn.commit()
            return deleted

    def get_stats(self) -> Dict[str, Any]:
        """Get cache statistics."""
        with sqlite3.connect(self.db_path) as conn:
            conn.row_factory = sqlite3.Row
            cursor = conn.execute("""
                SELECT
                    COUNT(*) AS total_entries,
                    COUNT(DISTINCT digest) AS unique_weights,
                    COALESCE(SUM(LENGTH(artifact)), 0) AS artifact_bytes
                FROM runs
            """)
            overall = dict(cursor.fetchone())

        overall["db_size"] = self.db_path.stat().st_size if self.db_path.exists() else 0
        overall["cache_path"] = str(self.db_path)
        return overall

    def list_runs(self, limit: int = 20) -> List[Dict[str, Any]]:
        """Most recent runs, newest first."""
        with sqlite3.connect(self.db_path) as conn:
            conn.row_factory = sqlite3.Row
            cursor = conn.execute("""
                SELECT digest, config_key, version, rows, cols, created_at
                FROM runs
                ORDER BY created_at DESC
                LIMIT ?
            """, (limit,))
            return [dict(row) for row in cursor.fetchall()]

    def cleanup_old_versions(self, keep_versions: int = 3) -> int:
        """
        Clean up old versions, keeping only the most recent ones.

        Args:
            keep_versions: Number of versions to keep per weights/config pair

        Returns:
            Number of entries deleted
        """
        with sqlite3.connect(self.db_path) as conn:
            cursor = conn.execute("""
                DELETE FROM runs
                WHERE rowid IN (
                    SELECT rowid FROM (
                        SELECT rowid,
                               ROW_NUMBER() OVER (
                                   PARTITION BY digest, config_key
                                   ORDER BY version DESC
                               ) AS row_num
                        FROM runs
                    ) ranked
                    WHERE row_num > ?
                )
            """, (keep_versions,))
            deleted = cursor.rowcount
            conn.commit()
            return deleted
