#!/usr/bin/env python3
"""
Run Registry for LCM-lookahead

Stores the stage manifest of every pipeline run in SQLite: which stage
ran, under which config hash, from which inputs, producing which files.
"""

import sqlite3
import json
import logging
from pathlib import Path
from typing import Optional, Dict, List, Any, Union
from contextlib import contextmanager

from core.models import StageRecord

SCHEMA_PATH = Path(__file__).parent.parent.parent / 'schema' / 'run_registry.sql'


class RunRegistry:
    """Manages the SQLite stage manifest of a workspace."""

    def __init__(self, db_path: Union[str, Path] = ":memory:"):
        """
        Initialize the registry.

        Args:
            db_path: Path to the SQLite file, or ":memory:" for tests
        """
        if str(db_path) == ":memory:":
            self.db_path = ":memory:"
        else:
            self.db_path = Path(db_path)
            self.db_path.parent.mkdir(parents=True, exist_ok=True)

        # :memory: needs one persistent connection (each new one is a fresh database)
        self._persistent_conn = None
        if self.db_path == ":memory:":
            self._persistent_conn = sqlite3.connect(":memory:")
            self._persistent_conn.row_factory = sqlite3.Row

        if self._persistent_conn is not None or not self.db_path.exists():
            self.initialize_database()

    @contextmanager
    def get_connection(self):
        """Context manager for database connections."""
        if self._persistent_conn is not None:
            try:
                yield self._persistent_conn
                self._persistent_conn.commit()
            except Exception as e:
                logging.exception("Registry error occurred")
                self._persistent_conn.rollback()
                raise e
        else:
            conn = sqlite3.connect(str(self.db_path))
            conn.row_factory = sqlite3.Row
            try:
                yield conn
                conn.commit()
            except Exception as e:
                logging.exception("Registry error occurred")
                conn.rollback()
                raise e
            finally:
                conn.close()

    def initialize_database(self):
        """Initialize database with schema."""
        if not SCHEMA_PATH.exists():
            raise FileNotFoundError(f"Schema file not found: {SCHEMA_PATH}")

        with open(SCHEMA_PATH, 'r') as f:
            schema_sql = f.read()

        with self.get_connection() as conn:
            conn.executescript(schema_sql)

        logging.getLogger(__name__).debug("Run registry initialized at: %s", self.db_path)

    # ========================================================================
    # STAGE OPERATIONS
    # ========================================================================

    def record_stage(self, record: StageRecord) -> int:
        """
        Append a finished stage to the manifest.

        Returns:
            Row id of the new entry
        """
        with self.get_connection() as conn:
            cursor = conn.execute("""
                INSERT INTO stages
                    (stage, run, config_hash, input_hashes, output_paths, seed, wall_time)
                VALUES (?, ?, ?, ?, ?, ?, ?)
            """, (
                record.stage,
                record.run,
                record.config_hash,
                json.dumps(record.input_hashes, sort_keys=True),
                json.dumps(record.output_paths),
                record.seed,
                record.wall_time,
            ))
            return cursor.lastrowid

    def latest_stage(self, stage: str, run: Optional[str] = None) -> Optional[StageRecord]:
        """Most recent record of a stage, optionally within one run."""
        query = "SELECT * FROM stages WHERE stage = ?"
        params: List[Any] = [stage]
        if run is not None:
            query += " AND run = ?"
            params.append(run)
        query += " ORDER BY id DESC LIMIT 1"
        with self.get_connection() as conn:
            row = conn.execute(query, params).fetchone()
            return StageRecord.from_db_row(dict(row)) if row else None

    def list_stages(self, run: Optional[str] = None) -> List[StageRecord]:
        """All stage records, oldest first."""
        with self.get_connection() as conn:
            if run is None:
                rows = conn.execute("SELECT * FROM stages ORDER BY id").fetchall()
            else:
                rows = conn.execute("SELECT * FROM stages WHERE run = ? ORDER BY id",
                                    (run,)).fetchall()
            return [StageRecord.from_db_row(dict(row)) for row in rows]

    def runs(self) -> List[str]:
        with self.get_connection() as conn:
            rows = conn.execute("SELECT DISTINCT run FROM stages ORDER BY run").fetchall()
            return [row['run'] for row in rows]

    # ========================================================================
    # ARTIFACT OPERATIONS
    # ========================================================================

    def record_artifact(self, path: Union[str, Path], stage: str, run: str, content_hash: str):
        with self.get_connection() as conn:
            conn.execute("""
                INSERT OR REPLACE INTO artifacts (path, stage, run, content_hash)
                VALUES (?, ?, ?, ?)
            """, (str(path), stage, run, content_hash))

    def get_artifact(self, path: Union[str, Path]) -> Optional[Dict[str, Any]]:
        with self.get_connection() as conn:
            row = conn.execute("SELECT * FROM artifacts WHERE path = ?", (str(path),)).fetchone()
            return dict(row) if row else None

    def get_stats(self) -> Dict[str, Any]:
        """Counts of recorded stages, runs and artifacts."""
        with self.get_connection() as conn:
            stages = conn.execute("SELECT COUNT(*) FROM stages").fetchone()[0]
            runs = conn.execute("SELECT COUNT(DISTINCT run) FROM stages").fetchone()[0]
            artifacts = conn.execute("SELECT COUNT(*) FROM artifacts").fetchone()[0]
        return {'stages': stages, 'runs': runs, 'artifacts': artifacts}
