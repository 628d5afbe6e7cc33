"""Embedded relational persistence layer.

A single SQLite file holds every catalog, account, plugin, cart and job
object. All mutations run through :meth:`Database.transaction`, which
serializes writers (single-writer model) and commits atomically; readers see
committed state only. Schema changes are explicit, numbered migrations
applied by :func:`Database.migrate` (also runnable as
``python -m youpi.store <db-path>``). The schema is documented in
``docs/schema.md``.
"""

from __future__ import annotations

import logging
import sqlite3
import threading
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterator, Optional

logger = logging.getLogger(__name__)

Clock = Callable[[], datetime]


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


def isoformat(ts: Optional[datetime]) -> Optional[str]:
    if ts is None:
        return None
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc).isoformat()


def parse_ts(value: Optional[str]) -> Optional[datetime]:
    if value is None or value == "":
        return None
    ts = datetime.fromisoformat(value)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts


MIGRATIONS: list[tuple[int, str]] = [
    (
        1,
        """
        CREATE TABLE users (
            user_id TEXT PRIMARY KEY,
            login TEXT NOT NULL UNIQUE,
            password_hash TEXT NOT NULL,
            is_admin INTEGER NOT NULL DEFAULT 0
        );
        CREATE TABLE groups (
            group_id TEXT PRIMARY KEY,
            name TEXT NOT NULL UNIQUE
        );
        CREATE TABLE user_groups (
            user_id TEXT NOT NULL REFERENCES users(user_id),
            group_id TEXT NOT NULL REFERENCES groups(group_id),
            PRIMARY KEY (user_id, group_id)
        );
        CREATE TABLE sessions (
            token TEXT PRIMARY KEY,
            user_id TEXT NOT NULL REFERENCES users(user_id),
            created_at TEXT NOT NULL,
            expires_at TEXT NOT NULL
        );
        CREATE TABLE images (
            image_id TEXT PRIMARY KEY,
            filename TEXT NOT NULL,
            abs_path TEXT NOT NULL,
            checksum TEXT NOT NULL UNIQUE,
            instrument TEXT NOT NULL,
            run_id TEXT,
            filter TEXT,
            object TEXT,
            date_obs TEXT,
            exptime REAL,
            grade TEXT,
            ingestion_id TEXT NOT NULL,
            owner TEXT NOT NULL,
            grp TEXT NOT NULL,
            mode TEXT NOT NULL
        );
        CREATE INDEX idx_images_filename ON images(filename);
        CREATE TABLE tags (
            tag_id TEXT PRIMARY KEY,
            name TEXT NOT NULL UNIQUE,
            style TEXT,
            owner TEXT NOT NULL,
            grp TEXT NOT NULL,
            mode TEXT NOT NULL
        );
        CREATE TABLE image_tags (
            image_id TEXT NOT NULL REFERENCES images(image_id),
            tag_id TEXT NOT NULL REFERENCES tags(tag_id),
            PRIMARY KEY (image_id, tag_id)
        );
        CREATE TABLE selections (
            selection_id TEXT PRIMARY KEY,
            name TEXT NOT NULL,
            owner TEXT NOT NULL,
            grp TEXT NOT NULL,
            mode TEXT NOT NULL,
            UNIQUE (name, owner)
        );
        CREATE TABLE selection_images (
            selection_id TEXT NOT NULL REFERENCES selections(selection_id),
            position INTEGER NOT NULL,
            image_id TEXT NOT NULL REFERENCES images(image_id),
            PRIMARY KEY (selection_id, position)
        );
        CREATE TABLE saved_paths (
            path_id TEXT PRIMARY KEY,
            path TEXT NOT NULL,
            owner TEXT NOT NULL,
            created_at TEXT NOT NULL
        );
        CREATE TABLE plugins (
            plugin_id TEXT PRIMARY KEY,
            display_name TEXT NOT NULL,
            enabled INTEGER NOT NULL DEFAULT 1,
            executable TEXT NOT NULL,
            command_template TEXT NOT NULL,
            config_keys TEXT NOT NULL
        );
        CREATE TABLE configs (
            config_id TEXT PRIMARY KEY,
            name TEXT NOT NULL,
            plugin_id TEXT NOT NULL REFERENCES plugins(plugin_id),
            content TEXT NOT NULL,
            owner TEXT NOT NULL,
            grp TEXT NOT NULL,
            mode TEXT NOT NULL,
            UNIQUE (name, owner, plugin_id)
        );
        CREATE TABLE cart_items (
            item_id TEXT PRIMARY KEY,
            plugin_id TEXT NOT NULL REFERENCES plugins(plugin_id),
            selection_id TEXT,
            image_ids TEXT,
            config_id TEXT NOT NULL REFERENCES configs(config_id),
            aux_paths TEXT NOT NULL DEFAULT '{}',
            policy_kind TEXT,
            policy_id TEXT,
            owner TEXT NOT NULL,
            grp TEXT NOT NULL,
            mode TEXT NOT NULL,
            created_at TEXT NOT NULL
        );
        CREATE TABLE policies (
            policy_id TEXT PRIMARY KEY,
            label TEXT NOT NULL UNIQUE,
            criteria TEXT NOT NULL
        );
        CREATE TABLE static_selections (
            static_id TEXT PRIMARY KEY,
            label TEXT NOT NULL UNIQUE,
            node_names TEXT NOT NULL
        );
        CREATE TABLE jobs (
            job_id INTEGER PRIMARY KEY AUTOINCREMENT,
            kind TEXT NOT NULL,
            cart_item_ref TEXT,
            ingestion_ref TEXT,
            owner TEXT NOT NULL,
            description TEXT NOT NULL,
            submission_text TEXT NOT NULL DEFAULT '',
            requirements_expr TEXT NOT NULL DEFAULT '',
            state TEXT NOT NULL,
            assigned_node TEXT,
            queued_at TEXT NOT NULL,
            started_at TEXT,
            finished_at TEXT,
            exit_code INTEGER,
            workdir TEXT NOT NULL DEFAULT ''
        );
        CREATE TABLE events (
            seq INTEGER PRIMARY KEY AUTOINCREMENT,
            job_id INTEGER NOT NULL,
            timestamp TEXT NOT NULL,
            description TEXT NOT NULL,
            remote_host TEXT NOT NULL,
            running_time REAL NOT NULL,
            owner TEXT NOT NULL,
            status TEXT NOT NULL
        );
        CREATE TABLE ingestions (
            ingestion_id TEXT PRIMARY KEY,
            user_id TEXT NOT NULL,
            instrument TEXT NOT NULL,
            requested_paths TEXT NOT NULL,
            recursive INTEGER NOT NULL DEFAULT 0,
            ingested INTEGER,
            skipped_duplicates INTEGER,
            failed TEXT,
            started_at TEXT,
            finished_at TEXT
        );
        """,
    ),
]

SCHEMA_VERSION = MIGRATIONS[-1][0]


class Database:
    """Shared SQLite handle with a single-writer transaction lock."""

    def __init__(self, path: str | Path):
        self.path = str(path)
        self._lock = threading.RLock()
        self._conn = sqlite3.connect(
            self.path, check_same_thread=False, timeout=30.0, isolation_level=None
        )
        self._conn.row_factory = sqlite3.Row
        self._conn.execute("PRAGMA foreign_keys = ON")
        self._in_txn = False

    def close(self) -> None:
        with self._lock:
            self._conn.close()

    # -- schema ---------------------------------------------------------------

    def migrate(self) -> int:
        """Apply pending migrations; returns the resulting schema version.

        Runs in autocommit mode: executescript would break out of an explicit
        transaction anyway.
        """
        with self._lock:
            self._conn.execute(
                "CREATE TABLE IF NOT EXISTS schema_version (version INTEGER NOT NULL)"
            )
            row = self._conn.execute("SELECT MAX(version) AS v FROM schema_version").fetchone()
            current = row["v"] or 0
            for version, ddl in MIGRATIONS:
                if version > current:
                    logger.info("applying schema migration %d", version)
                    self._conn.executescript(ddl)
                    self._conn.execute(
                        "INSERT INTO schema_version (version) VALUES (?)", (version,)
                    )
                    current = version
        return current

    # -- access ---------------------------------------------------------------

    @contextmanager
    def transaction(self) -> Iterator[sqlite3.Connection]:
        """Serialized read-modify-write scope; commits on exit, rolls back on error."""
        with self._lock:
            if self._in_txn:
                # nested use shares the outer transaction
                yield self._conn
                return
            self._in_txn = True
            try:
                self._conn.execute("BEGIN IMMEDIATE")
                yield self._conn
                self._conn.execute("COMMIT")
            except BaseException:
                self._conn.execute("ROLLBACK")
                raise
            finally:
                self._in_txn = False

    def query(self, sql: str, params: tuple | dict = ()) -> list[sqlite3.Row]:
        with self._lock:
            return self._conn.execute(sql, params).fetchall()

    def query_one(self, sql: str, params: tuple | dict = ()) -> Optional[sqlite3.Row]:
        with self._lock:
            return self._conn.execute(sql, params).fetchone()

    def execute(self, sql: str, params: tuple | dict = ()) -> sqlite3.Cursor:
        """Single-statement write wrapped in its own transaction."""
        with self.transaction() as conn:
            return conn.execute(sql, params)


def main(argv: Optional[list[str]] = None) -> int:
    """Explicit migration entry point: ``python -m youpi.store <db-path>``."""
    import argparse

    parser = argparse.ArgumentParser(description="apply schema migrations to a youpi database")
    parser.add_argument("db_path", help="path to the SQLite database file")
    args = parser.parse_args(argv)
    db = Database(args.db_path)
    version = db.migrate()
    print(f"schema version {version}")
    db.close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
