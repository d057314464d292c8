"""SQLite ledger of experiment runs."""

import json
import sqlite3
from datetime import datetime, timezone
from pathlib import Path

DB_PATH = Path("runs") / "runs.db"


def _get_connection(path: Path | None = None) -> sqlite3.Connection:
    path = Path(path or DB_PATH)
    path.parent.mkdir(parents=True, exist_ok=True)
    conn = sqlite3.connect(path)
    conn.row_factory = sqlite3.Row
    return conn


def init_db(path: Path | None = None) -> None:
    """Initialize the database schema."""
    with _get_connection(path) as conn:
        conn.execute("""
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                command TEXT NOT NULL,
                config TEXT NOT NULL,
                seed INTEGER NOT NULL,
                out_dir TEXT NOT NULL,
                status TEXT NOT NULL,
                started TEXT NOT NULL,
                finished TEXT
            )
        """)
        conn.execute("""
            CREATE TABLE IF NOT EXISTS artifacts (
                run_id INTEGER NOT NULL REFERENCES runs(id),
                path TEXT NOT NULL,
                PRIMARY KEY (run_id, path)
            )
        """)
        conn.commit()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def start_run(command: str, config: dict, seed: int, out_dir: str, path: Path | None = None) -> int:
    """Record a run as started and return its id."""
    with _get_connection(path) as conn:
        cursor = conn.execute(
            """
            INSERT INTO runs (command, config, seed, out_dir, status, started)
            VALUES (?, ?, ?, ?, 'running', ?)
            """,
            (command, json.dumps(config, sort_keys=True), seed, out_dir, _now()),
        )
        conn.commit()
        return cursor.lastrowid


def add_artifact(run_id: int, artifact: str, path: Path | None = None) -> None:
    with _get_connection(path) as conn:
        conn.execute(
            "INSERT OR IGNORE INTO artifacts (run_id, path) VALUES (?, ?)",
            (run_id, artifact),
        )
        conn.commit()


def finish_run(run_id: int, status: str, path: Path | None = None) -> None:
    """Mark a run as ok, failed or check-failed."""
    with _get_connection(path) as conn:
        conn.execute(
            "UPDATE runs SET status = ?, finished = ? WHERE id = ?",
            (status, _now(), run_id),
        )
        conn.commit()


def list_runs(command: str | None = None, path: Path | None = None) -> list[dict]:
    """List recorded runs, newest first, with their artifact paths."""
    query = "SELECT id, command, config, seed, out_dir, status, started, finished FROM runs"
    args: tuple = ()
    if command:
        query += " WHERE command = ?"
        args = (command,)
    with _get_connection(path) as conn:
        rows = [dict(row) for row in conn.execute(query + " ORDER BY id DESC", args).fetchall()]
        for row in rows:
            row["config"] = json.loads(row["config"])
            row["artifacts"] = [
                r["path"]
                for r in conn.execute(
                    "SELECT path FROM artifacts WHERE run_id = ? ORDER BY path", (row["id"],)
                ).fetchall()
            ]
        return rows
