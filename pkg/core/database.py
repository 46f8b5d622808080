"""
Run registry.
Records experiment runs, their artifacts and compare rows in SQLite.
"""
import json
import sqlite3
from pathlib import Path
from typing import Dict, List


class RunRegistry:
    """SQLite store of command runs."""

    def __init__(self, db_path: str = None):
        if db_path is None:
            db_path = Path.cwd() / "runs.db"
        self.db_path = str(db_path)
        self._init_db()

    def _get_connection(self):
        """Get database connection."""
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        conn.execute("PRAGMA foreign_keys = ON")
        return conn

    def _init_db(self):
        """Initialize database tables."""
        conn = self._get_connection()
        cursor = conn.cursor()

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                command TEXT NOT NULL,
                seed INTEGER,
                config TEXT,
                created_at DATETIME DEFAULT CURRENT_TIMESTAMP
            )
        """)

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS artifacts (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id INTEGER NOT NULL,
                role TEXT NOT NULL,
                path TEXT NOT NULL,
                sha256 TEXT,
                FOREIGN KEY (run_id) REFERENCES runs(id) ON DELETE CASCADE
            )
        """)

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS reports (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id INTEGER NOT NULL,
                method TEXT NOT NULL,
                oa REAL,
                aa REAL,
                kappa REAL,
                seconds REAL,
                FOREIGN KEY (run_id) REFERENCES runs(id) ON DELETE CASCADE
            )
        """)

        conn.commit()
        conn.close()

    # Run operations
    def create_run(self, command: str, seed: int, config: Dict) -> int:
        """Create a run record and return its ID."""
        conn = self._get_connection()
        cursor = conn.cursor()
        cursor.execute(
            "INSERT INTO runs (command, seed, config) VALUES (?, ?, ?)",
            (command, seed, json.dumps(config, sort_keys=True))
        )
        run_id = cursor.lastrowid
        conn.commit()
        conn.close()
        return run_id

    def get_run(self, run_id: int) -> dict:
        """Get run by ID, config decoded."""
        conn = self._get_connection()
        cursor = conn.cursor()
        cursor.execute("SELECT * FROM runs WHERE id = ?", (run_id,))
        row = cursor.fetchone()
        conn.close()
        if not row:
            return None
        run = dict(row)
        run["config"] = json.loads(run["config"]) if run["config"] else {}
        return run

    def get_runs(self, command: str = None) -> list:
        """Get all runs, optionally of one command, oldest first."""
        conn = self._get_connection()
        cursor = conn.cursor()
        if command is None:
            cursor.execute("SELECT * FROM runs ORDER BY id")
        else:
            cursor.execute("SELECT * FROM runs WHERE command = ? ORDER BY id", (command,))
        rows = cursor.fetchall()
        conn.close()
        return [dict(row) for row in rows]

    def delete_run(self, run_id: int):
        """Delete a run with its artifacts and reports."""
        conn = self._get_connection()
        cursor = conn.cursor()
        cursor.execute("DELETE FROM runs WHERE id = ?", (run_id,))
        conn.commit()
        conn.close()

    # Artifact operations
    def add_artifacts(self, run_id: int, artifacts: List[Dict]):
        """Record artifacts given as {"role", "path", "sha256"} dicts."""
        conn = self._get_connection()
        cursor = conn.cursor()
        cursor.executemany(
            "INSERT INTO artifacts (run_id, role, path, sha256) VALUES (?, ?, ?, ?)",
            [(run_id, a["role"], a["path"], a.get("sha256")) for a in artifacts]
        )
        conn.commit()
        conn.close()

    def get_artifacts(self, run_id: int) -> list:
        conn = self._get_connection()
        cursor = conn.cursor()
        cursor.execute("SELECT role, path, sha256 FROM artifacts WHERE run_id = ? ORDER BY id", (run_id,))
        rows = cursor.fetchall()
        conn.close()
        return [dict(row) for row in rows]

    # Report operations
    def add_report(self, run_id: int, method: str, oa: float, aa: float, kappa: float, seconds: float) -> int:
        """Record one compare row."""
        conn = self._get_connection()
        cursor = conn.cursor()
        cursor.execute(
            "INSERT INTO reports (run_id, method, oa, aa, kappa, seconds) VALUES (?, ?, ?, ?, ?, ?)",
            (run_id, method, oa, aa, kappa, seconds)
        )
        report_id = cursor.lastrowid
        conn.commit()
        conn.close()
        return report_id

    def get_reports(self, run_id: int) -> list:
        conn = self._get_connection()
        cursor = conn.cursor()
        cursor.execute(
            "SELECT method, oa, aa, kappa, seconds FROM reports WHERE run_id = ? ORDER BY id", (run_id,)
        )
        rows = cursor.fetchall()
        conn.close()
        return [dict(row) for row in rows]

    # Statistics
    def get_method_stats(self) -> dict:
        """Mean OA, AA and kappa per method across all recorded compare runs."""
        conn = self._get_connection()
        cursor = conn.cursor()
        cursor.execute("""
            SELECT method, COUNT(*) AS runs, AVG(oa) AS oa, AVG(aa) AS aa, AVG(kappa) AS kappa
            FROM reports GROUP BY method ORDER BY method
        """)
        rows = cursor.fetchall()
        conn.close()
        return {row["method"]: {"runs": row["runs"], "oa": row["oa"], "aa": row["aa"], "kappa": row["kappa"]}
                for row in rows}
