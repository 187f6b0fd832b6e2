"""
Results ledger：每次 track / solve / eval 執行寫一列到 SQLite。
Why: 跨次實驗比較（σ、loss mode、preset）不必重跑，只查表。
"""
import logging
import sqlite3
import uuid
from datetime import datetime, timezone
from typing import Optional

import pandas as pd

logger = logging.getLogger(__name__)

CREATE_TABLE_SQL = """
CREATE TABLE IF NOT EXISTS runs (
    id               INTEGER PRIMARY KEY AUTOINCREMENT,
    run_id           TEXT UNIQUE,
    command          TEXT    NOT NULL,
    sequence         TEXT,
    config_digest    TEXT,
    n_frames         INTEGER,
    rx_mae_deg       REAL,
    ry_mae_deg       REAL,
    rz_mae_deg       REAL,
    tx_mae_mm        REAL,
    ty_mae_mm        REAL,
    tz_mae_mm        REAL,
    t_angle_mae_deg  REAL,
    baseline_rx_deg  REAL,
    baseline_ry_deg  REAL,
    baseline_rz_deg  REAL,
    created_at       TEXT    DEFAULT (datetime('now'))
);
"""

# 初版 schema 之後新增的欄位；CREATE 維持初版，新舊 DB 一律經此補欄
MIGRATION_COLUMNS = (
    ('loss_mode', 'TEXT'),
    ('sigma', 'REAL'),
)

INSERT_SQL = """
INSERT OR IGNORE INTO runs (
    run_id, command, sequence, config_digest, n_frames,
    rx_mae_deg, ry_mae_deg, rz_mae_deg,
    tx_mae_mm, ty_mae_mm, tz_mae_mm, t_angle_mae_deg,
    baseline_rx_deg, baseline_ry_deg, baseline_rz_deg,
    loss_mode, sigma, created_at
) VALUES (
    :run_id, :command, :sequence, :config_digest, :n_frames,
    :rx_mae_deg, :ry_mae_deg, :rz_mae_deg,
    :tx_mae_mm, :ty_mae_mm, :tz_mae_mm, :t_angle_mae_deg,
    :baseline_rx_deg, :baseline_ry_deg, :baseline_rz_deg,
    :loss_mode, :sigma, :created_at
);
"""

_OPTIONAL = (
    'sequence', 'config_digest', 'n_frames',
    'rx_mae_deg', 'ry_mae_deg', 'rz_mae_deg',
    'tx_mae_mm', 'ty_mae_mm', 'tz_mae_mm', 't_angle_mae_deg',
    'baseline_rx_deg', 'baseline_ry_deg', 'baseline_rz_deg',
    'loss_mode', 'sigma',
)


class ResultsDB:
    def __init__(self, db_path: str = "emtrack_results.db"):
        self.db_path = db_path
        self._init_db()

    def _init_db(self):
        try:
            with sqlite3.connect(self.db_path) as conn:
                conn.execute(CREATE_TABLE_SQL)
                # Migration: 後加欄位（idempotent，欄位已存在會靜默跳過）
                for name, sql_type in MIGRATION_COLUMNS:
                    try:
                        conn.execute(f"ALTER TABLE runs ADD COLUMN {name} {sql_type}")
                    except sqlite3.OperationalError:
                        pass  # 欄位已存在，正常跳過
                conn.commit()
            logger.debug(f"ResultsDB initialized: {self.db_path}")
        except Exception as e:
            # Non-fatal: DB failure must not abort an experiment
            logger.error(f"ResultsDB init failed: {e}")

    def record_run(self, data: dict) -> bool:
        """
        Write one run record. Returns True on success.
        Non-fatal: logs error and returns False on failure.
        """
        try:
            data = dict(data)
            if 'command' not in data:
                raise ValueError("record_run needs 'command'")
            data.setdefault('run_id', uuid.uuid4().hex)
            data.setdefault('created_at', datetime.now(timezone.utc).isoformat())
            for key in _OPTIONAL:
                data.setdefault(key, None)
            with sqlite3.connect(self.db_path) as conn:
                conn.execute(INSERT_SQL, data)
                conn.commit()
            logger.info(f"ResultsDB recorded: {data['command']} {data.get('sequence')} run_id={data['run_id'][:8]}")
            return True
        except Exception as e:
            logger.error(f"ResultsDB record_run failed: {e} | data={data}")
            return False

    def fetch_runs(self, command: Optional[str] = None) -> pd.DataFrame:
        """
        Query recorded runs (optionally filtered by command).
        Non-fatal: returns an empty DataFrame on any error.
        """
        try:
            with sqlite3.connect(self.db_path) as conn:
                if command is None:
                    return pd.read_sql_query("SELECT * FROM runs ORDER BY id", conn)
                return pd.read_sql_query("SELECT * FROM runs WHERE command = ? ORDER BY id", conn, params=(command,))
        except Exception as e:
            logger.warning(f"ResultsDB fetch_runs failed: {e}")
            return pd.DataFrame()
