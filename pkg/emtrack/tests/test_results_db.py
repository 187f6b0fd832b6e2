"""ResultsDB 測試：寫入、查詢、idempotent migration、non-fatal 失敗"""

import sqlite3

import pandas as pd
import pytest

from emtrack.infrastructure.results_db import MIGRATION_COLUMNS, ResultsDB


@pytest.fixture
def db(tmp_path):
    return ResultsDB(str(tmp_path / 'results.db'))


class TestRecordRun:
    """record_run / fetch_runs"""

    def test_record_and_fetch(self, db):
        assert db.record_run({'command': 'track', 'sequence': 'seq.bin', 'n_frames': 100,
                              'ry_mae_deg': 0.01, 'loss_mode': 'kernel-knn', 'sigma': 0.001})
        assert db.record_run({'command': 'eval', 'sequence': 'seq.bin'})
        runs = db.fetch_runs()
        assert len(runs) == 2
        track = db.fetch_runs('track')
        assert track.loc[0, 'ry_mae_deg'] == pytest.approx(0.01)
        assert track.loc[0, 'loss_mode'] == 'kernel-knn'
        assert pd.isna(runs.loc[1, 'rx_mae_deg'])

    def test_duplicate_run_id_ignored(self, db):
        db.record_run({'command': 'track', 'run_id': 'abc'})
        db.record_run({'command': 'track', 'run_id': 'abc'})
        assert len(db.fetch_runs()) == 1

    def test_missing_command_is_non_fatal(self, db):
        assert db.record_run({'sequence': 'x'}) is False

    def test_extra_keys_ignored(self, db):
        assert db.record_run({'command': 'track', 'bogus': 1}) is True
        assert len(db.fetch_runs()) == 1


class TestMigration:
    """舊 schema → 新欄位"""

    def test_adds_missing_columns(self, tmp_path):
        path = str(tmp_path / 'old.db')
        with sqlite3.connect(path) as conn:
            conn.execute("CREATE TABLE runs (id INTEGER PRIMARY KEY AUTOINCREMENT, run_id TEXT UNIQUE, "
                         "command TEXT NOT NULL, sequence TEXT, config_digest TEXT, n_frames INTEGER, "
                         "rx_mae_deg REAL, ry_mae_deg REAL, rz_mae_deg REAL, tx_mae_mm REAL, ty_mae_mm REAL, "
                         "tz_mae_mm REAL, t_angle_mae_deg REAL, baseline_rx_deg REAL, baseline_ry_deg REAL, "
                         "baseline_rz_deg REAL, created_at TEXT)")
        db = ResultsDB(path)
        assert db.record_run({'command': 'solve', 'sigma': 0.02})
        assert db.fetch_runs('solve').loc[0, 'sigma'] == pytest.approx(0.02)

    def test_fresh_db_gets_migrated_columns(self, tmp_path):
        path = str(tmp_path / 'fresh.db')
        ResultsDB(path)
        with sqlite3.connect(path) as conn:
            cols = [row[1] for row in conn.execute("PRAGMA table_info(runs)")]
        # 初版欄位在前，migration 欄位依序附加在後
        assert cols[-len(MIGRATION_COLUMNS):] == [name for name, _ in MIGRATION_COLUMNS]

    def test_reopen_is_idempotent(self, tmp_path):
        path = str(tmp_path / 'r.db')
        ResultsDB(path).record_run({'command': 'track'})
        assert len(ResultsDB(path).fetch_runs()) == 1

    def test_unwritable_path_is_non_fatal(self, tmp_path):
        db = ResultsDB(str(tmp_path / 'missing_dir' / 'r.db'))
        assert db.record_run({'command': 'track'}) is False
        assert db.fetch_runs().empty
