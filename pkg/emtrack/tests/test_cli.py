"""CLI 測試：simulate → track → eval / solve 流程、exit codes、結果 ledger"""

import json

import pytest

from emtrack.cli import main
from emtrack.config import Config
from emtrack.infrastructure.feature_file import read_features
from emtrack.infrastructure.results_db import ResultsDB
from emtrack.infrastructure.trace_io import read_trace

SMALL = ['--frames', '14', '--points', '200', '--seed', '5', '--drift-amp', '0.02']


@pytest.fixture
def cli(tmp_path, restore_config):
    """main() 包一層：固定 log 目錄與測試用 config 檔"""
    cfg = tmp_path / 'cfg.json'
    cfg.write_text(json.dumps({
        'scene': {'descriptor_dim': 16},
        'tracker': {'burn_in': 3},
        'output': {'record_results': True, 'results_db_path': str(tmp_path / 'results.db')},
    }))

    def run(*argv):
        argv = list(argv)
        return main(argv[:1] + ['--config', str(cfg), '--log-dir', str(tmp_path / '.log')] + argv[1:])
    return run


@pytest.fixture
def simulated(cli, tmp_path):
    path = tmp_path / 'seq.bin'
    assert cli('simulate', str(path), *SMALL) == 0
    return path


class TestSimulate:
    """simulate"""

    def test_outputs(self, simulated, capsys):
        seq = read_features(str(simulated))
        assert len(seq) == 14 and seq.descriptor_dim == 16
        assert (simulated.parent / 'seq.bin.gt.csv').exists()
        ref = json.loads((simulated.parent / 'seq.bin.ref.json').read_text())
        assert ref['config']['N_POINTS'] == 200 and 'R' in ref

    def test_deterministic(self, cli, tmp_path, capsys):
        a, b = tmp_path / 'a.bin', tmp_path / 'b.bin'
        assert cli('simulate', str(a), *SMALL) == 0
        assert cli('simulate', str(b), *SMALL) == 0
        assert a.read_bytes() == b.read_bytes()
        digests = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith('config_digest=')]
        assert len(digests) == 2 and digests[0] == digests[1]

    def test_text_form(self, cli, tmp_path):
        path = tmp_path / 'seq.txt'
        assert cli('simulate', str(path), *SMALL) == 0
        assert path.read_text().startswith('TESOFEAT-TEXT 1')

    def test_invalid_points(self, cli, tmp_path):
        assert cli('simulate', str(tmp_path / 'x.bin'), '--points', '0') == 2
        assert not (tmp_path / 'x.bin').exists()

    def test_config_restored_after_run(self, cli, tmp_path):
        sigma = Config.SIGMA
        cli('simulate', str(tmp_path / 'x.bin'), *SMALL, '--sigma', '0.5')
        assert Config.SIGMA == sigma


class TestTrackEval:
    """track → eval"""

    def test_track_writes_trace(self, cli, simulated):
        assert cli('track', str(simulated)) == 0
        tf = read_trace(f"{simulated}.trace.csv")
        assert len(tf.frame) == 14
        assert tf.meta['config']['BURN_IN'] == 3
        assert 'ry_deg' in tf.summary and 'baseline_ry_deg' in tf.summary
        assert tf.reference is not None

    def test_track_deterministic(self, cli, simulated, tmp_path):
        a, b = tmp_path / 'a.csv', tmp_path / 'b.csv'
        assert cli('track', str(simulated), '--out', str(a)) == 0
        assert cli('track', str(simulated), '--out', str(b)) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_track_records_ledger(self, cli, simulated, tmp_path):
        cli('track', str(simulated))
        runs = ResultsDB(str(tmp_path / 'results.db')).fetch_runs('track')
        assert len(runs) == 1 and runs.loc[0, 'sigma'] == pytest.approx(0.001)

    def test_track_frame_log(self, cli, simulated, tmp_path):
        cli('track', str(simulated))
        lines = (tmp_path / '.log' / 'track_frames.log').read_text().splitlines()
        assert len(lines) == 14 and all(ln.startswith('[TRACK]') for ln in lines)
        assert '[TRACK]' not in (tmp_path / '.log' / 'emtrack.log').read_text()

    def test_no_track_baseline(self, cli, simulated, tmp_path):
        out = tmp_path / 'still.csv'
        assert cli('track', str(simulated), '--no-track', '--out', str(out)) == 0
        tf = read_trace(str(out))
        assert not tf.frame['applied'].any()
        assert tf.summary['ry_deg'] == pytest.approx(tf.summary['baseline_ry_deg'])

    def test_eval(self, cli, simulated, capsys):
        cli('track', str(simulated))
        assert cli('eval', f"{simulated}.trace.csv") == 0
        out = capsys.readouterr().out
        assert 'ry_deg=' in out and 'n_frames=11' in out
        assert (simulated.parent / 'seq.bin.trace.csv.summary.csv').exists()

    def test_eval_threshold_failure(self, cli, simulated):
        cli('track', str(simulated))
        assert cli('eval', f"{simulated}.trace.csv", '--max-ry', '0') == 1

    def test_checkpoint_resume(self, cli, simulated, tmp_path):
        ckpt = tmp_path / 'tracker.json'
        assert cli('track', str(simulated), '--checkpoint', str(ckpt)) == 0
        assert json.loads(ckpt.read_text())['frame_count'] == 14
        # 已追蹤完畢：續跑不再處理任何幀
        assert cli('track', str(simulated), '--checkpoint', str(ckpt), '--out', str(tmp_path / 'again.csv')) == 0
        assert len(read_trace(str(tmp_path / 'again.csv')).frame) == 0

    def test_missing_reference(self, cli, simulated, tmp_path):
        (simulated.parent / 'seq.bin.ref.json').unlink()
        assert cli('track', str(simulated)) == 2

    def test_missing_feature_file(self, cli, tmp_path):
        assert cli('track', str(tmp_path / 'ghost.bin')) == 2

    def test_corrupt_feature_file(self, cli, simulated):
        simulated.write_bytes(simulated.read_bytes()[:100])
        assert cli('track', str(simulated)) == 2

    def test_several_files_in_parallel(self, cli, tmp_path):
        paths = [tmp_path / f's{i}.bin' for i in range(2)]
        for i, p in enumerate(paths):
            cli('simulate', str(p), *SMALL[:4], '--seed', str(i))
        assert cli('track', *map(str, paths), '--workers', '2') == 0
        assert all((tmp_path / f's{i}.bin.trace.csv').exists() for i in range(2))


class TestSolve:
    """solve"""

    def test_solve_frame(self, cli, simulated, capsys, tmp_path):
        out = tmp_path / 'calib.json'
        assert cli('solve', str(simulated), '--frame', '3', '--stages', '2', '--out', str(out)) == 0
        rec = json.loads(out.read_text())
        assert rec['frame'] == 3 and len(rec['sigmas']) == 2
        assert len(rec['state']) == 18
        assert 'rotation_error_deg' in rec

    def test_missing_frame(self, cli, simulated):
        assert cli('solve', str(simulated), '--frame', '999') == 2


class TestArguments:
    """argparse / config 錯誤"""

    def test_unknown_command(self, cli):
        assert cli('dance') == 2

    def test_missing_config_file(self, restore_config, tmp_path):
        assert main(['simulate', str(tmp_path / 'x.bin'), '--config', str(tmp_path / 'nope.json'),
                     '--log-dir', str(tmp_path)]) == 2

    def test_bad_loss_mode(self, cli, simulated):
        assert cli('track', str(simulated), '--loss-mode', 'huber') == 2
