"""
emtrack CLI

  python -m emtrack.cli simulate  out.feat  [--preset carla-drift --frames 1000 --seed 7]
  python -m emtrack.cli track     seq.feat [seq2.feat ...] [--sigma 0.001 --k 5 --workers 4]
  python -m emtrack.cli solve     seq.feat --frame 0 [--stages 7 --sigma0 0.02]
  python -m emtrack.cli eval      seq.feat.trace.csv [--max-rx 0.05 ...]
  python -m emtrack.cli experiment tracking_efficacy [--sequences 20]

Exit codes：0 成功，1 執行失敗（含 eval threshold 未過），2 輸入 / 設定錯誤。
"""

import argparse
import io
import json
import logging
import logging.handlers
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from emtrack import __version__
from emtrack.config import Config
from emtrack import experiments
from emtrack.experiments import STUDIES
from emtrack.geometry import (
    essential_from_rt, essential_state_from_matrix, euler_to_matrix, recover_rt, rotation_error_axes,
)
from emtrack.globalopt import solve_detailed
from emtrack.infrastructure.feature_file import get_frame, read_features, write_features
from emtrack.infrastructure.results_db import ResultsDB
from emtrack.infrastructure.trace_io import (
    gt_path_for, read_ground_truth, read_reference, read_trace, ref_path_for,
    write_ground_truth, write_reference, write_trace,
)
from emtrack.losses import KernelConfig
from emtrack.matching import attach_correspondences
from emtrack.metrics import improvement_ratio, latency_xcorr, sequence_precision, summary_rows
from emtrack.persistence import atomic_write_text
from emtrack.simulator import generate_sequence, ground_truth_table
from emtrack.tracker import EssentialTracker, inlier_matches, run_sequence

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INVALID = 2

# flag → Config 屬性
OVERRIDE_FLAGS = {
    'sigma': 'SIGMA',
    'k': 'K',
    'burn_in': 'BURN_IN',
    'seed': 'SEED',
    'preset': 'PRESET',
    'drift_mode': 'DRIFT_MODE',
    'drift_amp': 'DRIFT_AMP',
    'outlier_rate': 'OUTLIER_RATE',
    'noise_px': 'PIXEL_NOISE',
    'loss_mode': 'LOSS_MODE',
    'workers': 'WORKERS',
    'frames': 'N_FRAMES',
    'points': 'N_POINTS',
}


# ==================== Logging ====================

class _TrackFilter(logging.Filter):
    """[TRACK] 逐幀日誌只進 track_frames.log"""

    def __init__(self, keep: bool):
        super().__init__()
        self.keep = keep

    def filter(self, record):
        msg = record.getMessage()
        is_track = isinstance(msg, str) and '[TRACK]' in msg
        return is_track if self.keep else not is_track


def setup_logging(debug: bool = False, log_dir: Optional[str] = None) -> List[logging.Handler]:
    """
    console + .log/emtrack.log（5MB × 3）+ .log/track_frames.log

    Returns:
        新增到 root logger 的 handlers（main 結束時移除）
    """
    log_path = Path(log_dir or Config.LOG_DIR)
    log_path.mkdir(parents=True, exist_ok=True)
    fmt = logging.Formatter('%(asctime)s [%(levelname)s] %(message)s')

    console = logging.StreamHandler()
    main_file = logging.handlers.RotatingFileHandler(
        str(log_path / 'emtrack.log'), maxBytes=5*1024*1024, backupCount=3, encoding='utf-8'
    )
    for h in (console, main_file):
        h.setFormatter(fmt)
        h.addFilter(_TrackFilter(keep=False))

    # [TRACK] 日誌分流到 .log/track_frames.log
    track_handler = logging.handlers.RotatingFileHandler(
        str(log_path / 'track_frames.log'), maxBytes=5*1024*1024, backupCount=5, encoding='utf-8'
    )
    track_handler.setFormatter(logging.Formatter('%(message)s'))
    track_handler.addFilter(_TrackFilter(keep=True))
    track_handler.setLevel(logging.INFO)

    root = logging.getLogger()
    root.setLevel(logging.DEBUG if debug else logging.INFO)
    handlers = [console, main_file, track_handler]
    for h in handlers:
        root.addHandler(h)
    return handlers


# ==================== Parser ====================

def _common_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument('--config', help='JSON 設定檔（預設 emtrack_config.json，若存在）')
    p.add_argument('--debug', action='store_true', help='Debug mode')
    p.add_argument('--log-dir', help='log 目錄（預設 <project>/.log）')
    p.add_argument('--sigma', type=float, help='kernel bandwidth σ')
    p.add_argument('--k', type=int, help='kNN 的 k')
    p.add_argument('--burn-in', type=int, dest='burn_in')
    p.add_argument('--seed', type=int)
    p.add_argument('--preset')
    p.add_argument('--drift-mode', dest='drift_mode')
    p.add_argument('--drift-amp', type=float, dest='drift_amp', help='度 / frame / DoF')
    p.add_argument('--outlier-rate', type=float, dest='outlier_rate')
    p.add_argument('--noise-px', type=float, dest='noise_px')
    p.add_argument('--loss-mode', dest='loss_mode')
    p.add_argument('--workers', type=int)
    p.add_argument('--frames', type=int, help='序列幀數')
    p.add_argument('--points', type=int, help='每幀場景點數')
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog='emtrack', description=f'Online essential-matrix tracker {__version__}')
    parser.add_argument('--version', action='version', version=f'emtrack {__version__}')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('simulate', parents=[common], help='合成序列 → feature file + sidecars')
    p.add_argument('out', help='輸出 feature file（.txt → text form）')

    p = sub.add_parser('track', parents=[common], help='逐幀追蹤 → trace CSV')
    p.add_argument('features', nargs='+')
    p.add_argument('--reference', help='reference 外參 JSON（預設 <features>.ref.json）')
    p.add_argument('--out', help='trace CSV（單一序列時；預設 <features>.trace.csv）')
    p.add_argument('--checkpoint', help='filter checkpoint 路徑（存在則續跑）')
    p.add_argument('--no-track', action='store_true', help='不追蹤 baseline（manifold 固定在 reference）')

    p = sub.add_parser('solve', parents=[common], help='單幀 annealed DE 重新校正')
    p.add_argument('features')
    p.add_argument('--frame', type=int, required=True)
    p.add_argument('--reference')
    p.add_argument('--stages', type=int)
    p.add_argument('--sigma0', type=float)
    p.add_argument('--out', help='calibration record JSON')

    p = sub.add_parser('eval', parents=[common], help='trace CSV 對 ground truth 評估')
    p.add_argument('trace')
    p.add_argument('--gt', help='ground-truth sidecar（預設由 trace header 推得）')
    p.add_argument('--out', help='summary CSV（預設 <trace>.summary.csv）')
    p.add_argument('--max-lag', type=int, default=10)
    p.add_argument('--max-rx', type=float)
    p.add_argument('--max-ry', type=float)
    p.add_argument('--max-rz', type=float)
    p.add_argument('--max-tangle', type=float)

    p = sub.add_parser('experiment', parents=[common], help='可重現研究')
    p.add_argument('study', choices=STUDIES)
    p.add_argument('--sequences', type=int, default=None)
    p.add_argument('--out', help='逐 sequence 表格 CSV')
    p.add_argument('--strict', action='store_true', help='study 未通過時 exit 1')
    return parser


def apply_cli_config(args: argparse.Namespace):
    """--config（或專案根目錄的 emtrack_config.json）→ flag overrides → validate"""
    if args.config:
        if not Path(args.config).exists():
            raise ValueError(f"config file not found: {args.config}")
        Config.load_from_json(args.config)
    else:
        default = Path(Config._PROJECT_ROOT) / 'emtrack_config.json'
        if default.exists():
            Config.load_from_json(str(default))
    overrides = {OVERRIDE_FLAGS[k]: getattr(args, k, None) for k in OVERRIDE_FLAGS}
    if getattr(args, 'stages', None) is not None:
        overrides['DE_STAGES'] = args.stages
    if getattr(args, 'sigma0', None) is not None:
        overrides['DE_SIGMA0'] = args.sigma0
    Config.apply_overrides(overrides)


def _meta(reference: Tuple[np.ndarray, np.ndarray], **extra) -> Dict:
    meta = {
        'emtrack_version': __version__,
        'config_digest': Config.digest(),
        'config': Config.effective(),
        'reference': {'R': np.asarray(reference[0]).tolist(), 't': np.asarray(reference[1]).tolist()},
    }
    meta.update(extra)
    return meta


def _record(data: dict):
    if Config.RECORD_RESULTS:
        ResultsDB(Config.RESULTS_DB_PATH).record_run(data)


# ==================== simulate ====================

def cmd_simulate(args) -> int:
    scene = Config.scene_config()
    drift = Config.drift_schedule()
    n = int(Config.N_FRAMES)

    frames = generate_sequence(scene, drift, n, workers=int(Config.WORKERS))
    write_features(args.out, scene.K0, scene.K1, scene.descriptor_dim, frames, n)

    R_gt, t_gt, cum = ground_truth_table(scene, drift, n)
    write_ground_truth(gt_path_for(args.out), R_gt, t_gt, cum)
    R_ref, t_ref = scene.reference_pose()
    write_reference(ref_path_for(args.out), R_ref, t_ref, extra={
        'emtrack_version': __version__,
        'config_digest': Config.digest(),
        'config': Config.effective(),
    })

    digest = Config.digest()
    logger.info(f"✅ simulate: {n} frames → {args.out}（preset={scene.preset_name}, seed={scene.seed}）")
    print(f"config_digest={digest}")
    return EXIT_OK


# ==================== track ====================

def _load_gt(feature_path: str, frames) -> Optional[Dict[int, Tuple[np.ndarray, np.ndarray]]]:
    sidecar = Path(gt_path_for(feature_path))
    if sidecar.exists():
        idx, R, t, _ = read_ground_truth(sidecar)
        return {int(i): (r, tt) for i, r, tt in zip(idx, R, t)}
    if frames and all(f.pose is not None for f in frames):
        return {f.frame_index: f.pose for f in frames}
    return None


def _reference_for(feature_path: str, explicit: Optional[str]) -> Tuple[np.ndarray, np.ndarray]:
    path = explicit or ref_path_for(feature_path)
    if not Path(path).exists():
        raise ValueError(f"missing reference calibration for {feature_path} (looked for {path})")
    return read_reference(path)


def track_one(feature_path: str, out_path: str, reference_path: Optional[str] = None,
              checkpoint: Optional[str] = None, track: bool = True) -> Dict[str, float]:
    """追蹤單一 feature file，寫出 trace CSV；回傳 summary footer"""
    seq = read_features(feature_path)
    reference = _reference_for(feature_path, reference_path)
    options = Config.tracker_options()
    tracker = EssentialTracker(reference, seq.K0, seq.K1, Config.kernel_config(), options,
                               track=track, config_hash=Config.config_hash64())
    start = 0
    if checkpoint and tracker.load_checkpoint(checkpoint):
        start = tracker.filter.frame_count
        logger.info(f"ℹ️ 從 checkpoint 續跑：frame_count={start}")

    trace = run_sequence(seq.frames, tracker, checkpoint=checkpoint, start_frame=start)

    summary: Dict[str, float] = {'frames': float(len(trace)),
                                 'applied': float(trace['applied'].sum()) if len(trace) else 0.0}
    gt_map = _load_gt(feature_path, seq.frames)
    record = {'command': 'track', 'sequence': str(feature_path), 'config_digest': Config.digest(),
              'loss_mode': tracker.kernel.loss_mode.value, 'sigma': tracker.kernel.sigma}
    if gt_map is not None and len(tracker.records) > options.burn_in:
        gt = [gt_map[r.frame] for r in tracker.records]
        tracked = sequence_precision(tracker.estimates(), gt, options.burn_in, options.euler_convention)
        still = [tuple(reference)] * len(gt)
        base = sequence_precision(still, gt, options.burn_in, options.euler_convention)
        summary.update(dict(summary_rows(tracked)))
        summary.update(dict(summary_rows(base, prefix='baseline_')))
        ratio = improvement_ratio(base, tracked)
        summary.update({f'improvement_r{a}': float(v) for a, v in zip('xyz', ratio)})
        record.update({
            'n_frames': tracked.n_frames,
            'rx_mae_deg': tracked.rx_deg, 'ry_mae_deg': tracked.ry_deg, 'rz_mae_deg': tracked.rz_deg,
            'tx_mae_mm': tracked.tx_mm, 'ty_mae_mm': tracked.ty_mm, 'tz_mae_mm': tracked.tz_mm,
            't_angle_mae_deg': tracked.t_angle_deg,
            'baseline_rx_deg': base.rx_deg, 'baseline_ry_deg': base.ry_deg, 'baseline_rz_deg': base.rz_deg,
        })
        logger.info(f"✅ {Path(feature_path).name}: MAE R={np.round(tracked.rotation, 4).tolist()}° "
                    f"(no tracking {np.round(base.rotation, 4).tolist()}°)")

    write_trace(out_path, trace, _meta(reference, feature_file=str(feature_path), tracking=track), summary)
    _record(record)
    return summary


def cmd_track(args) -> int:
    files = list(args.features)
    if len(files) > 1 and (args.out or args.checkpoint):
        raise ValueError("--out / --checkpoint need a single feature file")
    missing = [f for f in files if not Path(f).exists()]
    if missing:
        raise ValueError(f"feature file not found: {missing}")

    def job(path: str):
        out = args.out or f"{path}.trace.csv"
        return track_one(path, out, args.reference, args.checkpoint, track=not args.no_track)

    workers = min(int(Config.WORKERS), len(files))
    if workers <= 1:
        for f in files:
            job(f)
    else:
        # 每條序列各自一個 tracker instance
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(job, files))
    return EXIT_OK


# ==================== solve ====================

def cmd_solve(args) -> int:
    seq = read_features(args.features)
    frame = get_frame(seq, args.frame)
    if frame is None:
        raise ValueError(f"frame {args.frame} not in {args.features} ({len(seq)} frames)")
    reference = _reference_for(args.features, args.reference)
    de = Config.de_config()
    kernel = KernelConfig(sigma=de.sigma0, loss_mode=Config.LOSS_MODE, min_confidence=Config.MIN_CONFIDENCE)

    frame = attach_correspondences(frame, seq.K0, seq.K1, int(Config.K), bool(Config.UNIT_NORMALIZE))
    initial = essential_state_from_matrix(essential_from_rt(*reference))
    res = solve_detailed(initial, frame, de, kernel)
    inliers = inlier_matches(res.state, frame, float(Config.INLIER_SIGMAS) * res.sigmas[-1])
    R, t = recover_rt(res.state, inliers, reference)

    out = {
        'emtrack_version': __version__,
        'config_digest': Config.digest(),
        'frame': int(args.frame),
        'R': R.tolist(),
        't': t.tolist(),
        'rotation_vs_reference_deg': rotation_error_axes(R, reference[0], Config.EULER_CONVENTION).tolist(),
        'sigmas': res.sigmas,
        'stage_thetas': [th.tolist() for th in res.stage_thetas],
        'stage_losses': res.stage_losses,
        'state': res.state.to_list(),
    }
    if frame.pose is not None:
        err = rotation_error_axes(R, frame.pose[0], Config.EULER_CONVENTION)
        out['rotation_error_deg'] = err.tolist()
        logger.info(f"✅ DE frame {args.frame}: |error| = {np.round(np.abs(err), 4).tolist()}°")
    text = json.dumps(out, indent=2)
    if args.out:
        atomic_write_text(args.out, text)
    print(text)
    _record({'command': 'solve', 'sequence': f"{args.features}#{args.frame}", 'config_digest': Config.digest(),
             'loss_mode': kernel.loss_mode.value, 'sigma': de.sigma0, 'n_frames': 1})
    return EXIT_OK


# ==================== eval ====================

def trace_estimates(trace: pd.DataFrame, reference: Tuple[np.ndarray, np.ndarray],
                    convention: str = 'XYZ') -> List[Tuple[np.ndarray, np.ndarray]]:
    """trace 欄位 → (R, t)：R = Euler(rx, ry, rz)·R_ref，t = t_mm / ‖t_mm‖"""
    R_ref = np.asarray(reference[0], dtype=float)
    dev = trace[['rx_deg', 'ry_deg', 'rz_deg']].to_numpy(dtype=float)
    t_mm = trace[['tx_mm', 'ty_mm', 'tz_mm']].to_numpy(dtype=float)
    out = []
    for d, tm in zip(dev, t_mm):
        out.append((euler_to_matrix(d, convention) @ R_ref, tm / np.linalg.norm(tm)))
    return out


def evaluate_trace(trace_path: str, gt_path: Optional[str] = None, max_lag: int = 10) -> Dict[str, float]:
    tf = read_trace(trace_path)
    if tf.reference is None:
        raise ValueError(f"{trace_path}: trace header has no reference pose")
    if gt_path is None:
        feature = tf.meta.get('feature_file')
        if not feature:
            raise ValueError(f"{trace_path}: no --gt given and trace header names no feature file")
        gt_path = gt_path_for(feature)
    if not Path(gt_path).exists():
        raise ValueError(f"ground-truth sidecar not found: {gt_path}")

    cfg = tf.meta.get('config') or {}
    burn_in = int(cfg.get('BURN_IN', Config.BURN_IN))
    convention = str(cfg.get('EULER_CONVENTION', Config.EULER_CONVENTION))

    idx, R_gt, t_gt, drift = read_ground_truth(gt_path)
    gt_map = {int(i): (r, t, d) for i, r, t, d in zip(idx, R_gt, t_gt, drift)}
    frames = tf.frame['frame'].astype(int).tolist()
    unknown = [f for f in frames if f not in gt_map]
    if unknown:
        raise ValueError(f"trace frames missing from ground truth: {unknown[:5]}")

    est = trace_estimates(tf.frame, tf.reference, convention)
    gt = [gt_map[f][:2] for f in frames]
    summary = dict(summary_rows(sequence_precision(est, gt, burn_in, convention)))

    dev = tf.frame[['rx_deg', 'ry_deg', 'rz_deg']].to_numpy(dtype=float)[burn_in:]
    gt_drift = np.array([gt_map[f][2] for f in frames])[burn_in:]
    for axis, name in enumerate('xyz'):
        try:
            lag = latency_xcorr(dev[:, axis], gt_drift[:, axis], max_lag)[0]
            summary[f'latency_r{name}'] = float(lag)
        except ValueError as e:
            logger.debug(f"latency r{name} skipped: {e}")
    return summary


def cmd_eval(args) -> int:
    summary = evaluate_trace(args.trace, args.gt, args.max_lag)
    out = args.out or f"{args.trace}.summary.csv"
    buf = io.StringIO()
    pd.DataFrame({'metric': list(summary), 'value': list(summary.values())}).to_csv(
        buf, index=False, float_format='%.12g', lineterminator='\n')
    atomic_write_text(out, buf.getvalue())

    thresholds = {'rx_deg': args.max_rx, 'ry_deg': args.max_ry, 'rz_deg': args.max_rz,
                  't_angle_deg': args.max_tangle}
    failed = [f"{k}={summary[k]:.5f} > {v}" for k, v in thresholds.items() if v is not None and summary[k] > v]
    _record({'command': 'eval', 'sequence': str(args.trace), 'config_digest': Config.digest(),
             'n_frames': int(summary['n_frames']), 'rx_mae_deg': summary['rx_deg'],
             'ry_mae_deg': summary['ry_deg'], 'rz_mae_deg': summary['rz_deg'],
             'tx_mae_mm': summary['tx_mm'], 'ty_mae_mm': summary['ty_mm'], 'tz_mae_mm': summary['tz_mm'],
             't_angle_mae_deg': summary['t_angle_deg']})
    for k, v in summary.items():
        print(f"{k}={v:.6g}")
    if failed:
        logger.error(f"❌ threshold 未通過: {failed}")
        return EXIT_FAILURE
    return EXIT_OK


# ==================== experiment ====================

def cmd_experiment(args) -> int:
    scene = Config.scene_config()
    drift = Config.drift_schedule()
    kernel = Config.kernel_config()
    options = Config.tracker_options()
    n_frames = int(Config.N_FRAMES)
    workers = int(Config.WORKERS)
    n = args.sequences

    if args.study == 'tracking_efficacy':
        res = experiments.tracking_efficacy(scene, drift, n or 20, n_frames, kernel, options, workers)
    elif args.study == 'bias_study':
        res = experiments.bias_study(scene, n or 20, n_frames, kernel, options, workers)
    elif args.study == 'latency_study':
        res = experiments.latency_study(scene, drift, n or 20, n_frames, kernel=kernel, options=options,
                                        workers=workers)
    elif args.study == 'de_recovery':
        res = experiments.de_recovery(scene, Config.de_config(), n or 20, float(Config.DE_MAX_DECAL_DEG),
                                      k=int(Config.K), loss_mode=Config.LOSS_MODE, workers=workers)
    elif args.study == 'robustness_ablation':
        res = experiments.robustness_ablation(scene, drift, n or 10, n_frames, sigma=kernel.sigma,
                                              options=options, workers=workers)
    elif args.study == 'sigma_sweep':
        res = experiments.sigma_sweep(scene, drift, n_sequences=n or 3, n_frames=n_frames,
                                      options=options, workers=workers)
    else:
        res = experiments.timing_profile(scene, n_frames=min(n_frames, 200), k=options.k,
                                         sigma=kernel.sigma)

    if args.out:
        buf = io.StringIO()
        res.table.to_csv(buf, index=False, float_format='%.12g', lineterminator='\n')
        atomic_write_text(args.out, buf.getvalue())
    for k, v in res.summary.items():
        print(f"{res.name}.{k}={v:.6g}")
    status = {True: '✅ passed', False: '⚠️ not passed', None: 'ℹ️ no criterion'}[res.passed]
    logger.info(f"{status}: {res.name}")
    return EXIT_FAILURE if (args.strict and res.passed is False) else EXIT_OK


COMMANDS = {
    'simulate': cmd_simulate,
    'track': cmd_track,
    'solve': cmd_solve,
    'eval': cmd_eval,
    'experiment': cmd_experiment,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_INVALID

    handlers = setup_logging(args.debug, args.log_dir)
    snapshot = Config.snapshot()
    try:
        apply_cli_config(args)
        return COMMANDS[args.command](args)
    except ValueError as e:
        logger.error(f"❌ 輸入錯誤: {e}")
        return EXIT_INVALID
    except Exception as e:
        logger.error(f"❌ {args.command} 失敗: {e}", exc_info=args.debug)
        return EXIT_FAILURE
    finally:
        Config.restore(snapshot)
        root = logging.getLogger()
        for h in handlers:
            root.removeHandler(h)
            h.close()


if __name__ == "__main__":
    sys.exit(main())
