"""
Trace CSV / ground-truth sidecar / reference calibration 的讀寫

Trace CSV：
  # emtrack_version=<v>
  # config=<effective config JSON>
  # reference=<{"R": [[...]], "t": [...]}>
  frame,rx_deg,ry_deg,rz_deg,tx_mm,ty_mm,tz_mm,loss,nu1..nu5,m1..m5,applied,dtheta1..dtheta5,skipped
  ...
  # summary.<key>=<value>

rx/ry/rz：tracked R 相對 reference 的 XYZ Euler 偏差（度）
tx/ty/tz：tracked 單位 t 乘上 reference baseline（mm，與 t_ref 同向）
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from emtrack.geometry import essential_state_from_matrix, recover_rt
from emtrack.persistence import atomic_write_text

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.12g'

TRACE_COLUMNS = (
    ['frame', 'rx_deg', 'ry_deg', 'rz_deg', 'tx_mm', 'ty_mm', 'tz_mm', 'loss']
    + [f'nu{i}' for i in range(1, 6)]
    + [f'm{i}' for i in range(1, 6)]
    + ['applied']
    + [f'dtheta{i}' for i in range(1, 6)]
    + ['skipped']
)

GT_COLUMNS = (
    ['frame']
    + [f'r{i}{j}' for i in range(3) for j in range(3)]
    + ['t0', 't1', 't2', 'drift_x_deg', 'drift_y_deg', 'drift_z_deg']
)


@dataclass
class TraceFile:
    frame: pd.DataFrame
    meta: Dict[str, Any] = field(default_factory=dict)
    summary: Dict[str, float] = field(default_factory=dict)

    @property
    def reference(self) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        ref = self.meta.get('reference')
        if not ref:
            return None
        return np.asarray(ref['R'], dtype=float), np.asarray(ref['t'], dtype=float)


def _meta_line(key: str, value: Any) -> str:
    text = value if isinstance(value, str) else json.dumps(value, sort_keys=True, separators=(',', ':'))
    return f"# {key}={text}\n"


def _fmt(v) -> str:
    return FLOAT_FORMAT % v if isinstance(v, (float, np.floating)) else str(v)


def write_trace(path, df: pd.DataFrame, meta: Dict[str, Any], summary: Optional[Dict[str, float]] = None) -> None:
    """atomic 寫出 trace CSV（header meta + 表格 + footer summary）"""
    missing = [c for c in TRACE_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"trace DataFrame missing columns: {missing}")
    buf = io.StringIO()
    for key, value in meta.items():
        buf.write(_meta_line(key, value))
    out = df[TRACE_COLUMNS].copy()
    out['applied'] = out['applied'].astype(int)
    out['skipped'] = out['skipped'].astype(int)
    out.to_csv(buf, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
    for key, value in (summary or {}).items():
        buf.write(f"# summary.{key}={_fmt(value)}\n")
    atomic_write_text(path, buf.getvalue())


def read_trace(path) -> TraceFile:
    meta: Dict[str, Any] = {}
    summary: Dict[str, float] = {}
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            if not line.startswith('#'):
                continue
            key, _, value = line[1:].strip().partition('=')
            if key.startswith('summary.'):
                try:
                    summary[key[len('summary.'):]] = float(value)
                except ValueError:
                    summary[key[len('summary.'):]] = value
                continue
            try:
                meta[key] = json.loads(value)
            except json.JSONDecodeError:
                meta[key] = value
    df = pd.read_csv(path, comment='#')
    missing = [c for c in TRACE_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: not a trace CSV (missing {missing})")
    return TraceFile(frame=df, meta=meta, summary=summary)


# ==================== Ground truth sidecar ====================

def gt_path_for(feature_path) -> str:
    return f"{feature_path}.gt.csv"


def ref_path_for(feature_path) -> str:
    return f"{feature_path}.ref.json"


def write_ground_truth(path, R_list: List[np.ndarray], t_list: List[np.ndarray], drift_deg: np.ndarray) -> None:
    rows = [
        [s, *np.asarray(R).reshape(9), *np.asarray(t).reshape(3), *np.asarray(d).reshape(3)]
        for s, (R, t, d) in enumerate(zip(R_list, t_list, drift_deg))
    ]
    df = pd.DataFrame(rows, columns=GT_COLUMNS)
    df['frame'] = df['frame'].astype(int)
    buf = io.StringIO()
    df.to_csv(buf, index=False, float_format='%.17g', lineterminator='\n')
    atomic_write_text(path, buf.getvalue())


def read_ground_truth(path) -> Tuple[pd.Series, List[np.ndarray], List[np.ndarray], np.ndarray]:
    """Returns: (frame index, R_gt list, t_gt list, cumulative drift (n, 3))"""
    df = pd.read_csv(path)
    missing = [c for c in GT_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: not a ground-truth sidecar (missing {missing})")
    R = df[GT_COLUMNS[1:10]].to_numpy(dtype=float).reshape(-1, 3, 3)
    t = df[['t0', 't1', 't2']].to_numpy(dtype=float)
    drift = df[['drift_x_deg', 'drift_y_deg', 'drift_z_deg']].to_numpy(dtype=float)
    return df['frame'], list(R), list(t), drift


# ==================== Reference calibration ====================

def write_reference(path, R: np.ndarray, t: np.ndarray, extra: Optional[Dict[str, Any]] = None) -> None:
    payload = {"schema_version": 1, "R": np.asarray(R).tolist(), "t": np.asarray(t).reshape(3).tolist()}
    payload.update(extra or {})
    atomic_write_text(path, json.dumps(payload, indent=2, ensure_ascii=False))


def read_reference(path) -> Tuple[np.ndarray, np.ndarray]:
    """
    讀取 reference (R, t)；檔案只給 E 時分解四組候選，取最小旋轉角、t 與 t_hint 同向者

    Raises:
        ValueError: 缺少 R/t 與 E
    """
    with open(path, 'r', encoding='utf-8') as f:
        raw = json.load(f)
    if 'R' in raw and 't' in raw:
        return np.asarray(raw['R'], dtype=float), np.asarray(raw['t'], dtype=float).reshape(3)
    if 'E' in raw:
        state = essential_state_from_matrix(np.asarray(raw['E'], dtype=float))
        hint = raw.get('t_hint')
        ref = None
        if hint is not None:
            ref = (np.eye(3), np.asarray(hint, dtype=float))
        R, t = recover_rt(state, None, ref or (np.eye(3), np.array([-1.0, 0.0, 0.0])))
        logger.info("ℹ️ reference 由 E 分解（baseline 長度未知，取單位長度）")
        return R, t
    raise ValueError(f"{path}: reference file needs 'R' and 't' (or 'E')")
