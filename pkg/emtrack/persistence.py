"""
Tracker 持久化層

checkpoint 讀寫，確保長序列中斷後可續跑。
採用 atomic write（temp file + rename）避免寫入過程中 crash 造成檔案損壞。

Binary layout（little-endian）：
    magic       8B   b"EMTCKPT\\0"
    version     u16  (= 1)
    reserved    u16
    frame_count u64
    samples     u64
    updates     u64
    config_hash u64
    38 × f64         g(5) v(5) h(5) m(5) U(9, row-major) V(9, row-major)

Text form（副檔名 .json）：{"schema_version": 1, "frame_count", ..., "g": [...], "U": [[...]], ...}
"""

import json
import logging
import os
import struct
import uuid
from contextlib import contextmanager
from dataclasses import dataclass
from datetime import datetime
from typing import IO, Any, Dict, Iterator, Optional

import numpy as np

from emtrack.filter import FilterState
from emtrack.geometry import EssentialState

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"EMTCKPT\x00"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct('<8sHHQQQQ')
N_SCALARS = 38


class CheckpointError(ValueError):
    """checkpoint 檔案損壞或格式不符"""


@contextmanager
def atomic_open(path: str, mode: str = 'wb', encoding: Optional[str] = None) -> Iterator[IO]:
    """
    temp file（同目錄）→ flush + fsync → os.replace

    with 區塊內丟出例外時原檔案不受影響，temp file 會被清掉。
    """
    path = os.path.expanduser(str(path))
    dir_path = os.path.dirname(os.path.abspath(path))
    os.makedirs(dir_path, exist_ok=True)
    tmp_path = os.path.join(dir_path, f'.{os.path.basename(path)}.tmp_{uuid.uuid4().hex[:8]}')
    try:
        with open(tmp_path, mode, encoding=encoding, newline='' if 'b' not in mode else None) as tmp_file:
            yield tmp_file
            tmp_file.flush()
            os.fsync(tmp_file.fileno())
        os.replace(tmp_path, path)
    finally:
        if os.path.exists(tmp_path):
            try:
                os.remove(tmp_path)
            except OSError:
                pass


def atomic_write_bytes(path: str, data: bytes) -> None:
    with atomic_open(path, 'wb') as f:
        f.write(data)


def atomic_write_text(path: str, text: str, encoding: str = 'utf-8') -> None:
    atomic_write_bytes(path, text.encode(encoding))


@dataclass
class Checkpoint:
    filter: FilterState
    manifold: EssentialState
    config_hash: int
    version: int = CHECKPOINT_VERSION


def encode_checkpoint(filt: FilterState, manifold: EssentialState, config_hash: int) -> bytes:
    values = np.concatenate([filt.to_vector(), np.asarray(manifold.to_list())])
    if values.size != N_SCALARS:
        raise CheckpointError(f"checkpoint expects {N_SCALARS} scalars, got {values.size}")
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, 0, filt.frame_count,
                          filt.samples, filt.updates, int(config_hash) & 0xFFFFFFFFFFFFFFFF)
    return header + values.astype('<f8').tobytes()


def decode_checkpoint(data: bytes, **filter_options) -> Checkpoint:
    if len(data) < _HEADER.size + 8 * N_SCALARS:
        raise CheckpointError(f"checkpoint truncated ({len(data)} bytes)")
    magic, version, _reserved, frame_count, samples, updates, config_hash = _HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version > CHECKPOINT_VERSION:
        logger.warning(
            f"⚠️ checkpoint version={version} > expected {CHECKPOINT_VERSION}, "
            f"attempting to load (may have compatibility issues)"
        )
    vals = np.frombuffer(data, dtype='<f8', count=N_SCALARS, offset=_HEADER.size).astype(float)
    if not np.all(np.isfinite(vals)):
        raise CheckpointError("checkpoint contains non-finite values")
    filt = FilterState(
        g=vals[0:5], v=vals[5:10], h=vals[10:15], m=vals[15:20],
        frame_count=int(frame_count), samples=int(samples), updates=int(updates),
        **filter_options,
    )
    try:
        manifold = EssentialState.from_list(vals[20:38])
    except ValueError as e:
        raise CheckpointError(f"checkpoint manifold invalid: {e}") from e
    return Checkpoint(filter=filt, manifold=manifold, config_hash=int(config_hash), version=int(version))


def checkpoint_to_dict(filt: FilterState, manifold: EssentialState, config_hash: int) -> Dict[str, Any]:
    d = {"schema_version": CHECKPOINT_VERSION, "config_hash": f"{int(config_hash):016x}"}
    d.update(filt.to_dict())
    d["U"] = manifold.U.tolist()
    d["V"] = manifold.V.tolist()
    return d


def checkpoint_from_dict(raw: Dict[str, Any], **filter_options) -> Checkpoint:
    try:
        version = int(raw.get('schema_version', 1))
        if version > CHECKPOINT_VERSION:
            logger.warning(
                f"⚠️ checkpoint schema_version={version} > expected {CHECKPOINT_VERSION}, "
                f"attempting to load (may have compatibility issues)"
            )
        filt = FilterState.from_dict(raw, **filter_options)
        manifold = EssentialState(np.asarray(raw['U'], dtype=float), np.asarray(raw['V'], dtype=float))
        return Checkpoint(filter=filt, manifold=manifold, config_hash=int(str(raw.get('config_hash', '0')), 16),
                          version=version)
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"checkpoint JSON invalid: {e}") from e


class CheckpointStore:
    """Tracker checkpoint 管理（.json → 文字格式，其餘 → binary）"""

    def __init__(self, file_path: str = "tracker.ckpt"):
        self.file_path = os.path.expanduser(str(file_path))
        self.encoding = 'utf-8'

    @property
    def is_text(self) -> bool:
        return self.file_path.lower().endswith('.json')

    def exists(self) -> bool:
        return os.path.exists(self.file_path)

    def save(self, filt: FilterState, manifold: EssentialState, config_hash: int = 0) -> bool:
        """
        atomic 寫入 checkpoint

        Returns:
            bool: 成功 True，失敗 False
        """
        try:
            if self.is_text:
                text = json.dumps(checkpoint_to_dict(filt, manifold, config_hash), indent=2, ensure_ascii=False)
                atomic_write_text(self.file_path, text, self.encoding)
            else:
                atomic_write_bytes(self.file_path, encode_checkpoint(filt, manifold, config_hash))
            logger.debug(f"✅ Checkpoint saved: frame_count={filt.frame_count} → {self.file_path}")
            return True
        except Exception as e:
            logger.error(f"❌ Failed to save checkpoint: {e}")
            return False

    def load(self, **filter_options) -> Optional[Checkpoint]:
        """
        讀取 checkpoint；檔案不存在回傳 None

        Raises:
            CheckpointError: 檔案損壞（損壞檔會先備份為 .corrupted.<ts>）
        """
        if not self.exists():
            logger.info(f"ℹ️ checkpoint {self.file_path} not found, starting fresh")
            return None
        try:
            if self.is_text:
                with open(self.file_path, 'r', encoding=self.encoding) as f:
                    ckpt = checkpoint_from_dict(json.load(f), **filter_options)
            else:
                with open(self.file_path, 'rb') as f:
                    ckpt = decode_checkpoint(f.read(), **filter_options)
        except (CheckpointError, json.JSONDecodeError, UnicodeDecodeError) as e:
            logger.error(f"❌ checkpoint corrupted: {e}")
            backup_path = f"{self.file_path}.corrupted.{int(datetime.now().timestamp())}"
            try:
                os.rename(self.file_path, backup_path)
                logger.warning(f"⚠️ Corrupted file backed up to {backup_path}")
            except OSError:
                pass
            raise CheckpointError(str(e)) from e
        logger.info(f"✅ Loaded checkpoint (v{ckpt.version}) at frame_count={ckpt.filter.frame_count}")
        return ckpt

    def backup(self) -> Optional[str]:
        """
        備份當前 checkpoint

        Returns:
            備份檔案路徑，失敗則回傳 None
        """
        if not self.exists():
            return None
        try:
            timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
            backup_path = f"{self.file_path}.backup.{timestamp}"
            with open(self.file_path, 'rb') as src:
                atomic_write_bytes(backup_path, src.read())
            logger.info(f"✅ Backup created: {backup_path}")
            return backup_path
        except Exception as e:
            logger.error(f"❌ Failed to backup checkpoint: {e}")
            return None
