"""
Feature file codec（binary + 等價的 line-oriented text form）

Binary（little-endian）：
  header
    magic           8B   b"TESOFEAT"
    version         u16  (= 1)
    descriptor_dim  u16
    n_frames        u32
    K0, K1          5 × f64 each（fx, fy, cx, cy, skew）
  per frame
    frame_index, n_left, n_right, n_pairs, flags    5 × u32（flags bit0 = pose present）
    kps_left   n_left × 2 f32（u, v）
    kps_right  n_right × 2 f32
    desc_left  n_left × dim f32
    desc_right n_right × dim f32
    pose       12 f64（R row-major, t）     僅 flags bit0
    pairs      n_pairs × 2 u32（left, right）

Text（副檔名 .txt）：
  TESOFEAT-TEXT 1
  dim <d>
  frames <n>
  K0 fx fy cx cy skew
  K1 fx fy cx cy skew
  frame <index> <n_left> <n_right> <n_pairs> <flags>
  L u v            × n_left
  R u v            × n_right
  DL d1 … dd       × n_left
  DR d1 … dd       × n_right
  POSE r00 … r22 t0 t1 t2     （flags bit0）
  P i j            × n_pairs
  end
f32 以 %.9g、f64 以 %.17g 輸出，讀回與 binary 完全相同。

keypoints / descriptors 以 float32 儲存：read(write(f)) == f.quantized()。
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, List, Optional, TextIO

import numpy as np

from emtrack.geometry import CameraIntrinsics
from emtrack.matching import FrameObservation
from emtrack.persistence import atomic_open

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"TESOFEAT"
TEXT_MAGIC = "TESOFEAT-TEXT"
FEATURE_VERSION = 1
FLAG_POSE = 0x1

_HEADER = struct.Struct('<8sHHI10d')
_FRAME = struct.Struct('<5I')


class FeatureFileError(ValueError):
    """feature file 損壞、截斷或格式不符"""


@dataclass
class FeatureSequence:
    K0: CameraIntrinsics
    K1: CameraIntrinsics
    descriptor_dim: int
    frames: List[FrameObservation] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)


def is_text_path(path) -> bool:
    return str(path).lower().endswith('.txt')


# ==================== Binary ====================

def _frame_header(fr: FrameObservation) -> tuple:
    n_pairs = 0 if fr.pairing is None else int(len(fr.pairing))
    flags = FLAG_POSE if fr.pose is not None else 0
    return (int(fr.frame_index), fr.n_left, fr.n_right, n_pairs, flags)


def _desc(a: np.ndarray, n: int, dim: int) -> np.ndarray:
    a = np.asarray(a, dtype='<f4')
    return a.reshape(n, dim) if n else np.zeros((0, dim), dtype='<f4')


def write_frame_binary(f: BinaryIO, fr: FrameObservation, dim: int) -> None:
    head = _frame_header(fr)
    f.write(_FRAME.pack(*head))
    f.write(np.asarray(fr.kps_left, dtype='<f4').reshape(-1, 2).tobytes())
    f.write(np.asarray(fr.kps_right, dtype='<f4').reshape(-1, 2).tobytes())
    f.write(_desc(fr.desc_left, fr.n_left, dim).tobytes())
    f.write(_desc(fr.desc_right, fr.n_right, dim).tobytes())
    if fr.pose is not None:
        R, t = fr.pose
        f.write(np.concatenate([np.asarray(R, dtype=float).reshape(9), np.asarray(t, dtype=float).reshape(3)])
                .astype('<f8').tobytes())
    if head[3]:
        f.write(np.asarray(fr.pairing).astype('<u4').reshape(-1, 2).tobytes())


def _check_frame(fr: FrameObservation, dim: int):
    for name, a, n in (('desc_left', fr.desc_left, fr.n_left), ('desc_right', fr.desc_right, fr.n_right)):
        if n and np.asarray(a).shape != (n, dim):
            raise FeatureFileError(f"frame {fr.frame_index}: {name} shape {np.asarray(a).shape} != ({n}, {dim})")


def write_features(path, K0: CameraIntrinsics, K1: CameraIntrinsics, descriptor_dim: int,
                   frames: Iterable[FrameObservation], n_frames: int) -> int:
    """
    串流寫出（atomic）；n_frames 必須等於實際幀數

    Returns:
        寫出的幀數
    """
    if not (0 < descriptor_dim < 2 ** 16):
        raise FeatureFileError(f"descriptor_dim out of range: {descriptor_dim}")
    count = 0
    if is_text_path(path):
        with atomic_open(path, 'w', encoding='utf-8') as f:
            _write_text_header(f, K0, K1, descriptor_dim, n_frames)
            for fr in frames:
                _check_frame(fr, descriptor_dim)
                _write_text_frame(f, fr)
                count += 1
            if count != n_frames:
                raise FeatureFileError(f"declared {n_frames} frames but got {count}")
        return count

    with atomic_open(path, 'wb') as f:
        f.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, descriptor_dim, n_frames, *K0.as_tuple(), *K1.as_tuple()))
        for fr in frames:
            _check_frame(fr, descriptor_dim)
            write_frame_binary(f, fr, descriptor_dim)
            count += 1
        if count != n_frames:
            raise FeatureFileError(f"declared {n_frames} frames but got {count}")
    return count


def write_sequence(path, seq: FeatureSequence) -> int:
    return write_features(path, seq.K0, seq.K1, seq.descriptor_dim, seq.frames, len(seq.frames))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FeatureFileError(f"feature file truncated at byte {self.pos} (need {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        return np.frombuffer(self.take(size), dtype=dtype, count=count)


def _validate_pairs(pairs: np.ndarray, n_left: int, n_right: int, frame_index: int):
    if len(pairs) and (pairs[:, 0].max() >= n_left or pairs[:, 1].max() >= n_right):
        raise FeatureFileError(f"frame {frame_index}: pairing index out of range")


def _read_binary(data: bytes) -> FeatureSequence:
    r = _Reader(data)
    head = _HEADER.unpack(r.take(_HEADER.size))
    magic, version, dim, n_frames = head[:4]
    if magic != FEATURE_MAGIC:
        raise FeatureFileError(f"bad feature-file magic {magic!r}")
    if version > FEATURE_VERSION:
        logger.warning(f"⚠️ feature file version={version} > expected {FEATURE_VERSION}, attempting to load")
    try:
        K0 = CameraIntrinsics(*head[4:9])
        K1 = CameraIntrinsics(*head[9:14])
    except ValueError as e:
        raise FeatureFileError(f"invalid intrinsics in header: {e}") from e

    frames = []
    for _ in range(n_frames):
        idx, n_l, n_r, n_p, flags = _FRAME.unpack(r.take(_FRAME.size))
        kl = r.array('<f4', n_l * 2).reshape(n_l, 2).astype(np.float64)
        kr = r.array('<f4', n_r * 2).reshape(n_r, 2).astype(np.float64)
        dl = r.array('<f4', n_l * dim).reshape(n_l, dim).astype(np.float64)
        dr = r.array('<f4', n_r * dim).reshape(n_r, dim).astype(np.float64)
        pose = None
        if flags & FLAG_POSE:
            p = r.array('<f8', 12).astype(np.float64)
            pose = (p[:9].reshape(3, 3).copy(), p[9:].copy())
        pairs = r.array('<u4', n_p * 2).reshape(n_p, 2).astype(np.int64)
        _validate_pairs(pairs, n_l, n_r, idx)
        frames.append(FrameObservation(
            frame_index=int(idx), kps_left=kl, kps_right=kr, desc_left=dl, desc_right=dr,
            pose=pose, pairing=pairs,
        ))
    if r.pos != len(data):
        logger.warning(f"⚠️ feature file has {len(data) - r.pos} trailing bytes")
    return FeatureSequence(K0=K0, K1=K1, descriptor_dim=int(dim), frames=frames)


# ==================== Text ====================

def _f32(values) -> str:
    return " ".join(f"{float(v):.9g}" for v in np.asarray(values, dtype=np.float32).reshape(-1))


def _f64(values) -> str:
    return " ".join(f"{float(v):.17g}" for v in np.asarray(values, dtype=float).reshape(-1))


def _write_text_header(f: TextIO, K0, K1, dim: int, n_frames: int):
    f.write(f"{TEXT_MAGIC} {FEATURE_VERSION}\n")
    f.write(f"dim {dim}\n")
    f.write(f"frames {n_frames}\n")
    f.write(f"K0 {_f64(K0.as_tuple())}\n")
    f.write(f"K1 {_f64(K1.as_tuple())}\n")


def _write_text_frame(f: TextIO, fr: FrameObservation):
    head = _frame_header(fr)
    f.write("frame " + " ".join(str(v) for v in head) + "\n")
    for tag, arr in (('L', fr.kps_left), ('R', fr.kps_right), ('DL', fr.desc_left), ('DR', fr.desc_right)):
        for row in np.asarray(arr).reshape(len(arr), -1) if len(arr) else []:
            f.write(f"{tag} {_f32(row)}\n")
    if fr.pose is not None:
        f.write(f"POSE {_f64(np.concatenate([np.ravel(fr.pose[0]), np.ravel(fr.pose[1])]))}\n")
    if head[3]:
        for i, j in np.asarray(fr.pairing).reshape(-1, 2):
            f.write(f"P {int(i)} {int(j)}\n")
    f.write("end\n")


def _read_text(text: str) -> FeatureSequence:
    lines = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith('#')]
    pos = 0

    def expect(tag: str) -> List[str]:
        nonlocal pos
        if pos >= len(lines) or lines[pos][0] != tag:
            got = lines[pos][0] if pos < len(lines) else 'EOF'
            raise FeatureFileError(f"text feature file: expected {tag!r} at record {pos}, got {got!r}")
        pos += 1
        return lines[pos - 1][1:]

    def rows(tag: str, n: int, dtype) -> np.ndarray:
        out = [np.array(expect(tag), dtype=dtype) for _ in range(n)]
        return np.stack(out) if out else None

    try:
        version = int(expect(TEXT_MAGIC)[0])
        if version > FEATURE_VERSION:
            logger.warning(f"⚠️ text feature file version={version} > expected {FEATURE_VERSION}")
        dim = int(expect('dim')[0])
        n_frames = int(expect('frames')[0])
        K0 = CameraIntrinsics(*[float(v) for v in expect('K0')])
        K1 = CameraIntrinsics(*[float(v) for v in expect('K1')])
        frames = []
        for _ in range(n_frames):
            idx, n_l, n_r, n_p, flags = (int(v) for v in expect('frame'))

            def _pts(tag, n, width):
                a = rows(tag, n, np.float32)
                return np.zeros((0, width)) if a is None else a.reshape(n, width).astype(np.float64)

            kl, kr = _pts('L', n_l, 2), _pts('R', n_r, 2)
            dl, dr = _pts('DL', n_l, dim), _pts('DR', n_r, dim)
            pose = None
            if flags & FLAG_POSE:
                p = np.array(expect('POSE'), dtype=np.float64)
                pose = (p[:9].reshape(3, 3), p[9:12])
            pr = rows('P', n_p, np.int64)
            pairs = np.zeros((0, 2), dtype=np.int64) if pr is None else pr.reshape(n_p, 2)
            expect('end')
            _validate_pairs(pairs, n_l, n_r, idx)
            frames.append(FrameObservation(
                frame_index=idx, kps_left=kl, kps_right=kr, desc_left=dl, desc_right=dr,
                pose=pose, pairing=pairs,
            ))
    except (IndexError, ValueError) as e:
        if isinstance(e, FeatureFileError):
            raise
        raise FeatureFileError(f"text feature file malformed: {e}") from e
    return FeatureSequence(K0=K0, K1=K1, descriptor_dim=dim, frames=frames)


# ==================== 入口 ====================

def read_features(path) -> FeatureSequence:
    """
    依副檔名讀取 binary 或 text form

    Raises:
        FeatureFileError: 檔案損壞 / 截斷 / 格式不符
        FileNotFoundError: 檔案不存在
    """
    p = Path(path)
    if is_text_path(p):
        seq = _read_text(p.read_text(encoding='utf-8'))
    else:
        seq = _read_binary(p.read_bytes())
    logger.info(f"✅ Loaded {len(seq)} frames from {p.name}（dim={seq.descriptor_dim}）")
    return seq


def get_frame(seq: FeatureSequence, frame_index: int) -> Optional[FrameObservation]:
    for fr in seq.frames:
        if fr.frame_index == frame_index:
            return fr
    return None
