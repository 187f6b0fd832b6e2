"""feature file 測試：binary / text 兩種格式、float32 量化、損壞偵測"""

import numpy as np
import pytest

from emtrack.infrastructure.feature_file import (
    FeatureFileError, FeatureSequence, get_frame, read_features, write_features, write_sequence,
)
from emtrack.matching import FrameObservation
from emtrack.simulator import DriftSchedule, generate_sequence


@pytest.fixture
def frames(small_scene):
    return list(generate_sequence(small_scene, DriftSchedule(seed=2, amplitude=0.05), 3))


def _write(path, scene, frames):
    return write_features(str(path), scene.K0, scene.K1, scene.descriptor_dim, frames, len(frames))


class TestRoundTrip:
    """read(write(f)) == f.quantized()"""

    @pytest.mark.parametrize('name', ['seq.bin', 'seq.txt'])
    def test_quantized_equality(self, tmp_path, small_scene, frames, name):
        assert _write(tmp_path / name, small_scene, frames) == 3
        seq = read_features(str(tmp_path / name))
        assert len(seq) == 3 and seq.descriptor_dim == small_scene.descriptor_dim
        assert seq.K0 == small_scene.K0
        for original, loaded in zip(frames, seq.frames):
            assert loaded.same_content(original.quantized())

    def test_text_and_binary_agree(self, tmp_path, small_scene, frames):
        _write(tmp_path / 'a.bin', small_scene, frames)
        _write(tmp_path / 'a.txt', small_scene, frames)
        for a, b in zip(read_features(str(tmp_path / 'a.bin')).frames, read_features(str(tmp_path / 'a.txt')).frames):
            assert a.same_content(b)

    @pytest.mark.parametrize('name', ['seq.bin', 'seq.txt'])
    def test_rewrite_is_byte_identical(self, tmp_path, small_scene, frames, name):
        first = tmp_path / name
        _write(first, small_scene, frames)
        second = tmp_path / f'again_{name}'
        write_sequence(str(second), read_features(str(first)))
        assert first.read_bytes() == second.read_bytes()

    def test_frame_without_pose_or_pairs(self, tmp_path, small_scene, frames):
        bare = FrameObservation(frame_index=9, kps_left=frames[0].kps_left, kps_right=frames[0].kps_right,
                                desc_left=frames[0].desc_left, desc_right=frames[0].desc_right)
        _write(tmp_path / 'bare.bin', small_scene, [bare])
        loaded = get_frame(read_features(str(tmp_path / 'bare.bin')), 9)
        assert loaded.pose is None and len(loaded.pairing) == 0

    def test_get_frame(self, tmp_path, small_scene, frames):
        _write(tmp_path / 'seq.bin', small_scene, frames)
        seq = read_features(str(tmp_path / 'seq.bin'))
        assert get_frame(seq, 2).frame_index == 2
        assert get_frame(seq, 17) is None


class TestCorruption:
    """截斷 / 損壞"""

    def test_truncated(self, tmp_path, small_scene, frames):
        path = tmp_path / 'seq.bin'
        _write(path, small_scene, frames)
        path.write_bytes(path.read_bytes()[:-7])
        with pytest.raises(FeatureFileError):
            read_features(str(path))

    def test_truncated_header(self, tmp_path):
        path = tmp_path / 'seq.bin'
        path.write_bytes(b'TESOFEAT\x01\x00')
        with pytest.raises(FeatureFileError):
            read_features(str(path))

    def test_bad_magic(self, tmp_path, small_scene, frames):
        path = tmp_path / 'seq.bin'
        _write(path, small_scene, frames)
        path.write_bytes(b'NOTFEATS' + path.read_bytes()[8:])
        with pytest.raises(FeatureFileError):
            read_features(str(path))

    def test_text_missing_end(self, tmp_path, small_scene, frames):
        path = tmp_path / 'seq.txt'
        _write(path, small_scene, frames[:1])
        path.write_text(path.read_text().replace('end\n', ''))
        with pytest.raises(FeatureFileError):
            read_features(str(path))

    def test_text_garbage_number(self, tmp_path, small_scene, frames):
        path = tmp_path / 'seq.txt'
        _write(path, small_scene, frames[:1])
        path.write_text(path.read_text().replace('dim ', 'dim x', 1))
        with pytest.raises(FeatureFileError):
            read_features(str(path))

    def test_pairing_out_of_range(self, tmp_path, small_scene, frames):
        fr = frames[0]
        bad = FrameObservation(frame_index=0, kps_left=fr.kps_left, kps_right=fr.kps_right,
                               desc_left=fr.desc_left, desc_right=fr.desc_right,
                               pairing=np.array([[fr.n_left + 5, 0]]))
        _write(tmp_path / 'bad.bin', small_scene, [bad])
        with pytest.raises(FeatureFileError):
            read_features(str(tmp_path / 'bad.bin'))

    def test_frame_count_mismatch_leaves_no_file(self, tmp_path, small_scene, frames):
        path = tmp_path / 'seq.bin'
        with pytest.raises(FeatureFileError):
            write_features(str(path), small_scene.K0, small_scene.K1, small_scene.descriptor_dim, frames, 5)
        assert not path.exists()

    def test_descriptor_dim_mismatch(self, tmp_path, small_scene, frames):
        with pytest.raises(FeatureFileError):
            write_features(str(tmp_path / 'x.bin'), small_scene.K0, small_scene.K1, 8, frames, len(frames))

    def test_empty_sequence(self, tmp_path, small_scene):
        seq = FeatureSequence(K0=small_scene.K0, K1=small_scene.K1, descriptor_dim=4)
        write_sequence(str(tmp_path / 'empty.bin'), seq)
        assert len(read_features(str(tmp_path / 'empty.bin'))) == 0
