import json
import os

import numpy as np
import pytest
import soundfile as sf

from triplet_diarization import encoder, storage
from triplet_diarization.encoder import EncoderConfig
from triplet_diarization.exceptions import ChecksumException, DataException, ManifestValidationException
from triplet_diarization.features import AudioBuffer, SegmentFeatures

TINY = EncoderConfig(input_dim=3, hidden_dim=8, num_layers=1, num_heads=2, max_positions=16)


def manifest_lines(*records):
    return [json.dumps(record) + '\n' for record in records]


class TestManifest(object):
    """
    Unit Tests for manifest parsing
    """

    def test_relative_paths_are_resolved(self):
        entries = storage.parse_manifest(manifest_lines(
            {'audio_path': 'a.wav', 'recording_id': 'a', 'speaker_id': 's1'},
            {'audio_path': '/data/b.wav', 'recording_id': 'b'},
        ), base_dir='/corpus')
        assert [e.audio_path for e in entries] == ['/corpus/a.wav', '/data/b.wav']
        assert entries[0].speaker_id == 's1'
        assert entries[1].speaker_id is None
        assert [e.line_number for e in entries] == [1, 2]

    def test_blank_lines_are_skipped(self):
        lines = manifest_lines({'audio_path': 'a.wav', 'recording_id': 'a'})
        assert len(storage.parse_manifest(['\n'] + lines + ['  \n'])) == 1

    def test_invalid_json_reports_line(self):
        lines = manifest_lines({'audio_path': 'a.wav', 'recording_id': 'a'}) + ['{"audio_path": \n']
        with pytest.raises(ManifestValidationException) as exc:
            storage.parse_manifest(lines)
        assert 'line 2' in str(exc.value)

    @pytest.mark.parametrize('record', [
        {'recording_id': 'a'},
        {'audio_path': 'a.wav', 'recording_id': ''},
        {'audio_path': 'a.wav', 'recording_id': 'a', 'start': -1.0, 'end': 2.0},
        {'audio_path': 'a.wav', 'recording_id': 'a', 'start': 'zero', 'end': 2.0},
        {'audio_path': 'a.wav', 'recording_id': 'a', 'start': 3.0, 'end': 2.0},
    ])
    def test_schema_errors(self, record):
        with pytest.raises(ManifestValidationException) as exc:
            storage.parse_manifest(manifest_lines(record))
        assert 'line 1' in str(exc.value)

    def test_training_manifest_needs_speaker(self):
        lines = manifest_lines({'audio_path': 'a.wav', 'recording_id': 'a'})
        assert len(storage.parse_manifest(lines)) == 1
        with pytest.raises(ManifestValidationException):
            storage.parse_manifest(lines, require_speaker=True)

    def test_recording_id_bound_to_one_path(self):
        lines = manifest_lines({'audio_path': 'a.wav', 'recording_id': 'a', 'start': 0, 'end': 1},
                               {'audio_path': 'b.wav', 'recording_id': 'a', 'start': 1, 'end': 2})
        with pytest.raises(ManifestValidationException) as exc:
            storage.parse_manifest(lines)
        assert 'line 2' in str(exc.value)

    def test_overlapping_regions(self):
        lines = manifest_lines({'audio_path': 'a.wav', 'recording_id': 'a', 'start': 0, 'end': 2},
                               {'audio_path': 'a.wav', 'recording_id': 'a', 'start': 1.5, 'end': 4})
        with pytest.raises(ManifestValidationException):
            storage.parse_manifest(lines)

    def test_several_entries_need_regions(self):
        lines = manifest_lines({'audio_path': 'a.wav', 'recording_id': 'a', 'start': 0, 'end': 2},
                               {'audio_path': 'a.wav', 'recording_id': 'a'})
        with pytest.raises(ManifestValidationException):
            storage.parse_manifest(lines)

    def test_touching_regions_are_fine(self):
        lines = manifest_lines({'audio_path': 'a.wav', 'recording_id': 'a', 'start': 0, 'end': 2},
                               {'audio_path': 'a.wav', 'recording_id': 'a', 'start': 2, 'end': 4})
        assert len(storage.parse_manifest(lines)) == 2

    def test_write_and_load(self, tmp_path):
        entries = [storage.ManifestEntry(audio_path='x.wav', recording_id='x', speaker_id='s', start=0.0, end=2.0),
                   storage.ManifestEntry(audio_path='y.wav', recording_id='y')]
        path = str(tmp_path / 'manifest.jsonl')
        storage.write_manifest(path, entries)
        loaded = storage.load_manifest(path)
        assert [e.audio_path for e in loaded] == [str(tmp_path / 'x.wav'), str(tmp_path / 'y.wav')]
        assert (loaded[0].start, loaded[0].end, loaded[1].start) == (0.0, 2.0, None)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataException):
            storage.load_manifest(str(tmp_path / 'nope.jsonl'))

    def test_manifest_not_utf8(self, tmp_path):
        path = tmp_path / 'manifest.jsonl'
        path.write_bytes(b'{"audio_path": "a\xff.wav", "recording_id": "a"}\n')
        with pytest.raises(ManifestValidationException):
            storage.load_manifest(str(path))

    def test_short_feature_cache_header(self, tmp_path):
        path = tmp_path / 'f.dkf'
        path.write_bytes(b'DKF1\x01')
        with pytest.raises(ChecksumException):
            storage.read_feature_cache(str(path))


class TestAudio(object):
    """
    Unit Tests for WAV input and output
    """

    def test_round_trip_within_quantization(self, tmp_path):
        samples = 0.5 * np.sin(np.linspace(0, 20, 8000))
        path = str(tmp_path / 'a.wav')
        storage.write_wav(path, AudioBuffer(samples, 8000))
        audio = storage.read_wav(path, 8000)
        assert audio.sample_rate == 8000
        assert audio.samples.dtype == np.float64
        assert np.abs(audio.samples - samples).max() <= 1.0 / 32768

    def test_wrong_sample_rate(self, tmp_path):
        path = str(tmp_path / 'a.wav')
        storage.write_wav(path, AudioBuffer(np.zeros(1600), 16000))
        with pytest.raises(DataException) as exc:
            storage.read_wav(path, 8000)
        assert '16000' in str(exc.value)

    def test_stereo_is_rejected(self, tmp_path):
        path = str(tmp_path / 'stereo.wav')
        sf.write(path, np.zeros((800, 2)), 8000, subtype='PCM_16')
        with pytest.raises(DataException):
            storage.read_wav(path, 8000)

    def test_float_wav_is_rejected(self, tmp_path):
        path = str(tmp_path / 'float.wav')
        sf.write(path, np.zeros(800), 8000, subtype='FLOAT')
        with pytest.raises(DataException):
            storage.read_wav(path, 8000)

    def test_unreadable_file(self, tmp_path):
        path = tmp_path / 'junk.wav'
        path.write_bytes(b'not audio')
        with pytest.raises(DataException):
            storage.read_wav(str(path), 8000)

    def test_entry_audio_region(self):
        audio = AudioBuffer(np.arange(8000, dtype=np.float64), 8000)
        region, offset = storage.entry_audio(
            storage.ManifestEntry(audio_path='a', recording_id='a', start=0.25, end=0.5), audio)
        assert offset == 0.25
        assert region.samples[0] == 2000.0 and len(region.samples) == 2000
        whole, offset = storage.entry_audio(storage.ManifestEntry(audio_path='a', recording_id='a'), audio)
        assert whole is audio and offset == 0.0


class TestBinaryFiles(object):
    """
    Unit Tests for the feature cache, checkpoint and embeddings containers
    """

    def test_feature_cache(self, tmp_path):
        frames = np.random.default_rng(0).normal(size=(198, 60))
        path = str(tmp_path / 'f.dkf')
        storage.write_feature_cache(path, frames)
        assert os.path.getsize(path) == 12 + 198 * 60 * 8
        np.testing.assert_array_equal(storage.read_feature_cache(path), frames)

    def test_truncated_feature_cache(self, tmp_path):
        path = str(tmp_path / 'f.dkf')
        storage.write_feature_cache(path, np.ones((4, 3)))
        with open(path, 'r+b') as cache:
            cache.truncate(30)
        with pytest.raises(ChecksumException):
            storage.read_feature_cache(path)

    def test_checkpoint_round_trip(self, tmp_path):
        model = encoder.init_encoder(TINY, seed=2)
        path = str(tmp_path / 'run' / 'final.dkc')
        extra = {'adam.m.input.weight': np.full((3, 8), 0.5)}
        storage.save_checkpoint(path, {'seed': 2}, model, extra_arrays=extra, train_meta={'iteration': 7})
        assert not os.path.exists(path + '.tmp')

        run_config, restored, restored_extra, meta = storage.load_checkpoint(path)
        assert run_config == {'seed': 2}
        assert meta == {'iteration': 7}
        assert restored.config == model.config
        for name, values in model.state().items():
            np.testing.assert_array_equal(restored.state()[name], values)
        np.testing.assert_array_equal(restored_extra['adam.m.input.weight'], extra['adam.m.input.weight'])

    def test_checkpoint_is_deterministic(self, tmp_path):
        model = encoder.init_encoder(TINY, seed=2)
        storage.save_checkpoint(str(tmp_path / 'a.dkc'), {}, model)
        storage.save_checkpoint(str(tmp_path / 'b.dkc'), {}, model)
        assert (tmp_path / 'a.dkc').read_bytes() == (tmp_path / 'b.dkc').read_bytes()

    def test_corrupt_checkpoint(self, tmp_path):
        path = tmp_path / 'final.dkc'
        storage.save_checkpoint(str(path), {}, encoder.init_encoder(TINY))
        payload = bytearray(path.read_bytes())
        payload[len(payload) // 2] ^= 0xff
        path.write_bytes(bytes(payload))
        with pytest.raises(ChecksumException):
            storage.load_checkpoint(str(path))

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / 'final.dkc'
        path.write_bytes(b'DKF1' + b'\x00' * 20)
        with pytest.raises(DataException):
            storage.load_checkpoint(str(path))

    def test_embeddings(self, tmp_path):
        segments = [SegmentFeatures(frames=np.zeros((2, 3)), segment_start=2.0 * i, segment_duration=2.0,
                                    recording_id='rec{}'.format(i % 2)) for i in range(3)]
        vectors = np.random.default_rng(1).normal(size=(3, 8))
        path = str(tmp_path / 'embeddings.bin')
        storage.write_embeddings(path, segments, vectors)
        records = storage.read_embeddings(path)
        assert [(r[0], r[1], r[2]) for r in records] == [('rec0', 0.0, 2.0), ('rec1', 2.0, 2.0), ('rec0', 4.0, 2.0)]
        for record, vector in zip(records, vectors):
            np.testing.assert_array_equal(record[3], vector)
