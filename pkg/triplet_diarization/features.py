"""MFCC + delta feature extraction over fixed-length, non-overlapping segments."""
from dataclasses import dataclass, fields
from typing import List, Optional

import librosa
import numpy as np
from joblib import Parallel, delayed, parallel_backend
from scipy.fft import dct
from singer import get_logger

from triplet_diarization.exceptions import SegmentTooShortException

LOGGER = get_logger('triplet_diarization')

DELTA_WINDOW = 2


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass
class SegmentFeatures:
    frames: np.ndarray
    segment_start: float
    segment_duration: float
    speaker_id: Optional[str] = None
    recording_id: str = ''

    @property
    def num_frames(self):
        return self.frames.shape[0]


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 8000
    segment_seconds: float = 2.0
    window_ms: float = 25.0
    overlap_ms: float = 15.0
    pre_emphasis: float = 0.97
    n_mels: int = 24
    n_cepstra: int = 20
    log_floor: float = 1e-10
    cepstral_mean_norm: bool = False

    @classmethod
    def from_dict(cls, section):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in section.items() if k in names})

    @property
    def feature_dim(self):
        return 3 * self.n_cepstra


def window_samples(duration_ms, sample_rate):
    return int(round(duration_ms * sample_rate / 1000.0))


def next_power_of_two(n):
    return 1 << (int(n) - 1).bit_length()


def segment_audio(audio: AudioBuffer, segment_seconds: float) -> List[AudioBuffer]:
    """Cut audio into consecutive chunks of exactly segment_seconds; a shorter tail is dropped"""
    if segment_seconds <= 0:
        raise ValueError("segment_seconds must be positive, got {}".format(segment_seconds))

    segment_length = int(round(segment_seconds * audio.sample_rate))
    n_segments = len(audio.samples) // segment_length
    return [
        AudioBuffer(audio.samples[i * segment_length:(i + 1) * segment_length], audio.sample_rate)
        for i in range(n_segments)
    ]


def pre_emphasize(samples, coeff):
    """y[n] = x[n] - coeff * x[n-1], with x[-1] taken as x[0]"""
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0 or coeff == 0:
        return x
    previous = np.concatenate([x[:1], x[:-1]])
    return x - coeff * previous


def frame_signal(audio: AudioBuffer, window_ms: float, overlap_ms: float) -> np.ndarray:
    window = window_samples(window_ms, audio.sample_rate)
    hop = window - window_samples(overlap_ms, audio.sample_rate)
    if not window > hop > 0:
        raise ValueError("window_ms ({}) must be greater than overlap_ms ({}) > 0".format(window_ms, overlap_ms))

    samples = np.asarray(audio.samples, dtype=np.float64)
    if len(samples) < window:
        raise SegmentTooShortException(
            "Segment too short: {} samples, need at least {} for one {} ms window".format(
                len(samples), window, window_ms))

    frames = np.lib.stride_tricks.sliding_window_view(samples, window)[::hop]
    return frames * np.hamming(window)


def mel_filterbank(sample_rate, n_fft, n_mels):
    return librosa.filters.mel(sr=sample_rate, n_fft=n_fft, n_mels=n_mels, fmin=0.0,
                               fmax=sample_rate / 2.0, htk=True, norm=None, dtype=np.float64)


def mfcc(frames, n_mels, n_cepstra, sample_rate=8000, log_floor=1e-10):
    if n_cepstra > n_mels:
        raise ValueError("n_cepstra ({}) must not exceed n_mels ({})".format(n_cepstra, n_mels))

    frames = np.atleast_2d(frames)
    n_fft = next_power_of_two(frames.shape[1])
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    energies = power @ mel_filterbank(sample_rate, n_fft, n_mels).T
    log_energies = np.log(np.maximum(energies, log_floor))
    return dct(log_energies, type=2, norm='ortho', axis=1)[:, :n_cepstra]


def _regression_delta(features):
    padded = np.pad(features, ((DELTA_WINDOW, DELTA_WINDOW), (0, 0)), mode='edge')
    # sum_n n * (c[t+n] - c[t-n]) / (2 * sum_n n^2), n = 1..2
    return ((padded[3:-1] - padded[1:-3]) + 2.0 * (padded[4:] - padded[:-4])) / 10.0


def add_deltas(cepstra):
    cepstra = np.atleast_2d(np.asarray(cepstra, dtype=np.float64))
    delta = _regression_delta(cepstra)
    double_delta = _regression_delta(delta)
    return np.hstack([cepstra, delta, double_delta])


def cepstral_mean_normalize(features):
    return features - features.mean(axis=0, keepdims=True)


def featurize_segment(audio: AudioBuffer, config: FeatureConfig):
    emphasized = AudioBuffer(pre_emphasize(audio.samples, config.pre_emphasis), audio.sample_rate)
    frames = frame_signal(emphasized, config.window_ms, config.overlap_ms)
    cepstra = mfcc(frames, config.n_mels, config.n_cepstra, audio.sample_rate, config.log_floor)
    features = add_deltas(cepstra)
    if config.cepstral_mean_norm:
        features = cepstral_mean_normalize(features)
    return features


def featurize_recording(audio: AudioBuffer, config: FeatureConfig, recording_id='', speaker_id=None, offset=0.0):
    """Segment a recording and turn every segment into a T x 3c feature matrix

    offset is the absolute start (seconds) of audio within its recording, so that
    oracle speech regions keep their original timing.
    """
    if audio.samples is None or len(audio.samples) == 0:
        return []

    segments = []
    for i, chunk in enumerate(segment_audio(audio, config.segment_seconds)):
        segments.append(SegmentFeatures(
            frames=featurize_segment(chunk, config),
            segment_start=offset + i * config.segment_seconds,
            segment_duration=config.segment_seconds,
            speaker_id=speaker_id,
            recording_id=recording_id))
    return segments


def featurize_recordings(recordings, config: FeatureConfig, parallelism=0, max_parallelism=16):
    """Featurize (audio, recording_id, speaker_id, offset) tuples on a thread pool

    Output order follows input order. Parallelism 0 means one thread per recording,
    capped by max_parallelism.
    """
    recordings = list(recordings)
    if not recordings:
        return []

    if parallelism == 0:
        parallelism = min(len(recordings), max_parallelism)

    with parallel_backend('threading', n_jobs=parallelism):
        results = Parallel()(delayed(featurize_recording)(
            audio, config, recording_id=recording_id, speaker_id=speaker_id, offset=offset
        ) for (audio, recording_id, speaker_id, offset) in recordings)

    segments = [segment for result in results for segment in result]
    LOGGER.info("Featurized {} recordings into {} segments".format(len(recordings), len(segments)))
    return segments
