"""Manifests, audio files and the binary containers (feature cache, checkpoint, embeddings)."""
import json
import os
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import numpy as np
import soundfile as sf
from jsonschema import Draft7Validator, FormatChecker
from singer import get_logger

from triplet_diarization.encoder import EncoderConfig, EncoderModel
from triplet_diarization.exceptions import ChecksumException, DataException, ManifestValidationException
from triplet_diarization.features import AudioBuffer

LOGGER = get_logger('triplet_diarization')

FEATURE_CACHE_MAGIC = b'DKF1'
CHECKPOINT_MAGIC = b'DKC1'
CHECKPOINT_VERSION = 1

MANIFEST_ENTRY_SCHEMA = {
    'type': 'object',
    'properties': {
        'audio_path': {'type': 'string', 'minLength': 1},
        'recording_id': {'type': 'string', 'minLength': 1},
        'speaker_id': {'type': 'string', 'minLength': 1},
        'start': {'type': 'number', 'minimum': 0},
        'end': {'type': 'number', 'exclusiveMinimum': 0},
    },
    'required': ['audio_path', 'recording_id'],
}

TRAINING_MANIFEST_ENTRY_SCHEMA = dict(MANIFEST_ENTRY_SCHEMA, required=['audio_path', 'recording_id', 'speaker_id'])


@dataclass
class ManifestEntry:
    audio_path: str
    recording_id: str
    speaker_id: Optional[str] = None
    start: Optional[float] = None
    end: Optional[float] = None
    line_number: int = 0


# Manifest -------------------------------------------------------------------

def parse_manifest(lines, base_dir='.', require_speaker=False):
    validator = Draft7Validator(TRAINING_MANIFEST_ENTRY_SCHEMA if require_speaker else MANIFEST_ENTRY_SCHEMA,
                                format_checker=FormatChecker())
    entries = []
    audio_by_recording = {}
    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            o = json.loads(line)
        except json.decoder.JSONDecodeError as exc:
            raise ManifestValidationException("Manifest line {} is not valid JSON: {}".format(line_number, exc)) from exc

        error = next(iter(sorted(validator.iter_errors(o), key=lambda e: list(e.path))), None)
        if error is not None:
            raise ManifestValidationException("Manifest line {} does not pass schema validation: {}".format(
                line_number, error.message))
        if 'start' in o and 'end' in o and not o['end'] > o['start']:
            raise ManifestValidationException("Manifest line {}: end ({}) must be greater than start ({})".format(
                line_number, o['end'], o['start']))

        audio_path = o['audio_path']
        if not os.path.isabs(audio_path):
            audio_path = os.path.normpath(os.path.join(base_dir, audio_path))
        if audio_by_recording.setdefault(o['recording_id'], audio_path) != audio_path:
            raise ManifestValidationException("Manifest line {}: recording_id {} already refers to {}".format(
                line_number, o['recording_id'], audio_by_recording[o['recording_id']]))

        entries.append(ManifestEntry(audio_path=audio_path, recording_id=o['recording_id'],
                                     speaker_id=o.get('speaker_id'), start=o.get('start'), end=o.get('end'),
                                     line_number=line_number))

    check_regions(entries)
    return entries


def check_regions(entries):
    """Regions of one recording must not overlap"""
    by_recording = OrderedDict()
    for entry in entries:
        by_recording.setdefault(entry.recording_id, []).append(entry)
    for recording_id, recording_entries in by_recording.items():
        if len(recording_entries) > 1 and any(e.start is None or e.end is None for e in recording_entries):
            raise ManifestValidationException(
                "Recording {} has several entries, each needs start and end".format(recording_id))
        regions = sorted((e.start, e.end, e.line_number) for e in recording_entries if e.start is not None)
        for (_, first_end, _), (second_start, _, line_number) in zip(regions, regions[1:]):
            if second_start < first_end:
                raise ManifestValidationException(
                    "Manifest line {}: region overlaps an earlier region of recording {}".format(
                        line_number, recording_id))


def load_manifest(path, require_speaker=False):
    try:
        with open(path, encoding='utf-8') as manifest:
            lines = manifest.readlines()
    except UnicodeDecodeError as exc:
        raise ManifestValidationException("Manifest {} is not valid UTF-8: {}".format(path, exc)) from exc
    except OSError as exc:
        raise DataException("Unable to read manifest {}: {}".format(path, exc)) from exc
    entries = parse_manifest(lines, base_dir=os.path.dirname(os.path.abspath(path)), require_speaker=require_speaker)
    LOGGER.info("Loaded {} manifest entries from {}".format(len(entries), path))
    return entries


def write_manifest(path, entries):
    with open(path, 'w') as manifest:
        for entry in entries:
            o = OrderedDict([('audio_path', entry.audio_path), ('recording_id', entry.recording_id)])
            for key in ('speaker_id', 'start', 'end'):
                if getattr(entry, key) is not None:
                    o[key] = getattr(entry, key)
            manifest.write(json.dumps(o) + '\n')


# Audio ----------------------------------------------------------------------

def read_wav(path, sample_rate):
    """16-bit PCM mono at exactly sample_rate, scaled to [-1, 1)"""
    try:
        info = sf.info(path)
    except (RuntimeError, OSError) as exc:
        raise DataException("Unable to read audio {}: {}".format(path, exc)) from exc
    if info.channels != 1 or info.subtype != 'PCM_16':
        raise DataException("Audio {} must be 16-bit PCM mono, got {} channel(s) {}".format(
            path, info.channels, info.subtype))
    if info.samplerate != sample_rate:
        raise DataException("Audio {} has sample rate {} Hz, expected {} Hz (resampling is not supported)".format(
            path, info.samplerate, sample_rate))
    samples, _ = sf.read(path, dtype='float64')
    return AudioBuffer(samples=samples, sample_rate=info.samplerate)


def write_wav(path, audio: AudioBuffer):
    sf.write(path, np.clip(audio.samples, -1.0, 1.0 - 1.0 / 32768), audio.sample_rate, subtype='PCM_16')


def entry_audio(entry: ManifestEntry, audio: AudioBuffer):
    """The part of a recording an entry points at, with its absolute offset in seconds"""
    if entry.start is None and entry.end is None:
        return audio, 0.0
    start = entry.start or 0.0
    first = int(round(start * audio.sample_rate))
    last = len(audio.samples) if entry.end is None else int(round(entry.end * audio.sample_rate))
    return AudioBuffer(audio.samples[first:last], audio.sample_rate), start


# Feature cache --------------------------------------------------------------

def write_feature_cache(path, frames):
    frames = np.ascontiguousarray(frames, dtype='<f8')
    rows, cols = frames.shape
    with open(path, 'wb') as cache:
        cache.write(FEATURE_CACHE_MAGIC + struct.pack('<II', rows, cols) + frames.tobytes())


def read_feature_cache(path):
    with open(path, 'rb') as cache:
        payload = cache.read()
    if payload[:4] != FEATURE_CACHE_MAGIC:
        raise DataException("{} is not a feature cache file".format(path))
    if len(payload) < 12:
        raise ChecksumException("Feature cache {} is truncated: {} bytes".format(path, len(payload)))
    rows, cols = struct.unpack_from('<II', payload, 4)
    expected = 12 + rows * cols * 8
    if len(payload) != expected:
        raise ChecksumException("Feature cache {} is truncated: {} bytes, expected {}".format(
            path, len(payload), expected))
    return np.frombuffer(payload, dtype='<f8', offset=12).reshape(rows, cols).astype(np.float64)


# Checkpoint -----------------------------------------------------------------

def _pack_string(text):
    encoded = text.encode('utf-8')
    return struct.pack('<I', len(encoded)) + encoded


def _pack_array(name, values):
    values = np.ascontiguousarray(values, dtype='<f8')
    return (_pack_string(name) + struct.pack('<I', values.ndim)
            + struct.pack('<{}I'.format(values.ndim), *values.shape) + values.tobytes())


class _Reader:
    def __init__(self, payload, path):
        self.payload = payload
        self.path = path
        self.offset = 0

    def take(self, size):
        if self.offset + size > len(self.payload):
            raise ChecksumException("{} ends unexpectedly".format(self.path))
        chunk = self.payload[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self):
        return struct.unpack('<I', self.take(4))[0]

    def string(self):
        return self.take(self.u32()).decode('utf-8')

    def array(self):
        name = self.string()
        ndim = self.u32()
        shape = struct.unpack('<{}I'.format(ndim), self.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(self.take(8 * count), dtype='<f8').astype(np.float64).reshape(shape)
        return name, values


def save_checkpoint(path, run_config, model: EncoderModel, extra_arrays=None, train_meta=None):
    header = json.dumps({'run_config': run_config, 'encoder': model.config.to_dict(), 'train': train_meta},
                        sort_keys=True)
    arrays = list(model.state().items()) + list((extra_arrays or {}).items())
    body = b''.join([CHECKPOINT_MAGIC, struct.pack('<I', CHECKPOINT_VERSION), _pack_string(header),
                     struct.pack('<I', len(arrays))] + [_pack_array(name, values) for name, values in arrays])

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    temp_path = path + '.tmp'
    with open(temp_path, 'wb') as checkpoint:
        checkpoint.write(body + struct.pack('<I', zlib.crc32(body) & 0xffffffff))
    os.replace(temp_path, path)


def load_checkpoint(path):
    """Returns (run_config, model, extra arrays, train meta)"""
    try:
        with open(path, 'rb') as checkpoint:
            payload = checkpoint.read()
    except OSError as exc:
        raise DataException("Unable to read checkpoint {}: {}".format(path, exc)) from exc

    if len(payload) < 12 or payload[:4] != CHECKPOINT_MAGIC:
        raise DataException("{} is not a checkpoint file".format(path))
    body, stored_crc = payload[:-4], struct.unpack('<I', payload[-4:])[0]
    if zlib.crc32(body) & 0xffffffff != stored_crc:
        LOGGER.error("Checkpoint {} failed its CRC32 check".format(path))
        raise ChecksumException("Checkpoint {} is corrupt (CRC32 mismatch)".format(path))

    reader = _Reader(body, path)
    reader.take(4)
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise DataException("Checkpoint {} has unsupported version {}".format(path, version))
    header = json.loads(reader.string())
    arrays = OrderedDict(reader.array() for _ in range(reader.u32()))

    config = EncoderConfig.from_dict(header['encoder'])
    model = EncoderModel.from_state(config, arrays)
    extra = OrderedDict((name, values) for name, values in arrays.items() if name not in model.params)
    return header['run_config'], model, extra, header.get('train')


# Embeddings -----------------------------------------------------------------

def write_embeddings(path, segments, embeddings):
    chunks = [struct.pack('<I', len(segments))]
    for segment, vector in zip(segments, embeddings):
        vector = np.ascontiguousarray(vector, dtype='<f8')
        chunks.append(_pack_string(segment.recording_id))
        chunks.append(struct.pack('<ddI', segment.segment_start, segment.segment_duration, vector.size))
        chunks.append(vector.tobytes())
    with open(path, 'wb') as out:
        out.write(b''.join(chunks))


def read_embeddings(path):
    """List of (recording_id, start, duration, vector)"""
    with open(path, 'rb') as embeddings_file:
        reader = _Reader(embeddings_file.read(), path)
    records = []
    for _ in range(reader.u32()):
        recording_id = reader.string()
        start, duration, width = struct.unpack('<ddI', reader.take(20))
        vector = np.frombuffer(reader.take(8 * width), dtype='<f8').astype(np.float64)
        records.append((recording_id, start, duration, vector))
    return records
