"""Synthetic speaker corpus: every speaker is a fixed mixture of sinusoids plus noise.

Each speaker gets a distinct fundamental with a few harmonics and two
formant-like peaks. Generation is deterministic per seed.
"""
import json
import os
from dataclasses import asdict, dataclass, fields
from typing import List

import numpy as np
from singer import get_logger

from triplet_diarization import storage
from triplet_diarization.exceptions import ConfigException
from triplet_diarization.features import AudioBuffer
from triplet_diarization.metrics import Annotation, write_rttm

LOGGER = get_logger('triplet_diarization')

MANIFEST_FILE_NAME = 'manifest.jsonl'
CONVERSATION_MANIFEST_FILE_NAME = 'conversations.jsonl'
REFERENCE_RTTM_FILE_NAME = 'reference.rttm'

LOWEST_FUNDAMENTAL = 120.0
FUNDAMENTAL_SPACING = 30.0
HARMONIC_AMPLITUDES = (1.0, 0.5, 0.25)
NOISE_LEVEL = 0.05
PEAK_LEVEL = 0.5


@dataclass(frozen=True)
class SynthSpec:
    num_speakers: int = 8
    segments_per_speaker: int = 40
    segment_seconds: float = 2.0
    sample_rate: int = 8000
    seed: int = 0
    recordings_per_speaker: int = 1
    conversations: int = 0
    speakers_per_conversation: int = 2
    turns_per_conversation: int = 6

    @classmethod
    def from_dict(cls, section):
        unknown = set(section) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigException("Unknown synth spec keys: {}".format(', '.join(sorted(unknown))))
        return cls(**section)

    def validate(self):
        for name in ('num_speakers', 'segments_per_speaker', 'sample_rate', 'recordings_per_speaker',
                     'speakers_per_conversation', 'turns_per_conversation'):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ConfigException("synth {} must be a positive integer".format(name))
        if self.segment_seconds <= 0:
            raise ConfigException("synth segment_seconds must be positive")
        if self.recordings_per_speaker > self.segments_per_speaker:
            raise ConfigException("recordings_per_speaker cannot exceed segments_per_speaker")
        if self.conversations < 0 or self.speakers_per_conversation > self.num_speakers:
            raise ConfigException("conversations need speakers_per_conversation <= num_speakers")
        highest = LOWEST_FUNDAMENTAL + FUNDAMENTAL_SPACING * (self.num_speakers - 1)
        if highest * len(HARMONIC_AMPLITUDES) >= self.sample_rate / 2:
            raise ConfigException("{} speakers do not fit below the Nyquist frequency at {} Hz".format(
                self.num_speakers, self.sample_rate))


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    fundamental: float
    formants: tuple
    formant_amplitudes: tuple


def speaker_profiles(spec: SynthSpec) -> List[SpeakerProfile]:
    rng = np.random.default_rng([spec.seed, 0])
    fundamentals = LOWEST_FUNDAMENTAL + FUNDAMENTAL_SPACING * rng.permutation(spec.num_speakers)
    profiles = []
    for index, fundamental in enumerate(fundamentals):
        formants = tuple(float(f) for f in np.sort(rng.uniform(400.0, 0.45 * spec.sample_rate, size=2)))
        amplitudes = tuple(float(a) for a in rng.uniform(0.2, 0.4, size=2))
        profiles.append(SpeakerProfile(speaker_id='spk{:03d}'.format(index), fundamental=float(fundamental),
                                       formants=formants, formant_amplitudes=amplitudes))
    return profiles


def synthesize(profile: SpeakerProfile, seconds, sample_rate, rng) -> np.ndarray:
    """One stretch of speech for a speaker, peak-normalized"""
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    signal = np.zeros_like(t)
    for harmonic, amplitude in enumerate(HARMONIC_AMPLITUDES, start=1):
        signal += amplitude * np.sin(2.0 * np.pi * harmonic * profile.fundamental * t + rng.uniform(0, 2 * np.pi))
    for frequency, amplitude in zip(profile.formants, profile.formant_amplitudes):
        signal += amplitude * np.sin(2.0 * np.pi * frequency * t + rng.uniform(0, 2 * np.pi))
    signal += NOISE_LEVEL * rng.standard_normal(t.shape)
    return PEAK_LEVEL * signal / np.max(np.abs(signal))


def _write_speaker_recordings(spec, profiles, out_dir):
    entries = []
    for speaker_index, profile in enumerate(profiles):
        rng = np.random.default_rng([spec.seed, 1, speaker_index])
        chunks = np.array_split(np.arange(spec.segments_per_speaker), spec.recordings_per_speaker)
        for recording_index, chunk in enumerate(chunks):
            recording_id = '{}-rec{:02d}'.format(profile.speaker_id, recording_index)
            samples = np.concatenate([synthesize(profile, spec.segment_seconds, spec.sample_rate, rng)
                                      for _ in chunk])
            storage.write_wav(os.path.join(out_dir, recording_id + '.wav'), AudioBuffer(samples, spec.sample_rate))
            for position in range(len(chunk)):
                entries.append(storage.ManifestEntry(
                    audio_path=recording_id + '.wav', recording_id=recording_id, speaker_id=profile.speaker_id,
                    start=round(position * spec.segment_seconds, 6),
                    end=round((position + 1) * spec.segment_seconds, 6)))
    return entries


def _write_conversations(spec, profiles, out_dir):
    entries = []
    annotations = []
    for conversation in range(spec.conversations):
        rng = np.random.default_rng([spec.seed, 2, conversation])
        cast = [profiles[i] for i in sorted(rng.choice(len(profiles), spec.speakers_per_conversation,
                                                       replace=False))]
        recording_id = 'conv{:03d}'.format(conversation)
        pieces = []
        intervals = []
        for turn in range(spec.turns_per_conversation):
            profile = cast[turn % len(cast)]
            start, end = turn * spec.segment_seconds, (turn + 1) * spec.segment_seconds
            pieces.append(synthesize(profile, spec.segment_seconds, spec.sample_rate, rng))
            intervals.append((round(start, 6), round(end, 6), profile.speaker_id))
            entries.append(storage.ManifestEntry(audio_path=recording_id + '.wav', recording_id=recording_id,
                                                 speaker_id=profile.speaker_id,
                                                 start=round(start, 6), end=round(end, 6)))
        storage.write_wav(os.path.join(out_dir, recording_id + '.wav'),
                          AudioBuffer(np.concatenate(pieces), spec.sample_rate))
        annotations.append(Annotation(uri=recording_id, intervals=intervals))
    return entries, annotations


def generate_corpus(spec: SynthSpec, out_dir):
    """Write WAV files and labeled manifests into out_dir; returns the manifest path"""
    spec.validate()
    os.makedirs(out_dir, exist_ok=True)
    profiles = speaker_profiles(spec)

    manifest_path = os.path.join(out_dir, MANIFEST_FILE_NAME)
    entries = _write_speaker_recordings(spec, profiles, out_dir)
    storage.write_manifest(manifest_path, entries)

    if spec.conversations:
        conversation_entries, annotations = _write_conversations(spec, profiles, out_dir)
        storage.write_manifest(os.path.join(out_dir, CONVERSATION_MANIFEST_FILE_NAME), conversation_entries)
        write_rttm(os.path.join(out_dir, REFERENCE_RTTM_FILE_NAME), annotations)

    with open(os.path.join(out_dir, 'profiles.json'), 'w') as profiles_output:
        json.dump([asdict(profile) for profile in profiles], profiles_output, indent=2)
    LOGGER.info("Synthesized {} speakers x {} segments into {}".format(
        spec.num_speakers, spec.segments_per_speaker, out_dir))
    return manifest_path
