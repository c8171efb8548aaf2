#!/usr/bin/env python3

import argparse
import hashlib
import json
import os
import sys
import traceback
from collections import OrderedDict
from dataclasses import asdict

import numpy as np
from joblib import Parallel, delayed, parallel_backend
from singer import get_logger

from triplet_diarization import storage
from triplet_diarization.clustering import kmeans, xmeans
from triplet_diarization.config import check_config, deep_merge, load_config, resolve_config, save_config
from triplet_diarization.encoder import embed_batch
from triplet_diarization.exceptions import (ChecksumException, ConfigException, DataException,
                                            DiarizationException, EmptyTimelineException,
                                            InsufficientSpeakersException, ManifestValidationException,
                                            NumericException, SegmentTooShortException, ShapeMismatchException)
from triplet_diarization.features import FeatureConfig, SegmentFeatures, featurize_recordings, segment_audio
from triplet_diarization.metrics import aggregate_der, der, read_rttm, segments_to_annotation, write_rttm
from triplet_diarization.synth import SynthSpec, generate_corpus
from triplet_diarization.trainer import grid_search, load_train_state, new_train_state, train

__version__ = '0.1.0'

LOGGER = get_logger('triplet_diarization')

FEATURE_CACHE_SUFFIX = '.dkf'
TUNING_TABLE_FILE_NAME = 'tuning.tsv'
TUNING_COLUMNS = ('alpha', 'M', 'iteration', 'nmi', 'purity')


# Featurization --------------------------------------------------------------

def feature_cache_path(cache_dir, entry, feature_config: FeatureConfig):
    """Cache file of one manifest entry, keyed by its audio, region and every feature setting"""
    key = json.dumps([entry.audio_path, entry.start, entry.end, asdict(feature_config)], sort_keys=True)
    return os.path.join(cache_dir, hashlib.sha1(key.encode('utf-8')).hexdigest() + FEATURE_CACHE_SUFFIX)


def _load_audio(entries, sample_rate, parallelism):
    paths = list(OrderedDict.fromkeys(entry.audio_path for entry in entries))
    with parallel_backend('threading', n_jobs=parallelism):
        buffers = Parallel()(delayed(storage.read_wav)(path, sample_rate) for path in paths)
    return dict(zip(paths, buffers))


def _segments_from_cache(frames, count, entry, offset, feature_config):
    if count == 0 or frames.shape[0] % count != 0:
        return None
    return [
        SegmentFeatures(frames=chunk, segment_start=offset + i * feature_config.segment_seconds,
                        segment_duration=feature_config.segment_seconds,
                        speaker_id=entry.speaker_id, recording_id=entry.recording_id)
        for i, chunk in enumerate(np.split(frames, count))
    ]


# pylint: disable=too-many-locals
def featurize_manifest(entries, feature_config: FeatureConfig, parallelism=0, max_parallelism=16, cache_dir=None):
    """Segment features of every manifest entry, in manifest order

    Entries with start/end are oracle speech regions: only their samples are
    segmented and segment starts stay absolute within the recording.
    """
    entries = list(entries)
    if not entries:
        return []
    if parallelism == 0:
        parallelism = min(len(entries), max_parallelism)

    audio_by_path = _load_audio(entries, feature_config.sample_rate, parallelism)
    per_entry = [None] * len(entries)
    pending = []
    for position, entry in enumerate(entries):
        region, offset = storage.entry_audio(entry, audio_by_path[entry.audio_path])
        count = len(segment_audio(region, feature_config.segment_seconds))
        if cache_dir:
            path = feature_cache_path(cache_dir, entry, feature_config)
            if os.path.exists(path):
                per_entry[position] = _segments_from_cache(storage.read_feature_cache(path), count, entry, offset,
                                                           feature_config)
                if per_entry[position] is not None:
                    continue
                LOGGER.warning("Ignoring stale feature cache {}".format(path))
        pending.append((position, region, offset, count))

    computed = featurize_recordings(
        [(region, entries[position].recording_id, entries[position].speaker_id, offset)
         for position, region, offset, _ in pending],
        feature_config, parallelism=parallelism, max_parallelism=max_parallelism)

    cursor = 0
    for position, _, _, count in pending:
        per_entry[position] = computed[cursor:cursor + count]
        cursor += count
        if cache_dir and count:
            os.makedirs(cache_dir, exist_ok=True)
            storage.write_feature_cache(feature_cache_path(cache_dir, entries[position], feature_config),
                                        np.concatenate([segment.frames for segment in per_entry[position]]))

    return [segment for segments in per_entry for segment in segments]


def featurize_manifest_file(path, run_config, require_speaker=False, cache_dir=None):
    entries = storage.load_manifest(path, require_speaker=require_speaker)
    feature_config = FeatureConfig.from_dict(run_config['features'])
    return featurize_manifest(entries, feature_config,
                              parallelism=run_config['parallelism'],
                              max_parallelism=run_config['max_parallelism'],
                              cache_dir=cache_dir or run_config['features'].get('cache_dir'))


def group_by_recording(segments):
    recordings = OrderedDict()
    for segment in segments:
        recordings.setdefault(segment.recording_id, []).append(segment)
    return recordings


def checkpoint_run_config(checkpoint_config, user_config=None, seed=None):
    """Checkpoint config with user overrides; features and encoder must stay as trained"""
    run_config = check_config(resolve_config(deep_merge(checkpoint_config, user_config), seed=seed))
    for section in ('features', 'encoder'):
        if user_config and section in user_config and run_config[section] != checkpoint_config[section]:
            raise ConfigException("Config section [{}] does not match the checkpoint it is used with".format(section))
    return run_config


# Commands -------------------------------------------------------------------

# pylint: disable=too-many-arguments
def cmd_train(manifest, dev_manifest, run_config, out_dir, resume_from=None, iterations=None):
    if resume_from:
        checkpoint_config, state = load_train_state(resume_from)
        run_config = checkpoint_run_config(checkpoint_config)
        LOGGER.info("Resuming from {} at iteration {}".format(resume_from, state.iteration))
    else:
        run_config = check_config(run_config)
        state = new_train_state(run_config)

    segments = featurize_manifest_file(manifest, run_config, require_speaker=True)
    dev_segments = featurize_manifest_file(dev_manifest, run_config, require_speaker=True) if dev_manifest else []
    save_config(run_config, out_dir)
    return train(segments, dev_segments, run_config, out_dir=out_dir, state=state, iterations=iterations)


def cmd_embed(manifest, checkpoint, out_path, user_config=None, seed=None, cache_dir=None):
    checkpoint_config, model, _, _ = storage.load_checkpoint(checkpoint)
    run_config = checkpoint_run_config(checkpoint_config, user_config, seed)
    segments = featurize_manifest_file(manifest, run_config, cache_dir=cache_dir)

    embeddings = embed_batch(model, segments)
    out_dir = os.path.dirname(os.path.abspath(out_path))
    os.makedirs(out_dir, exist_ok=True)
    storage.write_embeddings(out_path, segments, embeddings)
    save_config(run_config, out_dir)
    LOGGER.info("Wrote {} embeddings of dimension {} to {}".format(len(segments), model.config.hidden_dim, out_path))
    return len(segments)


def cluster_recording(embeddings, run_config, num_speakers=None):
    clustering = run_config['clustering']
    count = embeddings.shape[0]
    if num_speakers:
        if count < num_speakers:
            raise DataException("{} segments cannot be split into {} speakers".format(count, num_speakers))
        return kmeans(embeddings, num_speakers, seed=run_config['seed'], max_iter=clustering['max_iter'])

    if count < clustering['min_speakers']:
        raise DataException("{} segments are too few to estimate at least {} speakers".format(
            count, clustering['min_speakers']))
    return xmeans(embeddings, k_min=clustering['min_speakers'], k_max=min(clustering['max_speakers'], count),
                  seed=run_config['seed'], max_iter=clustering['max_iter'])


# pylint: disable=too-many-arguments
def cmd_diarize(source, checkpoint, out_path, user_config=None, seed=None, num_speakers=None):
    """Diarize a WAV file or every recording of a manifest into one RTTM file"""
    checkpoint_config, model, _, _ = storage.load_checkpoint(checkpoint)
    run_config = checkpoint_run_config(checkpoint_config, user_config, seed)
    feature_config = FeatureConfig.from_dict(run_config['features'])

    if source.lower().endswith('.wav'):
        recording_id = os.path.splitext(os.path.basename(source))[0]
        entries = [storage.ManifestEntry(audio_path=os.path.abspath(source), recording_id=recording_id)]
        segments = featurize_manifest(entries, feature_config, parallelism=1)
    else:
        segments = featurize_manifest_file(source, run_config)

    annotations = []
    for recording_id, recording_segments in group_by_recording(segments).items():
        result = cluster_recording(embed_batch(model, recording_segments), run_config, num_speakers=num_speakers)
        LOGGER.info("{}: {} segments, {} speakers".format(recording_id, len(recording_segments), result.estimated_k))
        annotations.append(segments_to_annotation(
            recording_id,
            [segment.segment_start for segment in recording_segments],
            [segment.segment_duration for segment in recording_segments],
            ['spk{}'.format(label) for label in result.assignments]))
    if not annotations:
        raise DataException("No segment of at least {} s found in {}".format(feature_config.segment_seconds, source))

    out_dir = os.path.dirname(os.path.abspath(out_path))
    os.makedirs(out_dir, exist_ok=True)
    write_rttm(out_path, annotations)
    save_config(run_config, out_dir)
    LOGGER.info("RTTM written to {}".format(out_path))
    return annotations


def format_der_line(result):
    return '{}\t{:.3f}\t{:.3f}\t{:.3f}\t{:.3f}\t{:.3f}%\t{:.3f}%\n'.format(
        result.uri, result.miss, result.false_alarm, result.confusion, result.total,
        100.0 * result.der, 100.0 * result.confusion_only)


def cmd_score(reference_path, hypothesis_path, collar=0.25, skip_overlap=True, out=None):
    """Per-recording and total DER report; returns (per-recording results, total)"""
    references = read_rttm(reference_path)
    hypotheses = read_rttm(hypothesis_path)
    missing = sorted(set(references) - set(hypotheses))
    unexpected = sorted(set(hypotheses) - set(references))
    if missing or unexpected:
        raise DataException("Recording sets differ. Missing from hypothesis: {}. Not in reference: {}".format(
            ', '.join(missing) or '-', ', '.join(unexpected) or '-'))

    results = [der(reference, hypotheses[uri], collar=collar, skip_overlap=skip_overlap)
               for uri, reference in references.items()]
    total = aggregate_der(results)

    out = out or sys.stdout
    out.write('uri\tmiss\tfalse_alarm\tconfusion\ttotal\tDER\tconfusion_only\n')
    for result in results + [total]:
        out.write(format_der_line(result))
    LOGGER.info("DER {:.3f}% over {} recordings".format(100.0 * total.der, len(results)))
    return results, total


def format_tuning_row(row):
    return '\t'.join([
        repr(float(row['alpha'])), str(row['M']),
        'NA' if row['iteration'] is None else str(row['iteration']),
        '{:.6f}'.format(row['nmi']), '{:.6f}'.format(row['purity'])]) + '\n'


# pylint: disable=too-many-arguments
def cmd_tune(manifest, dev_manifest, run_config, out_dir, alphas=None, speaker_counts=None):
    run_config = check_config(run_config)
    alphas = run_config['tuning']['alphas'] if alphas is None else list(alphas)
    speaker_counts = run_config['tuning']['speakers_per_batch'] if speaker_counts is None else list(speaker_counts)
    if not alphas or not speaker_counts:
        raise ConfigException("Tuning grids must not be empty (alphas: {}, speakers per batch: {})".format(
            alphas, speaker_counts))
    if not dev_manifest:
        raise ConfigException("Tuning needs a dev manifest to score every cell")

    segments = featurize_manifest_file(manifest, run_config, require_speaker=True)
    dev_segments = featurize_manifest_file(dev_manifest, run_config, require_speaker=True)
    save_config(run_config, out_dir)
    rows = grid_search(alphas, speaker_counts, segments, dev_segments, run_config, out_dir=out_dir)

    path = os.path.join(out_dir, TUNING_TABLE_FILE_NAME)
    with open(path, 'w') as table:
        table.write('\t'.join(TUNING_COLUMNS) + '\n')
        for row in rows:
            table.write(format_tuning_row(row))
    failed = sum(1 for row in rows if row['error'])
    LOGGER.info("Tuning table with {} rows written to {} ({} failed cells)".format(len(rows), path, failed))
    return rows


def cmd_synth(spec, out_dir, seed=None):
    if seed is not None:
        spec = dict(spec, seed=int(seed))
    return generate_corpus(SynthSpec.from_dict(spec), out_dir)


# Command line ---------------------------------------------------------------

class ArgumentParser(argparse.ArgumentParser):
    """Usage errors become ConfigException (exit code 1)"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigException(message)


def _run_config(args):
    user_config = load_config(args.config) if args.config else {}
    return user_config, resolve_config(user_config, seed=args.seed)


def _train(args):
    _, run_config = _run_config(args)
    cmd_train(args.manifest, args.dev_manifest, run_config, args.out or 'out',
              resume_from=args.resume_from, iterations=args.iterations)


def _embed(args):
    user_config, _ = _run_config(args)
    cmd_embed(args.manifest, args.checkpoint, args.out or 'embeddings.bin', user_config=user_config,
              seed=args.seed, cache_dir=args.cache_dir)


def _diarize(args):
    user_config, _ = _run_config(args)
    if args.num_speakers is None and (args.min_speakers is not None or args.max_speakers is not None):
        user_config = deep_merge(user_config, {'clustering': {
            key: value for key, value in (('min_speakers', args.min_speakers), ('max_speakers', args.max_speakers))
            if value is not None}})
    cmd_diarize(args.input, args.checkpoint, args.out or 'hypothesis.rttm', user_config=user_config,
                seed=args.seed, num_speakers=args.num_speakers)


def _score(args):
    _, run_config = _run_config(args)
    evaluation = run_config['evaluation']
    collar = evaluation['collar'] if args.collar is None else args.collar
    skip_overlap = evaluation['skip_overlap'] if args.skip_overlap is None else args.skip_overlap
    if args.out:
        with open(args.out, 'w') as report:
            cmd_score(args.reference, args.hypothesis, collar=collar, skip_overlap=skip_overlap, out=report)
    else:
        cmd_score(args.reference, args.hypothesis, collar=collar, skip_overlap=skip_overlap)


def _tune(args):
    _, run_config = _run_config(args)
    cmd_tune(args.manifest, args.dev_manifest, run_config, args.out or 'tuning',
             alphas=args.alphas, speaker_counts=args.speakers_per_batch)


def _synth(args):
    try:
        with open(args.spec, encoding='utf-8') as spec_input:
            spec = json.load(spec_input)
    except (OSError, ValueError) as exc:
        raise ConfigException("Unable to read synth spec {}: {}".format(args.spec, exc)) from exc
    cmd_synth(spec, args.out or 'synth', seed=args.seed)


def build_arg_parser():
    common = ArgumentParser(add_help=False)
    common.add_argument('-c', '--config', help='Config file')
    common.add_argument('--seed', type=int, help='Random seed, overrides the config')
    common.add_argument('--out', help='Output directory or file')

    arg_parser = ArgumentParser(prog='triplet-diarization')
    arg_parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    commands = arg_parser.add_subparsers(dest='command', required=True)

    train_parser = commands.add_parser('train', parents=[common], help='Train an encoder')
    train_parser.add_argument('--manifest', required=True)
    train_parser.add_argument('--dev-manifest')
    train_parser.add_argument('--resume-from', help='Checkpoint to continue from')
    train_parser.add_argument('--iterations', type=int)
    train_parser.set_defaults(func=_train)

    embed_parser = commands.add_parser('embed', parents=[common], help='Write segment embeddings')
    embed_parser.add_argument('--manifest', required=True)
    embed_parser.add_argument('--checkpoint', required=True)
    embed_parser.add_argument('--cache-dir', help='Directory of DKF1 feature caches')
    embed_parser.set_defaults(func=_embed)

    diarize_parser = commands.add_parser('diarize', parents=[common], help='Diarize into an RTTM file')
    diarize_parser.add_argument('input', help='WAV file or manifest')
    diarize_parser.add_argument('--checkpoint', required=True)
    diarize_parser.add_argument('--num-speakers', type=int, help='Known speaker count (k-means only)')
    diarize_parser.add_argument('--min-speakers', type=int)
    diarize_parser.add_argument('--max-speakers', type=int)
    diarize_parser.set_defaults(func=_diarize)

    score_parser = commands.add_parser('score', parents=[common], help='Diarization error rate')
    score_parser.add_argument('--reference', required=True)
    score_parser.add_argument('--hypothesis', required=True)
    score_parser.add_argument('--collar', type=float)
    score_parser.add_argument('--skip-overlap', action=argparse.BooleanOptionalAction, default=None)
    score_parser.set_defaults(func=_score)

    tune_parser = commands.add_parser('tune', parents=[common], help='Grid search margin x speakers per batch')
    tune_parser.add_argument('--manifest', required=True)
    tune_parser.add_argument('--dev-manifest', required=True)
    tune_parser.add_argument('--alphas', type=float, nargs='*')
    tune_parser.add_argument('--speakers-per-batch', type=int, nargs='*')
    tune_parser.set_defaults(func=_tune)

    synth_parser = commands.add_parser('synth', parents=[common], help='Generate a synthetic corpus')
    synth_parser.add_argument('--spec', required=True, help='JSON synth spec')
    synth_parser.set_defaults(func=_synth)

    return arg_parser


def main(argv=None):
    try:
        args = build_arg_parser().parse_args(argv)
        args.func(args)
    except DiarizationException as exc:
        LOGGER.error(str(exc))
        LOGGER.debug(traceback.format_exc())
        return exc.exit_code

    LOGGER.debug("Exiting normally")
    return 0


if __name__ == '__main__':
    sys.exit(main())
