import copy
import json
import math
import os
import time
from collections import OrderedDict
from dataclasses import dataclass, field, fields
from typing import List

import numpy as np
from singer import get_logger

from triplet_diarization import autodiff as ad
from triplet_diarization import storage
from triplet_diarization.clustering import kmeans
from triplet_diarization.encoder import EncoderConfig, embed_batch, forward, init_encoder
from triplet_diarization.exceptions import (ConfigException, DiarizationException, InsufficientSpeakersException,
                                            NumericException)
from triplet_diarization.metrics import LabelPair, nmi, purity

LOGGER = get_logger('triplet_diarization')

TRAIN_LOG_FILE_NAME = 'train.log'
FINAL_CHECKPOINT_NAME = 'final.dkc'
FAILED_CHECKPOINT_NAME = 'failed.dkc'


@dataclass(frozen=True)
class BatchSpec:
    batch_size: int = 256
    speakers_per_batch: int = 64
    margin: float = 0.8

    @classmethod
    def from_dict(cls, section):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in section.items() if k in names})

    @property
    def segments_per_speaker(self):
        return self.batch_size // self.speakers_per_batch

    def validate(self):
        if self.speakers_per_batch < 1 or self.batch_size % self.speakers_per_batch != 0:
            raise ConfigException("speakers_per_batch ({}) must divide batch_size ({})".format(
                self.speakers_per_batch, self.batch_size))
        if self.segments_per_speaker < 2:
            raise ConfigException("batch_size / speakers_per_batch must be >= 2 so every speaker has a positive pair")
        if self.margin <= 0:
            raise ConfigException("margin must be positive, got {}".format(self.margin))


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def from_dict(cls, section):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in section.items() if k in names})


@dataclass
class TripletBatch:
    indices: np.ndarray
    labels: List[str]
    triples: List[tuple] = field(default_factory=list)


class AdamOptimizer:
    def __init__(self, params, learning_rate=1e-4, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.first_moments = OrderedDict((name, np.zeros_like(t.values)) for name, t in self.params)
        self.second_moments = OrderedDict((name, np.zeros_like(t.values)) for name, t in self.params)

    @classmethod
    def from_dict(cls, params, section):
        config = OptimizerConfig.from_dict(section)
        return cls(params, learning_rate=config.learning_rate, beta1=config.beta1,
                   beta2=config.beta2, epsilon=config.epsilon)

    def step(self):
        self.step_count += 1
        first_correction = 1.0 - self.beta1 ** self.step_count
        second_correction = 1.0 - self.beta2 ** self.step_count
        for name, tensor in self.params:
            if tensor.grad is None:
                continue
            m = self.first_moments[name] = self.beta1 * self.first_moments[name] + (1.0 - self.beta1) * tensor.grad
            v = self.second_moments[name] = \
                self.beta2 * self.second_moments[name] + (1.0 - self.beta2) * tensor.grad ** 2
            update = (m / first_correction) / (np.sqrt(v / second_correction) + self.epsilon)
            tensor.values = tensor.values - self.learning_rate * update

    def state(self):
        arrays = OrderedDict()
        for name in self.first_moments:
            arrays['optimizer.m/' + name] = self.first_moments[name].copy()
            arrays['optimizer.v/' + name] = self.second_moments[name].copy()
        return self.step_count, arrays

    def load_state(self, step_count, arrays):
        self.step_count = step_count
        for name in self.first_moments:
            self.first_moments[name] = np.array(arrays['optimizer.m/' + name])
            self.second_moments[name] = np.array(arrays['optimizer.v/' + name])


@dataclass
class TrainState:
    model: object
    optimizer: AdamOptimizer
    rng: np.random.Generator
    iteration: int = 0
    loss_history: List[float] = field(default_factory=list)
    eval_history: List[dict] = field(default_factory=list)


def build_speaker_index(segments, min_segments=1):
    """Map speaker -> sorted segment indices, dropping speakers with fewer than min_segments"""
    index = OrderedDict()
    for i, segment in enumerate(segments):
        index.setdefault(segment.speaker_id, []).append(i)

    kept = OrderedDict()
    for speaker in sorted(index, key=str):
        if len(index[speaker]) >= min_segments:
            kept[speaker] = np.array(index[speaker], dtype=np.intp)
        else:
            LOGGER.info("Ignoring speaker {} with {} segments (< {})".format(speaker, len(index[speaker]), min_segments))
    return kept


def select_subset(segments, fraction, rng):
    """Keep the segments of a random fraction of the recordings"""
    if fraction >= 1.0:
        return list(segments)
    recordings = sorted({segment.recording_id for segment in segments})
    count = max(1, int(round(fraction * len(recordings))))
    chosen = {recordings[i] for i in rng.choice(len(recordings), size=count, replace=False)}
    return [segment for segment in segments if segment.recording_id in chosen]


def sample_batch(speaker_index, spec: BatchSpec, rng) -> TripletBatch:
    per_speaker = spec.segments_per_speaker
    eligible = [speaker for speaker, indices in speaker_index.items() if len(indices) >= per_speaker]
    if len(eligible) < spec.speakers_per_batch:
        raise InsufficientSpeakersException(
            "Need {} speakers with at least {} segments each, dataset has {}".format(
                spec.speakers_per_batch, per_speaker, len(eligible)))

    indices = []
    labels = []
    for choice in rng.choice(len(eligible), size=spec.speakers_per_batch, replace=False):
        speaker = eligible[choice]
        indices.extend(rng.choice(speaker_index[speaker], size=per_speaker, replace=False))
        labels.extend([speaker] * per_speaker)
    return TripletBatch(indices=np.array(indices, dtype=np.intp), labels=labels)


def pairwise_sq_distances(embeddings):
    embeddings = np.asarray(embeddings, dtype=np.float64)
    norms = (embeddings ** 2).sum(axis=1)
    distances = norms[:, np.newaxis] + norms[np.newaxis, :] - 2.0 * embeddings @ embeddings.T
    distances = np.maximum((distances + distances.T) / 2.0, 0.0)
    np.fill_diagonal(distances, 0.0)
    return distances


def mine_semi_hard(distances, labels, margin):
    """(anchor, positive, negative) triples for every ordered same-speaker pair

    Within the band d_ap <= d_an <= d_ap + margin the closest negative wins. Without a
    band member the closest negative with d_an > d_ap is used; otherwise the pair is
    skipped. Ties go to the lowest index.
    """
    labels = np.asarray(labels)
    triples = []
    for anchor in range(len(labels)):
        negatives = np.flatnonzero(labels != labels[anchor])
        if negatives.size == 0:
            continue
        negative_distances = distances[anchor, negatives]
        for positive in np.flatnonzero(labels == labels[anchor]):
            if positive == anchor:
                continue
            positive_distance = distances[anchor, positive]
            in_band = (negative_distances >= positive_distance) & \
                      (negative_distances <= positive_distance + margin)
            if not in_band.any():
                in_band = negative_distances > positive_distance
                if not in_band.any():
                    continue
            candidates = np.where(in_band, negative_distances, np.inf)
            triples.append((anchor, int(positive), int(negatives[np.argmin(candidates)])))
    return triples


def triplet_hinge(positive_distances, negative_distances, margin):
    """Mean of max(0, d_ap - d_an + margin) over aligned distance tensors"""
    return ad.mean(ad.relu(ad.add_scalar(ad.sub(positive_distances, negative_distances), margin)), axis=0)


def triplet_loss(embeddings, triples, margin):
    if len(triples) == 0:
        return ad.Tensor(0.0)
    anchors, positives, negatives = (np.array(column, dtype=np.intp) for column in zip(*triples))
    anchor_rows = ad.take_rows(embeddings, anchors)
    positive_distances = ad.sq_l2_distance(anchor_rows, ad.take_rows(embeddings, positives))
    negative_distances = ad.sq_l2_distance(anchor_rows, ad.take_rows(embeddings, negatives))
    return triplet_hinge(positive_distances, negative_distances, margin)


def evaluate(model, dev_segments, seed=0, max_iter=300):
    """k-means with the known speaker count on dev embeddings, scored by NMI and purity"""
    truth = [segment.speaker_id for segment in dev_segments]
    speakers = len(set(truth))
    embeddings = embed_batch(model, dev_segments)
    result = kmeans(embeddings, speakers, seed=seed, max_iter=max_iter)
    pairs = LabelPair(predicted=list(result.assignments), truth=truth)
    return nmi(pairs), purity(pairs)


def new_train_state(run_config):
    encoder_config = EncoderConfig.from_dict(run_config['encoder'])
    model = init_encoder(encoder_config, seed=run_config['seed'])
    optimizer = AdamOptimizer.from_dict(model.trainable_parameters(), run_config['optimizer'])
    return TrainState(model=model, optimizer=optimizer, rng=np.random.default_rng(run_config['seed']))


def save_train_state(path, run_config, state: TrainState):
    step_count, moments = state.optimizer.state()
    meta = {
        'iteration': state.iteration,
        'optimizer_steps': step_count,
        'rng_state': state.rng.bit_generator.state,
        'loss_history': state.loss_history,
        'eval_history': state.eval_history,
    }
    storage.save_checkpoint(path, run_config, state.model, extra_arrays=moments, train_meta=meta)
    LOGGER.info("Checkpoint written to {}".format(path))


def load_train_state(path):
    """Restore (run_config, TrainState) from a checkpoint written by save_train_state"""
    run_config, model, arrays, meta = storage.load_checkpoint(path)
    optimizer = AdamOptimizer.from_dict(model.trainable_parameters(), run_config['optimizer'])
    rng = np.random.default_rng()
    if meta:
        optimizer.load_state(meta['optimizer_steps'], arrays)
        rng.bit_generator.state = meta['rng_state']
    state = TrainState(model=model, optimizer=optimizer, rng=rng,
                       iteration=meta.get('iteration', 0) if meta else 0,
                       loss_history=list(meta.get('loss_history', [])) if meta else [],
                       eval_history=list(meta.get('eval_history', [])) if meta else [])
    return run_config, state


def format_log_line(iteration, loss, n_triples, wall_ms, scores=None):
    columns = [str(iteration), repr(float(loss)), str(n_triples), '{:.1f}'.format(wall_ms)]
    if scores is not None:
        columns.extend('{:.6f}'.format(score) for score in scores)
    return '\t'.join(columns) + '\n'


def _open_train_log(path, iteration):
    """Open train.log for writing, keeping only lines up to the resumed iteration"""
    kept = []
    if iteration and os.path.exists(path):
        with open(path) as log:
            for line in log:
                logged = line.split('\t', 1)[0]
                if logged.isdigit() and int(logged) <= iteration:
                    kept.append(line)
    log_file = open(path, 'w')
    log_file.writelines(kept)
    return log_file


def _dump_failure(out_dir, run_config, state, loss, n_triples):
    if not out_dir:
        return
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, 'failure.json'), 'w') as failure:
        json.dump({'iteration': state.iteration + 1, 'loss': repr(loss), 'mined_triples': n_triples}, failure)
    save_train_state(os.path.join(out_dir, FAILED_CHECKPOINT_NAME), run_config, state)


# pylint: disable=too-many-arguments,too-many-locals
def train(segments, dev_segments, run_config, out_dir=None, state=None, iterations=None):
    """Run the triplet training loop and return the final TrainState

    Every eval_interval iterations the dev set is clustered and scored. Checkpoints
    land in out_dir every checkpoint_interval iterations and at the end.
    """
    spec = BatchSpec.from_dict(run_config['batch'])
    spec.validate()
    training = run_config['training']
    evaluation = run_config['evaluation']
    iterations = iterations or training['iterations']

    if state is None:
        state = new_train_state(run_config)
    speaker_index = build_speaker_index(segments, run_config['batch']['min_segments_per_speaker'])
    frames = np.stack([segment.frames for segment in segments]) if segments else None
    model = state.model

    log_file = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_file = _open_train_log(os.path.join(out_dir, TRAIN_LOG_FILE_NAME), state.iteration)

    LOGGER.info("Training from iteration {} to {} on {} speakers".format(
        state.iteration, iterations, len(speaker_index)))
    try:
        while state.iteration < iterations:
            iteration = state.iteration + 1
            started = time.perf_counter()

            batch = sample_batch(speaker_index, spec, state.rng)
            embeddings = forward(model, frames[batch.indices])
            batch.triples = mine_semi_hard(pairwise_sq_distances(embeddings.values), batch.labels, spec.margin)
            loss = triplet_loss(embeddings, batch.triples, spec.margin)
            loss_value = loss.item()

            if not math.isfinite(loss_value):
                LOGGER.critical("Non-finite loss {} at iteration {}".format(loss_value, iteration))
                _dump_failure(out_dir, run_config, state, loss_value, len(batch.triples))
                raise NumericException("Non-finite loss {} at iteration {}".format(loss_value, iteration))

            if batch.triples:
                model.zero_grad()
                ad.backward(loss)
                state.optimizer.step()

            state.iteration = iteration
            state.loss_history.append(loss_value)
            wall_ms = (time.perf_counter() - started) * 1000.0
            LOGGER.debug("Iteration {}: loss {} with {} triples".format(iteration, loss_value, len(batch.triples)))

            scores = None
            if dev_segments and iteration % evaluation['eval_interval'] == 0:
                scores = evaluate(model, dev_segments, seed=run_config['seed'],
                                  max_iter=run_config['clustering']['max_iter'])
                state.eval_history.append({'iteration': iteration, 'nmi': scores[0], 'purity': scores[1]})
                LOGGER.info("Iteration {}: dev NMI {:.4f} purity {:.4f}".format(iteration, *scores))

            if log_file:
                log_file.write(format_log_line(iteration, loss_value, len(batch.triples), wall_ms, scores))
                log_file.flush()

            if out_dir and iteration % training['checkpoint_interval'] == 0:
                save_train_state(os.path.join(out_dir, 'checkpoint-{:06d}.dkc'.format(iteration)), run_config, state)
    finally:
        if log_file:
            log_file.close()

    if out_dir:
        save_train_state(os.path.join(out_dir, FINAL_CHECKPOINT_NAME), run_config, state)
    return state


def grid_search(alphas, speaker_counts, segments, dev_segments, run_config, out_dir=None):
    """Train once per (margin, speakers-per-batch) cell and collect every eval point

    A failing cell is recorded with its error and the remaining cells still run.
    """
    rows = []
    subset_rng = np.random.default_rng(run_config['seed'])
    subset = select_subset(segments, run_config.get('tuning', {}).get('subset_fraction', 1.0), subset_rng)

    for alpha in alphas:
        for speakers in speaker_counts:
            cell_config = copy.deepcopy(run_config)
            cell_config['batch']['margin'] = alpha
            cell_config['batch']['speakers_per_batch'] = speakers
            cell_dir = os.path.join(out_dir, 'alpha-{}_M-{}'.format(alpha, speakers)) if out_dir else None
            LOGGER.info("Grid cell alpha={} M={}".format(alpha, speakers))
            try:
                state = train(subset, dev_segments, cell_config, out_dir=cell_dir)
            except DiarizationException as exc:
                LOGGER.error("Grid cell alpha={} M={} failed: {}".format(alpha, speakers, exc))
                rows.append({'alpha': alpha, 'M': speakers, 'iteration': None,
                             'nmi': float('nan'), 'purity': float('nan'), 'error': str(exc)})
                continue
            for point in state.eval_history:
                rows.append({'alpha': alpha, 'M': speakers, 'iteration': point['iteration'],
                             'nmi': point['nmi'], 'purity': point['purity'], 'error': None})
    return rows
