import copy
import json
import os

from singer import get_logger

from triplet_diarization.exceptions import ConfigException

LOGGER = get_logger('triplet_diarization')

CONFIG_FILE_NAME = 'config.json'

DEFAULTS = {
    'seed': 0,
    'parallelism': 0,  # 0 means auto: one thread per recording, capped by max_parallelism
    'max_parallelism': 16,
    'features': {
        'sample_rate': 8000,
        'segment_seconds': 2.0,
        'window_ms': 25.0,
        'overlap_ms': 15.0,
        'pre_emphasis': 0.97,
        'n_mels': 24,
        'n_cepstra': 20,
        'log_floor': 1e-10,
        'cepstral_mean_norm': False,
        'cache_dir': None,
    },
    'encoder': {
        'input_dim': 60,
        'hidden_dim': 256,
        'num_layers': 2,
        'num_heads': 8,
        'max_positions': 256,
        'residual_norm': True,
        'learned_positions': False,
        'use_positions': True,
    },
    'batch': {
        'batch_size': 256,
        'speakers_per_batch': 64,
        'margin': 0.8,
        'min_segments_per_speaker': 45,
    },
    'optimizer': {
        'learning_rate': 1e-4,
        'beta1': 0.9,
        'beta2': 0.999,
        'epsilon': 1e-8,
    },
    'training': {
        'iterations': 2000,
        'checkpoint_interval': 500,
    },
    'clustering': {
        'min_speakers': 2,
        'max_speakers': 10,
        'max_iter': 300,
    },
    'evaluation': {
        'eval_interval': 200,
        'collar': 0.25,
        'skip_overlap': True,
    },
    'tuning': {
        'alphas': [0.4, 0.8, 1.6],
        'speakers_per_batch': [8, 16, 32, 64],
        'subset_fraction': 0.2,
    },
}


def deep_merge(base, override):
    """Return a copy of base with every key of override laid over it, recursing into dicts"""
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def resolve_config(user_config=None, seed=None):
    config = deep_merge(DEFAULTS, user_config)
    if seed is not None:
        config['seed'] = int(seed)
    return config


def _is_positive(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool) and value > 0


def _is_positive_int(value):
    return isinstance(value, int) and not isinstance(value, bool) and value > 0


# pylint: disable=too-many-branches
def validate_config(config):
    errors = []

    for section in ('features', 'encoder', 'batch', 'optimizer', 'training', 'clustering', 'evaluation', 'tuning'):
        if not isinstance(config.get(section), dict):
            errors.append("Required section is missing from config: [{}]".format(section))
    if errors:
        return errors

    seed = config.get('seed')
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2 ** 64:
        errors.append("'seed' must be an unsigned 64-bit integer")

    features = config['features']
    for key in ('sample_rate', 'n_mels', 'n_cepstra'):
        if not _is_positive_int(features.get(key)):
            errors.append("features.{} must be a positive integer".format(key))
    for key in ('segment_seconds', 'window_ms', 'overlap_ms', 'log_floor'):
        if not _is_positive(features.get(key)):
            errors.append("features.{} must be positive".format(key))
    if _is_positive(features.get('window_ms')) and _is_positive(features.get('overlap_ms')) \
            and features['overlap_ms'] >= features['window_ms']:
        errors.append("features.overlap_ms must be smaller than features.window_ms")
    if _is_positive_int(features.get('n_mels')) and _is_positive_int(features.get('n_cepstra')) \
            and features['n_cepstra'] > features['n_mels']:
        errors.append("features.n_cepstra must not exceed features.n_mels")

    encoder = config['encoder']
    for key in ('input_dim', 'hidden_dim', 'num_layers', 'num_heads', 'max_positions'):
        if not _is_positive_int(encoder.get(key)):
            errors.append("encoder.{} must be a positive integer".format(key))
    if _is_positive_int(encoder.get('hidden_dim')) and _is_positive_int(encoder.get('num_heads')) \
            and encoder['hidden_dim'] % encoder['num_heads'] != 0:
        errors.append("encoder.hidden_dim ({}) must be divisible by encoder.num_heads ({})".format(
            encoder['hidden_dim'], encoder['num_heads']))
    if _is_positive_int(features.get('n_cepstra')) and encoder.get('input_dim') != 3 * features['n_cepstra']:
        errors.append("encoder.input_dim must equal 3 * features.n_cepstra ({})".format(3 * features['n_cepstra']))

    batch = config['batch']
    batch_size = batch.get('batch_size')
    speakers = batch.get('speakers_per_batch')
    if not _is_positive_int(batch_size) or not _is_positive_int(speakers):
        errors.append("batch.batch_size and batch.speakers_per_batch must be positive integers")
    elif batch_size % speakers != 0 or batch_size // speakers < 2:
        errors.append("batch.speakers_per_batch ({}) must divide batch.batch_size ({}) "
                      "with at least 2 segments per speaker".format(speakers, batch_size))
    if not _is_positive(batch.get('margin')):
        errors.append("batch.margin must be positive")
    if not _is_positive_int(batch.get('min_segments_per_speaker')):
        errors.append("batch.min_segments_per_speaker must be a positive integer")

    optimizer = config['optimizer']
    learning_rate = optimizer.get('learning_rate')
    if not isinstance(learning_rate, (int, float)) or learning_rate < 0:
        errors.append("optimizer.learning_rate must be non-negative")
    for key in ('beta1', 'beta2'):
        if not isinstance(optimizer.get(key), (int, float)) or not 0 <= optimizer[key] < 1:
            errors.append("optimizer.{} must be in [0, 1)".format(key))
    if not _is_positive(optimizer.get('epsilon')):
        errors.append("optimizer.epsilon must be positive")

    training = config['training']
    for key in ('iterations', 'checkpoint_interval'):
        if not _is_positive_int(training.get(key)):
            errors.append("training.{} must be a positive integer".format(key))

    clustering = config['clustering']
    min_speakers = clustering.get('min_speakers')
    max_speakers = clustering.get('max_speakers')
    if not _is_positive_int(min_speakers) or min_speakers < 2:
        errors.append("clustering.min_speakers must be an integer >= 2")
    elif not _is_positive_int(max_speakers) or max_speakers < min_speakers:
        errors.append("clustering.max_speakers must be an integer >= clustering.min_speakers")
    if not _is_positive_int(clustering.get('max_iter')):
        errors.append("clustering.max_iter must be a positive integer")

    evaluation = config['evaluation']
    if not _is_positive_int(evaluation.get('eval_interval')):
        errors.append("evaluation.eval_interval must be a positive integer")
    collar = evaluation.get('collar')
    if not isinstance(collar, (int, float)) or collar < 0:
        errors.append("evaluation.collar must be non-negative")

    tuning = config['tuning']
    alphas = tuning.get('alphas')
    if not isinstance(alphas, list) or not alphas or not all(_is_positive(alpha) for alpha in alphas):
        errors.append("tuning.alphas must be a non-empty list of positive margins")
    counts = tuning.get('speakers_per_batch')
    if not isinstance(counts, list) or not counts or not all(_is_positive_int(count) for count in counts):
        errors.append("tuning.speakers_per_batch must be a non-empty list of positive integers")
    fraction = tuning.get('subset_fraction')
    if not _is_positive(fraction) or fraction > 1:
        errors.append("tuning.subset_fraction must be in (0, 1]")

    return errors


def check_config(config):
    """Raise ConfigException listing every problem of an invalid config"""
    errors = validate_config(config)
    if len(errors) != 0:
        message = "Invalid configuration:\n   * {}".format('\n   * '.join(errors))
        LOGGER.error(message)
        raise ConfigException(message)
    return config


def load_config(path):
    try:
        with open(path, encoding='utf-8') as config_input:
            return json.load(config_input)
    except (OSError, ValueError) as exc:
        raise ConfigException("Unable to read config file {}: {}".format(path, exc)) from exc


def save_config(config, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, CONFIG_FILE_NAME)
    with open(path, 'w') as config_output:
        json.dump(config, config_output, indent=2, sort_keys=True)
        config_output.write('\n')
    LOGGER.info("Resolved config written to {}".format(path))
    return path
