import copy

from triplet_diarization.config import resolve_config
from triplet_diarization.synth import SynthSpec


def get_test_config():
    """Small encoder and batch so a full run finishes in seconds"""
    return resolve_config({
        'seed': 7,
        'parallelism': 2,
        'encoder': {
            'hidden_dim': 16,
            'num_layers': 1,
            'num_heads': 2,
        },
        'batch': {
            'batch_size': 8,
            'speakers_per_batch': 4,
            'min_segments_per_speaker': 2,
        },
        'optimizer': {
            'learning_rate': 1e-3,
        },
        'training': {
            'iterations': 4,
            'checkpoint_interval': 2,
        },
        'evaluation': {
            'eval_interval': 2,
        },
        'tuning': {
            'alphas': [0.8],
            'speakers_per_batch': [2, 4],
            'subset_fraction': 1.0,
        },
    })


def get_test_spec(**overrides):
    spec = {
        'num_speakers': 4,
        'segments_per_speaker': 6,
        'seed': 3,
        'conversations': 2,
        'speakers_per_conversation': 2,
        'turns_per_conversation': 6,
    }
    spec.update(overrides)
    return SynthSpec.from_dict(copy.deepcopy(spec))
