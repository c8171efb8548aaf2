"""Self-attention segment embedder: T x d frames -> D-dimensional vector.

Input embedding (kernel-1 conv) + fixed random positional table, L stacked
multi-head self-attention blocks, each followed by a kernel-1 conv feed-forward,
then mean pooling over time.
"""
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np

from triplet_diarization import autodiff as ad
from triplet_diarization.exceptions import ConfigException, ShapeMismatchException

EMBED_CHUNK_SIZE = 64


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 60
    hidden_dim: int = 256
    num_layers: int = 2
    num_heads: int = 8
    max_positions: int = 256
    residual_norm: bool = True
    learned_positions: bool = False
    use_positions: bool = True

    @classmethod
    def from_dict(cls, section):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in section.items() if k in names})

    def to_dict(self):
        return asdict(self)

    @property
    def head_dim(self):
        return self.hidden_dim // self.num_heads

    def validate(self):
        if self.num_layers < 1 or self.num_heads < 1 or self.max_positions < 1:
            raise ConfigException("num_layers, num_heads and max_positions must all be >= 1")
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigException("hidden_dim ({}) must be divisible by num_heads ({})".format(
                self.hidden_dim, self.num_heads))


class EncoderModel:
    def __init__(self, config: EncoderConfig, params):
        self.config = config
        self.params = params

    def __getitem__(self, name):
        return self.params[name]

    def parameters(self):
        return list(self.params.items())

    def trainable_parameters(self):
        return [(name, tensor) for name, tensor in self.params.items() if tensor.requires_grad]

    def zero_grad(self):
        for tensor in self.params.values():
            tensor.zero_grad()

    def layer(self, index):
        prefix = 'layers.{}.'.format(index)
        return {name[len(prefix):]: tensor for name, tensor in self.params.items() if name.startswith(prefix)}

    def state(self):
        return OrderedDict((name, tensor.values.copy()) for name, tensor in self.params.items())

    @classmethod
    def from_state(cls, config, arrays):
        reference = init_encoder(config, seed=0)
        missing = set(reference.params) - set(arrays)
        if missing:
            raise ShapeMismatchException("Missing encoder parameters: {}".format(', '.join(sorted(missing))))
        for name, tensor in reference.params.items():
            if arrays[name].shape != tensor.shape:
                raise ShapeMismatchException("Parameter {} has shape {}, config expects {}".format(
                    name, arrays[name].shape, tensor.shape))
            tensor.values = np.array(arrays[name], dtype=np.float64)
        return reference


def _glorot(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_encoder(config: EncoderConfig, seed=0) -> EncoderModel:
    config.validate()
    rng = np.random.default_rng(seed)
    d, width, head_dim = config.input_dim, config.hidden_dim, config.head_dim

    params = OrderedDict()
    params['input.weight'] = ad.parameter(_glorot(rng, d, width))
    params['input.bias'] = ad.parameter(np.zeros(width))
    # Fixed random lookup table, one row per frame position
    params['positions'] = ad.Tensor(rng.standard_normal((config.max_positions, width)) / math.sqrt(width),
                                    requires_grad=config.learned_positions)

    for layer in range(config.num_layers):
        prefix = 'layers.{}.'.format(layer)
        for head in range(config.num_heads):
            for projection in ('query', 'key', 'value'):
                params['{}head.{}.{}'.format(prefix, head, projection)] = ad.parameter(
                    _glorot(rng, width, head_dim))
        params[prefix + 'output.weight'] = ad.parameter(_glorot(rng, width, width))
        params[prefix + 'output.bias'] = ad.parameter(np.zeros(width))
        params[prefix + 'ff1.weight'] = ad.parameter(_glorot(rng, width, width))
        params[prefix + 'ff1.bias'] = ad.parameter(np.zeros(width))
        params[prefix + 'ff2.weight'] = ad.parameter(_glorot(rng, width, width))
        params[prefix + 'ff2.bias'] = ad.parameter(np.zeros(width))
        for norm in ('norm1', 'norm2'):
            params[prefix + norm + '.gain'] = ad.parameter(np.ones(width))
            params[prefix + norm + '.bias'] = ad.parameter(np.zeros(width))

    for name, tensor in params.items():
        tensor.name = name
    return EncoderModel(config, params)


def positional_encode(embedded, table):
    """embedded[..., t, :] + table[t]"""
    steps = embedded.shape[-2]
    if steps > table.shape[0]:
        raise ConfigException("Segment has {} frames but the positional table holds {}; "
                              "increase encoder.max_positions".format(steps, table.shape[0]))
    positions = np.broadcast_to(np.arange(steps), embedded.shape[:-1])
    return ad.add(embedded, ad.take_rows(table, positions))


def attention_block(h, layer, num_heads, residual_norm=True, weights_out=None):
    width = h.shape[-1]
    if width % num_heads != 0 or layer['output.weight'].shape[0] != width:
        raise ShapeMismatchException("attention_block: input width {} does not match layer width {}".format(
            width, layer['output.weight'].shape[0]))

    head_dim = width // num_heads
    heads = []
    for head in range(num_heads):
        query = ad.matmul(h, layer['head.{}.query'.format(head)])
        key = ad.matmul(h, layer['head.{}.key'.format(head)])
        value = ad.matmul(h, layer['head.{}.value'.format(head)])
        scores = ad.scale(ad.matmul(query, ad.transpose(key)), 1.0 / math.sqrt(head_dim))
        weights = ad.softmax(scores, axis=-1)
        if weights_out is not None:
            weights_out.append(weights.values)
        heads.append(ad.matmul(weights, value))

    attended = ad.conv1d_k1(ad.concat(heads, axis=-1), layer['output.weight'], layer['output.bias'])
    if residual_norm:
        attended = ad.layer_norm(ad.add(h, attended), layer['norm1.gain'], layer['norm1.bias'])

    transformed = ad.conv1d_k1(ad.relu(ad.conv1d_k1(attended, layer['ff1.weight'], layer['ff1.bias'])),
                               layer['ff2.weight'], layer['ff2.bias'])
    if residual_norm:
        transformed = ad.layer_norm(ad.add(attended, transformed), layer['norm2.gain'], layer['norm2.bias'])
    return transformed


def encode_frames(model: EncoderModel, frames, weights_out=None):
    """Per-frame representations before pooling, [..., T, D]"""
    config = model.config
    if frames.shape[-1] != config.input_dim:
        raise ShapeMismatchException("Features have width {}, encoder expects {}".format(
            frames.shape[-1], config.input_dim))

    hidden = ad.conv1d_k1(frames, model['input.weight'], model['input.bias'])
    if config.use_positions:
        hidden = positional_encode(hidden, model['positions'])
    for index in range(config.num_layers):
        layer_weights = [] if weights_out is not None else None
        hidden = attention_block(hidden, model.layer(index), config.num_heads,
                                 residual_norm=config.residual_norm, weights_out=layer_weights)
        if weights_out is not None:
            weights_out.append(np.stack(layer_weights, axis=-3))
    return hidden


def forward(model: EncoderModel, frames):
    """Differentiable embedding of a [B, T, d] (or [T, d]) frame tensor -> [B, D] (or [D])"""
    if not isinstance(frames, ad.Tensor):
        frames = ad.Tensor(frames)
    return ad.mean(encode_frames(model, frames), axis=-2)


def _stack_frames(segments):
    lengths = {segment.frames.shape for segment in segments}
    if len(lengths) > 1:
        raise ShapeMismatchException("Segments must share the same T x d shape, got {}".format(sorted(lengths)))
    return np.stack([segment.frames for segment in segments])


def embed_segment(model: EncoderModel, features):
    return forward(model, features.frames[np.newaxis]).values[0]


def embed_batch(model: EncoderModel, segments, chunk_size=EMBED_CHUNK_SIZE):
    segments = list(segments)
    if not segments:
        return np.zeros((0, model.config.hidden_dim))
    frames = _stack_frames(segments)
    return np.concatenate([
        forward(model, frames[start:start + chunk_size]).values
        for start in range(0, len(segments), chunk_size)
    ])


def attention_weights(model: EncoderModel, features):
    """Per-layer [H, T, T] attention weight matrices for one segment"""
    collected = []
    encode_frames(model, ad.Tensor(features.frames), weights_out=collected)
    return collected
