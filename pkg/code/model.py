"""
LeNet-class classifier on top of tensor_core.

The same code serves the raw-pixel baseline (1 input channel) and the
thermometer-encoded defense model (k input channels):

    conv(5x5, c1) -> relu -> maxpool(2) -> conv(5x5, c2) -> relu -> maxpool(2)
        -> dense(units) -> relu -> dense(num_classes)

Setting both conv filter counts to 0 gives a dense-only network and setting
dense_units to 0 removes the hidden layer, which leaves a linear classifier.
"""
from dataclasses import dataclass, asdict, replace
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

import tensor_core as tc
from tensor_core import Tape, Tensor
from rp_utils import ConfigError, ShapeMismatchError, setup_logger

logger = setup_logger(__name__)

Parameters = Dict[str, np.ndarray]

PROFILES: Dict[str, Dict[str, int]] = {
    'paper': {'conv1_filters': 32, 'conv2_filters': 64, 'dense_units': 1024},
    'fast': {'conv1_filters': 8, 'conv2_filters': 16, 'dense_units': 128},
}


@dataclass(frozen=True)
class ModelSpec:
    input_height: int = 28
    input_width: int = 28
    input_channels: int = 1
    conv1_filters: int = 32
    conv2_filters: int = 64
    kernel_size: int = 5
    dense_units: int = 1024
    num_classes: int = 10
    profile_name: str = 'paper'

    def __post_init__(self):
        self.validate()

    @classmethod
    def for_profile(cls, profile: str, input_channels: int = 1, **overrides) -> 'ModelSpec':
        """
        Build the spec of a named profile

        Parameters:
        - profile: "paper" or "fast"
        - input_channels: 1 for raw pixels, k for thermometer inputs
        - overrides: Any other ModelSpec field
        """
        key = profile.strip().lower()
        if key not in PROFILES:
            raise ConfigError(f"Unknown model profile '{profile}' (expected one of {sorted(PROFILES)})")
        fields = dict(PROFILES[key], input_channels=input_channels, profile_name=key)
        fields.update(overrides)
        return cls(**fields)

    @property
    def has_conv(self) -> bool:
        return self.conv1_filters > 0

    def validate(self) -> None:
        for name in ('input_height', 'input_width', 'input_channels', 'kernel_size'):
            if getattr(self, name) < 1:
                raise ConfigError(f"ModelSpec.{name} must be positive, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ConfigError(f"ModelSpec.num_classes must be at least 2, got {self.num_classes}")
        if self.dense_units < 0:
            raise ConfigError(f"ModelSpec.dense_units must not be negative, got {self.dense_units}")
        if (self.conv1_filters > 0) != (self.conv2_filters > 0):
            raise ConfigError("ModelSpec conv1_filters and conv2_filters must both be positive or both be 0")
        if self.has_conv:
            c, h, w = self.feature_shape()
            if h < 1 or w < 1:
                raise ConfigError(
                    f"Input {self.input_height}x{self.input_width} is too small for two "
                    f"{self.kernel_size}x{self.kernel_size} conv + pool stages")

    def feature_shape(self) -> Tuple[int, int, int]:
        """(channels, height, width) entering the dense layers"""
        if not self.has_conv:
            return self.input_channels, self.input_height, self.input_width
        h, w = self.input_height, self.input_width
        for _ in range(2):
            h, w = (h - self.kernel_size + 1) // 2, (w - self.kernel_size + 1) // 2
        return self.conv2_filters, h, w

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def with_channels(self, input_channels: int) -> 'ModelSpec':
        return replace(self, input_channels=input_channels)


def parameter_shapes(spec: ModelSpec) -> Dict[str, Tuple[int, ...]]:
    """Parameter names and shapes in initialisation order"""
    shapes: Dict[str, Tuple[int, ...]] = {}
    k = spec.kernel_size
    if spec.has_conv:
        shapes['conv1.weight'] = (spec.conv1_filters, spec.input_channels, k, k)
        shapes['conv1.bias'] = (spec.conv1_filters,)
        shapes['conv2.weight'] = (spec.conv2_filters, spec.conv1_filters, k, k)
        shapes['conv2.bias'] = (spec.conv2_filters,)
    features = int(np.prod(spec.feature_shape()))
    if spec.dense_units:
        shapes['dense.weight'] = (features, spec.dense_units)
        shapes['dense.bias'] = (spec.dense_units,)
        features = spec.dense_units
    shapes['out.weight'] = (features, spec.num_classes)
    shapes['out.bias'] = (spec.num_classes,)
    return shapes


def init_parameters(spec: ModelSpec, seed: int) -> Parameters:
    """
    Kaiming-uniform fan-in initialisation; weights drawn from U(-sqrt(6/fan_in), +sqrt(6/fan_in)), biases zero

    Parameters:
    - spec: Architecture description
    - seed: RNG seed; equal seeds give bitwise-equal parameters

    Returns:
    Mapping layer-name -> float32 array
    """
    rng = np.random.default_rng(seed)
    params: Parameters = {}
    for name, shape in parameter_shapes(spec).items():
        if name.endswith('.bias'):
            params[name] = np.zeros(shape, dtype=np.float32)
            continue
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        bound = np.sqrt(6.0 / fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    logger.info(f"Initialised {len(params)} tensors for profile '{spec.profile_name}' with seed {seed}")
    return params


def check_parameters(spec: ModelSpec, params: Mapping[str, Any]) -> None:
    """Raise if params do not have exactly the shapes the spec requires"""
    expected = parameter_shapes(spec)
    if set(params) != set(expected):
        raise ShapeMismatchError(f"Parameter names {sorted(params)} do not match spec {sorted(expected)}")
    for name, shape in expected.items():
        actual = tuple(np.shape(params[name].value if isinstance(params[name], Tensor) else params[name]))
        if actual != shape:
            raise ShapeMismatchError(f"Parameter {name}: expected shape {list(shape)}, got {list(actual)}")


def bind_parameters(tape: Tape, params: Parameters, trainable: bool = True) -> Dict[str, Tensor]:
    """Record parameters on a tape, as leaves when trainable, as constants otherwise"""
    return {name: tape.leaf(value, requires_grad=trainable) for name, value in params.items()}


def forward(spec: ModelSpec, params: Mapping[str, Union[np.ndarray, Tensor]],
            batch: Union[np.ndarray, Tensor], tape: Tape) -> Tensor:
    """
    Compute logits for a batch

    Parameters:
    - spec: Architecture description
    - params: Arrays (recorded as constants) or tensors already on the tape
    - batch: [B, C, H, W] input with C = spec.input_channels
    - tape: Tape to record on

    Returns:
    Logits tensor [B, num_classes]
    """
    x = tape.lift(batch)
    expected = (spec.input_channels, spec.input_height, spec.input_width)
    if len(x.shape) != 4 or tuple(x.shape[1:]) != expected:
        raise ShapeMismatchError(f"forward: batch shape {list(x.shape)} does not match [B, {', '.join(map(str, expected))}]")
    p = {name: tape.lift(value) for name, value in params.items()}

    if spec.has_conv:
        x = tc.maxpool2d(tc.relu(tc.bias_add(tc.conv2d(x, p['conv1.weight']), p['conv1.bias'])))
        x = tc.maxpool2d(tc.relu(tc.bias_add(tc.conv2d(x, p['conv2.weight']), p['conv2.bias'])))
    x = tc.reshape(x, (x.shape[0], -1))
    if spec.dense_units:
        x = tc.relu(tc.bias_add(tc.matmul(x, p['dense.weight']), p['dense.bias']))
    return tc.bias_add(tc.matmul(x, p['out.weight']), p['out.bias'])


def intermediate_shapes(spec: ModelSpec, batch_size: int = 1) -> List[Tuple[str, Tuple[int, ...]]]:
    """Layer-by-layer output shapes for a batch of the given size"""
    shapes = [('input', (batch_size, spec.input_channels, spec.input_height, spec.input_width))]
    if spec.has_conv:
        h, w = spec.input_height, spec.input_width
        for index, filters in enumerate((spec.conv1_filters, spec.conv2_filters), start=1):
            h, w = h - spec.kernel_size + 1, w - spec.kernel_size + 1
            shapes.append((f'conv{index}', (batch_size, filters, h, w)))
            h, w = h // 2, w // 2
            shapes.append((f'pool{index}', (batch_size, filters, h, w)))
    shapes.append(('flatten', (batch_size, int(np.prod(spec.feature_shape())))))
    if spec.dense_units:
        shapes.append(('dense', (batch_size, spec.dense_units)))
    shapes.append(('logits', (batch_size, spec.num_classes)))
    return shapes


def loss(logits: Tensor, labels, reduction: str = 'mean') -> Tensor:
    """
    Softmax cross-entropy of logits against integer class labels

    Parameters:
    - logits: [B, num_classes] tensor
    - labels: [B] class indices
    - reduction: "mean" over the batch (training) or "sum" (per-image attack ascent)
    """
    labels = np.asarray(labels)
    num_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ConfigError(f"Labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    return tc.softmax_cross_entropy(logits, labels, reduction=reduction)


def predict(spec: ModelSpec, params: Parameters, inputs: np.ndarray, batch_size: int = 100) -> np.ndarray:
    """Argmax class per image, evaluated in chunks without recording gradients"""
    predictions = []
    for start in range(0, len(inputs), batch_size):
        tape = Tape()
        logits = forward(spec, params, inputs[start:start + batch_size], tape)
        predictions.append(np.argmax(logits.value, axis=1))
    if not predictions:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate(predictions)


def logits_of(spec: ModelSpec, params: Parameters, inputs: np.ndarray) -> np.ndarray:
    """Logits for one chunk as a plain array"""
    return forward(spec, params, inputs, Tape()).value


def per_image_loss(logits: np.ndarray, labels) -> np.ndarray:
    """Cross-entropy of each row of plain logits against its label, as a [B] array"""
    labels = np.asarray(labels, dtype=np.int64)
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=1))
    return log_norm - shifted[np.arange(len(labels)), labels]
