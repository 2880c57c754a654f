"""
Clean and adversarial training loops, optimizers and checkpoint files.

Checkpoint layout (little-endian):
    6 bytes   magic "RPNET1"
    u16       format version
    u32 x 8   ModelSpec integer fields
    u16 + s   profile name
    u8        trained_with_adversary
    u16 + s   pipeline descriptor
    u32       tensor count
    per tensor: u16 + s name, u8 rank, u32 x rank dims, float32 data

Optimizer state is not stored; a reloaded model resumes with fresh Adam moments.
"""
import math
import struct
import time
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

import tensor_core as tc
from tensor_core import Tape
import model as net
from model import ModelSpec, Parameters
from pipeline import Pipeline, encode_batch, model_inputs
from attack import AttackConfig, lspga_attack
from dataio import BatchPlan, Dataset
from rp_utils import (BadMagicError, ConfigError, ModelMismatchError, NumericFailure, ShapeMismatchError,
                      TruncatedDataError, VersionMismatchError, setup_logger)

logger = setup_logger(__name__)

OPTIMIZERS = ('adam', 'sgd')
PROFILE_EPOCHS = {'paper': 5, 'fast': 3}
CHECKPOINT_MAGIC = b'RPNET1'
CHECKPOINT_VERSION = 1
SPEC_INT_FIELDS = ('input_height', 'input_width', 'input_channels', 'conv1_filters', 'conv2_filters',
                   'kernel_size', 'dense_units', 'num_classes')


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 100
    learning_rate: float = 1e-3
    optimizer: str = 'adam'
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    adversarial: bool = False
    adv_fraction: float = 0.5
    attack: AttackConfig = field(default_factory=AttackConfig)
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"TrainConfig.epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"TrainConfig.batch_size must be at least 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"TrainConfig.learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"TrainConfig.optimizer must be one of {OPTIMIZERS}, got '{self.optimizer}'")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("TrainConfig.beta1/beta2 must lie in [0, 1)")
        if self.adam_epsilon <= 0:
            raise ConfigError(f"TrainConfig.adam_epsilon must be positive, got {self.adam_epsilon}")
        if not 0 <= self.adv_fraction <= 1:
            raise ConfigError(f"TrainConfig.adv_fraction must lie in [0, 1], got {self.adv_fraction}")

    @classmethod
    def from_config(cls, section: Dict[str, Any], profile: str = 'paper',
                    attack: Optional[AttackConfig] = None, **overrides) -> 'TrainConfig':
        """
        Build from a config.yaml 'training' section

        Parameters:
        - section: Mapping of TrainConfig fields; `epochs_by_profile` supplies per-profile epochs
        - profile: Model profile whose default epoch count applies
        - attack: Attack used for adversarial batches
        - overrides: Explicit values (None is ignored)
        """
        values = dict(section)
        by_profile = dict(PROFILE_EPOCHS, **(values.pop('epochs_by_profile', None) or {}))
        if 'epochs' not in values and profile in by_profile:
            values['epochs'] = by_profile[profile]
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown training settings: {sorted(unknown)}")
        if attack is not None:
            values['attack'] = attack
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    test_accuracy: Optional[float]
    seconds: float


@dataclass(frozen=True)
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def _aligned_grad(name: str, value: np.ndarray, grads: Dict[str, Optional[np.ndarray]]) -> np.ndarray:
    grad = grads.get(name)
    if grad is None:
        return np.zeros_like(value)
    if np.shape(grad) != np.shape(value):
        raise ShapeMismatchError(f"Gradient for {name} has shape {list(np.shape(grad))}, "
                                 f"parameter has {list(np.shape(value))}")
    return np.asarray(grad, dtype=value.dtype)


def _check_keys(params: Parameters, grads: Dict[str, Any]) -> None:
    extra = set(grads) - set(params)
    if extra:
        raise ShapeMismatchError(f"Gradients for unknown parameters: {sorted(extra)}")


def sgd_step(params: Parameters, grads: Dict[str, Optional[np.ndarray]], config: TrainConfig) -> Parameters:
    """p <- p - lr * g; missing gradients count as zero"""
    _check_keys(params, grads)
    lr = np.float32(config.learning_rate)
    return {name: value - lr * _aligned_grad(name, value, grads) for name, value in params.items()}


def adam_step(params: Parameters, grads: Dict[str, Optional[np.ndarray]], state: AdamState,
              config: TrainConfig) -> Tuple[Parameters, AdamState]:
    """
    One Adam update with bias-corrected moments

    Parameters:
    - params: Current parameters
    - grads: Gradient per parameter name (missing or None counts as zero)
    - state: Moments from the previous step (AdamState() to start)
    - config: Learning rate, betas and epsilon

    Returns:
    (new parameters, new state); inputs are not modified
    """
    _check_keys(params, grads)
    step = state.step + 1
    b1, b2 = config.beta1, config.beta2
    correction1 = 1.0 - b1 ** step
    correction2 = 1.0 - b2 ** step
    new_params, m, v = {}, {}, {}
    for name, value in params.items():
        g = _aligned_grad(name, value, grads)
        m[name] = (b1 * state.m.get(name, np.zeros_like(value)) + (1 - b1) * g).astype(value.dtype)
        v[name] = (b2 * state.v.get(name, np.zeros_like(value)) + (1 - b2) * g * g).astype(value.dtype)
        update = (m[name] / correction1) / (np.sqrt(v[name] / correction2) + config.adam_epsilon)
        new_params[name] = (value - config.learning_rate * update).astype(value.dtype)
    return new_params, AdamState(step=step, m=m, v=v)


def batch_accuracy(spec: ModelSpec, params: Parameters, pipeline: Pipeline, dataset: Dataset,
                   batch_size: int = 100) -> float:
    """Clean accuracy (%) with the pipeline applied per batch of batch_size"""
    correct = 0
    for images, labels in BatchPlan.create(len(dataset), batch_size, 0, shuffle=False).batches(dataset):
        predictions = net.predict(spec, params, model_inputs(pipeline, images), batch_size=len(images))
        correct += int(np.sum(predictions == labels))
    return 100.0 * correct / max(1, len(dataset))


class Trainer:
    """Runs the epoch loop for one (pipeline, model) pair"""

    def __init__(self, spec: ModelSpec, pipeline: Pipeline, config: TrainConfig):
        """
        Parameters:
        - spec: Model architecture; its input channels must match the pipeline
        - pipeline: Preprocessing applied to every batch
        - config: Optimizer and adversarial-mix settings
        """
        if spec.input_channels != pipeline.input_channels:
            raise ModelMismatchError(f"Model expects {spec.input_channels} input channels, pipeline "
                                     f"'{pipeline.name}' produces {pipeline.input_channels}")
        if config.adversarial and not pipeline.encode:
            raise ConfigError("Adversarial training uses LS-PGA and needs an encoded pipeline")
        if config.adversarial and config.attack.levels != pipeline.levels:
            raise ModelMismatchError(f"Attack levels {config.attack.levels} differ from pipeline levels "
                                     f"{pipeline.levels}")
        self.spec = spec
        self.pipeline = pipeline
        self.config = config
        suffix = '_adv' if config.adversarial else ''
        self.logger = setup_logger(__name__, f"train_{pipeline.name}{suffix}")

    def _inputs(self, images: np.ndarray, labels: np.ndarray, params: Parameters, batch_index: int) -> np.ndarray:
        if not self.pipeline.encode:
            return model_inputs(self.pipeline, images)
        encoded, stats = encode_batch(self.pipeline, images)
        if not self.config.adversarial:
            return encoded.thermo
        count = math.ceil(self.config.adv_fraction * len(images))
        if count == 0:
            return encoded.thermo
        adversarial, _ = lspga_attack(self.spec, params, self.pipeline, images[:count], labels[:count],
                                      self.config.attack, stats=stats, batch_index=batch_index)
        return np.concatenate([adversarial.thermo, encoded.thermo[count:]], axis=0)

    def run(self, dataset: Dataset, test_dataset: Optional[Dataset] = None,
            eval_batch_size: int = 100) -> Tuple[Parameters, List[EpochMetrics]]:
        """
        Train from freshly initialised parameters

        Returns:
        (final parameters, one EpochMetrics per epoch)
        """
        config = self.config
        params = net.init_parameters(self.spec, config.seed)
        state = AdamState()
        history: List[EpochMetrics] = []
        self.logger.info(f"Training '{self.pipeline.name}' profile={self.spec.profile_name} on {len(dataset)} "
                         f"images: epochs={config.epochs} batch={config.batch_size} optimizer={config.optimizer} "
                         f"adversarial={config.adversarial}")

        for epoch in range(config.epochs):
            started = time.time()
            plan = BatchPlan.create(len(dataset), config.batch_size, seed=config.seed + epoch)
            total_loss, seen = 0.0, 0
            for batch, (images, labels) in enumerate(plan.batches(dataset)):
                inputs = self._inputs(images, labels, params, epoch * len(plan) + batch)
                tape = Tape()
                bound = net.bind_parameters(tape, params)
                loss = net.loss(net.forward(self.spec, bound, inputs, tape), labels)
                value = float(loss.value)
                if not math.isfinite(value):
                    message = f"Non-finite loss {value} at epoch {epoch + 1}, batch {batch + 1}"
                    self.logger.error(message)
                    raise NumericFailure(message)
                grads = tc.backward(tape, loss)
                named = {name: grads.wrt(tensor) for name, tensor in bound.items()}
                if config.optimizer == 'adam':
                    params, state = adam_step(params, named, state, config)
                else:
                    params = sgd_step(params, named, config)
                total_loss += value * len(labels)
                seen += len(labels)

            accuracy = None
            if test_dataset is not None and len(test_dataset):
                accuracy = batch_accuracy(self.spec, params, self.pipeline, test_dataset, eval_batch_size)
            metrics = EpochMetrics(epoch=epoch + 1, train_loss=total_loss / max(1, seen),
                                   test_accuracy=accuracy, seconds=time.time() - started)
            history.append(metrics)
            accuracy_text = 'n/a' if accuracy is None else f"{accuracy:.2f}%"
            self.logger.info(f"Epoch {metrics.epoch}/{config.epochs}: loss {metrics.train_loss:.4f}, "
                             f"test accuracy {accuracy_text}, {metrics.seconds:.1f}s")
        return params, history


def train(dataset: Dataset, pipeline: Pipeline, spec: ModelSpec, config: TrainConfig,
          test_dataset: Optional[Dataset] = None) -> Tuple[Parameters, List[EpochMetrics]]:
    """
    Train a model on pipeline-encoded batches, optionally mixing in LS-PGA adversaries

    Parameters:
    - dataset: Training data
    - pipeline: Preprocessing / encoding applied per batch
    - spec: Model architecture (input channels = pipeline.input_channels)
    - config: Training settings
    - test_dataset: Optional data for per-epoch clean accuracy

    Returns:
    (parameters, per-epoch metrics); epochs=0 returns the initial parameters
    """
    return Trainer(spec, pipeline, config).run(dataset, test_dataset)


@dataclass(frozen=True)
class Checkpoint:
    spec: ModelSpec
    pipeline: Pipeline
    params: Parameters
    trained_with_adversary: bool = False


def _pack_text(text: str) -> bytes:
    raw = text.encode('utf-8')
    return struct.pack('<H', len(raw)) + raw


def save_checkpoint(path: str, spec: ModelSpec, pipeline: Pipeline, params: Parameters,
                    trained_with_adversary: bool = False) -> None:
    """Write a model, its pipeline descriptor and parameters to path"""
    net.check_parameters(spec, params)
    parts = [CHECKPOINT_MAGIC, struct.pack('<H', CHECKPOINT_VERSION),
             struct.pack('<8I', *(getattr(spec, name) for name in SPEC_INT_FIELDS)),
             _pack_text(spec.profile_name),
             struct.pack('<B', int(trained_with_adversary)),
             _pack_text(pipeline.descriptor()),
             struct.pack('<I', len(params))]
    for name, value in params.items():
        array = np.ascontiguousarray(value, dtype='<f4')
        parts.append(_pack_text(name))
        parts.append(struct.pack(f'<B{array.ndim}I', array.ndim, *array.shape))
        parts.append(array.tobytes())
    try:
        with open(path, 'wb') as f:
            f.write(b''.join(parts))
    except OSError as e:
        logger.error(f"Error writing checkpoint {path}: {e}")
        raise
    logger.info(f"Saved checkpoint {path}: pipeline {pipeline.descriptor()}, {len(params)} tensors")


class _Reader:
    def __init__(self, raw: bytes, path: str):
        self.raw = raw
        self.path = path
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.raw):
            raise TruncatedDataError(f"{self.path}: checkpoint truncated while reading {what}")
        chunk = self.raw[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def text(self, what: str) -> str:
        (length,) = self.unpack('<H', what)
        return self.take(length, what).decode('utf-8')


def read_checkpoint(path: str) -> Checkpoint:
    """Read every field of a checkpoint file"""
    with open(path, 'rb') as f:
        reader = _Reader(f.read(), path)

    magic = reader.take(len(CHECKPOINT_MAGIC), 'magic')
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r} (expected {CHECKPOINT_MAGIC!r})")
    (version,) = reader.unpack('<H', 'format version')
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")

    fields = dict(zip(SPEC_INT_FIELDS, reader.unpack('<8I', 'model spec')))
    spec = ModelSpec(profile_name=reader.text('profile name'), **fields)
    (adversary,) = reader.unpack('<B', 'trained_with_adversary')
    pipeline = Pipeline.from_descriptor(reader.text('pipeline descriptor'))

    (count,) = reader.unpack('<I', 'tensor count')
    params: Parameters = {}
    for index in range(count):
        name = reader.text(f'tensor #{index} name')
        (rank,) = reader.unpack('<B', f'tensor {name} rank')
        dims = reader.unpack(f'<{rank}I', f'tensor {name} dims')
        size = int(np.prod(dims)) if dims else 1
        data = reader.take(4 * size, f'tensor {name} data')
        params[name] = np.frombuffer(data, dtype='<f4').reshape(dims).astype(np.float32)

    net.check_parameters(spec, params)
    if spec.input_channels != pipeline.input_channels:
        raise ModelMismatchError(f"{path}: model has {spec.input_channels} input channels, pipeline "
                                 f"'{pipeline.descriptor()}' produces {pipeline.input_channels}")
    logger.info(f"Loaded checkpoint {path}: pipeline {pipeline.descriptor()}, {count} tensors")
    return Checkpoint(spec=spec, pipeline=pipeline, params=params, trained_with_adversary=bool(adversary))


def load_checkpoint(path: str) -> Tuple[ModelSpec, Pipeline, Parameters]:
    """Return (spec, pipeline, params) stored by save_checkpoint"""
    checkpoint = read_checkpoint(path)
    return checkpoint.spec, checkpoint.pipeline, checkpoint.params
