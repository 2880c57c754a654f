"""
Robust Processing: input preprocessing applied before quantization.

Stages (each used at most once, applied in construction order):
- tanh / sigmoid non-linear filters
- 3x3 block smoothing with stride 3 (maximum or average of each block)
- parameter-free batch normalization with one mean/std for the whole batch

After the stages every pixel is rescaled by the batch's min/max, bucketed into
k levels (15 by default) and written as a thermometer word whose bits are 1
from the level index upward.
"""
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Optional, Tuple, Union

import numpy as np

from tensor_core import stable_sigmoid, stable_tanh
from rp_utils import ConfigError, ThermometerDecodeError, setup_logger

logger = setup_logger(__name__)

DEFAULT_LEVELS = 15
SMOOTHING_WINDOW = 3
BN_EPSILON = 1e-5


class StageKind(Enum):
    TANH = 'tanh'
    SIGMOID = 'sigmoid'
    SMOOTH_MAX = 'smooth'
    SMOOTH_AVG = 'smooth-avg'
    BATCH_NORM = 'bn'


PRESETS = {
    'none': (),
    'tanh+bn': (StageKind.TANH, StageKind.BATCH_NORM),
    'tanh+smooth': (StageKind.TANH, StageKind.SMOOTH_MAX),
    'smooth+bn': (StageKind.SMOOTH_MAX, StageKind.BATCH_NORM),
    'all-three': (StageKind.TANH, StageKind.SMOOTH_MAX, StageKind.BATCH_NORM),
}

_TOKENS = {kind.value: kind for kind in StageKind}
_TOKENS.update({'smooth-max': StageKind.SMOOTH_MAX, 'batchnorm': StageKind.BATCH_NORM})


@dataclass(frozen=True)
class BatchStats:
    """Statistics of one clean batch; frozen copies are reused for perturbed batches"""
    mu: Optional[float]
    sigma: Optional[float]
    post_min: float
    post_max: float

    def __post_init__(self):
        if self.sigma is not None and self.sigma < 0:
            raise ConfigError(f"BatchStats.sigma must be >= 0, got {self.sigma}")
        if self.post_max < self.post_min:
            raise ConfigError(f"BatchStats.post_max {self.post_max} is below post_min {self.post_min}")


@dataclass(frozen=True)
class EncodedBatch:
    levels: np.ndarray  # int64 [B, H, W] in [0, k)
    thermo: np.ndarray  # float32 [B, k, H, W] in {0, 1}

    @property
    def k(self) -> int:
        return self.thermo.shape[1]


@dataclass(frozen=True)
class Pipeline:
    stages: Tuple[StageKind, ...] = ()
    levels: int = DEFAULT_LEVELS
    window: int = SMOOTHING_WINDOW
    stride: int = SMOOTHING_WINDOW
    bn_epsilon: float = BN_EPSILON
    encode: bool = True

    def __post_init__(self):
        object.__setattr__(self, 'stages', tuple(self.stages))
        self.validate()

    def validate(self) -> None:
        if self.levels < 2:
            raise ConfigError(f"Pipeline.levels must be at least 2, got {self.levels}")
        if self.window != SMOOTHING_WINDOW or self.stride != SMOOTHING_WINDOW:
            raise ConfigError(f"Smoothing window and stride are fixed at {SMOOTHING_WINDOW}")
        if self.bn_epsilon <= 0:
            raise ConfigError(f"Pipeline.bn_epsilon must be positive, got {self.bn_epsilon}")
        if len(set(self.stages)) != len(self.stages):
            raise ConfigError(f"Pipeline stages repeat a kind: {[s.value for s in self.stages]}")
        smoothing = {StageKind.SMOOTH_MAX, StageKind.SMOOTH_AVG}
        if len(smoothing.intersection(self.stages)) > 1:
            raise ConfigError("Pipeline can hold only one smoothing stage")
        if not self.encode and self.stages:
            raise ConfigError("Continuous (non-encoded) pipelines take raw pixels and cannot hold stages")

    @classmethod
    def from_name(cls, name: str, levels: int = DEFAULT_LEVELS, encode: bool = True) -> 'Pipeline':
        """
        Build a preset pipeline: "none", "tanh+bn", "tanh+smooth", "smooth+bn", "all-three"

        Names are case-insensitive; anything else is rejected.
        """
        key = name.strip().lower()
        if key not in PRESETS:
            raise ConfigError(f"Unknown pipeline '{name}' (expected one of {', '.join(PRESETS)})")
        return cls(stages=PRESETS[key], levels=levels, encode=encode)

    @classmethod
    def from_stages(cls, tokens: Iterable[Union[str, StageKind]], levels: int = DEFAULT_LEVELS) -> 'Pipeline':
        """Build a pipeline from stage tokens (tanh, sigmoid, smooth, smooth-avg, bn) in the given order"""
        stages = []
        for token in tokens:
            if isinstance(token, StageKind):
                stages.append(token)
                continue
            key = token.strip().lower()
            if key not in _TOKENS:
                raise ConfigError(f"Unknown pipeline stage '{token}' (expected one of {', '.join(_TOKENS)})")
            stages.append(_TOKENS[key])
        return cls(stages=tuple(stages), levels=levels)

    @classmethod
    def parse(cls, text: str, levels: int = DEFAULT_LEVELS, encode: bool = True) -> 'Pipeline':
        """Preset name or '+'-joined stage tokens"""
        key = text.strip().lower()
        if key in PRESETS:
            return cls.from_name(key, levels=levels, encode=encode)
        return replace(cls.from_stages(key.split('+'), levels=levels), encode=encode)

    @property
    def name(self) -> str:
        for preset, stages in PRESETS.items():
            if stages == self.stages:
                return preset
        return '+'.join(stage.value for stage in self.stages)

    @property
    def input_channels(self) -> int:
        """Channel count of the model inputs this pipeline produces"""
        return self.levels if self.encode else 1

    def descriptor(self) -> str:
        return f"{self.name};k={self.levels};encode={int(self.encode)}"

    @classmethod
    def from_descriptor(cls, descriptor: str) -> 'Pipeline':
        """Inverse of descriptor()"""
        name, *options = descriptor.split(';')
        settings = {}
        for option in options:
            if '=' not in option:
                raise ConfigError(f"Malformed pipeline descriptor '{descriptor}'")
            key, value = option.split('=', 1)
            settings[key.strip()] = value.strip()
        unknown = set(settings) - {'k', 'encode'}
        if unknown:
            raise ConfigError(f"Unknown pipeline descriptor options {sorted(unknown)} in '{descriptor}'")
        try:
            levels = int(settings.get('k', DEFAULT_LEVELS))
            encode = bool(int(settings.get('encode', 1)))
        except ValueError:
            raise ConfigError(f"Malformed pipeline descriptor '{descriptor}'")
        return cls.parse(name, levels=levels, encode=encode)


def apply_tanh(batch: np.ndarray) -> np.ndarray:
    return stable_tanh(np.asarray(batch, dtype=np.float32))


def apply_sigmoid(batch: np.ndarray) -> np.ndarray:
    return stable_sigmoid(np.asarray(batch, dtype=np.float32))


def apply_smoothing(batch: np.ndarray, mode: str = 'max', window: int = SMOOTHING_WINDOW) -> np.ndarray:
    """
    Replace every pixel by the max (or mean) of its window x window block

    Blocks are anchored at (0, 0) with stride = window; border blocks that run
    past the image use only the pixels that exist. Output size equals input size.
    """
    if mode not in ('max', 'avg'):
        raise ConfigError(f"Smoothing mode must be 'max' or 'avg', got '{mode}'")
    batch = np.asarray(batch, dtype=np.float32)
    h, w = batch.shape[-2], batch.shape[-1]
    hb, wb = -(-h // window), -(-w // window)
    pad = [(0, 0)] * (batch.ndim - 2) + [(0, hb * window - h), (0, wb * window - w)]
    lead = batch.shape[:-2]

    if mode == 'max':
        padded = np.pad(batch, pad, constant_values=-np.inf)
        blocks = padded.reshape(lead + (hb, window, wb, window))
        reduced = blocks.max(axis=(-3, -1))
    else:
        padded = np.pad(batch, pad, constant_values=0.0)
        counts = np.pad(np.ones((h, w), dtype=np.float32), pad[-2:], constant_values=0.0)
        sums = padded.reshape(lead + (hb, window, wb, window)).sum(axis=(-3, -1))
        reduced = sums / counts.reshape(hb, window, wb, window).sum(axis=(1, 3))

    expanded = np.repeat(np.repeat(reduced, window, axis=-2), window, axis=-1)
    return expanded[..., :h, :w].astype(np.float32)


def _normalize(batch: np.ndarray, mu: float, sigma: float, epsilon: float) -> np.ndarray:
    return ((batch - np.float32(mu)) / np.float32(sigma + epsilon)).astype(np.float32)


def batch_moments(batch: np.ndarray) -> Tuple[float, float]:
    """Mean and population std over every pixel of the batch"""
    values = np.asarray(batch, dtype=np.float64)
    return float(values.mean()), float(values.std())


def apply_batchnorm(batch: np.ndarray, epsilon: float = BN_EPSILON) -> Tuple[np.ndarray, BatchStats]:
    """
    Y = (X - mu) / (sigma + epsilon) with a single mu, sigma for the whole batch

    A constant batch has sigma = 0 and maps to zeros.
    """
    batch = np.asarray(batch, dtype=np.float32)
    mu, sigma = batch_moments(batch)
    out = _normalize(batch, mu, sigma, epsilon)
    return out, BatchStats(mu=mu, sigma=sigma, post_min=float(out.min()), post_max=float(out.max()))


def run_pipeline(pipeline: Pipeline, batch: np.ndarray,
                 frozen: Optional[BatchStats] = None) -> Tuple[np.ndarray, BatchStats]:
    """
    Apply the stages in order

    Parameters:
    - pipeline: Stage list and settings
    - batch: [B, 1, H, W] (or [B, H, W]) pixels in [0, 1]
    - frozen: Statistics of a clean batch to reuse instead of recomputing

    Returns:
    (processed batch, BatchStats with BN moments and post-stage min/max)
    """
    x = np.asarray(batch, dtype=np.float32)
    mu: Optional[float] = None
    sigma: Optional[float] = None
    for stage in pipeline.stages:
        if stage is StageKind.TANH:
            x = apply_tanh(x)
        elif stage is StageKind.SIGMOID:
            x = apply_sigmoid(x)
        elif stage is StageKind.SMOOTH_MAX:
            x = apply_smoothing(x, 'max', pipeline.window)
        elif stage is StageKind.SMOOTH_AVG:
            x = apply_smoothing(x, 'avg', pipeline.window)
        elif stage is StageKind.BATCH_NORM:
            if frozen is not None:
                if frozen.mu is None or frozen.sigma is None:
                    raise ConfigError("Frozen statistics carry no batch-norm moments")
                mu, sigma = frozen.mu, frozen.sigma
            else:
                mu, sigma = batch_moments(x)
            x = _normalize(x, mu, sigma, pipeline.bn_epsilon)

    if frozen is not None:
        return x, frozen
    if x.size == 0:
        return x, BatchStats(mu=mu, sigma=sigma, post_min=0.0, post_max=0.0)
    return x, BatchStats(mu=mu, sigma=sigma, post_min=float(x.min()), post_max=float(x.max()))


def _rescale(processed: np.ndarray, stats: BatchStats) -> np.ndarray:
    span = stats.post_max - stats.post_min
    if span <= 0:
        return np.zeros(np.shape(processed), dtype=np.float64)
    scaled = (np.asarray(processed, dtype=np.float64) - stats.post_min) / span
    return np.clip(scaled, 0.0, 1.0)


def _drop_channel(array: np.ndarray) -> np.ndarray:
    if array.ndim == 4:
        if array.shape[1] != 1:
            raise ConfigError(f"Expected a single-channel batch, got shape {list(array.shape)}")
        return array[:, 0]
    return array


def quantize(processed: np.ndarray, stats: BatchStats, k: int = DEFAULT_LEVELS) -> np.ndarray:
    """
    Bucket processed values into k levels

    v_hat = (v - post_min) / (post_max - post_min), 0 for a degenerate range,
    clipped to [0, 1]; level = min(floor(v_hat * k), k - 1).

    Returns:
    int64 levels [B, H, W]
    """
    v_hat = _rescale(_drop_channel(np.asarray(processed)), stats)
    return np.minimum(np.floor(v_hat * k), k - 1).astype(np.int64)


def dequantize(levels: np.ndarray, stats: BatchStats, k: int = DEFAULT_LEVELS) -> np.ndarray:
    """Bucket-centre value of each level in the processed domain"""
    centres = (np.asarray(levels, dtype=np.float64) + 0.5) / k
    return (stats.post_min + centres * (stats.post_max - stats.post_min)).astype(np.float32)


def one_hot_levels(levels: np.ndarray, k: int) -> np.ndarray:
    """Boolean [B, k, H, W] with True at each pixel's level"""
    levels = np.asarray(levels)
    return np.arange(k).reshape((1, k) + (1,) * (levels.ndim - 1)) == levels[:, None]


def thermometer_encode(levels: np.ndarray, k: int = DEFAULT_LEVELS) -> EncodedBatch:
    """Bit i of a pixel's word is 1 iff i >= level, so a word holds k - level ones"""
    levels = np.asarray(levels, dtype=np.int64)
    if levels.size and (levels.min() < 0 or levels.max() >= k):
        raise ConfigError(f"Levels must lie in [0, {k}), got range [{levels.min()}, {levels.max()}]")
    index = np.arange(k).reshape((1, k) + (1,) * (levels.ndim - 1))
    thermo = (index >= levels[:, None]).astype(np.float32)
    return EncodedBatch(levels=levels, thermo=thermo)


def thermometer_decode(encoded: Union[EncodedBatch, np.ndarray]) -> np.ndarray:
    """
    Recover levels from thermometer words [B, k, H, W]

    Raises ThermometerDecodeError unless every word is 0...01...1 with at least one 1.
    """
    thermo = encoded.thermo if isinstance(encoded, EncodedBatch) else np.asarray(encoded)
    k = thermo.shape[1]
    if not np.all((thermo == 0) | (thermo == 1)):
        raise ThermometerDecodeError("Thermometer bits must be 0 or 1")
    if np.any(np.diff(thermo, axis=1) < 0):
        raise ThermometerDecodeError("Thermometer word has a 0 after a 1")
    if np.any(thermo[:, k - 1] != 1):
        raise ThermometerDecodeError("Thermometer word has no 1 bit")
    return (k - thermo.sum(axis=1)).astype(np.int64)


def encode_batch(pipeline: Pipeline, batch: np.ndarray,
                 frozen: Optional[BatchStats] = None) -> Tuple[EncodedBatch, BatchStats]:
    """Process, quantize and thermometer-encode a batch"""
    processed, stats = run_pipeline(pipeline, batch, frozen)
    levels = quantize(processed, stats, pipeline.levels)
    return thermometer_encode(levels, pipeline.levels), stats


def model_inputs(pipeline: Pipeline, batch: np.ndarray,
                 frozen: Optional[BatchStats] = None) -> np.ndarray:
    """What the classifier consumes: thermometer words [B,k,H,W] or raw pixels [B,1,H,W]"""
    if not pipeline.encode:
        return np.asarray(batch, dtype=np.float32)
    encoded, _ = encode_batch(pipeline, batch, frozen)
    return encoded.thermo
