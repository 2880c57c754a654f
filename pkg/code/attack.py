"""
White-box attacks.

- fgsm / iterative_fgsm: L-infinity sign-gradient attacks on continuous-input
  (single-channel) models.
- lspga_attack: logit-space projected gradient ascent against thermometer-encoded
  models. Each pixel's level choice is relaxed to a temperature-scaled softmax over
  the levels reachable inside the epsilon ball; the relaxation is ascended for
  `steps` iterations and projected back to the best reachable level.

Attacks freeze the clean batch's normalization and quantizer statistics, so the
mask and the attacked forward pass see the same preprocessing as the clean batch.
"""
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict
from typing import Any, Dict, Optional, Tuple

import numpy as np

import tensor_core as tc
from tensor_core import Tape
import model as net
from model import ModelSpec, Parameters
from pipeline import (BatchStats, EncodedBatch, Pipeline, encode_batch, one_hot_levels,
                      quantize, run_pipeline, thermometer_encode)
from rp_utils import ConfigError, ModelMismatchError, setup_logger

logger = setup_logger(__name__)

ANNEAL_DIRECTIONS = ('multiply', 'divide')


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.3
    delta: float = 1.2
    xi: float = 1.0
    steps: int = 7
    levels: int = 15
    restarts: int = 1
    t0: float = 1.0
    anneal_direction: str = 'multiply'
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epsilon < 0:
            raise ConfigError(f"AttackConfig.epsilon must be >= 0, got {self.epsilon}")
        for name in ('delta', 'xi', 't0'):
            if getattr(self, name) <= 0:
                raise ConfigError(f"AttackConfig.{name} must be positive, got {getattr(self, name)}")
        if self.steps < 1:
            raise ConfigError(f"AttackConfig.steps must be at least 1, got {self.steps}")
        if self.restarts < 1:
            raise ConfigError(f"AttackConfig.restarts must be at least 1, got {self.restarts}")
        if self.levels < 2:
            raise ConfigError(f"AttackConfig.levels must be at least 2, got {self.levels}")
        if self.anneal_direction not in ANNEAL_DIRECTIONS:
            raise ConfigError(f"AttackConfig.anneal_direction must be one of {ANNEAL_DIRECTIONS}")

    @classmethod
    def from_config(cls, section: Dict[str, Any], **overrides) -> 'AttackConfig':
        """Build from a config.yaml 'attack' section; None overrides are ignored"""
        known = set(cls.__dataclass_fields__)
        unknown = set(section) - known
        if unknown:
            raise ConfigError(f"Unknown attack settings: {sorted(unknown)}")
        values = dict(section)
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _require_continuous(spec: ModelSpec) -> None:
    if spec.input_channels != 1:
        raise ModelMismatchError(
            f"FGSM attacks need a continuous-input model (1 channel), got {spec.input_channels} channels")


def input_gradient(spec: ModelSpec, params: Parameters, batch: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(mean loss)/d(input) for a continuous-input model"""
    tape = Tape()
    x = tape.leaf(batch)
    loss = net.loss(net.forward(spec, params, x, tape), labels)
    grad = tc.backward(tape, loss).wrt(x)
    return np.zeros_like(x.value) if grad is None else grad


def fgsm(spec: ModelSpec, params: Parameters, batch: np.ndarray, labels: np.ndarray,
         epsilon: float) -> np.ndarray:
    """
    Single-step untargeted attack: x' = clip(x + epsilon * sign(grad_x L), 0, 1)

    Parameters:
    - spec / params: Continuous-input classifier
    - batch: [B, 1, H, W] pixels in [0, 1]
    - labels: True labels (the loss is ascended)
    - epsilon: L-infinity radius

    Returns:
    Adversarial batch with |x' - x| <= epsilon
    """
    _require_continuous(spec)
    x = np.asarray(batch, dtype=np.float32)
    step = np.float32(epsilon) * np.sign(input_gradient(spec, params, x, labels))
    return np.clip(x + step, 0.0, 1.0).astype(np.float32)


def iterative_fgsm(spec: ModelSpec, params: Parameters, batch: np.ndarray, labels: np.ndarray,
                   epsilon: float, alpha_step: float, iters: int) -> np.ndarray:
    """Repeated sign steps of size alpha_step, each projected onto the epsilon box and [0, 1]"""
    _require_continuous(spec)
    if alpha_step <= 0:
        raise ConfigError(f"alpha_step must be positive, got {alpha_step}")
    if iters < 1:
        raise ConfigError(f"iters must be at least 1, got {iters}")
    origin = np.asarray(batch, dtype=np.float32)
    eps = np.float32(epsilon)
    lower, upper = origin - eps, origin + eps
    x = origin.copy()
    for _ in range(iters):
        step = np.float32(alpha_step) * np.sign(input_gradient(spec, params, x, labels))
        x = np.clip(np.clip(x + step, lower, upper), 0.0, 1.0).astype(np.float32)
    return x


def build_level_mask(pipeline: Pipeline, batch: np.ndarray, epsilon: float, k: Optional[int] = None,
                     stats: Optional[BatchStats] = None) -> np.ndarray:
    """
    Levels reachable by some raw perturbation of size <= epsilon

    low/high = clip(x -/+ epsilon, 0, 1) are pushed through the pipeline with the
    clean batch's frozen statistics. The k+1 grid points a*low + (1-a)*high,
    a = i/k, are quantized and unioned, the clean level is added, and every level
    between the lowest and highest reachable one is filled in (the pipeline is
    monotone in each pixel, so the reachable set is an interval).

    Returns:
    Boolean mask [B, k, H, W]
    """
    k = pipeline.levels if k is None else k
    x = np.asarray(batch, dtype=np.float32)
    if stats is None:
        _, stats = run_pipeline(pipeline, x)
    eps = np.float32(epsilon)
    low = np.clip(x - eps, 0.0, 1.0)
    high = np.clip(x + eps, 0.0, 1.0)

    def levels_of(points: np.ndarray) -> np.ndarray:
        processed, _ = run_pipeline(pipeline, points, frozen=stats)
        return quantize(processed, stats, k)

    clean = levels_of(x)
    lowest, highest = clean.copy(), clean.copy()
    mask = one_hot_levels(clean, k)
    for i in range(k + 1):
        alpha = np.float32(i / k)
        levels = levels_of(alpha * low + (1 - alpha) * high)
        mask |= one_hot_levels(levels, k)
        np.minimum(lowest, levels, out=lowest)
        np.maximum(highest, levels, out=highest)

    index = np.arange(k).reshape(1, k, 1, 1)
    mask |= (index >= lowest[:, None]) & (index <= highest[:, None])
    return mask


def soft_thermometer(z: tc.Tensor) -> tc.Tensor:
    """Cumulative sum over the level axis: t_i = sum_{l <= i} z_l"""
    return tc.cumsum(z, axis=1)


def _hard_levels(u: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.argmax(np.where(mask, u, -np.inf), axis=1)


def lspga_attack(spec: ModelSpec, params: Parameters, pipeline: Pipeline, batch: np.ndarray,
                 labels: np.ndarray, config: AttackConfig, stats: Optional[BatchStats] = None,
                 batch_index: int = 0) -> Tuple[EncodedBatch, np.ndarray]:
    """
    Logit-space projected gradient ascent against a thermometer-encoded model

    Parameters:
    - spec / params: Encoded-input classifier (input_channels = k)
    - pipeline: Preprocessing used by the model
    - batch: [B, 1, H, W] clean pixels in [0, 1]
    - labels: True labels
    - config: Attack settings
    - stats: Frozen clean statistics; computed from batch when omitted
    - batch_index: Mixed into the per-restart RNG seed

    Returns:
    (adversarial EncodedBatch, per-image success flags)
    """
    k = config.levels
    if not pipeline.encode or spec.input_channels != k or pipeline.levels != k:
        raise ModelMismatchError(
            f"LS-PGA needs an encoded model with {k} input channels and a {k}-level pipeline "
            f"(model has {spec.input_channels}, pipeline has {pipeline.levels}, encode={pipeline.encode})")
    x = np.asarray(batch, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    clean, stats = encode_batch(pipeline, x, frozen=stats)
    mask = build_level_mask(pipeline, x, config.epsilon, k, stats=stats)

    clean_logits = net.logits_of(spec, params, clean.thermo)
    clean_wrong = np.argmax(clean_logits, axis=1) != labels
    # Unfooled images hold the highest-loss encoding seen so far, starting from the clean one
    best_levels = clean.levels.copy()
    best_loss = net.per_image_loss(clean_logits, labels)
    success = np.zeros(len(x), dtype=bool)

    for restart in range(config.restarts):
        rng = np.random.default_rng([config.seed, batch_index, restart])
        u = np.where(mask, rng.uniform(0.0, 1.0, size=mask.shape), 0.0).astype(np.float32)
        temperature = config.t0
        aborted = False
        for step in range(config.steps):
            tape = Tape()
            ut = tape.leaf(u)
            z = tc.softmax(tc.scalar_mul(ut, 1.0 / temperature), axis=1, mask=mask)
            logits = net.forward(spec, params, soft_thermometer(z), tape)
            loss = net.loss(logits, labels, reduction='sum')
            if not np.isfinite(loss.value):
                logger.warning(f"LS-PGA batch {batch_index} restart {restart} step {step}: "
                               f"non-finite loss {float(loss.value)}, restart aborted")
                aborted = True
                break
            grad = tc.backward(tape, loss).wrt(ut)
            u = (u + np.float32(config.xi) * grad).astype(np.float32)
            if config.anneal_direction == 'multiply':
                temperature *= config.delta
            else:
                temperature /= config.delta
        if aborted:
            continue

        levels = _hard_levels(u, mask)
        logits = net.logits_of(spec, params, thermometer_encode(levels, k).thermo)
        fooled = np.argmax(logits, axis=1) != labels
        take = fooled & ~success
        best_levels[take] = levels[take]
        success |= fooled
        losses = net.per_image_loss(logits, labels)
        worse = ~success & (losses >= best_loss)
        best_levels[worse] = levels[worse]
        best_loss[worse] = losses[worse]
        logger.debug(f"LS-PGA batch {batch_index} restart {restart}: {int(fooled.sum())}/{len(x)} fooled")

    # An image the clean model already gets wrong counts as fooled
    success |= clean_wrong
    return thermometer_encode(best_levels, k), success


def _attack_chunk(job: Tuple[ModelSpec, Parameters, Pipeline, np.ndarray, np.ndarray, AttackConfig, int]) -> int:
    spec, params, pipeline, images, labels, config, index = job
    _, fooled = lspga_attack(spec, params, pipeline, images, labels, config, batch_index=index)
    return int(np.sum(~fooled))


def attack_accuracy(spec: ModelSpec, params: Parameters, pipeline: Pipeline, images: np.ndarray,
                    labels: np.ndarray, config: AttackConfig, batch_size: int = 100,
                    workers: int = 1) -> float:
    """
    Percentage of images still classified correctly after LS-PGA

    Batches of batch_size are attacked independently (batch i seeds its restarts with i),
    so the result does not depend on the number of workers.
    """
    if len(images) == 0:
        raise ConfigError("attack_accuracy needs a nonempty dataset")
    jobs = [(spec, params, pipeline, images[start:start + batch_size], labels[start:start + batch_size],
             config, index)
            for index, start in enumerate(range(0, len(images), batch_size))]
    started = time.time()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            correct = sum(pool.map(_attack_chunk, jobs))
    else:
        correct = sum(_attack_chunk(job) for job in jobs)
    accuracy = 100.0 * correct / len(images)
    logger.info(f"LS-PGA eps={config.epsilon} restarts={config.restarts}: {accuracy:.2f}% over "
                f"{len(images)} images in {time.time() - started:.1f}s")
    return accuracy


def fgsm_accuracy(spec: ModelSpec, params: Parameters, images: np.ndarray, labels: np.ndarray,
                  epsilon: float, method: str = 'fgsm', alpha_step: Optional[float] = None,
                  iters: int = 1, batch_size: int = 100) -> float:
    """Percentage still classified correctly after FGSM ('fgsm') or iterative FGSM ('ifgsm')"""
    if len(images) == 0:
        raise ConfigError("fgsm_accuracy needs a nonempty dataset")
    if method not in ('fgsm', 'ifgsm'):
        raise ConfigError(f"Unknown continuous attack '{method}'")
    correct = 0
    for start in range(0, len(images), batch_size):
        x, y = images[start:start + batch_size], labels[start:start + batch_size]
        if method == 'fgsm':
            adversarial = fgsm(spec, params, x, y, epsilon)
        else:
            adversarial = iterative_fgsm(spec, params, x, y, epsilon,
                                         alpha_step if alpha_step is not None else epsilon / max(1, iters), iters)
        correct += int(np.sum(net.predict(spec, params, adversarial, batch_size=batch_size) == y))
    return 100.0 * correct / len(images)
