"""
Evaluation harness: accuracy metrics, the alpha ratio, experiment sweeps,
pixel-distribution histograms and CSV/JSON report files.
"""
import csv
import json
import os
import time
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from model import ModelSpec, Parameters
from pipeline import Pipeline, run_pipeline
from attack import AttackConfig, attack_accuracy, fgsm_accuracy
from dataio import BatchPlan, Dataset
from trainer import TrainConfig, batch_accuracy, read_checkpoint, train
from rp_utils import ConfigError, setup_logger

logger = setup_logger(__name__)

REPORT_COLUMNS = ('param', 'value', 'pipeline', 'adv_trained', 'clean_acc', 'attacked_acc', 'alpha',
                  'epsilon', 'delta', 'xi', 'steps', 'restarts', 'seed', 'seconds')
REPORT_FORMATS = ('csv', 'json')
HISTOGRAM_BINS = 256
DEFAULT_EPSILONS = (0.1, 0.2, 0.3, 0.4, 0.5)
DEFAULT_BATCH_SIZES = (10, 50, 100, 150, 200)


@dataclass(frozen=True)
class ModelBundle:
    spec: ModelSpec
    pipeline: Pipeline
    params: Parameters
    trained_with_adversary: bool = False

    @classmethod
    def from_checkpoint(cls, path: str) -> 'ModelBundle':
        checkpoint = read_checkpoint(path)
        return cls(spec=checkpoint.spec, pipeline=checkpoint.pipeline, params=checkpoint.params,
                   trained_with_adversary=checkpoint.trained_with_adversary)


@dataclass(frozen=True)
class EvalReport:
    pipeline: str
    trained_with_adversary: bool
    clean_accuracy: float
    attacked_accuracy: float
    alpha: Optional[float]
    attack: AttackConfig
    seconds: float
    seed: int
    method: str = 'lspga'


@dataclass(frozen=True)
class SweepRow:
    param: str
    value: Any
    report: EvalReport

    def record(self) -> Dict[str, Any]:
        """Flat mapping with the report column names"""
        r = self.report
        return {
            'param': self.param,
            'value': self.value,
            'pipeline': r.pipeline,
            'adv_trained': r.trained_with_adversary,
            'clean_acc': r.clean_accuracy,
            'attacked_acc': r.attacked_accuracy,
            'alpha': r.alpha,
            'epsilon': r.attack.epsilon,
            'delta': r.attack.delta,
            'xi': r.attack.xi,
            'steps': r.attack.steps,
            'restarts': r.attack.restarts,
            'seed': r.seed,
            'seconds': r.seconds,
        }


@dataclass(frozen=True)
class HistogramReport:
    label: str
    counts: np.ndarray  # int64 [256]
    mean: float  # pixel values x 255; processed values skip the [0, 255] rescale the counts use
    std: float  # same scale as mean, not the bin scale
    count_std: float


def clean_accuracy(spec: ModelSpec, params: Parameters, pipeline: Pipeline, dataset: Dataset,
                   batch_size: int = 100) -> float:
    """Argmax accuracy (%) over pipeline-encoded batches of batch_size"""
    if len(dataset) == 0:
        raise ConfigError("clean_accuracy needs a nonempty dataset")
    return batch_accuracy(spec, params, pipeline, dataset, batch_size)


def alpha_ratio(x: float, y: float) -> Optional[float]:
    """
    Attacked-data accuracy ratio 100 * y / (x + y)

    Parameters:
    - x: Clean accuracy (%)
    - y: Attacked accuracy (%)

    Returns:
    Ratio in percent, None when x + y = 0
    """
    total = x + y
    if total == 0:
        return None
    return 100.0 * y / total


def _attacked_accuracy(bundle: ModelBundle, dataset: Dataset, config: AttackConfig, method: str,
                       batch_size: int, workers: int, alpha_step: Optional[float] = None, iters: int = 1) -> float:
    if method == 'lspga':
        if config.levels != bundle.pipeline.levels:
            config = replace(config, levels=bundle.pipeline.levels)
        return attack_accuracy(bundle.spec, bundle.params, bundle.pipeline, dataset.images, dataset.labels,
                               config, batch_size=batch_size, workers=workers)
    if bundle.pipeline.encode:
        raise ConfigError(f"{method} needs a continuous-input model; '{bundle.pipeline.name}' is encoded")
    return fgsm_accuracy(bundle.spec, bundle.params, dataset.images, dataset.labels, config.epsilon,
                         method=method, alpha_step=alpha_step, iters=iters, batch_size=batch_size)


def default_method(pipeline: Pipeline) -> str:
    return 'lspga' if pipeline.encode else 'fgsm'


def evaluate(bundle: ModelBundle, dataset: Dataset, attack_config: AttackConfig, attack: bool = True,
             batch_size: int = 100, workers: int = 1, method: Optional[str] = None,
             alpha_step: Optional[float] = None, iters: int = 1,
             clean: Optional[float] = None) -> EvalReport:
    """
    Clean and attacked accuracy of one model

    Parameters:
    - bundle: Model, pipeline and parameters
    - dataset: Evaluation data
    - attack_config: Attack settings echoed into the report
    - attack: False reports clean accuracy for both columns
    - batch_size: Evaluation batch size (BN statistics are per batch)
    - workers: Process count for LS-PGA batches
    - method: lspga | fgsm | ifgsm (default follows the pipeline)
    - clean: Precomputed clean accuracy for this batch size

    Returns:
    EvalReport
    """
    method = method or default_method(bundle.pipeline)
    started = time.time()
    x = clean if clean is not None else clean_accuracy(bundle.spec, bundle.params, bundle.pipeline,
                                                       dataset, batch_size)
    y = _attacked_accuracy(bundle, dataset, attack_config, method, batch_size, workers,
                           alpha_step, iters) if attack else x
    report = EvalReport(pipeline=bundle.pipeline.name, trained_with_adversary=bundle.trained_with_adversary,
                        clean_accuracy=x, attacked_accuracy=y, alpha=alpha_ratio(x, y), attack=attack_config,
                        seconds=time.time() - started, seed=attack_config.seed, method=method)
    logger.info(f"Evaluated '{report.pipeline}' adv={report.trained_with_adversary} {method} "
                f"eps={attack_config.epsilon}: clean {x:.2f}%, attacked {y:.2f}%")
    return report


def epsilon_sweep(bundle: ModelBundle, dataset: Dataset, epsilons: Sequence[float],
                  config: AttackConfig, batch_size: int = 100, workers: int = 1) -> List[SweepRow]:
    """
    Attacked accuracy for each attack strength; delta, xi and steps stay fixed

    Clean accuracy is computed once and shared by every row.
    """
    values = [float(e) for e in epsilons]
    if not values:
        raise ConfigError("epsilon_sweep needs at least one epsilon")
    if values != sorted(values):
        raise ConfigError(f"Sweep epsilons must be sorted ascending, got {values}")
    clean = clean_accuracy(bundle.spec, bundle.params, bundle.pipeline, dataset, batch_size)
    rows = []
    for epsilon in values:
        report = evaluate(bundle, dataset, replace(config, epsilon=epsilon), batch_size=batch_size,
                          workers=workers, clean=clean)
        rows.append(SweepRow(param='epsilon', value=epsilon, report=report))
    return rows


def batch_size_sweep(bundle: ModelBundle, dataset: Dataset, sizes: Sequence[int],
                     config: AttackConfig, workers: int = 1) -> List[SweepRow]:
    """
    Clean and attacked accuracy for each evaluation batch size

    Batch-norm statistics are recomputed per batch, so size 1 normalizes every image on its own.
    """
    values = sorted(int(s) for s in sizes)
    if not values or values[0] < 1:
        raise ConfigError(f"Sweep batch sizes must be >= 1, got {list(sizes)}")
    return [SweepRow(param='batch-size', value=size,
                     report=evaluate(bundle, dataset, config, batch_size=size, workers=workers))
            for size in values]


def pipeline_comparison(train_set: Dataset, test_set: Dataset, names: Sequence[str], profile: str,
                        train_config: TrainConfig, attack_config: AttackConfig,
                        batch_size: int = 100, workers: int = 1) -> List[SweepRow]:
    """
    Train each named pipeline with and without adversarial training and evaluate both

    Returns:
    Two SweepRows per pipeline (param = "pipeline"), clean-trained first
    """
    rows = []
    for name in names:
        pipeline = Pipeline.parse(name, levels=attack_config.levels)
        spec = ModelSpec.for_profile(profile, input_channels=pipeline.input_channels)
        for adversarial in (False, True):
            config = replace(train_config, adversarial=adversarial, attack=attack_config)
            params, _ = train(train_set, pipeline, spec, config)
            bundle = ModelBundle(spec=spec, pipeline=pipeline, params=params, trained_with_adversary=adversarial)
            rows.append(SweepRow(param='pipeline', value=pipeline.name,
                                 report=evaluate(bundle, test_set, attack_config, batch_size=batch_size,
                                                 workers=workers)))
    return rows


def _histogram(label: str, values: np.ndarray, binned: np.ndarray) -> HistogramReport:
    bins = np.clip(np.rint(binned), 0, HISTOGRAM_BINS - 1).astype(np.int64)
    counts = np.bincount(bins.ravel(), minlength=HISTOGRAM_BINS)
    scaled = np.asarray(values, dtype=np.float64) * 255.0
    return HistogramReport(label=label, counts=counts, mean=float(scaled.mean()), std=float(scaled.std()),
                           count_std=float(counts.std()))


def pixel_histogram(dataset: Dataset, pipeline: Pipeline,
                    batch_size: int = 100) -> Tuple[HistogramReport, HistogramReport]:
    """
    Pixel distributions before and after the pipeline's stages

    Bins: raw pixels x 255, processed pixels rescaled with each batch's min/max to [0, 255].
    mean/std: the pixel-value population on the x 255 scale (processed values are not rescaled).

    Returns:
    (before, after)
    """
    if len(dataset) == 0:
        raise ConfigError("pixel_histogram needs a nonempty dataset")
    processed, rescaled = [], []
    for images, _ in BatchPlan.create(len(dataset), batch_size, 0, shuffle=False).batches(dataset):
        values, stats = run_pipeline(pipeline, images)
        span = stats.post_max - stats.post_min
        unit = (values - stats.post_min) / span if span > 0 else np.zeros_like(values)
        processed.append(values)
        rescaled.append(unit * 255.0)
    after_values = np.concatenate(processed)
    before = _histogram('before', dataset.images, dataset.images * 255.0)
    after = _histogram('after', after_values, np.concatenate(rescaled))
    logger.info(f"Pixel histogram '{pipeline.name}': std before {before.std:.2f}, after {after.std:.2f}")
    return before, after


def _format_cell(value: Any) -> str:
    if value is None:
        return ''
    if isinstance(value, (bool, np.bool_)):
        return '1' if value else '0'
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.4f}"
    return str(value)


def _resolve_format(fmt: Optional[str], path: str) -> str:
    fmt = (fmt or os.path.splitext(path)[1].lstrip('.')).lower()
    if fmt not in REPORT_FORMATS:
        raise ConfigError(f"Report format must be one of {REPORT_FORMATS}, got '{fmt}'")
    return fmt


def emit_report(rows: Sequence[SweepRow], fmt: Optional[str], path: str) -> str:
    """
    Write sweep rows as CSV (fixed header, 4-decimal numbers) or as a JSON array

    Parameters:
    - rows: Nonempty list of SweepRow
    - fmt: "csv" or "json"; taken from the path suffix when None
    - path: Output file

    Returns:
    The path written
    """
    if not rows:
        raise ConfigError("emit_report needs at least one row")
    fmt = _resolve_format(fmt, path)
    records = [row.record() for row in rows]
    try:
        with open(path, 'w', newline='') as f:
            if fmt == 'csv':
                writer = csv.writer(f, lineterminator='\n')
                writer.writerow(REPORT_COLUMNS)
                for record in records:
                    writer.writerow([_format_cell(record[key]) for key in REPORT_COLUMNS])
            else:
                json.dump([_json_record(record) for record in records], f, indent=2)
                f.write('\n')
    except OSError as e:
        logger.error(f"Error writing report {path}: {e}")
        raise
    logger.info(f"Wrote {len(records)} report rows to {path}")
    return path


def _json_record(record: Dict[str, Any]) -> Dict[str, Any]:
    converted = {}
    for key, value in record.items():
        if isinstance(value, (bool, np.bool_)):
            converted[key] = bool(value)
        elif isinstance(value, np.integer):
            converted[key] = int(value)
        elif isinstance(value, np.floating):
            converted[key] = float(value)
        else:
            converted[key] = value
    return converted


def emit_histogram(before: HistogramReport, after: HistogramReport, path: str,
                   fmt: Optional[str] = None) -> str:
    """Write a before/after histogram pair: CSV rows bin,before,after or a JSON object with the summaries"""
    fmt = _resolve_format(fmt, path)
    try:
        with open(path, 'w', newline='') as f:
            if fmt == 'csv':
                writer = csv.writer(f, lineterminator='\n')
                writer.writerow(('bin', 'before', 'after'))
                for index in range(HISTOGRAM_BINS):
                    writer.writerow((index, int(before.counts[index]), int(after.counts[index])))
            else:
                json.dump({report.label: {'counts': report.counts.tolist(), 'mean': report.mean,
                                          'std': report.std, 'count_std': report.count_std}
                           for report in (before, after)}, f, indent=2)
                f.write('\n')
    except OSError as e:
        logger.error(f"Error writing histogram {path}: {e}")
        raise
    logger.info(f"Wrote histogram to {path}")
    return path
