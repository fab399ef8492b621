"""Training loops, evaluation metrics, and the method-by-method experiment matrix.

Evaluation reports accuracy, macro mean average precision, and the dominance
split measured as the mean normalized attribution over the whole validation
split (one batch); the choice of split is recorded in run metadata.
"""

from __future__ import annotations

import concurrent.futures
import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .amr import AttributionTarget, amr_loss, amr_loss_per_sample, amr_step
from .attribution import compute_attribution, dominance_string
from .baselines import StrategyConfig, build_strategy, train_unimodal
from .data import DataSplits, Dataset, batches
from .errors import ConfigError, DataError, NumericError
from .model import ModelConfig, MultimodalModel, init_model, unimodal_config
from .optim import SGD
from .tensor import Tensor

DOMINANCE_SPLIT = "val"


@dataclass(frozen=True)
class TrainConfig:
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    amr: AttributionTarget | None = None
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    eval_every: int = 0  # in steps; 0 records only the final report
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("train.lr must be positive")
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("train.momentum must be in [0, 1)")
        if self.eval_every < 0:
            raise ConfigError("train.eval_every must be >= 0")


@dataclass
class MetricsReport:
    accuracy: float
    mean_ap: float
    dominance: list[float]
    dominance_text: str
    task_loss: float
    amr_loss: float | None
    degenerate_count: int
    step: int = 0

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "accuracy": self.accuracy,
            "mean_ap": self.mean_ap,
            "dominance": self.dominance,
            "dominance_text": self.dominance_text,
            "task_loss": self.task_loss,
            "amr_loss": self.amr_loss,
            "degenerate_count": self.degenerate_count,
        }


def accuracy(probabilities, labels) -> float:
    """Fraction of rows whose argmax (ties to the lowest class index) is the label."""
    probs = np.asarray(probabilities)
    labels = np.asarray(labels)
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def average_precision(scores, positives) -> float:
    """AP for one class: rank by score descending (ties broken by sample
    index, stable), then average precision-at-rank over the positive ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if not positives.any():
        raise ValueError("average_precision: no positive sample")
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    ranks = np.nonzero(hits)[0] + 1
    precision_at = np.cumsum(hits)[ranks - 1] / ranks
    return float(precision_at.mean())


def mean_average_precision(scores, labels) -> float:
    """Macro mean of per-class AP; classes with no positives are excluded."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = scores.shape
    aps = [
        average_precision(scores[:, cls], labels == cls)
        for cls in range(c)
        if (labels == cls).any()
    ]
    if not aps:
        raise ValueError("mean_average_precision: no class has a positive sample")
    return float(np.mean(aps))


def evaluate(
    model: MultimodalModel,
    dataset: Dataset,
    amr_target: AttributionTarget | None = None,
    step: int = 0,
) -> MetricsReport:
    """Metrics over a whole split, treated as one attribution batch; no dropout."""
    inputs = [Tensor(f) for f in dataset.features]
    att = compute_attribution(model, inputs)
    probs = att.forward.probabilities.data
    task_loss = T.softmax_cross_entropy(att.forward.logits, dataset.labels).item()
    amr_value = None
    if amr_target is not None:
        if amr_target.use_per_sample:
            amr_value = amr_loss_per_sample(att.per_sample, amr_target).item()
        else:
            amr_value = amr_loss(att.batch_mean, amr_target).item()
    dominance = att.batch_mean.data
    return MetricsReport(
        accuracy=accuracy(probs, dataset.labels),
        mean_ap=mean_average_precision(probs, dataset.labels),
        dominance=[float(v) for v in dominance],
        dominance_text=dominance_string(dominance),
        task_loss=task_loss,
        amr_loss=amr_value,
        degenerate_count=att.degenerate_count,
        step=step,
    )


def validate_train_setup(model_config: ModelConfig, data: DataSplits, config: TrainConfig):
    if data.train.modality_dims != model_config.modality_dims:
        raise ConfigError(
            f"model dims {model_config.modality_dims} do not match data dims "
            f"{data.train.modality_dims}"
        )
    if data.train.num_classes != model_config.num_classes:
        raise ConfigError(
            f"model classes {model_config.num_classes} != data classes {data.train.num_classes}"
        )
    if config.amr is not None:
        effective_m = 1 if config.strategy.kind == "unimodal" else model_config.num_modalities
        if effective_m < 2:
            raise ConfigError("amr.enabled requires at least 2 modalities")
        if len(config.amr.ratios) != effective_m:
            raise ConfigError(
                f"amr.ratios has {len(config.amr.ratios)} entries for {effective_m} modalities"
            )
    if config.strategy.kind == "unimodal":
        if not 0 <= config.strategy.modality < model_config.num_modalities:
            raise ConfigError(f"unimodal.modality {config.strategy.modality} out of range")


def train(
    model: MultimodalModel, data: DataSplits, config: TrainConfig
) -> tuple[MultimodalModel, list[MetricsReport]]:
    """Run the configured strategy (plus the regularizer, if enabled).

    Deterministic given the config seed.  Returns the trained model (for the
    unimodal strategy that is a fresh single-modality model) and the history
    of validation reports (one per eval point plus the final one).
    """
    validate_train_setup(model.config, data, config)
    strategy_cfg = config.strategy
    if strategy_cfg.kind == "unimodal":
        m = strategy_cfg.modality
        model = init_model(unimodal_config(model.config, m))
        data = DataSplits(data.train.select_modality(m), data.val.select_modality(m))
        strategy_cfg = StrategyConfig(kind="naive", seed=strategy_cfg.seed)
    teachers = None
    if strategy_cfg.kind == "umt":
        teachers = [
            train_unimodal(
                data,
                m,
                model.config,
                epochs=config.epochs,
                batch_size=config.batch_size,
                lr=config.lr,
                momentum=config.momentum,
                seed=config.seed + 1 + m,
            )[0]
            for m in range(model.num_modalities)
        ]
    strategy = build_strategy(strategy_cfg, model, teachers)
    optimizer = SGD(
        model.parameters() + strategy.extra_parameters(),
        lr=config.lr,
        momentum=config.momentum,
    )
    shuffle_rng = np.random.default_rng(config.seed)
    history: list[MetricsReport] = []
    step = 0
    for _ in range(config.epochs):
        for batch in batches(data.train, config.batch_size, shuffle_rng):
            step += 1
            strategy.step(model, batch, optimizer)
            if config.amr is not None and step % config.amr.every_k_steps == 0:
                amr_step(model, batch.inputs, config.amr)
            if config.eval_every and step % config.eval_every == 0:
                history.append(evaluate(model, data.val, config.amr, step))
    history.append(evaluate(model, data.val, config.amr, step))
    return model, history


# experiment matrix ---------------------------------------------------------------


@dataclass
class MatrixRun:
    method: str
    model_config: ModelConfig
    train_config: TrainConfig
    data: DataSplits

    @property
    def amr_enabled(self) -> bool:
        return self.train_config.amr is not None

    @property
    def seed(self) -> int:
        return self.train_config.seed


@dataclass
class RunResult:
    method: str
    amr_enabled: bool
    seed: int
    metrics: MetricsReport | None = None
    error: str | None = None
    error_kind: str | None = None


def _classify(exc: Exception) -> str:
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, (DataError, OSError)):
        return "data"
    if isinstance(exc, NumericError):
        return "numeric"
    return "other"


def _execute(run: MatrixRun) -> RunResult:
    result = RunResult(run.method, run.amr_enabled, run.seed)
    try:
        model = init_model(run.model_config)
        _, history = train(model, run.data, run.train_config)
        result.metrics = history[-1]
    except Exception as exc:  # record per-row, keep the matrix going
        result.error = f"{type(exc).__name__}: {exc}"
        result.error_kind = _classify(exc)
    return result


def _thread_budget(jobs: int) -> int:
    cap = os.environ.get("AMRLAB_THREADS")
    if cap:
        try:
            jobs = min(jobs, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"AMRLAB_THREADS={cap!r} is not an integer") from None
    return max(1, jobs)


def run_matrix(runs: list[MatrixRun], output_path, jobs: int = 1) -> list[RunResult]:
    """Execute every run, write the results CSV, and return the row results.

    Failures are recorded per row and do not stop the rest of the matrix.
    Rows appear in run order; when several seeds share a (method, amr) cell an
    aggregate mean/std row is appended after them.
    """
    jobs = _thread_budget(jobs)
    if jobs > 1 and len(runs) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_execute, runs))
    else:
        results = [_execute(run) for run in runs]
    write_results_csv(results, output_path)
    return results


def _aggregate_rows(results: list[RunResult]) -> list[list[str]]:
    rows = []
    groups: dict[tuple[str, bool], list[RunResult]] = {}
    for r in results:
        groups.setdefault((r.method, r.amr_enabled), []).append(r)
    for r in results:
        key = (r.method, r.amr_enabled)
        if r.metrics is not None:
            rows.append(
                [
                    r.method,
                    str(r.amr_enabled).lower(),
                    repr(r.metrics.mean_ap),
                    repr(r.metrics.accuracy),
                    r.metrics.dominance_text,
                    str(r.seed),
                    "",
                ]
            )
        else:
            rows.append([r.method, str(r.amr_enabled).lower(), "", "", "", str(r.seed), r.error])
        group = groups[key]
        if len(group) > 1 and r is group[-1]:
            ok = [g.metrics for g in group if g.metrics is not None]
            if ok:
                maps = np.array([m.mean_ap for m in ok])
                accs = np.array([m.accuracy for m in ok])
                doms = np.array([m.dominance for m in ok])
                rows.append(
                    [
                        r.method,
                        str(r.amr_enabled).lower(),
                        f"{maps.mean():.4f}±{maps.std():.4f}",
                        f"{accs.mean():.4f}±{accs.std():.4f}",
                        dominance_string(doms.mean(axis=0)),
                        f"mean±std[{len(ok)}]",
                        "",
                    ]
                )
    return rows


def write_results_csv(results: list[RunResult], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "amr_enabled", "mAP", "accuracy", "dominance", "seed", "error"])
        writer.writerows(_aggregate_rows(results))


def write_run_report(result: RunResult, path) -> None:
    payload = {
        "method": result.method,
        "amr_enabled": result.amr_enabled,
        "seed": result.seed,
        "dominance_split": DOMINANCE_SPLIT,
        "error": result.error,
        "metrics": result.metrics.to_dict() if result.metrics else None,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
