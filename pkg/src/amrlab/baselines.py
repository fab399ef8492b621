"""Comparison training strategies, each a drop-in step for the harness.

Strategies: naive end-to-end fusion, per-modality unimodal training, unit
dropout, modality dropout, unimodal-teacher distillation, and a simplified
on-the-fly gradient-modulation scheme that derives its per-modality dominance
score from the attribution pipeline and is reported as "ogm (simplified)" in
all outputs.  Every strategy is seed-deterministic and composes with the
attribution regularizer by running its step first and the regularizer step
after.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .attribution import compute_report
from .data import DataSplits, MultimodalBatch, batches
from .errors import ConfigError
from .model import (
    DropoutMasks,
    ModelConfig,
    MultimodalModel,
    affine,
    init_model,
    unimodal_config,
)
from .optim import SGD
from .tensor import Tensor

STRATEGY_KINDS = ("naive", "unimodal", "dropout", "modality_dropout", "umt", "ogm")


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "naive"
    seed: int = 0
    modality: int = 0  # unimodal
    dropout_p: float = 0.5
    mdrop_p: float = 0.5
    umt_tau: float = 2.0
    umt_beta: float = 1.0
    ogm_alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"train.strategy: unknown kind {self.kind!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout.p must be in [0, 1)")
        if not 0.0 <= self.mdrop_p < 1.0:
            raise ConfigError("mdrop.p must be in [0, 1)")
        if self.umt_tau <= 0:
            raise ConfigError("umt.tau must be positive")
        if self.umt_beta < 0:
            raise ConfigError("umt.beta must be nonnegative")
        if self.ogm_alpha < 0:
            raise ConfigError("ogm.alpha must be nonnegative")
        if self.modality < 0:
            raise ConfigError("unimodal.modality must be nonnegative")

    def display_name(self) -> str:
        if self.kind == "ogm":
            return "ogm (simplified)"
        if self.kind == "unimodal":
            return f"unimodal[{self.modality}]"
        return self.kind


def naive_step(model: MultimodalModel, batch: MultimodalBatch, optimizer: SGD) -> float:
    """One cross-entropy backward and update over all of the optimizer's params."""
    out = model.forward(batch.inputs)
    loss = T.softmax_cross_entropy(out.logits, batch.labels)
    grads = T.backward(loss, optimizer.params)
    optimizer.step(grads)
    return loss.item()


# dropout ----------------------------------------------------------------------


def dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    """Keep/drop mask with inverted scaling so the masked mean is unbiased."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability {p} outside [0, 1)")
    if p == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= p
    return keep.astype(np.float64) / (1.0 - p)


def build_dropout_masks(
    model: MultimodalModel, batch_size: int, p: float, rng: np.random.Generator
) -> DropoutMasks:
    encoder = [
        [dropout_mask((batch_size, width), p, rng) for width in model.config.encoder_hidden]
        for _ in range(model.num_modalities)
    ]
    fused = dropout_mask((batch_size, model.config.encoding_dim), p, rng)
    return DropoutMasks(encoder=encoder, fused=fused)


# modality dropout ----------------------------------------------------------------


def modality_dropout_select(m: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean keep-mask; each modality dropped independently, never all of them."""
    if m < 2:
        raise ValueError("modality dropout needs at least two modalities")
    kept = rng.random(m) >= p
    if not kept.any():
        kept[rng.integers(0, m)] = True
    return kept


# unimodal-teacher distillation -----------------------------------------------


def _log_softmax(logits: Tensor) -> Tensor:
    c = logits.shape[1]
    shifted = T.sub(logits, T.expand_axis(Tensor(logits.data.max(axis=1)), 1, c))
    lse = T.log(T.sum_(T.exp(shifted), 1))
    return T.sub(shifted, T.expand_axis(lse, 1, c))


def _softened_probs(logits: np.ndarray, tau: float) -> np.ndarray:
    z = logits / tau
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def umt_loss(
    task_logits: Tensor,
    aux_logits: Sequence[Tensor],
    teacher_logits: Sequence[np.ndarray],
    labels,
    tau: float,
    beta: float,
) -> Tensor:
    """Task cross-entropy plus tau^2-scaled KL from each frozen teacher.

    Teacher logits enter as plain arrays, so no gradient can reach the
    teachers; the KL pulls each modality's auxiliary head (and through it the
    encoder) toward the teacher's softened prediction.
    """
    if len(aux_logits) != len(teacher_logits):
        raise ConfigError(
            f"umt: {len(aux_logits)} auxiliary heads but {len(teacher_logits)} teachers"
        )
    total = T.softmax_cross_entropy(task_logits, labels)
    for aux, teacher in zip(aux_logits, teacher_logits):
        t_probs = _softened_probs(np.asarray(teacher), tau)
        # x*log(x) -> 0 as x -> 0, so clipping inside the log is lossless
        t_entropy = t_probs * np.log(np.maximum(t_probs, 1e-300))
        log_s = _log_softmax(T.scale(aux, 1.0 / tau))
        cross = T.sum_(T.mul(Tensor(t_probs), log_s), 1)
        kl = T.sub(Tensor(t_entropy.sum(axis=1)), cross)
        total = T.add(total, T.scale(T.mean(kl), beta * tau * tau))
    return total


# simplified on-the-fly gradient modulation --------------------------------------


def ogm_coefficients(a, alpha: float) -> np.ndarray:
    """Update coefficients k for each modality given batch attributions a.

    Dominance relative to uniform is rho = a * M; modalities at or below
    uniform keep k = 1, dominant ones are damped by 1 - tanh(alpha*(rho-1)),
    which stays in (0, 1].
    """
    arr = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    rho = arr * arr.size
    k = np.ones_like(arr)
    over = rho > 1.0
    k[over] = 1.0 - np.tanh(alpha * (rho[over] - 1.0))
    return k


# strategy objects ---------------------------------------------------------------


class NaiveStrategy:
    kind = "naive"

    def __init__(self, config: StrategyConfig):
        self.config = config

    def extra_parameters(self) -> list[Tensor]:
        return []

    def step(self, model, batch, optimizer) -> float:
        return naive_step(model, batch, optimizer)


class DropoutStrategy:
    kind = "dropout"

    def __init__(self, config: StrategyConfig):
        self.config = config
        self.rng = np.random.default_rng(config.seed)

    def extra_parameters(self) -> list[Tensor]:
        return []

    def step(self, model, batch, optimizer) -> float:
        masks = build_dropout_masks(model, len(batch), self.config.dropout_p, self.rng)
        out = model.forward(batch.inputs, dropout_masks=masks)
        loss = T.softmax_cross_entropy(out.logits, batch.labels)
        grads = T.backward(loss, optimizer.params)
        optimizer.step(grads)
        return loss.item()


class ModalityDropoutStrategy:
    kind = "modality_dropout"

    def __init__(self, config: StrategyConfig):
        self.config = config
        self.rng = np.random.default_rng(config.seed)

    def extra_parameters(self) -> list[Tensor]:
        return []

    def step(self, model, batch, optimizer) -> float:
        kept = modality_dropout_select(model.num_modalities, self.config.mdrop_p, self.rng)
        out = model.forward(batch.inputs, modality_keep=kept.astype(np.float64))
        loss = T.softmax_cross_entropy(out.logits, batch.labels)
        grads = T.backward(loss, optimizer.params)
        optimizer.step(grads)
        return loss.item()


class UnimodalTeacherStrategy:
    kind = "umt"

    def __init__(
        self,
        config: StrategyConfig,
        model: MultimodalModel,
        teachers: Sequence[MultimodalModel],
    ):
        if len(teachers) != model.num_modalities:
            raise ConfigError(
                f"umt: need one teacher per modality, got {len(teachers)} for "
                f"{model.num_modalities}"
            )
        self.config = config
        self.teachers = list(teachers)
        rng = np.random.default_rng(config.seed)
        enc, classes = model.config.encoding_dim, model.config.num_classes
        limit = np.sqrt(6.0 / (enc + classes))
        self.aux_heads = [
            (Tensor(rng.uniform(-limit, limit, size=(enc, classes))), Tensor(np.zeros(classes)))
            for _ in range(model.num_modalities)
        ]

    def extra_parameters(self) -> list[Tensor]:
        return [t for head in self.aux_heads for t in head]

    def step(self, model, batch, optimizer) -> float:
        out = model.forward(batch.inputs)
        aux_logits = [
            affine(e, w, b) for e, (w, b) in zip(out.encodings, self.aux_heads)
        ]
        with T.no_grad():
            teacher_logits = [
                teacher.forward([x]).logits.data
                for teacher, x in zip(self.teachers, batch.inputs)
            ]
        loss = umt_loss(
            out.logits,
            aux_logits,
            teacher_logits,
            batch.labels,
            self.config.umt_tau,
            self.config.umt_beta,
        )
        grads = T.backward(loss, optimizer.params)
        optimizer.step(grads)
        return loss.item()


class GradientModulationStrategy:
    kind = "ogm"

    def __init__(self, config: StrategyConfig):
        self.config = config

    def extra_parameters(self) -> list[Tensor]:
        return []

    def step(self, model, batch, optimizer) -> float:
        report = compute_report(model, batch.inputs)
        k = ogm_coefficients(report.batch_mean, self.config.ogm_alpha)
        out = model.forward(batch.inputs)
        loss = T.softmax_cross_entropy(out.logits, batch.labels)
        grads = T.backward(loss, optimizer.params)
        index = {id(p): i for i, p in enumerate(optimizer.params)}
        scaled: list = list(grads)
        enc = model.config.encoding_dim
        for m in range(model.num_modalities):
            for p in model.encoder_parameters(m):
                i = index[id(p)]
                scaled[i] = scaled[i].data * k[m]
        fusion_i = index[id(model.fusion_w)]
        fusion_grad = (
            scaled[fusion_i].data if isinstance(scaled[fusion_i], Tensor) else scaled[fusion_i]
        ).copy()
        for m in range(model.num_modalities):
            fusion_grad[m * enc : (m + 1) * enc, :] *= k[m]
        scaled[fusion_i] = fusion_grad
        optimizer.step(scaled)
        return loss.item()


def build_strategy(
    config: StrategyConfig,
    model: MultimodalModel,
    teachers: Sequence[MultimodalModel] | None = None,
):
    """Strategy objects for multimodal training; "unimodal" is not buildable here
    because it trains a different (single-modality) model; the harness handles it."""
    if config.kind == "naive":
        return NaiveStrategy(config)
    if config.kind == "dropout":
        return DropoutStrategy(config)
    if config.kind == "modality_dropout":
        return ModalityDropoutStrategy(config)
    if config.kind == "ogm":
        return GradientModulationStrategy(config)
    if config.kind == "umt":
        if teachers is None:
            raise ConfigError("umt: teachers must be pretrained before building the strategy")
        return UnimodalTeacherStrategy(config, model, teachers)
    raise ConfigError(f"no step strategy for kind {config.kind!r}")


# unimodal training ----------------------------------------------------------------


def train_unimodal(
    data: DataSplits,
    m: int,
    model_config: ModelConfig,
    *,
    epochs: int,
    batch_size: int,
    lr: float,
    momentum: float = 0.9,
    seed: int = 0,
) -> tuple[MultimodalModel, float]:
    """Train a single-modality model on modality ``m`` alone.

    Returns the trained model and its validation accuracy.  Used both as the
    unimodal baseline and to pretrain distillation teachers.
    """
    if not 0 <= m < data.train.num_modalities:
        raise IndexError(f"modality index {m} out of range")
    config = unimodal_config(model_config, m)
    model = init_model(config)
    train_m = data.train.select_modality(m)
    val_m = data.val.select_modality(m)
    optimizer = SGD(model.parameters(), lr=lr, momentum=momentum)
    shuffle_rng = np.random.default_rng(seed)
    for _ in range(epochs):
        for batch in batches(train_m, batch_size, shuffle_rng):
            naive_step(model, batch, optimizer)
    with T.no_grad():
        out = model.forward([Tensor(val_m.features[0])])
        pred = np.argmax(out.probabilities.data, axis=1)
    accuracy = float(np.mean(pred == val_m.labels))
    return model, accuracy
