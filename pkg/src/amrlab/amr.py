"""Attribution-ratio regularization (AMR).

The regularizer is the L1 distance between the batch-mean modality
attributions and a target ratio, both renormalized to sum to one.  Its
gradient flows backwards through the attribution pipeline, including the
gradient computation inside it, so minimizing it requires differentiating a
gradient; the tensor layer's ``create_graph`` path provides that.

By construction the attributions do not depend on encoder parameters, so the
regularizer is applied through its own plain-SGD update restricted to the
fusion/classifier group; encoder tensors are never touched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .attribution import compute_attribution, compute_report
from .errors import ConfigError
from .model import FUSION_CLASSIFIER, MultimodalModel
from .optim import SGD
from .tensor import Tensor


@dataclass(frozen=True)
class AttributionTarget:
    """Desired attribution ratio plus the auxiliary optimizer settings."""

    ratios: tuple[float, ...]
    lam: float = 1.0
    lr: float = 1e-2
    optimizer: str = "sgd"
    every_k_steps: int = 1
    use_per_sample: bool = False

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if len(self.ratios) < 1:
            raise ConfigError("amr: ratios must be non-empty")
        if any(r <= 0 for r in self.ratios):
            raise ConfigError("amr: all target ratios must be positive")
        if self.lam < 0:
            raise ConfigError("amr: lambda must be nonnegative")
        if self.lr <= 0:
            raise ConfigError("amr: lr must be positive")
        if self.optimizer != "sgd":
            raise ConfigError(f"amr: unknown optimizer {self.optimizer!r}")
        if self.every_k_steps < 1:
            raise ConfigError("amr: every_k_steps must be >= 1")

    def normalized_ratios(self) -> np.ndarray:
        r = np.asarray(self.ratios, dtype=np.float64)
        return r / r.sum()


def amr_loss(a: Tensor, target: AttributionTarget) -> Tensor:
    """L1 distance between normalized attributions and the normalized target.

    Both sides are renormalized to sum to one (for attributions coming out of
    the pipeline this is a no-op safeguard), so the value lies in [0, 2] and
    is 0 exactly when the normalized vectors coincide.
    """
    if a.ndim != 1 or a.shape[0] != len(target.ratios):
        raise ValueError(
            f"amr_loss: attribution length {a.shape} does not match {len(target.ratios)} ratios"
        )
    a_norm = T.div(a, T.expand_scalar(T.sum_(a), a.shape))
    return T.sum_(T.abs_(T.sub(a_norm, Tensor(target.normalized_ratios()))))


def amr_loss_per_sample(per_sample: Tensor, target: AttributionTarget) -> Tensor:
    """Mean over samples of the per-row L1 distance to the target ratio."""
    batch, m = per_sample.shape
    if m != len(target.ratios):
        raise ValueError(
            f"amr_loss_per_sample: {m} modalities do not match {len(target.ratios)} ratios"
        )
    row_sum = T.sum_(per_sample, 1)
    rows = T.div(per_sample, T.expand_axis(row_sum, 1, m))
    r = np.repeat(target.normalized_ratios()[None, :], batch, axis=0)
    return T.mean(T.sum_(T.abs_(T.sub(rows, Tensor(r))), 1))


@dataclass
class AmrStepReport:
    loss: float
    attribution: np.ndarray
    degenerate_count: int


def _check_compatible(model: MultimodalModel, target: AttributionTarget) -> None:
    if model.num_modalities < 2:
        raise ConfigError("amr: undefined for single-modality models (attribution is identically 1)")
    if len(target.ratios) != model.num_modalities:
        raise ConfigError(
            f"amr: {len(target.ratios)} target ratios for {model.num_modalities} modalities"
        )


def amr_step(
    model: MultimodalModel,
    inputs: Sequence[Tensor],
    target: AttributionTarget,
    label_mode: str = "predicted",
    labels=None,
) -> AmrStepReport:
    """One regularizer update, applied to the fusion/classifier group only.

    Runs the attribution pipeline with graph recording through the inner
    backward pass, differentiates ``lam * loss`` with respect to the
    fusion/classifier tensors, and takes one plain-SGD step on them.  Encoder
    tensors are left bit-identical.  With ``lam == 0`` the loss is still
    computed and reported but no parameter moves.
    """
    _check_compatible(model, target)
    create_graph = target.lam > 0
    att = compute_attribution(
        model, inputs, create_graph=create_graph, label_mode=label_mode, labels=labels
    )
    if target.use_per_sample:
        loss = amr_loss_per_sample(att.per_sample, target)
    else:
        loss = amr_loss(att.batch_mean, target)
    if target.lam > 0:
        fc_params = model.param_groups()[FUSION_CLASSIFIER]
        grads = T.backward(T.scale(loss, target.lam), fc_params)
        for p, g in zip(fc_params, grads):
            p.data -= target.lr * g.data
    return AmrStepReport(
        loss=loss.item(),
        attribution=att.batch_mean.data.copy(),
        degenerate_count=att.degenerate_count,
    )


@dataclass
class CombinedStepReport:
    task_loss: float
    amr_loss: float | None
    attribution: np.ndarray
    degenerate_count: int


def combined_training_step(
    model: MultimodalModel,
    batch,
    task_optimizer: SGD,
    target: AttributionTarget | None = None,
) -> CombinedStepReport:
    """Task step over all parameters, then (if enabled) the regularizer step.

    The regularizer sees the same batch the task step just trained on.  The
    reported attribution is measured after both updates.
    """
    out = model.forward(batch.inputs)
    task_loss = T.softmax_cross_entropy(out.logits, batch.labels)
    grads = T.backward(task_loss, task_optimizer.params)
    task_optimizer.step(grads)
    amr_value = None
    if target is not None:
        amr_value = amr_step(model, batch.inputs, target).loss
    post = compute_report(model, batch.inputs)
    return CombinedStepReport(
        task_loss=task_loss.item(),
        amr_loss=amr_value,
        attribution=post.batch_mean,
        degenerate_count=post.degenerate_count,
    )
