"""Per-modality attribution of classifier decisions, measured at the encoding layer.

The pipeline: multiply the gradient of the winning logit with respect to each
modality's encoding by the encoding itself, collapse each modality's vector to
a scalar with an L2 norm, normalize the scalars per sample so they sum to one,
and average over the batch.  Everything downstream of the encodings is
differentiable, so the whole pipeline can sit inside a training objective.

Encoders never enter the computation: identical encodings yield identical
attributions no matter which encoder produced them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .model import ForwardResult, MultimodalModel
from .tensor import Tensor

DEGENERATE_EPS = 1e-12


@dataclass
class AttributionReport:
    """Plain-number view of one attribution pass."""

    per_sample: np.ndarray  # batch x M, rows normalized
    batch_mean: np.ndarray  # length M
    raw_pooled: np.ndarray  # batch x M, pre-normalization
    degenerate_count: int

    @property
    def dominance_text(self) -> str:
        return dominance_string(self.batch_mean)


@dataclass
class AttributionTensors:
    """Graph-attached view, for differentiating through the pipeline."""

    alphas: list[Tensor]
    pooled: Tensor
    per_sample: Tensor
    batch_mean: Tensor
    degenerate_count: int
    forward: ForwardResult


def grad_times_input_from_encodings(
    model: MultimodalModel,
    encodings: Sequence[Tensor],
    create_graph: bool = False,
    label_mode: str = "predicted",
    labels=None,
) -> tuple[list[Tensor], ForwardResult]:
    """Gradient of the selected logit w.r.t. each encoding, times the encoding.

    ``label_mode="predicted"`` differentiates the per-sample maximum logit
    (argmax held constant); ``"true"`` differentiates the true-label logit
    instead.  With ``create_graph`` the result stays differentiable w.r.t.
    anything the logits depend on.
    """
    out = model.forward_from_encodings(encodings)
    if label_mode == "predicted":
        selected, _ = T.max_with_argmax(out.logits, 1)
    elif label_mode == "true":
        if labels is None:
            raise ValueError("label_mode='true' requires labels")
        labels = np.asarray(labels, dtype=np.int64)
        n, c = out.logits.shape
        onehot = np.zeros((n, c))
        onehot[np.arange(n), labels] = 1.0
        selected = T.sum_(T.mul(out.logits, Tensor(onehot)), 1)
    else:
        raise ValueError(f"unknown label_mode {label_mode!r}")
    grads = T.backward(T.sum_(selected), list(encodings), create_graph=create_graph)
    alphas = [T.mul(g, e) for g, e in zip(grads, encodings)]
    return alphas, out


def grad_times_input(
    model: MultimodalModel,
    inputs: Sequence[Tensor],
    create_graph: bool = False,
    label_mode: str = "predicted",
    labels=None,
) -> tuple[list[Tensor], ForwardResult]:
    encodings = model.encode(inputs)
    return grad_times_input_from_encodings(model, encodings, create_graph, label_mode, labels)


def pool_l2(alphas: Sequence[Tensor]) -> Tensor:
    """Collapse each modality's attribution vectors to per-sample scalars (batch x M)."""
    columns = []
    for alpha in alphas:
        if alpha.ndim != 2:
            raise ShapeError(f"pool_l2: expected batch x dim attribution, got {alpha.shape}")
        norm = T.l2_norm(alpha, 1)
        columns.append(T.reshape(norm, (alpha.shape[0], 1)))
    return columns[0] if len(columns) == 1 else T.concat(columns, 1)


def normalize_per_sample(pooled: Tensor, eps: float = DEGENERATE_EPS) -> tuple[Tensor, int]:
    """Divide each row by its sum; rows summing below ``eps`` become uniform.

    Returns the normalized rows and the count of degenerate rows.  Degenerate
    rows are constants of the differentiation (their gradient is zero).
    """
    if pooled.ndim != 2:
        raise ShapeError(f"normalize_per_sample: expected batch x M, got {pooled.shape}")
    if (pooled.data < 0).any():
        raise ValueError("normalize_per_sample: pooled attributions must be nonnegative")
    batch, m = pooled.shape
    row_sum = T.sum_(pooled, 1)
    degenerate = row_sum.data < eps
    count = int(degenerate.sum())
    if count:
        # Bump degenerate denominators to 1 so the division stays finite;
        # those rows are overwritten with the uniform vector below.
        denom = T.add(row_sum, Tensor(degenerate.astype(np.float64)))
    else:
        denom = row_sum
    normalized = T.div(pooled, T.expand_axis(denom, 1, m))
    if count:
        keep = np.repeat(~degenerate[:, None], m, axis=1).astype(np.float64)
        uniform = np.where(degenerate[:, None], 1.0 / m, 0.0) * np.ones((batch, m))
        normalized = T.add(T.mul(normalized, Tensor(keep)), Tensor(uniform))
    return normalized, count


def aggregate_batch(per_sample: Tensor) -> Tensor:
    """Column means of the normalized per-sample attributions."""
    if per_sample.ndim != 2:
        raise ShapeError(f"aggregate_batch: expected batch x M, got {per_sample.shape}")
    if per_sample.shape[0] == 0:
        raise ValueError("aggregate_batch: empty batch")
    return T.mean(per_sample, 0)


def dominance_string(a) -> str:
    """Integer-percentage split like ``74/26``; entries always sum to 100.

    The rounding residue goes to the largest component.
    """
    arr = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    rounded = np.rint(100.0 * arr).astype(int)
    residue = 100 - int(rounded.sum())
    if residue:
        rounded[int(np.argmax(arr))] += residue
    return "/".join(str(v) for v in rounded)


def compute_attribution(
    model: MultimodalModel,
    inputs: Sequence[Tensor] | None = None,
    create_graph: bool = False,
    label_mode: str = "predicted",
    labels=None,
    encodings: Sequence[Tensor] | None = None,
) -> AttributionTensors:
    """Run the full pipeline, keeping everything on the graph.

    Pass ``encodings`` to inject encodings directly (bypassing the encoders);
    otherwise ``inputs`` are encoded first.
    """
    if encodings is None:
        if inputs is None:
            raise ValueError("compute_attribution: need inputs or encodings")
        encodings = model.encode(inputs)
    alphas, out = grad_times_input_from_encodings(
        model, encodings, create_graph, label_mode, labels
    )
    pooled = pool_l2(alphas)
    per_sample, degenerate_count = normalize_per_sample(pooled)
    batch_mean = aggregate_batch(per_sample)
    return AttributionTensors(alphas, pooled, per_sample, batch_mean, degenerate_count, out)


def compute_report(
    model: MultimodalModel,
    inputs: Sequence[Tensor] | None = None,
    label_mode: str = "predicted",
    labels=None,
    encodings: Sequence[Tensor] | None = None,
) -> AttributionReport:
    """Plain-number attribution report for diagnostics and evaluation."""
    att = compute_attribution(
        model, inputs, create_graph=False, label_mode=label_mode, labels=labels, encodings=encodings
    )
    return AttributionReport(
        per_sample=att.per_sample.data.copy(),
        batch_mean=att.batch_mean.data.copy(),
        raw_pooled=att.pooled.data.copy(),
        degenerate_count=att.degenerate_count,
    )
