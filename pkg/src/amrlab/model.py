"""Multimodal classifier: per-modality encoder MLPs, concat-linear fusion, classifier head.

Parameters are partitioned into two named groups, ``ENCODER`` and
``FUSION_CLASSIFIER``; the attribution regularizer is only ever routed into
the second group.  Forward passes are deterministic: all stochastic masks
(dropout, modality dropout) are generated by the caller and passed in
explicitly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"AMRLAB1"

ENCODER = "encoder"
FUSION_CLASSIFIER = "fusion_classifier"


@dataclass(frozen=True)
class ModelConfig:
    modality_dims: tuple[int, ...]
    encoding_dim: int
    num_classes: int
    encoder_hidden: tuple[int, ...] = ()
    classifier_hidden: tuple[int, ...] = ()
    fusion_kind: str = "concat-linear"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "modality_dims", tuple(int(d) for d in self.modality_dims))
        object.__setattr__(self, "encoder_hidden", tuple(int(d) for d in self.encoder_hidden))
        object.__setattr__(self, "classifier_hidden", tuple(int(d) for d in self.classifier_hidden))
        if len(self.modality_dims) < 1:
            raise ConfigError("model: at least one modality required")
        if any(d < 1 for d in self.modality_dims + self.encoder_hidden + self.classifier_hidden):
            raise ConfigError("model: all layer widths must be >= 1")
        if self.encoding_dim < 1:
            raise ConfigError("model: encoding_dim must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("model: num_classes must be >= 2")
        if self.fusion_kind != "concat-linear":
            raise ConfigError(f"model: unknown fusion kind {self.fusion_kind!r}")

    @property
    def num_modalities(self) -> int:
        return len(self.modality_dims)


@dataclass
class ForwardResult:
    encodings: list[Tensor]
    logits: Tensor
    probabilities: Tensor


@dataclass
class DropoutMasks:
    """Multiplicative masks applied to encoder hidden activations and the fused layer."""

    encoder: list[list[np.ndarray]] = field(default_factory=list)
    fused: np.ndarray | None = None


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _mlp_layers(rng, widths: Sequence[int]) -> list[tuple[Tensor, Tensor]]:
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w = Tensor(_glorot(rng, fan_in, fan_out))
        b = Tensor(np.zeros(fan_out))
        layers.append((w, b))
    return layers


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    batch = x.shape[0]
    return T.add(T.matmul(x, w), T.expand_axis(b, 0, batch))


def _run_mlp(x: Tensor, layers, masks: list[np.ndarray] | None = None) -> Tensor:
    h = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        h = affine(h, w, b)
        if i < last:
            h = T.relu(h)
            if masks is not None:
                h = T.mul(h, Tensor(masks[i]))
    return h


class MultimodalModel:
    """Holds the parameter tensors; build one with :func:`init_model`."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        enc_widths = lambda dim: (dim, *config.encoder_hidden, config.encoding_dim)
        self.encoders = [_mlp_layers(rng, enc_widths(dim)) for dim in config.modality_dims]
        fused_in = config.num_modalities * config.encoding_dim
        self.fusion_w = Tensor(_glorot(rng, fused_in, config.encoding_dim))
        self.fusion_b = Tensor(np.zeros(config.encoding_dim))
        self.classifier = _mlp_layers(
            rng, (config.encoding_dim, *config.classifier_hidden, config.num_classes)
        )

    @property
    def num_modalities(self) -> int:
        return self.config.num_modalities

    # parameter bookkeeping -------------------------------------------------
    def encoder_parameters(self, m: int) -> list[Tensor]:
        return [t for layer in self.encoders[m] for t in layer]

    def parameters(self) -> list[Tensor]:
        """All trainable tensors in declaration order (the checkpoint order)."""
        params = []
        for m in range(self.num_modalities):
            params.extend(self.encoder_parameters(m))
        params.extend([self.fusion_w, self.fusion_b])
        for w, b in self.classifier:
            params.extend([w, b])
        return params

    def param_groups(self) -> dict[str, list[Tensor]]:
        encoder = [t for m in range(self.num_modalities) for t in self.encoder_parameters(m)]
        fusion_classifier = [self.fusion_w, self.fusion_b]
        for w, b in self.classifier:
            fusion_classifier.extend([w, b])
        return {ENCODER: encoder, FUSION_CLASSIFIER: fusion_classifier}

    # forward ----------------------------------------------------------------
    def _validate_inputs(self, inputs: Sequence[Tensor]) -> int:
        if len(inputs) != self.num_modalities:
            raise ShapeError(
                f"expected {self.num_modalities} modality inputs, got {len(inputs)}"
            )
        batch = inputs[0].shape[0]
        for m, x in enumerate(inputs):
            want = (batch, self.config.modality_dims[m])
            if x.ndim != 2 or x.shape != want:
                raise ShapeError(f"modality {m}: expected shape {want}, got {x.shape}")
        return batch

    def encode(
        self,
        inputs: Sequence[Tensor],
        dropout_masks: DropoutMasks | None = None,
        modality_keep: Sequence[float] | None = None,
    ) -> list[Tensor]:
        self._validate_inputs(inputs)
        encodings = []
        for m, x in enumerate(inputs):
            masks = dropout_masks.encoder[m] if dropout_masks is not None else None
            e = _run_mlp(x, self.encoders[m], masks)
            if modality_keep is not None:
                e = T.scale(e, float(modality_keep[m]))
            encodings.append(e)
        return encodings

    def forward_from_encodings(
        self, encodings: Sequence[Tensor], dropout_masks: DropoutMasks | None = None
    ) -> ForwardResult:
        """Fusion and classifier only; the entry point attribution hooks into."""
        fused_in = encodings[0] if len(encodings) == 1 else T.concat(list(encodings), 1)
        fused = affine(fused_in, self.fusion_w, self.fusion_b)
        if dropout_masks is not None and dropout_masks.fused is not None:
            fused = T.mul(fused, Tensor(dropout_masks.fused))
        logits = _run_mlp(fused, self.classifier)
        return ForwardResult(list(encodings), logits, T.softmax(logits))

    def forward(
        self,
        inputs: Sequence[Tensor],
        dropout_masks: DropoutMasks | None = None,
        modality_keep: Sequence[float] | None = None,
    ) -> ForwardResult:
        encodings = self.encode(inputs, dropout_masks, modality_keep)
        return self.forward_from_encodings(encodings, dropout_masks)


def init_model(config: ModelConfig) -> MultimodalModel:
    """Seeded scaled-uniform weights, zero biases; same seed, same bits."""
    return MultimodalModel(config, np.random.default_rng(config.init_seed))


def unimodal_config(config: ModelConfig, m: int, init_seed: int | None = None) -> ModelConfig:
    """Single-modality variant of ``config`` keeping modality ``m``'s encoder shape.

    The derived seed keeps separate modalities' models decorrelated but fully
    deterministic.
    """
    if not 0 <= m < config.num_modalities:
        raise IndexError(f"modality index {m} out of range for M={config.num_modalities}")
    if init_seed is None:
        init_seed = config.init_seed + 1000003 * (m + 1)
    return replace(
        config, modality_dims=(config.modality_dims[m],), init_seed=init_seed
    )


def unimodal_view(model: MultimodalModel, m: int, init_seed: int | None = None) -> MultimodalModel:
    """Fresh single-modality model reusing modality ``m``'s encoder architecture.

    The fusion and classifier are re-initialized at single-encoding size.
    """
    return init_model(unimodal_config(model.config, m, init_seed))


# checkpoint io ---------------------------------------------------------------


def save_checkpoint(model: MultimodalModel, path) -> None:
    header = json.dumps(
        {
            "modality_dims": list(model.config.modality_dims),
            "encoding_dim": model.config.encoding_dim,
            "num_classes": model.config.num_classes,
            "encoder_hidden": list(model.config.encoder_hidden),
            "classifier_hidden": list(model.config.classifier_hidden),
            "fusion_kind": model.config.fusion_kind,
            "init_seed": model.config.init_seed,
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for p in model.parameters():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> MultimodalModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{path}: not a model checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    if len(blob) < offset + 4:
        raise FormatError(f"{path}: truncated checkpoint header")
    (header_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if len(blob) < offset + header_len:
        raise FormatError(f"{path}: truncated checkpoint header")
    try:
        fields = json.loads(blob[offset : offset + header_len].decode("utf-8"))
        config = ModelConfig(
            modality_dims=tuple(fields["modality_dims"]),
            encoding_dim=fields["encoding_dim"],
            num_classes=fields["num_classes"],
            encoder_hidden=tuple(fields["encoder_hidden"]),
            classifier_hidden=tuple(fields["classifier_hidden"]),
            fusion_kind=fields["fusion_kind"],
            init_seed=fields["init_seed"],
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"{path}: invalid checkpoint config record: {exc}") from exc
    offset += header_len
    model = init_model(config)
    for p in model.parameters():
        nbytes = p.data.size * 8
        if len(blob) < offset + nbytes:
            raise FormatError(f"{path}: truncated checkpoint parameters")
        p.data = np.frombuffer(blob, dtype="<f8", count=p.data.size, offset=offset).reshape(
            p.data.shape
        ).copy()
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{path}: trailing bytes after checkpoint parameters")
    return model
