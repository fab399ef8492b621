"""Experiment configuration: a single TOML file drives every CLI command.

Errors always name the offending key path (``data.synthetic.seed: ...``) so a
failing run can be fixed without reading source code.  Exactly one data source
may be configured, and file paths are checked at validation time.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .amr import AttributionTarget
from .baselines import STRATEGY_KINDS, StrategyConfig
from .data import SyntheticConfig
from .errors import ConfigError
from .harness import TrainConfig
from .model import ModelConfig

_SECTIONS = {
    "data",
    "model",
    "train",
    "amr",
    "attribution",
    "output",
    "matrix",
    "dropout",
    "mdrop",
    "umt",
    "ogm",
    "unimodal",
}


def _expect(value, kind: str, keypath: str):
    checks = {
        "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
        "float": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        "bool": lambda v: isinstance(v, bool),
        "str": lambda v: isinstance(v, str),
    }
    if kind.endswith("_list"):
        item = kind[: -len("_list")]
        if not isinstance(value, list) or not all(checks[item](v) for v in value):
            raise ConfigError(f"{keypath}: expected a list of {item} values")
        return [float(v) if item == "float" else v for v in value]
    if not checks[kind](value):
        raise ConfigError(f"{keypath}: expected {kind}, got {type(value).__name__}")
    return float(value) if kind == "float" else value


class _Table:
    def __init__(self, data: dict, path: str):
        self._data = data
        self._path = path

    def keypath(self, key: str) -> str:
        return f"{self._path}.{key}" if self._path else key

    def require(self, key: str, kind: str):
        if key not in self._data:
            raise ConfigError(f"{self.keypath(key)}: required key missing")
        return _expect(self._data[key], kind, self.keypath(key))

    def get(self, key: str, kind: str, default=None):
        if key not in self._data:
            return default
        return _expect(self._data[key], kind, self.keypath(key))

    def section(self, key: str) -> "_Table | None":
        if key not in self._data:
            return None
        value = self._data[key]
        if not isinstance(value, dict):
            raise ConfigError(f"{self.keypath(key)}: expected a section")
        return _Table(value, self.keypath(key))

    def reject_unknown(self, allowed: set[str]):
        for key in self._data:
            if key not in allowed:
                raise ConfigError(f"{self.keypath(key)}: unknown key")


@dataclass
class ExperimentConfig:
    source_path: Path
    synthetic: SyntheticConfig | None
    file_train: Path | None
    file_val: Path | None
    encoding_dim: int
    encoder_hidden: tuple[int, ...]
    classifier_hidden: tuple[int, ...]
    init_seed: int
    strategy_kind: str
    epochs: int
    batch_size: int
    lr: float
    momentum: float
    eval_every: int
    seed: int
    dropout_p: float
    mdrop_p: float
    umt_tau: float
    umt_beta: float
    ogm_alpha: float
    unimodal_modality: int
    amr_enabled: bool
    amr_ratios: tuple[float, ...] | None
    amr_lambda: float
    amr_lr: float
    amr_every_k_steps: int
    amr_use_per_sample: bool
    label_mode: str
    output_dir: Path
    matrix_methods: list[str] | None
    matrix_amr: list[bool]
    matrix_seeds: list[int] | None

    # builders ------------------------------------------------------------
    def model_config(self, modality_dims, num_classes) -> ModelConfig:
        return ModelConfig(
            modality_dims=tuple(modality_dims),
            encoding_dim=self.encoding_dim,
            num_classes=num_classes,
            encoder_hidden=self.encoder_hidden,
            classifier_hidden=self.classifier_hidden,
            init_seed=self.init_seed,
        )

    def strategy_config(self, kind: str | None = None, seed: int | None = None) -> StrategyConfig:
        return StrategyConfig(
            kind=kind if kind is not None else self.strategy_kind,
            seed=seed if seed is not None else self.seed,
            modality=self.unimodal_modality,
            dropout_p=self.dropout_p,
            mdrop_p=self.mdrop_p,
            umt_tau=self.umt_tau,
            umt_beta=self.umt_beta,
            ogm_alpha=self.ogm_alpha,
        )

    def amr_target(self, num_modalities: int) -> AttributionTarget:
        ratios = self.amr_ratios
        if ratios is None:
            ratios = (1.0,) * num_modalities
        return AttributionTarget(
            ratios=ratios,
            lam=self.amr_lambda,
            lr=self.amr_lr,
            every_k_steps=self.amr_every_k_steps,
            use_per_sample=self.amr_use_per_sample,
        )

    def train_config(
        self,
        num_modalities: int,
        kind: str | None = None,
        seed: int | None = None,
        amr_on: bool | None = None,
    ) -> TrainConfig:
        enabled = self.amr_enabled if amr_on is None else amr_on
        return TrainConfig(
            strategy=self.strategy_config(kind, seed),
            amr=self.amr_target(num_modalities) if enabled else None,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
            eval_every=self.eval_every,
            seed=seed if seed is not None else self.seed,
        )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    root = _Table(raw, "")
    root.reject_unknown(_SECTIONS)

    # data ------------------------------------------------------------------
    data = root.section("data")
    if data is None:
        raise ConfigError("data: section required")
    data.reject_unknown({"synthetic", "files"})
    synthetic_tbl = data.section("synthetic")
    files_tbl = data.section("files")
    if (synthetic_tbl is None) == (files_tbl is None):
        raise ConfigError("data: exactly one of data.synthetic or data.files must be present")
    synthetic = None
    file_train = file_val = None
    if synthetic_tbl is not None:
        synthetic_tbl.reject_unknown(
            {
                "num_classes",
                "train_samples",
                "val_samples",
                "modality_dims",
                "signal_scales",
                "noise_stds",
                "label_noise",
                "seed",
            }
        )
        synthetic = SyntheticConfig(
            num_classes=synthetic_tbl.require("num_classes", "int"),
            train_samples=synthetic_tbl.require("train_samples", "int"),
            val_samples=synthetic_tbl.require("val_samples", "int"),
            modality_dims=tuple(synthetic_tbl.require("modality_dims", "int_list")),
            signal_scales=tuple(synthetic_tbl.require("signal_scales", "float_list")),
            noise_stds=tuple(synthetic_tbl.require("noise_stds", "float_list")),
            label_noise=synthetic_tbl.get("label_noise", "float", 0.0),
            seed=synthetic_tbl.require("seed", "int"),
        )
    else:
        files_tbl.reject_unknown({"train", "val"})
        file_train = (path.parent / files_tbl.require("train", "str")).resolve()
        file_val = (path.parent / files_tbl.require("val", "str")).resolve()
        for key, p in (("train", file_train), ("val", file_val)):
            if not p.exists():
                raise ConfigError(f"data.files.{key}: path {p} does not exist")

    # model -------------------------------------------------------------------
    model = root.section("model") or _Table({}, "model")
    model.reject_unknown({"encoding_dim", "encoder_hidden", "classifier_hidden", "init_seed"})
    encoding_dim = model.require("encoding_dim", "int")
    encoder_hidden = tuple(model.get("encoder_hidden", "int_list", []))
    classifier_hidden = tuple(model.get("classifier_hidden", "int_list", []))
    init_seed = model.get("init_seed", "int", 0)

    # train -------------------------------------------------------------------
    train = root.section("train") or _Table({}, "train")
    train.reject_unknown(
        {"strategy", "epochs", "batch_size", "lr", "momentum", "eval_every", "seed"}
    )
    strategy_kind = train.get("strategy", "str", "naive")
    if strategy_kind not in STRATEGY_KINDS:
        raise ConfigError(f"train.strategy: unknown kind {strategy_kind!r}")
    epochs = train.get("epochs", "int", 10)
    batch_size = train.get("batch_size", "int", 32)
    lr = train.get("lr", "float", 0.05)
    momentum = train.get("momentum", "float", 0.9)
    eval_every = train.get("eval_every", "int", 0)
    seed = train.get("seed", "int", 0)

    # per-strategy sections ------------------------------------------------------
    def scalar(section: str, key: str, kind: str, default):
        tbl = root.section(section)
        if tbl is None:
            return default
        tbl.reject_unknown({key})
        return tbl.get(key, kind, default)

    dropout_p = scalar("dropout", "p", "float", 0.5)
    mdrop_p = scalar("mdrop", "p", "float", 0.5)
    unimodal_modality = scalar("unimodal", "modality", "int", 0)
    ogm_alpha = scalar("ogm", "alpha", "float", 1.0)
    umt = root.section("umt")
    umt_tau, umt_beta = 2.0, 1.0
    if umt is not None:
        umt.reject_unknown({"tau", "beta"})
        umt_tau = umt.get("tau", "float", 2.0)
        umt_beta = umt.get("beta", "float", 1.0)

    # amr -----------------------------------------------------------------------
    amr = root.section("amr")
    amr_enabled = False
    amr_ratios = None
    amr_lambda, amr_lr, amr_every_k, amr_per_sample = 1.0, 1e-2, 1, False
    if amr is not None:
        amr.reject_unknown(
            {"enabled", "ratios", "lambda", "lr", "every_k_steps", "use_per_sample"}
        )
        amr_enabled = amr.get("enabled", "bool", False)
        ratios = amr.get("ratios", "float_list")
        amr_ratios = tuple(ratios) if ratios is not None else None
        amr_lambda = amr.get("lambda", "float", 1.0)
        amr_lr = amr.get("lr", "float", 1e-2)
        amr_every_k = amr.get("every_k_steps", "int", 1)
        amr_per_sample = amr.get("use_per_sample", "bool", False)
        if amr_lambda < 0:
            raise ConfigError("amr.lambda: must be nonnegative")

    # attribution ------------------------------------------------------------------
    attribution = root.section("attribution")
    label_mode = "predicted"
    if attribution is not None:
        attribution.reject_unknown({"label_mode"})
        label_mode = attribution.get("label_mode", "str", "predicted")
        if label_mode not in ("predicted", "true"):
            raise ConfigError("attribution.label_mode: expected 'predicted' or 'true'")

    # output -------------------------------------------------------------------------
    output = root.section("output")
    out_dir = Path("out")
    if output is not None:
        output.reject_unknown({"dir"})
        out_dir = Path(output.get("dir", "str", "out"))
    if not out_dir.is_absolute():
        out_dir = path.parent / out_dir

    # matrix ---------------------------------------------------------------------------
    matrix = root.section("matrix")
    matrix_methods = None
    matrix_amr = [False, True]
    matrix_seeds = None
    if matrix is not None:
        matrix.reject_unknown({"methods", "amr", "seeds"})
        matrix_methods = matrix.require("methods", "str_list")
        for kind in matrix_methods:
            if kind not in STRATEGY_KINDS:
                raise ConfigError(f"matrix.methods: unknown kind {kind!r}")
        matrix_amr = matrix.get("amr", "bool_list", [False, True])
        seeds = matrix.get("seeds", "int_list")
        matrix_seeds = list(seeds) if seeds is not None else None

    return ExperimentConfig(
        source_path=path,
        synthetic=synthetic,
        file_train=file_train,
        file_val=file_val,
        encoding_dim=encoding_dim,
        encoder_hidden=encoder_hidden,
        classifier_hidden=classifier_hidden,
        init_seed=init_seed,
        strategy_kind=strategy_kind,
        epochs=epochs,
        batch_size=batch_size,
        lr=lr,
        momentum=momentum,
        eval_every=eval_every,
        seed=seed,
        dropout_p=dropout_p,
        mdrop_p=mdrop_p,
        umt_tau=umt_tau,
        umt_beta=umt_beta,
        ogm_alpha=ogm_alpha,
        unimodal_modality=unimodal_modality,
        amr_enabled=amr_enabled,
        amr_ratios=amr_ratios,
        amr_lambda=amr_lambda,
        amr_lr=amr_lr,
        amr_every_k_steps=amr_every_k,
        amr_use_per_sample=amr_per_sample,
        label_mode=label_mode,
        output_dir=out_dir,
        matrix_methods=matrix_methods,
        matrix_amr=matrix_amr,
        matrix_seeds=matrix_seeds,
    )
