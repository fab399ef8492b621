"""Command-line entry point.

Commands: ``generate`` (write synthetic AMRDATA files), ``train`` (one run,
checkpoint + metrics), ``matrix`` (method-by-method results table), and
``attribution`` (per-sample attribution dump for a checkpoint).

Exit codes: 0 success, 2 configuration error, 3 data/IO error, 4 numeric
failure.  Every command overwrites its outputs deterministically; rerunning
with the same config and seed produces byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path


from .attribution import compute_report, dominance_string
from .config import ExperimentConfig, load_config
from .data import DataSplits, generate_synthetic, load_csv, load_dataset, save_dataset
from .errors import ConfigError, DataError, NumericError
from .harness import (
    DOMINANCE_SPLIT,
    MatrixRun,
    run_matrix,
    train,
    validate_train_setup,
    write_run_report,
)
from .model import init_model, load_checkpoint, save_checkpoint
from .tensor import Tensor


def _config_hash(payload) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode("utf-8")
    ).hexdigest()


def _load_features(path, split: str):
    if Path(path).suffix == ".csv":
        return load_csv(path, split=split)
    return load_dataset(path, split=split)


def _resolve_data(cfg: ExperimentConfig) -> DataSplits:
    if cfg.synthetic is not None:
        return generate_synthetic(cfg.synthetic)
    train_ds = _load_features(cfg.file_train, split="train")
    val_ds = _load_features(cfg.file_val, split="val")
    if train_ds.modality_dims != val_ds.modality_dims:
        raise DataError(
            f"train dims {train_ds.modality_dims} != val dims {val_ds.modality_dims}"
        )
    if train_ds.num_classes != val_ds.num_classes:
        raise DataError(
            f"train classes {train_ds.num_classes} != val classes {val_ds.num_classes}"
        )
    return DataSplits(train_ds, val_ds)


def _out_dir(cfg: ExperimentConfig, args) -> Path:
    out = Path(args.out) if args.out else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _metrics_line(report) -> str:
    amr_part = "-" if report.amr_loss is None else f"{report.amr_loss:.4f}"
    return (
        f"accuracy={report.accuracy:.4f} mAP={report.mean_ap:.4f} "
        f"dominance={report.dominance_text} task_loss={report.task_loss:.4f} "
        f"amr_loss={amr_part}"
    )


# commands ----------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    if cfg.synthetic is None:
        raise ConfigError("data.synthetic: section required by the generate command")
    synthetic = cfg.synthetic
    if args.seed is not None:
        synthetic = replace(synthetic, seed=args.seed)
    if args.dry_run:
        print(
            f"config ok: {synthetic.train_samples}+{synthetic.val_samples} samples, "
            f"dims={list(synthetic.modality_dims)}, seed={synthetic.seed}"
        )
        return 0
    out = _out_dir(cfg, args)
    splits = generate_synthetic(synthetic)
    train_path, val_path = out / "train.amrdata", out / "val.amrdata"
    save_dataset(splits.train, train_path)
    save_dataset(splits.val, val_path)
    payload = asdict(synthetic)
    manifest = {
        "format": "AMRDATA1",
        "synthetic": payload,
        "config_sha256": _config_hash(payload),
        "files": {"train": train_path.name, "val": val_path.name},
        "train_samples": len(splits.train),
        "val_samples": len(splits.val),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    print(f"wrote {train_path}, {val_path}, {out / 'manifest.json'}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    data = _resolve_data(cfg)
    model_cfg = cfg.model_config(data.train.modality_dims, data.train.num_classes)
    train_cfg = cfg.train_config(data.train.num_modalities, seed=args.seed)
    validate_train_setup(model_cfg, data, train_cfg)
    if args.dry_run:
        print(
            f"config ok: strategy={train_cfg.strategy.display_name()} "
            f"amr={'on' if train_cfg.amr else 'off'} epochs={train_cfg.epochs} "
            f"seed={train_cfg.seed}"
        )
        return 0
    out = _out_dir(cfg, args)
    model, history = train(init_model(model_cfg), data, train_cfg)
    save_checkpoint(model, out / "model.ckpt")
    final = history[-1]
    metrics = {
        "method": train_cfg.strategy.display_name(),
        "amr_enabled": train_cfg.amr is not None,
        "seed": train_cfg.seed,
        "dominance_split": DOMINANCE_SPLIT,
        "config_sha256": _config_hash(Path(args.config).read_text()),
        "final": final.to_dict(),
        "history": [r.to_dict() for r in history],
    }
    with open(out / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=2)
        fh.write("\n")
    with open(out / "history.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["step", "accuracy", "mean_ap", "dominance", "task_loss", "amr_loss", "degenerate_count"]
        )
        for r in history:
            writer.writerow(
                [
                    r.step,
                    repr(r.accuracy),
                    repr(r.mean_ap),
                    r.dominance_text,
                    repr(r.task_loss),
                    "" if r.amr_loss is None else repr(r.amr_loss),
                    r.degenerate_count,
                ]
            )
    print(f"final: {_metrics_line(final)}")
    return 0


_EXIT_BY_KIND = {"config": 2, "data": 3, "numeric": 4, "other": 1}


def cmd_matrix(args) -> int:
    cfg = load_config(args.config)
    if cfg.matrix_methods is None:
        raise ConfigError("matrix.methods: section required by the matrix command")
    data = _resolve_data(cfg)
    base_seed = args.seed if args.seed is not None else cfg.seed
    if args.seeds is not None:
        if args.seeds < 1:
            raise ConfigError("--seeds: must be >= 1")
        seeds = [base_seed + i for i in range(args.seeds)]
    elif cfg.matrix_seeds is not None:
        seeds = cfg.matrix_seeds
    else:
        seeds = [base_seed]
    model_cfg = cfg.model_config(data.train.modality_dims, data.train.num_classes)
    runs = []
    for kind in cfg.matrix_methods:
        for amr_on in cfg.matrix_amr:
            for seed in seeds:
                train_cfg = cfg.train_config(
                    data.train.num_modalities, kind=kind, seed=seed, amr_on=amr_on
                )
                runs.append(
                    MatrixRun(
                        method=train_cfg.strategy.display_name(),
                        model_config=model_cfg,
                        train_config=train_cfg,
                        data=data,
                    )
                )
    if args.dry_run:
        print(f"config ok: {len(runs)} runs "
              f"({len(cfg.matrix_methods)} methods x {len(cfg.matrix_amr)} amr x {len(seeds)} seeds)")
        return 0
    out = _out_dir(cfg, args)
    results = run_matrix(runs, out / "results.csv", jobs=args.jobs)
    for i, result in enumerate(results):
        slug = result.method.replace(" ", "_").replace("[", "").replace("]", "")
        name = f"run_{i:03d}_{slug}_{'amr' if result.amr_enabled else 'plain'}_{result.seed}.json"
        write_run_report(result, out / name)
    failures = [r for r in results if r.error is not None]
    for result in results:
        status = result.error if result.error else _metrics_line(result.metrics)
        amr_tag = "+amr" if result.amr_enabled else ""
        print(f"{result.method}{amr_tag} seed={result.seed}: {status}")
    print(f"results written to {out / 'results.csv'}")
    if failures:
        return _EXIT_BY_KIND.get(failures[0].error_kind or "other", 1)
    return 0


def cmd_attribution(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dataset = _load_features(args.data, split="val")
    if dataset.modality_dims != model.config.modality_dims:
        raise ConfigError(
            f"checkpoint expects modality dims {model.config.modality_dims}, "
            f"data has {dataset.modality_dims}"
        )
    if dataset.num_classes > model.config.num_classes:
        raise ConfigError(
            f"data has {dataset.num_classes} classes, checkpoint supports "
            f"{model.config.num_classes}"
        )
    label_mode = "predicted"
    if args.config:
        label_mode = load_config(args.config).label_mode
    report = compute_report(
        model,
        [Tensor(f) for f in dataset.features],
        label_mode=label_mode,
        labels=dataset.labels if label_mode == "true" else None,
    )
    out_path = Path(args.out) if args.out else Path("attribution.csv")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_index", "modality_index", "pooled", "normalized"])
        for i in range(report.per_sample.shape[0]):
            for m in range(report.per_sample.shape[1]):
                writer.writerow(
                    [i, m, repr(float(report.raw_pooled[i, m])), repr(float(report.per_sample[i, m]))]
                )
    print(f"dominance: {dominance_string(report.batch_mean)}")
    print(f"attribution written to {out_path}")
    return 0


# argument parsing -----------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="amrlab",
        description="Training laboratory for attribution-balanced multimodal classifiers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dry_run=False, seed=True, jobs=False):
        p.add_argument("--config", required=True, help="path to the TOML experiment config")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        if seed:
            p.add_argument("--seed", type=int, help="override the configured seed")
        if jobs:
            p.add_argument("--jobs", type=int, default=1,
                           help="parallel runs (capped by AMRLAB_THREADS)")
        if dry_run:
            p.add_argument("--dry-run", action="store_true",
                           help="validate the config and exit without training")

    p = sub.add_parser("generate", help="write synthetic AMRDATA train/val files")
    common(p, dry_run=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one configuration")
    common(p, dry_run=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("matrix", help="run the method x AMR results matrix")
    common(p, dry_run=True, jobs=True)
    p.add_argument("--seeds", type=int, help="number of seeds per cell (train.seed + i)")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("attribution", help="dump per-sample attributions for a checkpoint")
    p.add_argument("--checkpoint", required=True, help="model checkpoint path")
    p.add_argument("--data", required=True, help="AMRDATA or CSV feature file")
    p.add_argument("--out", help="output CSV path (default attribution.csv)")
    p.add_argument("--config", help="optional config for attribution.label_mode")
    p.set_defaults(func=cmd_attribution)
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
