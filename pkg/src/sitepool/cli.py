"""Command-line surface: synth, train, eval, sweep.

Configuration comes from JSON files with flag overrides (flags win). Outputs
land in out/{dataset}/{method}/{seed}/ with a manifest of content hashes at
the output root. Exit codes: 0 success, 1 usage or I/O error, 2 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import metrics as metrics_mod
from . import pipeline
from .data import (SiteDataset, SplitSpec, SynthConfig, adult_schema,
                   gen_synthetic, german_schema, Preprocessor, make_splits,
                   read_adult, read_german, split_site_dataset)
from .liegroup import ConfigError
from .nn import load_checkpoint, save_checkpoint
from .pipeline import TrainConfig

DATA_DIR_ENV = "SITEPOOL_DATA_DIR"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, files, config_echo: dict) -> None:
    manifest = {
        "config": config_echo,
        "files": {str(p.relative_to(out_dir)): _sha256(p) for p in sorted(files)},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _load_config(path, overrides: dict, cls):
    blob = {}
    if path:
        try:
            blob = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad config JSON in {path}: {exc}") from exc
    blob.update({k: v for k, v in overrides.items() if v is not None})
    valid = {f.name for f in dataclasses.fields(cls)}
    unknown = set(blob) - valid
    if unknown:
        raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
    return cls(**blob)


# ---------------------------------------------------------------------------
# dataset loading


def _load_synth_dir(path: Path, split_seed: int):
    frame_path = path / "data.csv"
    if not frame_path.exists():
        raise FileNotFoundError(frame_path)
    rows = list(csv.DictReader(frame_path.open()))
    d = sum(1 for k in rows[0] if k.startswith("f"))
    features = np.array([[float(r[f"f{k}"]) for k in range(d)] for r in rows])
    dataset = SiteDataset(
        features=features,
        labels=np.array([int(r["label"]) for r in rows]),
        covariate=np.array([float(r["covariate"]) for r in rows]),
        covariate_raw=np.array([float(r["covariate"]) for r in rows]),
        site=np.array([int(r["site"]) for r in rows]),
        ids=np.array([int(r["id"]) for r in rows]),
        feature_names=[f"f{k}" for k in range(d)],
    )
    return split_site_dataset(dataset, SplitSpec(seed=split_seed))


def load_dataset(name: str, split_seed: int):
    """Resolve a dataset id to (train, val, test) SiteDatasets.

    A directory produced by `synth` is used as-is; 'german' and 'adult'
    expect the UCI files under $SITEPOOL_DATA_DIR.
    """
    path = Path(name)
    if path.is_dir():
        return _load_synth_dir(path, split_seed)
    data_dir = Path(os.environ.get(DATA_DIR_ENV, "data"))
    if name == "german":
        frame = read_german(data_dir / "german.data")
        schema = german_schema()
        train_df, val_df, test_df = make_splits(frame, SplitSpec(seed=split_seed),
                                                schema)
    elif name == "adult":
        frame = read_adult(data_dir / "adult.data")
        schema = adult_schema()
        train_df, val_df, _ = make_splits(
            frame, SplitSpec((0.85, 0.15, 0.0), seed=split_seed), schema)
        test_df = read_adult(data_dir / "adult.test")
    else:
        raise FileNotFoundError(f"unknown dataset {name!r} (not a directory, "
                                f"not 'german'/'adult')")
    prep = Preprocessor(schema).fit(train_df)
    return prep.transform(train_df), prep.transform(val_df), prep.transform(test_df)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = _load_config(args.config, {}, SynthConfig)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset, truth = gen_synthetic(cfg)
    data_path = out / "data.csv"
    with data_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "site", "covariate", "label"]
                        + [f"f{k}" for k in range(dataset.feature_dim)])
        for i in range(len(dataset)):
            writer.writerow([dataset.ids[i], dataset.site[i],
                             repr(float(dataset.covariate[i])), dataset.labels[i]]
                            + [repr(float(v)) for v in dataset.features[i]])
    schema_path = out / "schema.json"
    schema_path.write_text(json.dumps({
        "label_col": "label", "site_col": "site", "covariate_col": "covariate",
        "positive_label": "1", "categorical_cols": [],
    }, indent=2))
    truth_path = out / "ground_truth.json"
    truth_path.write_text(json.dumps({
        "seed": truth["seed"], "kappa": truth["kappa"],
        "mix_digest": truth["mix_digest"],
        "label_w_digest": truth["label_w_digest"],
    }, indent=2, sort_keys=True))
    _write_manifest(out, [data_path, schema_path, truth_path],
                    dataclasses.asdict(cfg))
    print(f"wrote {len(dataset)} samples to {data_path}")
    return 0


def _seed_list(text: str):
    return [int(s) for s in text.split(",") if s.strip() != ""]


def cmd_train(args) -> int:
    overrides = {"method": args.method, "n": args.n, "kappa": args.kappa,
                 "epochs_stage1": args.epochs_stage1,
                 "epochs_stage2": args.epochs_stage2}
    cfg = _load_config(args.config, overrides, TrainConfig)
    train, _, _ = load_dataset(args.dataset, split_seed=cfg.seed)
    out = Path(args.out)
    files = []
    dataset_tag = Path(args.dataset).name
    for seed in _seed_list(args.seeds):
        run_cfg = dataclasses.replace(cfg, seed=seed)
        run = pipeline.run_training(train, run_cfg)
        run_dir = out / dataset_tag / cfg.method / str(seed)
        run_dir.mkdir(parents=True, exist_ok=True)
        ckpt = run_dir / "checkpoint.json"
        save_checkpoint(run.bundle, ckpt)
        trace = run_dir / "trace.csv"
        with trace.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "term", "value"])
            for row in run.trace_rows():
                writer.writerow([row[0], row[1], repr(row[2])])
        files.extend([ckpt, trace])
        if run.warnings:
            warn_path = run_dir / "warnings.json"
            warn_path.write_text(json.dumps(run.warnings, indent=2))
            files.append(warn_path)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, files, dataclasses.asdict(cfg))
    print(f"trained {cfg.method} on {args.dataset} for seeds {args.seeds}")
    return 0


def cmd_eval(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    train, _, test = load_dataset(args.dataset, split_seed=args.split_seed)
    if bundle.encoder.spec.widths[0] != test.feature_dim:
        print(f"dimension mismatch: checkpoint expects "
              f"{bundle.encoder.spec.widths[0]} features, dataset has "
              f"{test.feature_dim}", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = metrics_mod.evaluate(bundle, train, test, adv_skewed=args.skewed)
    metrics_path = out / "metrics.json"
    metrics_path.write_text(json.dumps({
        "dataset": args.dataset,
        "checkpoint": str(args.checkpoint),
        "metrics": report.as_dict(),
    }, indent=2, sort_keys=True))
    embed_path = out / "embeddings.csv"
    metrics_mod.export_embeddings(test, bundle, embed_path)
    _write_manifest(out, [metrics_path, embed_path],
                    {"dataset": args.dataset, "skewed": args.skewed})
    print(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    grid = json.loads(Path(args.grid).read_text())
    if not isinstance(grid, list) or not grid:
        print("sweep grid must be a nonempty JSON list", file=sys.stderr)
        return 1
    train, val, _ = load_dataset(args.dataset, split_seed=args.split_seed)
    candidates = []
    for blob in grid:
        cfg = _load_config(None, blob, TrainConfig)
        run = pipeline.run_training(train, cfg)
        report = metrics_mod.evaluate(run.bundle, train, val,
                                      adv_skewed=args.skewed)
        candidates.append({"config": cfg, "acc": 100.0 * report.acc,
                           "mmd": report.mmd, "adv": report.adv})
    chosen = pipeline.hyperparam_select(candidates)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = [{"config": dataclasses.asdict(c["config"]), "acc": c["acc"],
              "mmd": c["mmd"], "adv": c["adv"]} for c in candidates]
    report_path = out / "sweep.json"
    report_path.write_text(json.dumps({
        "candidates": table,
        "chosen": dataclasses.asdict(chosen["config"]),
    }, indent=2, sort_keys=True))
    _write_manifest(out, [report_path], {"dataset": args.dataset})
    print(f"selected candidate with acc={chosen['acc']:.2f}, mmd={chosen['mmd']:.4g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sitepool",
        description="Two-stage covariate-equivariant, site-invariant pooling")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", help="SynthConfig JSON", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="run both training stages or a baseline")
    p.add_argument("--dataset", required=True)
    p.add_argument("--method", choices=pipeline.METHODS, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--seeds", default="0")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--kappa", type=float, default=None)
    p.add_argument("--epochs-stage1", type=int, default=None, dest="epochs_stage1")
    p.add_argument("--epochs-stage2", type=int, default=None, dest="epochs_stage2")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split-seed", type=int, default=0, dest="split_seed")
    p.add_argument("--skewed", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="grid search with window-rule selection")
    p.add_argument("--grid", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split-seed", type=int, default=0, dest="split_seed")
    p.add_argument("--skewed", action="store_true")
    p.set_defaults(fn=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ad.NumericError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
