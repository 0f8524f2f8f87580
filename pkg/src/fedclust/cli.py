"""Experiment harness: JSON-configured commands emitting CSV/JSON artifacts.

    fedclust <partition|train|theory|diagnose|failures> --config <path> [--out <dir>]

Every command is deterministic given its config (all randomness flows from
config seeds), so emitted files are byte-identical across reruns. Exit codes:
0 success, 2 config error, 3 runtime error. FEDCLUST_THREADS caps the client
worker count for training runs.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import data as data_mod
from .federation import (
    FailureConfig,
    FederationConfig,
    HISTORY_FIELDS,
    run_federation,
    write_history_csv,
    write_labels_csv,
    write_run_manifest,
)
from .metrics import collapse_report
from .model import TrainConfig, load_checkpoint, new_model
from .numerics import load_matrix_csv
from .theory import (
    TheoryConfig,
    check_assumptions,
    run_flow,
    verify_theorem_31,
    write_probe_csv,
)


class ConfigError(ValueError):
    pass


# --- schemas -------------------------------------------------------------------

_DATASET_SCHEMA = {
    "type": "object",
    "oneOf": [
        {
            "properties": {
                "source": {"const": "gmm"},
                "k_star": {"type": "integer", "minimum": 2},
                "d": {"type": "integer", "minimum": 2},
                "n_per_cluster": {"type": "integer", "minimum": 1},
                "separation": {"type": "number"},
                "seed": {"type": "integer"},
            },
            "required": ["source", "k_star", "d", "n_per_cluster", "separation", "seed"],
            "additionalProperties": False,
        },
        {
            "properties": {
                "source": {"const": "idx"},
                "images_path": {"type": "string"},
                "labels_path": {"type": "string"},
            },
            "required": ["source", "images_path", "labels_path"],
            "additionalProperties": False,
        },
    ],
}

_PARTITION_SCHEMA = {
    "type": "object",
    "properties": {
        "m": {"type": "integer", "minimum": 1},
        "p": {"type": "number", "minimum": 0, "maximum": 1},
        "s": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
    },
    "required": ["m", "p", "s", "seed"],
    "additionalProperties": False,
}

_FAILURE_SCHEMA = {
    "type": "object",
    "properties": {
        "rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "seed": {"type": "integer"},
    },
    "required": ["rate", "seed"],
    "additionalProperties": False,
}

_FEDERATION_SCHEMA = {
    "type": "object",
    "properties": {
        "rounds": {"type": "integer", "minimum": 1},
        "k": {"type": "integer", "minimum": 1},
        "failure": _FAILURE_SCHEMA,
    },
    "required": ["rounds", "k"],
    "additionalProperties": False,
}

_TRAIN_SCHEMA = {
    "type": "object",
    "properties": {
        "lambda": {"type": "number", "minimum": 0},
        "eta_reg": {"type": "number", "minimum": 0},
        "lr": {"type": "number", "minimum": 0},
        "epochs": {"type": "integer", "minimum": 0},
        "batch": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
    },
    "required": ["lambda", "eta_reg", "lr", "epochs", "batch", "seed"],
    "additionalProperties": False,
}

_MODEL_SCHEMA = {
    "type": "object",
    "properties": {
        "d_latent": {"type": "integer", "minimum": 1},
        "hidden_encoder": {"type": "integer", "minimum": 1},
        "hidden_predictor": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "init_gain": {"type": "number", "exclusiveMinimum": 0},
    },
    "additionalProperties": False,
}

_MODEL_DEFAULTS = {
    "d_latent": 8,
    "hidden_encoder": 32,
    "hidden_predictor": 4,
    "seed": 0,
    "init_gain": 1.0,
}

TRAIN_CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "dataset": _DATASET_SCHEMA,
        "partition": _PARTITION_SCHEMA,
        "federation": _FEDERATION_SCHEMA,
        "train": _TRAIN_SCHEMA,
        "model": _MODEL_SCHEMA,
        "output_dir": {"type": "string"},
    },
    "required": ["dataset", "partition", "federation", "train"],
    "additionalProperties": False,
}

PARTITION_CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "dataset": _DATASET_SCHEMA,
        "partition": _PARTITION_SCHEMA,
        "output_dir": {"type": "string"},
    },
    "required": ["dataset", "partition"],
    "additionalProperties": False,
}

THEORY_CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "d": {"type": "integer", "minimum": 1},
        "d_prime": {"type": "integer", "minimum": 1},
        "L1": {"type": "integer", "minimum": 1},
        "L2": {"type": "integer", "minimum": 1},
        "k": {"type": "integer", "minimum": 1},
        "n_c": {"type": "integer", "minimum": 1},
        "lambda": {"type": "number", "minimum": 0},
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "steps": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer"},
        "imbalance": {"type": "number", "minimum": 0, "maximum": 1},
        "spectrum_scale": {"type": "number", "exclusiveMinimum": 0},
        "output_dir": {"type": "string"},
    },
    "required": ["d", "d_prime", "L1", "L2", "k", "n_c", "lambda", "dt", "steps", "seed"],
    "additionalProperties": False,
}

DIAGNOSE_CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "model_path": {"type": "string"},
        "data_path": {"type": "string"},
        "tau0": {"type": "number", "exclusiveMinimum": 0},
        "output_dir": {"type": "string"},
    },
    "required": ["model_path", "data_path"],
    "additionalProperties": False,
}

FAILURES_CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        **TRAIN_CONFIG_SCHEMA["properties"],
        "rates": {
            "type": "array",
            "items": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "minItems": 1,
        },
    },
    "required": ["dataset", "partition", "federation", "train", "rates"],
    "additionalProperties": False,
}

SCHEMAS = {
    "partition": PARTITION_CONFIG_SCHEMA,
    "train": TRAIN_CONFIG_SCHEMA,
    "theory": THEORY_CONFIG_SCHEMA,
    "diagnose": DIAGNOSE_CONFIG_SCHEMA,
    "failures": FAILURES_CONFIG_SCHEMA,
}


def load_config(path, schema) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config error at $.{'.'.join(str(p) for p in exc.absolute_path)}: {exc.message}") from exc
    return doc


# --- shared builders -------------------------------------------------------------


def build_dataset(spec: dict) -> data_mod.LabeledDataset:
    if spec["source"] == "gmm":
        return data_mod.synth_gmm(
            k_star=spec["k_star"], d=spec["d"], n_per_cluster=spec["n_per_cluster"],
            separation=spec["separation"], seed=spec["seed"],
        )
    return data_mod.load_idx(spec["images_path"], spec["labels_path"])


def build_shards(ds, spec: dict):
    return data_mod.partition_heterogeneous(
        ds, data_mod.PartitionSpec(m=spec["m"], p=spec["p"], s=spec["s"], seed=spec["seed"])
    )


def build_train_config(spec: dict) -> TrainConfig:
    return TrainConfig(
        lam=spec["lambda"], eta_reg=spec["eta_reg"], lr=spec["lr"],
        local_epochs=spec["epochs"], batch_size=spec["batch"], seed=spec["seed"],
    )


def build_federation_config(config: dict) -> FederationConfig:
    fed = config["federation"]
    failure = fed.get("failure", {"rate": 0.0, "seed": 0})
    return FederationConfig(
        rounds=fed["rounds"], k=fed["k"],
        train=build_train_config(config["train"]),
        failure=FailureConfig(rate=failure["rate"], seed=failure["seed"]),
    )


def resolved_model_spec(config: dict) -> dict:
    spec = dict(_MODEL_DEFAULTS)
    spec.update(config.get("model", {}))
    return spec

def build_template(d_in: int, model_spec: dict):
    return new_model(
        d_in=d_in, d_latent=model_spec["d_latent"],
        hidden_encoder=model_spec["hidden_encoder"],
        hidden_predictor=model_spec["hidden_predictor"],
        seed=model_spec["seed"], init_gain=model_spec["init_gain"],
    )


def workers_from_env() -> int:
    raw = os.environ.get("FEDCLUST_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"FEDCLUST_THREADS must be an integer, got {raw!r}")


def out_dir_for(config: dict, override: str | None) -> Path:
    out = Path(override) if override else Path(config.get("output_dir", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- commands ----------------------------------------------------------------------


def cmd_partition(config: dict, out_dir: Path) -> None:
    ds = build_dataset(config["dataset"])
    shards = build_shards(ds, config["partition"])
    data_mod.write_shard_manifests(shards, seed=config["partition"]["seed"], out_dir=out_dir)
    purity_path = out_dir / "purity.csv"
    with open(purity_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("client_id", "n_samples", "purity"))
        for shard in shards:
            purity = data_mod.shard_purity(ds, shard)
            writer.writerow((shard.client_id, len(shard.indices), f"{purity:.17g}"))
            print(f"client {shard.client_id}: n={len(shard.indices)} purity={purity:.4f}")
    print(f"wrote {len(shards)} shard manifests and {purity_path}")


def _run_training(config: dict):
    ds = build_dataset(config["dataset"])
    shards = build_shards(ds, config["partition"])
    fed_cfg = build_federation_config(config)
    template = build_template(ds.d, resolved_model_spec(config))
    return run_federation(ds, shards, fed_cfg, template, workers=workers_from_env())


def cmd_train(config: dict, out_dir: Path) -> None:
    result = _run_training(config)
    write_history_csv(result.history, out_dir / "history.csv")
    write_labels_csv(result.final_labels, out_dir / "labels.csv")
    manifest = dict(config)
    manifest["model"] = resolved_model_spec(config)
    manifest.setdefault("federation", {}).setdefault("failure", {"rate": 0.0, "seed": 0})
    write_run_manifest(manifest, out_dir / "manifest.json")
    last = result.history[-1]
    print(
        f"finished {len(result.history)} rounds: nmi={last.nmi:.4f} kappa={last.kappa:.4f} "
        f"mean_abs_offdiag={last.mean_abs_offdiag_corr:.4f}"
    )


def cmd_theory(config: dict, out_dir: Path) -> None:
    cfg = TheoryConfig(
        d=config["d"], d_prime=config["d_prime"], L1=config["L1"], L2=config["L2"],
        k=config["k"], n_c=config["n_c"], lam=config["lambda"], dt=config["dt"],
        steps=config["steps"], seed=config["seed"],
        imbalance=config.get("imbalance"),
        spectrum_scale=config.get("spectrum_scale", TheoryConfig.__dataclass_fields__["spectrum_scale"].default),
    )
    if cfg.steps == 0:
        write_probe_csv(None, out_dir / "probe.csv")
        (out_dir / "assumptions.json").write_text(json.dumps({"steps": 0}) + "\n")
        print("no steps requested; wrote empty probe")
        return
    _, log = run_flow(cfg)
    write_probe_csv(log, out_dir / "probe.csv")
    report = verify_theorem_31(log, tol=1e-3)
    assumptions = check_assumptions(log)
    doc = assumptions.to_json()
    doc["residuals"] = [
        {"tau": r.tau, "median_rel": r.median_rel, "max_rel": r.max_rel} for r in report.residuals
    ]
    doc["assumption_broken"] = report.assumption_broken
    (out_dir / "assumptions.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    for r in report.residuals:
        print(f"tau={r.tau}: median residual {r.median_rel:.3e}, max {r.max_rel:.3e}")
    print(
        f"balancedness {assumptions.balancedness_max_residual:.3e}, "
        f"alignment dev {assumptions.alignment_matrix_deviation:.3e}, "
        f"C drift {assumptions.c_drift:.3e}"
    )


def cmd_diagnose(config: dict, out_dir: Path) -> None:
    model = load_checkpoint(config["model_path"])
    X = load_matrix_csv(config["data_path"])
    Z = model.encoder.forward(X)
    report = collapse_report(Z, tau0=config.get("tau0", 1e-3))
    report.save(out_dir / "collapse.json")
    with open(out_dir / "spectrum.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("index", "sigma"))
        for i, s in enumerate(report.singular_values):
            writer.writerow((i, f"{s:.17g}"))
    print(
        f"effective_rank={report.effective_rank:.3f} near_zero={report.near_zero_count} "
        f"mean_abs_offdiag={report.mean_abs_offdiag:.4f}"
    )


def cmd_failures(config: dict, out_dir: Path) -> None:
    rates = config["rates"]
    rows = []
    for rate in rates:
        sub = json.loads(json.dumps(config))
        del sub["rates"]
        failure = sub["federation"].setdefault("failure", {"rate": 0.0, "seed": 0})
        failure["rate"] = rate
        result = _run_training(sub)
        last = result.history[-1]
        rows.append((rate, last))
        print(f"rate={rate}: nmi={last.nmi:.4f} kappa={last.kappa:.4f}")
    with open(out_dir / "sweep.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("rate",) + HISTORY_FIELDS[1:])
        for rate, last in rows:
            writer.writerow(
                [f"{rate:.17g}"]
                + [f"{getattr(last, name):.17g}" for name in HISTORY_FIELDS[1:]]
            )


COMMANDS = {
    "partition": cmd_partition,
    "train": cmd_train,
    "theory": cmd_theory,
    "diagnose": cmd_diagnose,
    "failures": cmd_failures,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedclust", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("partition", "write shard manifests and a purity table"),
        ("train", "run a full federation and emit history/labels/manifest"),
        ("theory", "run the linear-network gradient-flow probe"),
        ("diagnose", "collapse diagnostics for a checkpoint on a data matrix"),
        ("failures", "sweep disconnection rates"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out", default=None, help="output directory (overrides config output_dir)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, SCHEMAS[args.command])
        out_dir = out_dir_for(config, args.out)
        COMMANDS[args.command](config, out_dir)
        return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures get a distinct exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
