# app/cli.py
"""``fada`` command group: convert, pretrain, run, sweep, report, export-embeddings."""
import json
import logging
import os
from typing import Dict, List, Optional

import click
from dotenv import dotenv_values
from flask import current_app
from flask.cli import AppGroup

from .services.data_ingest import (
    DataFormatError,
    archive_path,
    load_idx_dataset,
    load_image_folder,
    load_vector_file,
    read_archive,
    write_archive,
)
from .services.experiment_service import (
    DEFAULT_REPETITIONS,
    FAST_REPETITIONS,
    METHODS,
    ExperimentSpec,
    SweepConflictError,
    aggregate,
    export_embeddings,
    pretrain,
    run_experiment,
    sweep,
    write_report,
)
from .services.fada_training import ConfigError, TrainConfig
from .services.record_store import RunRecordStore

logger = logging.getLogger(__name__)

fada_cli = AppGroup("fada", help="Few-shot adversarial domain adaptation experiments.")

# set through --seed / --n, never through config overrides
_RESERVED = ("seed", "n_shot")


class InputError(click.ClickException):
    """Unreadable or ill-formed input data."""

    exit_code = 2


# ---------- Config resolution ----------
def _env_overrides() -> Dict[str, str]:
    out = {}
    for name in TrainConfig.field_names():
        if name in _RESERVED:
            continue
        value = os.environ.get(f"FADA_{name.upper()}")
        if value is not None:
            out[name] = value
    return out


def _parse_set(items) -> Dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise click.UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve_overrides(config_file: Optional[str], sets) -> Dict[str, str]:
    """Environment < --config file < --set, keys normalised to field names."""
    layers = [_env_overrides()]
    if config_file:
        layers.append({k: v for k, v in dotenv_values(config_file).items() if v is not None})
    layers.append(_parse_set(sets))
    merged: Dict[str, str] = {}
    for layer in layers:
        for key, value in layer.items():
            name = key.strip().lower()
            name = name[len("fada_"):] if name.startswith("fada_") else name
            if name in _RESERVED:
                raise click.UsageError(f"{key} cannot be overridden; use --seed / --n")
            merged[name] = value
    try:
        TrainConfig.coerce(merged)
    except ConfigError as e:
        raise click.UsageError("invalid configuration:\n  " + "\n  ".join(e.errors))
    return merged


def _parse_n_values(text: str) -> List[int]:
    values = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = part.split("-", 1)
                values.extend(range(int(lo), int(hi) + 1))
            elif part:
                values.append(int(part))
    except ValueError:
        raise click.BadParameter(f"expected a list like '1,3,5' or '1-7', got {text!r}", param_hint="--n")
    if not values:
        raise click.BadParameter("no n values given", param_hint="--n")
    return values


def experiment_options(func):
    options = [
        click.option("--task", required=True, help="M->U, U->M, S->M, M->S, S->U or U->S"),
        click.option("--seed", type=int, default=0, show_default=True, help="Base seed."),
        click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
                     help="KEY=VALUE file of TrainConfig overrides."),
        click.option("--set", "sets", multiple=True, metavar="KEY=VALUE", help="Single override; repeatable."),
        click.option("--fast", is_flag=True, help="Halved epoch budgets and 3 repetitions."),
        click.option("--source-cap", type=int, default=None, help="Cap the source set size (labelled as capped)."),
        click.option("--data-dir", default=None, help="Directory of converted archives."),
        click.option("--out-dir", default=None, help="Output directory for records and checkpoints."),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _build_spec(task, method, n_shot, seed, config_file, sets, fast, source_cap, data_dir,
                repetitions=None) -> ExperimentSpec:
    spec = ExperimentSpec(
        task=task,
        method=method,
        n_shot=n_shot,
        repetitions=repetitions or (FAST_REPETITIONS if fast else DEFAULT_REPETITIONS),
        seed=seed,
        overrides=resolve_overrides(config_file, sets),
        data_dir=data_dir or current_app.config["DATA_DIR"],
        source_cap=source_cap,
        fast=fast,
    )
    errors = spec.validate()
    if errors:
        raise click.UsageError("invalid experiment:\n  " + "\n  ".join(errors))
    return spec.check()


def _out_dir(out_dir: Optional[str]) -> str:
    return out_dir or current_app.config["OUT_DIR"]


def _echo_json(payload) -> None:
    click.echo(json.dumps(payload, indent=2, sort_keys=True))


# ---------- Commands ----------
@fada_cli.command("convert")
@click.option("--domain", required=True, help="Domain tag, e.g. mnist, usps, svhn.")
@click.option("--split", type=click.Choice(["train", "test"]), default="train", show_default=True)
@click.option("--images", type=click.Path(exists=True, dir_okay=False), help="IDX image file (optionally .gz).")
@click.option("--labels", type=click.Path(exists=True, dir_okay=False), help="IDX label file (optionally .gz).")
@click.option("--image-dir", type=click.Path(exists=True, file_okay=False), help="One sub-directory per label.")
@click.option("--npz", type=click.Path(exists=True, dir_okay=False), help="Feature vectors: 'features' and 'labels'.")
@click.option("--archive", type=click.Path(exists=True, dir_okay=False), help="An existing canonical archive.")
@click.option("--out-dir", default=None, help="Defaults to the data directory.")
def convert_cmd(domain, split, images, labels, image_dir, npz, archive, out_dir):
    """Normalise a corpus into a canonical archive and print its manifest."""
    sources = [bool(images or labels), bool(image_dir), bool(npz), bool(archive)]
    if sum(sources) != 1:
        raise click.UsageError("give exactly one of --images/--labels, --image-dir, --npz or --archive")
    if bool(images) != bool(labels):
        raise click.UsageError("--images and --labels go together")
    try:
        if images:
            ds = load_idx_dataset(images, labels, domain)
        elif image_dir:
            ds = load_image_folder(image_dir, domain)
        elif npz:
            ds = load_vector_file(npz, domain)
        else:
            ds = read_archive(archive, domain)
    except (DataFormatError, ValueError, OSError) as e:
        raise InputError(str(e))

    path = archive_path(out_dir or current_app.config["DATA_DIR"], domain, split)
    write_archive(ds, path)
    shape = list(ds.inputs.shape)
    _echo_json({
        "path": path,
        "domain": domain,
        "split": split,
        "count": shape[0],
        "sample_shape": shape[1:],
        "class_counts": {str(c): int(n) for c, n in enumerate(ds.class_counts()) if n},
        "provenance": ds.provenance,
    })


@fada_cli.command("pretrain")
@experiment_options
def pretrain_cmd(task, seed, config_file, sets, fast, source_cap, data_dir, out_dir):
    """Train g and h on the source set (stage 1) and cache the checkpoint."""
    spec = _build_spec(task, "LB", 1, seed, config_file, sets, fast, source_cap, data_dir)
    try:
        _, metrics, path = pretrain(spec, seed, _out_dir(out_dir))
    except (DataFormatError, FileNotFoundError) as e:
        raise InputError(str(e))
    except Exception as e:
        raise click.ClickException(f"pretraining failed: {e}")
    _echo_json({"checkpoint": path, "final_epoch": metrics.last()})


@fada_cli.command("run")
@experiment_options
@click.option("--method", type=click.Choice(METHODS), required=True)
@click.option("--n", "n_shot", type=int, default=1, show_default=True, help="Labelled target samples per class.")
@click.option("--no-cache", is_flag=True, help="Ignore cached pretraining checkpoints.")
@click.option("--dump-pairs", type=click.Path(dir_okay=False, writable=True), default=None,
              help="FADA only: write the sampled G1-G4 pairs to this file.")
def run_cmd(task, seed, config_file, sets, fast, source_cap, data_dir, out_dir, method, n_shot, no_cache,
            dump_pairs):
    """Run one method for one seed and store its RunRecord."""
    if dump_pairs and method != "FADA":
        raise click.UsageError("--dump-pairs needs --method FADA")
    spec = _build_spec(task, method, n_shot, seed, config_file, sets, fast, source_cap, data_dir)
    out = _out_dir(out_dir)
    try:
        record = run_experiment(spec, seed, out, use_cache=not no_cache, dump_pairs=dump_pairs)
    except (DataFormatError, FileNotFoundError) as e:
        raise InputError(str(e))
    except Exception as e:
        raise click.ClickException(f"run failed: {e}")
    store = RunRecordStore(os.path.join(out, "records"))
    record_id = spec.record_id(seed)
    path = store.save(record_id, record.to_dict())
    _echo_json({"record": path, "accuracy": record.accuracy, "lb_accuracy": record.lb_accuracy,
                "digest": record.digest, "capped": record.capped})


@fada_cli.command("sweep")
@experiment_options
@click.option("--method", type=click.Choice(METHODS), required=True)
@click.option("--n", "n_values", default="1-7", show_default=True, help="n values, e.g. '1-7' or '1,3,5'.")
@click.option("--reps", type=int, default=None, help="Repetitions per n (default 10, or 3 with --fast).")
@click.option("--workers", type=int, default=None, help="Parallel processes (default FADA_WORKERS).")
def sweep_cmd(task, seed, config_file, sets, fast, source_cap, data_dir, out_dir, method, n_values, reps, workers):
    """Run every (n, repetition) cell; existing matching records are kept."""
    values = _parse_n_values(n_values)
    if reps is not None and reps < 1:
        raise click.BadParameter("must be >= 1", param_hint="--reps")
    workers = workers or current_app.config["WORKERS"]
    if workers < 1:
        raise click.BadParameter("must be >= 1", param_hint="--workers")
    spec = _build_spec(task, method, values[0], seed, config_file, sets, fast, source_cap, data_dir,
                       repetitions=reps)
    try:
        records = sweep(spec, values, _out_dir(out_dir), workers=workers)
    except SweepConflictError as e:
        raise click.ClickException(str(e))
    except (DataFormatError, FileNotFoundError) as e:
        raise InputError(str(e))
    except Exception as e:
        raise click.ClickException(f"sweep failed: {e}")
    _echo_json({"records": len(records), "n_values": values, "repetitions": spec.repetitions})


@fada_cli.command("report")
@click.option("--records-dir", default=None, help="Defaults to <out-dir>/records.")
@click.option("--out-dir", default=None, help="Where report.csv and the charts go.")
def report_cmd(records_dir, out_dir):
    """Aggregate RunRecords into report.csv plus one SVG chart per task."""
    out = _out_dir(out_dir)
    records_dir = records_dir or os.path.join(out, "records")
    if not os.path.isdir(records_dir):
        raise click.ClickException(f"no records directory at {records_dir}")
    records = RunRecordStore(records_dir).get_all()
    if not records:
        raise click.ClickException(f"no run records in {records_dir}")
    report = aggregate(records)
    paths = write_report(report, out)
    for anomaly in report.anomalies:
        click.echo(f"warning: {anomaly}", err=True)
    _echo_json({"rows": len(report.rows), "files": paths, "anomalies": report.anomalies})


@fada_cli.command("export-embeddings")
@experiment_options
@click.option("--method", type=click.Choice(METHODS), default="LB", show_default=True)
@click.option("--n", "n_shot", type=int, default=1, show_default=True)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Defaults to the final checkpoint of the matching run.")
@click.option("--raw", is_flag=True, help="Project flattened input images; no checkpoint needed.")
def export_embeddings_cmd(task, seed, config_file, sets, fast, source_cap, data_dir, out_dir, method, n_shot,
                          checkpoint, raw):
    """Write a 2-D PCA projection of source and target embeddings (CSV + SVG)."""
    spec = _build_spec(task, method, n_shot, seed, config_file, sets, fast, source_cap, data_dir)
    out = _out_dir(out_dir)
    if checkpoint is None and not raw:
        checkpoint = os.path.join(out, "checkpoints", f"{spec.record_id(seed)}.ckpt")
        if not os.path.exists(checkpoint):
            raise click.UsageError(f"no checkpoint at {checkpoint}; run the experiment first or pass --checkpoint")
    try:
        paths = export_embeddings(spec, seed, checkpoint, os.path.join(out, "embeddings"), raw=raw)
    except (DataFormatError, FileNotFoundError) as e:
        raise InputError(str(e))
    except Exception as e:
        raise click.ClickException(f"export failed: {e}")
    _echo_json(paths)
