# app/services/experiment_service.py
"""Experiment orchestration: single runs, n-shot sweeps, aggregation and charts."""
import csv
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data_ingest import ImageDataset, TaskData, data_fingerprint, normalize_task, prepare_task  # noqa: E402
from .fada_training import (  # noqa: E402
    ConfigError,
    StageMetrics,
    TrainConfig,
    embed_dataset,
    evaluate,
    fada_loop,
    finetune_baseline,
    pretrain_source,
    train_dcd,
    uda_binary_baseline,
)
from .metrics_log import MetricsLog  # noqa: E402
from .models import ModelBundle, init_binary_discriminator, init_models, load_checkpoint, save_checkpoint  # noqa: E402
from .pair_groups import build_grouped_pairs, split_holdout  # noqa: E402
from .record_store import RunRecordStore  # noqa: E402
from .similarity import mean_cosine_to_class_centroid, pca_2d, same_class_distance  # noqa: E402

logger = logging.getLogger(__name__)

METHODS = ("LB", "FT", "FADA", "UDA-bin")
DEFAULT_REPETITIONS = 10
FAST_REPETITIONS = 3
CSV_HEADER = ("task", "method", "n", "mean", "std", "count")
ALIGNMENT_SAMPLES = 500
EXPORT_SAMPLES = 500
# svg output stays byte-stable across runs
matplotlib.rcParams["svg.hashsalt"] = "fada"


class SweepConflictError(RuntimeError):
    """Existing records were produced by a different configuration."""


def task_slug(task: str) -> str:
    return normalize_task(task).replace("->", "2")


def _sha(payload) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ExperimentSpec:
    task: str
    method: str
    n_shot: int = 1
    repetitions: int = DEFAULT_REPETITIONS
    seed: int = 0
    overrides: Dict[str, object] = field(default_factory=dict)
    data_dir: str = "data"
    source_cap: Optional[int] = None
    fast: bool = False

    def validate(self) -> List[str]:
        """Every problem with the spec, not just the first."""
        errors = []
        try:
            normalize_task(self.task)
        except ValueError as e:
            errors.append(str(e))
        if self.method not in METHODS:
            errors.append(f"method must be one of {list(METHODS)}, got {self.method!r}")
        if self.n_shot < 1:
            errors.append(f"n_shot must be >= 1, got {self.n_shot}")
        if self.repetitions < 1:
            errors.append(f"repetitions must be >= 1, got {self.repetitions}")
        if self.seed < 0:
            errors.append(f"seed must be >= 0, got {self.seed}")
        if self.source_cap is not None and self.source_cap < 1:
            errors.append(f"source_cap must be >= 1, got {self.source_cap}")
        try:
            self.base_config()
        except ConfigError as e:
            errors.extend(e.errors)
        return errors

    def check(self) -> "ExperimentSpec":
        errors = self.validate()
        if errors:
            raise ConfigError(errors)
        return replace(self, task=normalize_task(self.task))

    def base_config(self) -> TrainConfig:
        cfg = TrainConfig.from_mapping(self.overrides)
        return cfg.fast() if self.fast else cfg

    def config(self, seed: int, n_shot: Optional[int] = None) -> TrainConfig:
        return replace(self.base_config(), seed=int(seed), n_shot=int(n_shot or self.n_shot))

    def digest_for(self, n_shot: int) -> str:
        """Identity of one (task, method, n) cell: everything but the seed, with the data by content."""
        cfg = self.config(0, n_shot).as_dict()
        cfg.pop("seed")
        return _sha({
            "task": normalize_task(self.task),
            "method": self.method,
            "n_shot": int(n_shot),
            "source_cap": self.source_cap,
            "data": data_fingerprint(self.task, self.data_dir),
            "config": cfg,
        })

    @property
    def digest(self) -> str:
        return self.digest_for(self.n_shot)

    def record_id(self, seed: int, n_shot: Optional[int] = None) -> str:
        return f"{task_slug(self.task)}_{self.method}_n{n_shot or self.n_shot}_seed{seed}"


@dataclass
class RunRecord:
    spec: Dict[str, object]
    spec_digest: str
    seed: int
    config: Dict[str, object]
    accuracy: float
    per_class: Dict[str, float]
    confusion: List[List[int]]
    lb_accuracy: float
    stages: List[Dict[str, object]]
    alignment: Dict[str, float]
    capped: bool = False
    checkpoints: Dict[str, str] = field(default_factory=dict)
    wall_clock_seconds: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")

    @property
    def digest(self) -> str:
        # wall clock and file locations do not identify a result
        payload = asdict(self)
        payload.pop("wall_clock_seconds")
        payload.pop("checkpoints")
        return _sha(payload)

    def to_dict(self) -> Dict[str, object]:
        d = asdict(self)
        d["digest"] = self.digest
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, object]) -> "RunRecord":
        names = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------- Single runs ----------
def _bundle_for(data: TaskData, cfg: TrainConfig, seed: int) -> ModelBundle:
    if isinstance(data.source, ImageDataset):
        return init_models(seed, activation=cfg.activation, final_activation=cfg.final_activation)
    classes = max(data.source.num_classes, data.target_pool.num_classes)
    return init_models(seed, activation=cfg.activation, final_activation=cfg.final_activation,
                       input_dim=data.source.inputs.shape[1], num_classes=classes)


def pretrain_cache_key(task: str, seed: int, cfg: TrainConfig, source_cap: Optional[int], arch: str,
                       data: str) -> str:
    return _sha({
        "task": normalize_task(task), "seed": int(seed), "source_cap": source_cap, "arch": arch, "data": data,
        "lr": cfg.lr_pretrain, "betas": [cfg.beta1, cfg.beta2], "eps": cfg.epsilon,
        "epochs": cfg.pretrain_epochs, "batch": cfg.cls_batch_size,
        "activation": cfg.activation, "final_activation": cfg.final_activation,
    })


def pretrain(spec: ExperimentSpec, seed: int, out_dir: str, data: Optional[TaskData] = None,
             bundle: Optional[ModelBundle] = None, sink: Optional[MetricsLog] = None,
             use_cache: bool = True) -> Tuple[ModelBundle, StageMetrics, str]:
    """
    Stage 1 with a checkpoint cache shared by every method of a (task, seed).

    Returns:
        (bundle with the LB model, pretrain StageMetrics, checkpoint path)
    """
    cfg = spec.config(seed)
    if data is None:
        data = prepare_task(spec.task, spec.data_dir, cfg.n_shot, seed, spec.source_cap)
    if bundle is None:
        bundle = _bundle_for(data, cfg, seed)
    fingerprint = data.fingerprint or data_fingerprint(spec.task, spec.data_dir)
    key = pretrain_cache_key(spec.task, seed, cfg, spec.source_cap, bundle.arch, fingerprint)
    path = os.path.join(out_dir, "pretrain", f"{task_slug(spec.task)}_seed{seed}_{key[:12]}.ckpt")

    if use_cache and os.path.exists(path):
        manifest = load_checkpoint(bundle, path)
        m = manifest.get("metrics", {})
        metrics = StageMetrics(m.get("stage", "pretrain"), [dict(e) for e in m.get("epochs", [])])
        if sink is not None:
            for epoch in metrics.epochs:
                sink.emit(metrics.stage, epoch)
        logger.info(f"Reusing pretrained models from {path}")
        return bundle, metrics, path

    # validation on the whole target pool so the stage does not depend on n
    _, _, metrics = pretrain_source(bundle.g, bundle.h, data.source, cfg, validation=data.target_pool, sink=sink)
    bundle.stage = "pretrain"
    save_checkpoint(bundle, path, extra={"metrics": metrics.as_dict(), "cache_key": key})
    return bundle, metrics, path


def _alignment(bundle: ModelBundle, data: TaskData, seed: int, prefix: str) -> Dict[str, float]:
    """Same-class cross-domain distance and target cosine to source class centroids."""
    rng = np.random.default_rng([int(seed), 41])
    s = np.sort(rng.permutation(len(data.source))[:ALIGNMENT_SAMPLES])
    t = np.sort(rng.permutation(len(data.target_test))[:ALIGNMENT_SAMPLES])
    zs = embed_dataset(bundle.g, data.source, s)
    zt = embed_dataset(bundle.g, data.target_test, t)
    ys, yt = data.source.labels[s], data.target_test.labels[t]
    return {
        prefix: same_class_distance(zs, ys, zt, yt),
        f"{prefix}_cosine": mean_cosine_to_class_centroid(zs, ys, zt, yt),
    }


def run_experiment(spec: ExperimentSpec, seed: int, out_dir: str, n_shot: Optional[int] = None,
                   use_cache: bool = True, dump_pairs: Optional[str] = None) -> RunRecord:
    """
    Run one method pipeline for one seed and return its RunRecord (not yet stored).

    Args:
        dump_pairs: FADA only; write the sampled G1-G4 pairs to this text file
    """
    spec = replace(spec.check(), n_shot=int(n_shot or spec.n_shot))
    if dump_pairs and spec.method != "FADA":
        raise ValueError(f"pair dumps need method FADA, got {spec.method}")
    cfg = spec.config(seed)
    record_id = spec.record_id(seed)
    started = time.perf_counter()
    logger.info(f"Run {record_id}: {spec.method} on {spec.task}, n={cfg.n_shot}, seed={seed}")

    data = prepare_task(spec.task, spec.data_dir, cfg.n_shot, seed, spec.source_cap)
    sink = MetricsLog(os.path.join(out_dir, "metrics", f"{record_id}.jsonl"))
    sink.reset()
    bundle, pre_metrics, pre_path = pretrain(spec, seed, out_dir, data=data, sink=sink, use_cache=use_cache)
    lb = evaluate(bundle.g, bundle.h, data.target_test)
    align = _alignment(bundle, data, seed, "lb")
    stages = [pre_metrics]

    try:
        if spec.method == "FT":
            _, _, m = finetune_baseline(bundle.g, bundle.h, data.target_train, cfg,
                                        validation=data.target_test, sink=sink)
            stages.append(m)
        elif spec.method == "FADA":
            pairs = build_grouped_pairs(data.source, data.target_train, seed, cfg.group_ratios)
            if dump_pairs:
                pairs.dump(dump_pairs)
            train_pairs, holdout = split_holdout(pairs, cfg.dcd_holdout_fraction, seed)
            _, m_dcd = train_dcd(bundle.dcd, bundle.g, bundle.h, data.source, data.target_train,
                                 train_pairs, cfg, holdout=holdout, sink=sink)
            bundle.stage = "dcd"
            _, _, _, m_adv = fada_loop(bundle.g, bundle.h, bundle.dcd, data.source, data.target_train,
                                       train_pairs, cfg, holdout=holdout, validation=data.target_test, sink=sink)
            stages.extend([m_dcd, m_adv])
        elif spec.method == "UDA-bin":
            d_bin = init_binary_discriminator(seed, bundle.g.output_dim, cfg.activation)
            # target labels are never read by the baseline
            _, _, m = uda_binary_baseline(bundle.g, bundle.h, d_bin, data.source, data.target_test, cfg,
                                          validation=data.target_test, sink=sink)
            stages.append(m)
    except Exception as e:
        logger.error(f"Run {record_id} failed: {e}")
        raise

    final = evaluate(bundle.g, bundle.h, data.target_test) if spec.method != "LB" else lb
    align.update(_alignment(bundle, data, seed, "final"))
    bundle.stage = spec.method
    ckpt = os.path.join(out_dir, "checkpoints", f"{record_id}.ckpt")
    save_checkpoint(bundle, ckpt, extra={"record_id": record_id})

    record = RunRecord(
        spec={"task": spec.task, "method": spec.method, "n_shot": spec.n_shot, "source_cap": spec.source_cap,
              "data_dir": spec.data_dir},
        spec_digest=spec.digest,
        seed=int(seed),
        config=cfg.as_dict(),
        accuracy=final.accuracy,
        per_class={str(k): v for k, v in final.per_class.items()},
        confusion=final.confusion.tolist(),
        lb_accuracy=lb.accuracy,
        stages=[m.as_dict() for m in stages],
        alignment=align,
        capped=data.capped,
        checkpoints={"pretrain": pre_path, "final": ckpt},
        wall_clock_seconds=time.perf_counter() - started,
    )
    logger.info(f"Run {record_id}: accuracy {record.accuracy:.4f} (LB {record.lb_accuracy:.4f})")
    return record


def _run_job(args) -> Dict[str, object]:
    spec, seed, n_shot, out_dir = args
    return run_experiment(spec, seed, out_dir, n_shot=n_shot).to_dict()


def sweep(spec: ExperimentSpec, n_values: Sequence[int], out_dir: str, repetitions: Optional[int] = None,
          workers: int = 1, store: Optional[RunRecordStore] = None) -> List[Dict[str, object]]:
    """
    Run every (n, repetition) cell; seeds are ``spec.seed + rep``.

    Records already on disk are reused when their spec digest matches and
    refused with SweepConflictError otherwise.

    Returns:
        All records of the sweep, in (n, seed) order
    """
    spec = spec.check()
    reps = repetitions or spec.repetitions
    store = store or RunRecordStore(os.path.join(out_dir, "records"))
    cells = [(int(n), spec.seed + rep) for n in n_values for rep in range(reps)]

    results: Dict[Tuple[int, int], Dict[str, object]] = {}
    pending = []
    for n, seed in cells:
        record_id = spec.record_id(seed, n)
        existing = store.get_by_id(record_id)
        if existing is None:
            pending.append((n, seed))
            continue
        if existing.get("spec_digest") != spec.digest_for(n):
            raise SweepConflictError(
                f"record {record_id} was produced by a different configuration; use a fresh output directory"
            )
        results[(n, seed)] = existing
    logger.info(f"Sweep {spec.task}/{spec.method}: {len(cells)} cells, {len(cells) - len(pending)} already done")

    jobs = [(spec, seed, n, out_dir) for n, seed in pending]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run_job, jobs))
    else:
        outputs = [_run_job(job) for job in jobs]
    for (n, seed), record in zip(pending, outputs):
        store.save(spec.record_id(seed, n), record)
        results[(n, seed)] = record
    return [results[cell] for cell in cells]


# ---------- Aggregation ----------
@dataclass
class AggregateRow:
    task: str
    method: str
    n: int
    mean: float
    std: float
    count: int
    min: float
    max: float


@dataclass
class AggregateReport:
    rows: List[AggregateRow]
    anomalies: List[str] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.rows:
            writer.writerow([r.task, r.method, r.n, repr(r.mean), repr(r.std), r.count])
        return buf.getvalue()

    def to_dict(self) -> Dict[str, object]:
        return {"rows": [asdict(r) for r in self.rows], "anomalies": list(self.anomalies)}

    def tasks(self) -> List[str]:
        return sorted({r.task for r in self.rows})


def aggregate(records: Sequence[Dict[str, object]]) -> AggregateReport:
    """Mean and sample standard deviation per (task, method, n); capped runs are labelled."""
    if not records:
        raise ValueError("no run records to aggregate")
    cells: Dict[Tuple[str, str, int], List[float]] = {}
    for rec in records:
        spec = rec["spec"]
        task = spec["task"] + (" [capped]" if rec.get("capped") else "")
        cells.setdefault((task, spec["method"], int(spec["n_shot"])), []).append(float(rec["accuracy"]))

    rows = []
    for (task, method, n), accs in sorted(cells.items()):
        a = np.asarray(accs, dtype=np.float64)
        rows.append(AggregateRow(task, method, n, float(a.mean()),
                                 float(a.std(ddof=1)) if a.size > 1 else 0.0,
                                 int(a.size), float(a.min()), float(a.max())))

    anomalies = []
    means = {(r.task, r.method, r.n): r.mean for r in rows}
    for task in sorted({r.task for r in rows}):
        lo, hi = means.get((task, "FADA", 1)), means.get((task, "FADA", 7))
        if lo is not None and hi is not None and hi < lo:
            msg = f"{task}: FADA mean at n=7 ({hi:.4f}) is below n=1 ({lo:.4f})"
            logger.warning(msg)
            anomalies.append(msg)
    return AggregateReport(rows, anomalies)


def render_chart(report: AggregateReport, task: str) -> str:
    """SVG of mean accuracy against n per method, LB drawn as a horizontal reference."""
    rows = [r for r in report.rows if r.task == task]
    if not rows:
        raise ValueError(f"no aggregated rows for task {task!r}")
    fig, ax = plt.subplots(figsize=(6, 4))
    try:
        lb = [r.mean for r in rows if r.method == "LB"]
        if lb:
            ax.axhline(float(np.mean(lb)), color="gray", linestyle="--", label="LB")
        for method in METHODS[1:]:
            pts = sorted((r.n, r.mean, r.std) for r in rows if r.method == method)
            if pts:
                n, mean, std = (np.asarray(v) for v in zip(*pts))
                ax.errorbar(n, mean, yerr=std, marker="o", capsize=3, label=method)
        ax.set_xlabel("labelled target samples per class (n)")
        ax.set_ylabel("target accuracy")
        ax.set_title(task)
        ax.grid(alpha=0.3)
        ax.legend()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        return buf.getvalue()
    finally:
        plt.close(fig)


def write_report(report: AggregateReport, out_dir: str) -> Dict[str, str]:
    """Write ``report.csv`` and one SVG per task; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {"csv": os.path.join(out_dir, "report.csv")}
    with open(paths["csv"], "w", encoding="utf-8", newline="") as f:
        f.write(report.to_csv())
    for task in report.tasks():
        name = task.replace("->", "2").replace(" ", "_").replace("[", "").replace("]", "")
        path = os.path.join(out_dir, f"report_{name}.svg")
        with open(path, "w", encoding="utf-8") as f:
            f.write(render_chart(report, task))
        paths[task] = path
    return paths


# ---------- Embedding export ----------
def export_embeddings(spec: ExperimentSpec, seed: int, checkpoint: Optional[str], out_dir: str,
                      raw: bool = False) -> Dict[str, str]:
    """
    Project source and target samples to 2-D; writes CSV and SVG.

    Args:
        checkpoint: trained models whose g embeds the samples; unused with ``raw``
        raw: project the flattened input pixels instead of embeddings

    Returns:
        Paths of the written csv and svg
    """
    spec = spec.check()
    if not raw and not checkpoint:
        raise ValueError("a checkpoint is required unless raw inputs are exported")
    cfg = spec.config(seed)
    data = prepare_task(spec.task, spec.data_dir, cfg.n_shot, seed, spec.source_cap)

    rng = np.random.default_rng([int(seed), 42])
    s = np.sort(rng.permutation(len(data.source))[:EXPORT_SAMPLES])
    t = np.sort(rng.permutation(len(data.target_test))[:EXPORT_SAMPLES])
    if raw:
        z = np.concatenate([data.source.inputs[s].reshape(s.size, -1),
                            data.target_test.inputs[t].reshape(t.size, -1)])
    else:
        bundle = _bundle_for(data, cfg, seed)
        load_checkpoint(bundle, checkpoint)
        z = np.concatenate([embed_dataset(bundle.g, data.source, s), embed_dataset(bundle.g, data.target_test, t)])
    xy = pca_2d(z)
    domains = ["source"] * s.size + ["target"] * t.size
    labels = np.concatenate([data.source.labels[s], data.target_test.labels[t]])

    os.makedirs(out_dir, exist_ok=True)
    if raw:
        name, title = f"{task_slug(spec.task)}_raw_seed{seed}", f"{spec.task} raw inputs seed={seed}"
    else:
        name, title = spec.record_id(seed), f"{spec.task} {spec.method} n={spec.n_shot} seed={seed}"
    stem = os.path.join(out_dir, f"embeddings_{name}")
    with open(stem + ".csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["domain", "label", "x", "y"])
        for d, y, (px, py) in zip(domains, labels, xy):
            writer.writerow([d, int(y), repr(float(px)), repr(float(py))])

    fig, ax = plt.subplots(figsize=(6, 6))
    try:
        n_src = s.size
        ax.scatter(xy[:n_src, 0], xy[:n_src, 1], c=labels[:n_src], cmap="tab10", marker="o", s=10,
                   vmin=0, vmax=9, label="source")
        ax.scatter(xy[n_src:, 0], xy[n_src:, 1], c=labels[n_src:], cmap="tab10", marker="x", s=14,
                   vmin=0, vmax=9, label="target")
        ax.set_title(title)
        ax.legend()
        fig.savefig(stem + ".svg", format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
    logger.info(f"Exported {len(domains)} embeddings to {stem}.csv")
    return {"csv": stem + ".csv", "svg": stem + ".svg"}
