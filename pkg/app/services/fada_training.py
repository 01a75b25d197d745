# app/services/fada_training.py
"""Training stages: source pretraining, DCD training, the adversarial
confusion/classification loop, and the LB / FT / UDA-bin baselines."""
import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .models import BinaryDomainDiscriminator, DomainClassDiscriminator, Module, PredictorHead
from .pair_groups import TARGET_GROUPS, GroupedPairs, PairBatch, PairBatchStream
from .tensor_autodiff import (
    ACTIVATIONS,
    Adam,
    AdamConfig,
    Tape,
    Tensor,
    add,
    cross_entropy,
    take_rows,
)

logger = logging.getLogger(__name__)

# RNG stream ids, see data_ingest for the data-side streams
STREAM_PRETRAIN = 31
STREAM_DCD = 32
STREAM_ADV_PAIRS = 33
STREAM_ADV_CLS = 34
STREAM_FINETUNE = 35
STREAM_UDA = 36
STREAM_PROBE = 37

PROBE_SIZE = 1000
EVAL_CHUNK = 1000


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every problem found."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class FreezeViolation(RuntimeError):
    """A module declared frozen changed during a training stage."""


# ---------- Config ----------
def _parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _parse_ratios(value) -> Tuple[float, ...]:
    if isinstance(value, str):
        value = [v for v in value.replace(":", ",").split(",") if v.strip()]
    return tuple(float(v) for v in value)


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.5
    lr_pretrain: float = 1e-3
    lr_dcd: float = 1e-3
    lr_adv: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    pretrain_epochs: int = 20
    dcd_epochs: int = 10
    adv_epochs: int = 30
    cls_batch_size: int = 32
    pair_batch_size: int = 64
    adv_batches_per_epoch: int = 40
    dcd_steps_per_update: int = 1
    seed: int = 0
    n_shot: int = 1
    activation: str = "relu"
    final_activation: bool = True
    dcd_holdout_fraction: float = 0.2
    group_ratios: Tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    verify_freeze: bool = True

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> List[str]:
        out = []
        for name in ("lr_pretrain", "lr_dcd", "lr_adv", "epsilon"):
            if not getattr(self, name) > 0:
                out.append(f"{name} must be positive, got {getattr(self, name)}")
        if not self.gamma >= 0:
            out.append(f"gamma must be >= 0, got {self.gamma}")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                out.append(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        for name in ("pretrain_epochs", "dcd_epochs", "adv_epochs"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("cls_batch_size", "adv_batches_per_epoch", "dcd_steps_per_update", "n_shot"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.pair_batch_size < 4 or self.pair_batch_size % 4:
            out.append(f"pair_batch_size must be a positive multiple of 4, got {self.pair_batch_size}")
        if not 0 <= self.dcd_holdout_fraction < 1:
            out.append(f"dcd_holdout_fraction must lie in [0, 1), got {self.dcd_holdout_fraction}")
        if len(self.group_ratios) != 4 or any(r <= 0 for r in self.group_ratios):
            out.append(f"group_ratios must be four positive numbers, got {list(self.group_ratios)}")
        if self.activation not in ACTIVATIONS:
            out.append(f"activation must be one of {sorted(ACTIVATIONS)}, got {self.activation!r}")
        return out

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def coerce(cls, mapping: Mapping[str, object]) -> Dict[str, object]:
        """Convert string values to field types; unknown keys and bad values are collected."""
        defaults = cls()
        known = {f.name: f for f in fields(cls)}
        out, errors = {}, []
        for raw_key, value in mapping.items():
            key = raw_key.strip().lower()
            if key.startswith("fada_"):
                key = key[len("fada_"):]
            if key not in known:
                errors.append(f"unknown config key {raw_key!r}")
                continue
            kind = type(getattr(defaults, key))
            try:
                if kind is bool:
                    out[key] = _parse_bool(value)
                elif kind is tuple:
                    out[key] = _parse_ratios(value)
                elif kind is int:
                    out[key] = int(str(value).strip()) if isinstance(value, str) else int(value)
                elif kind is float:
                    out[key] = float(value)
                else:
                    out[key] = str(value).strip()
            except (TypeError, ValueError) as e:
                errors.append(f"{key}: {e}")
        if errors:
            raise ConfigError(errors)
        return out

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, object]) -> "TrainConfig":
        return cls(**cls.coerce(mapping))

    def fast(self) -> "TrainConfig":
        """Halved epoch budgets (at least one epoch per stage)."""
        return replace(
            self,
            pretrain_epochs=max(1, self.pretrain_epochs // 2),
            dcd_epochs=max(1, self.dcd_epochs // 2),
            adv_epochs=max(1, self.adv_epochs // 2),
        )

    def adam(self, lr: float) -> AdamConfig:
        return AdamConfig(lr=lr, beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon)

    def as_dict(self) -> Dict[str, object]:
        d = asdict(self)
        d["group_ratios"] = list(self.group_ratios)
        return d


# ---------- Metrics ----------
@dataclass
class StageMetrics:
    stage: str
    epochs: List[Dict[str, float]] = field(default_factory=list)
    sink: Optional[object] = field(default=None, repr=False, compare=False)

    def log(self, epoch: int, **values: float) -> Dict[str, float]:
        record = {"epoch": int(epoch)}
        for key, value in values.items():
            if value is None:
                continue
            value = float(value)
            if not math.isfinite(value):
                raise FloatingPointError(f"{self.stage} epoch {epoch}: {key} is not finite ({value})")
            if key.startswith("acc") and not 0.0 <= value <= 1.0:
                raise ValueError(f"{self.stage} epoch {epoch}: {key}={value} outside [0, 1]")
            record[key] = value
        self.epochs.append(record)
        summary = ", ".join(f"{k}={v:.4f}" for k, v in record.items() if k != "epoch")
        logger.info(f"{self.stage} epoch {epoch}: {summary}")
        if self.sink is not None:
            self.sink.emit(self.stage, record)
        return record

    def last(self) -> Dict[str, float]:
        return self.epochs[-1] if self.epochs else {}

    def series(self, key: str) -> List[float]:
        return [e[key] for e in self.epochs if key in e]

    def as_dict(self) -> Dict[str, object]:
        return {"stage": self.stage, "epochs": [dict(e) for e in self.epochs]}


# ---------- Freezing ----------
def _params(*modules: Module):
    return [p for m in modules for p in m.parameters()]


@contextmanager
def frozen(*modules: Module, verify: bool = True):
    """Mark the modules' parameters non-trainable; optionally bit-compare them on exit."""
    params = _params(*modules)
    flags = [p.trainable for p in params]
    before = [m.checksum() for m in modules] if verify else None
    for p in params:
        p.trainable = False
    try:
        yield
    finally:
        for p, flag in zip(params, flags):
            p.trainable = flag
    if verify:
        after = [m.checksum() for m in modules]
        if after != before:
            changed = [type(m).__name__ for m, a, b in zip(modules, after, before) if a != b]
            raise FreezeViolation(f"frozen modules changed: {changed}")


# ---------- Forward helpers ----------
def embed_dataset(g: Module, ds, indices: Optional[np.ndarray] = None, chunk: int = EVAL_CHUNK) -> np.ndarray:
    """Embeddings of ``ds`` (or the given rows) without recording anything."""
    x = ds.inputs if indices is None else ds.inputs[np.asarray(indices, dtype=np.int64)]
    if len(x) == 0:
        return np.zeros((0, g.output_dim), dtype=np.float32)
    return np.concatenate([g(x[i:i + chunk]).data for i in range(0, len(x), chunk)])


def predict_labels(g: Module, h: PredictorHead, ds, chunk: int = EVAL_CHUNK) -> np.ndarray:
    out = []
    for i in range(0, len(ds), chunk):
        out.append(h.logits(g(ds.inputs[i:i + chunk])).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


@dataclass
class EvalResult:
    accuracy: float
    per_class: Dict[int, float]
    confusion: np.ndarray
    count: int

    def as_dict(self) -> Dict[str, object]:
        return {
            "accuracy": self.accuracy,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "confusion": self.confusion.tolist(),
            "count": self.count,
        }


def evaluate(g: Module, h: PredictorHead, ds) -> EvalResult:
    """Argmax accuracy, per-class accuracy and confusion matrix (rows = true class)."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = predict_labels(g, h, ds)
    k = max(ds.num_classes, int(pred.max()) + 1)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (ds.labels, pred), 1)
    per_class = {
        int(c): float(confusion[c, c] / confusion[c].sum())
        for c in range(k) if confusion[c].sum() > 0
    }
    return EvalResult(float(np.trace(confusion) / len(ds)), per_class, confusion, len(ds))


def _probe(ds, seed: int):
    if ds is None or len(ds) <= PROBE_SIZE:
        return ds
    idx = np.sort(np.random.default_rng([int(seed), STREAM_PROBE]).permutation(len(ds))[:PROBE_SIZE])
    return ds.subset(idx)


def _probe_accuracy(g, h, ds) -> Optional[float]:
    return None if ds is None or len(ds) == 0 else evaluate(g, h, ds).accuracy


def classification_loss(g: Module, h: PredictorHead, x: np.ndarray, y: np.ndarray) -> Tensor:
    return cross_entropy(h(g(x)), y)


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# ---------- Stage 1 ----------
def pretrain_source(g: Module, h: PredictorHead, source, cfg: TrainConfig, validation=None,
                    sink=None) -> Tuple[Module, PredictorHead, StageMetrics]:
    """Minimise batch-mean cross-entropy on the source set; the result is the LB model."""
    if len(source) == 0:
        raise ValueError("source training set is empty")
    metrics = StageMetrics("pretrain", sink=sink)
    opt = Adam(_params(g, h), cfg.adam(cfg.lr_pretrain))
    rng = np.random.default_rng([cfg.seed, STREAM_PRETRAIN])
    src_probe, val_probe = _probe(source, cfg.seed), _probe(validation, cfg.seed)
    for epoch in range(cfg.pretrain_epochs):
        losses = []
        for idx in _epoch_batches(len(source), cfg.cls_batch_size, rng):
            with Tape() as tape:
                loss = classification_loss(g, h, source.inputs[idx], source.labels[idx])
            losses.append(opt.minimize(loss, tape))
        metrics.log(epoch, loss_cls=float(np.mean(losses)),
                    acc_source=_probe_accuracy(g, h, src_probe),
                    acc_target=_probe_accuracy(g, h, val_probe))
    return g, h, metrics


# ---------- Stage 2 ----------
def dcd_loss(dcd: DomainClassDiscriminator, za: Tensor, zb: Tensor, groups) -> Tensor:
    """4-way cross-entropy of D(concat(za, zb)) against group labels 1..4."""
    groups = np.asarray(groups, dtype=np.int64)
    if groups.size and (groups.min() < 1 or groups.max() > 4):
        raise ValueError(f"group labels must lie in 1..4, got range [{groups.min()}, {groups.max()}]")
    return cross_entropy(dcd(za, zb), groups - 1)


def confusion_loss(dcd: DomainClassDiscriminator, za: Tensor, zb: Tensor, groups) -> Tensor:
    """CE of G2 pairs against group 1 plus CE of G4 pairs against group 3.

    Each term is a batch mean over its own group; D is expected to be frozen.
    """
    groups = np.asarray(groups, dtype=np.int64)
    bad = np.setdiff1d(np.unique(groups), TARGET_GROUPS)
    if bad.size:
        raise ValueError(f"confusion loss takes G2 and G4 pairs only, got groups {bad.tolist()}")
    total = None
    for group, label in ((2, 0), (4, 2)):
        rows = np.flatnonzero(groups == group)
        if rows.size == 0:
            continue
        term = cross_entropy(dcd(take_rows(za, rows), take_rows(zb, rows)), np.full(rows.size, label))
        total = term if total is None else add(total, term)
    if total is None:
        raise ValueError("confusion loss needs at least one G2 or G4 pair")
    return total


def pair_embeddings(zs: np.ndarray, zt: np.ndarray, batch: PairBatch) -> Tuple[Tensor, Tensor]:
    """Look up pair embeddings in precomputed source/target tables."""
    tgt = batch.second_is_target
    second = np.empty((len(batch), zs.shape[1]), dtype=zs.dtype)
    second[~tgt] = zs[batch.second[~tgt]]
    second[tgt] = zt[batch.second[tgt]]
    return Tensor(zs[batch.first]), Tensor(second)


def embed_pairs(g: Module, source, target, batch: PairBatch) -> Tuple[Tensor, Tensor]:
    """Embed only the rows a pair batch touches, each distinct row once."""
    tgt = batch.second_is_target
    n = len(batch)
    us, inv_s = np.unique(np.concatenate([batch.first, batch.second[~tgt]]), return_inverse=True)
    zs = embed_dataset(g, source, us)
    za = zs[inv_s[:n]]
    zb = np.empty_like(za)
    zb[~tgt] = zs[inv_s[n:]]
    if tgt.any():
        ut, inv_t = np.unique(batch.second[tgt], return_inverse=True)
        zb[tgt] = embed_dataset(g, target, ut)[inv_t]
    return Tensor(za), Tensor(zb)


def _check_balanced(batch: PairBatch) -> None:
    counts = batch.group_counts()
    if counts.min() != counts.max():
        raise ValueError(f"discriminator batches must be balanced across groups, got counts {counts.tolist()}")


def dcd_holdout_metrics(dcd: DomainClassDiscriminator, za: Tensor, zb: Tensor, groups: np.ndarray) -> Dict[str, float]:
    """Held-out 4-way accuracy and the 1-vs-2 / 3-vs-4 pairwise accuracies."""
    groups = np.asarray(groups, dtype=np.int64)
    if groups.size == 0:
        return {}
    p = dcd(za, zb).data
    out = {"acc_dcd4": float(np.mean(p.argmax(axis=1) + 1 == groups))}
    for name, (a, b) in (("acc_dcd_1v2", (1, 2)), ("acc_dcd_3v4", (3, 4))):
        rows = np.isin(groups, (a, b))
        if rows.any():
            pick_a = p[rows, a - 1] >= p[rows, b - 1]
            out[name] = float(np.mean(pick_a == (groups[rows] == a)))
    return out


def _as_batch(pairs: Optional[GroupedPairs]) -> Optional[PairBatch]:
    return None if pairs is None or len(pairs) == 0 else pairs.as_batch()


def _held_out(dcd, batch: Optional[PairBatch], lookup) -> Dict[str, float]:
    if batch is None:
        return {}
    za, zb = lookup(batch)
    return dcd_holdout_metrics(dcd, za, zb, batch.group)


def train_dcd(dcd: DomainClassDiscriminator, g: Module, h: PredictorHead, source, target,
              pairs: GroupedPairs, cfg: TrainConfig, holdout: Optional[GroupedPairs] = None,
              sink=None) -> Tuple[DomainClassDiscriminator, StageMetrics]:
    """Train D on group-balanced pair batches while g and h stay frozen."""
    metrics = StageMetrics("dcd", sink=sink)
    opt = Adam(dcd.parameters(), cfg.adam(cfg.lr_dcd))
    stream = PairBatchStream(pairs, cfg.pair_batch_size, seed=np.random.default_rng([cfg.seed, STREAM_DCD]).integers(2**31))
    hold = _as_batch(holdout)
    with frozen(g, h, verify=cfg.verify_freeze):
        zs = embed_dataset(g, source)
        zt = embed_dataset(g, target)
        for epoch in range(cfg.dcd_epochs):
            losses = []
            for batch in stream.epoch(epoch):
                _check_balanced(batch)
                za, zb = pair_embeddings(zs, zt, batch)
                with Tape() as tape:
                    loss = dcd_loss(dcd, za, zb, batch.group)
                losses.append(opt.minimize(loss, tape))
            metrics.log(epoch, loss_dcd=float(np.mean(losses)), **_held_out(dcd, hold, lambda b: pair_embeddings(zs, zt, b)))
    return dcd, metrics


# ---------- Stage 3 ----------
def fada_step(g: Module, h: PredictorHead, dcd: DomainClassDiscriminator, source, target,
              batch: PairBatch, source_rows: np.ndarray, target_rows: np.ndarray, gamma: float,
              opt_gh: Adam, opt_dcd: Adam, dcd_batches: Sequence[PairBatch] = (),
              verify_freeze: bool = True) -> Dict[str, float]:
    """One round of the game: update g, h with D frozen, then D with g, h frozen."""
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    conf = batch.select(TARGET_GROUPS)
    k = len(conf)
    us, inv_s = np.unique(np.concatenate([conf.first, source_rows]), return_inverse=True)
    ut, inv_t = np.unique(np.concatenate([conf.second, target_rows]), return_inverse=True)

    with frozen(dcd, verify=verify_freeze):
        with Tape() as tape:
            zs = g(source.inputs[us])
            zt = g(target.inputs[ut])
            l_conf = confusion_loss(dcd, take_rows(zs, inv_s[:k]), take_rows(zt, inv_t[:k]), conf.group)
            l_src = cross_entropy(h(take_rows(zs, inv_s[k:])), source.labels[source_rows])
            l_tgt = cross_entropy(h(take_rows(zt, inv_t[k:])), target.labels[target_rows])
            total = gamma * l_conf + l_src + l_tgt
        opt_gh.minimize(total, tape)

    d_losses = []
    with frozen(g, h, verify=verify_freeze):
        for b in (batch, *dcd_batches):
            _check_balanced(b)
            za, zb = embed_pairs(g, source, target, b)
            with Tape() as tape:
                loss = dcd_loss(dcd, za, zb, b.group)
            d_losses.append(opt_dcd.minimize(loss, tape))

    return {
        "loss_conf": l_conf.item(),
        "loss_cls_source": l_src.item(),
        "loss_cls_target": l_tgt.item(),
        "loss_total": total.item(),
        "loss_dcd": float(np.mean(d_losses)),
    }


def fada_loop(g: Module, h: PredictorHead, dcd: DomainClassDiscriminator, source, target,
              pairs: GroupedPairs, cfg: TrainConfig, holdout: Optional[GroupedPairs] = None,
              validation=None, sink=None) -> Tuple[Module, PredictorHead, DomainClassDiscriminator, StageMetrics]:
    """Alternate the confusion/classification update of g, h with DCD updates."""
    if pairs.sizes()[2] == 0:
        raise ValueError("G2 is empty; the adversarial stage needs same-class source/target pairs")
    if len(target) == 0:
        raise ValueError("few-shot target set is empty")
    metrics = StageMetrics("adversarial", sink=sink)
    opt_gh = Adam(_params(g, h), cfg.adam(cfg.lr_adv))
    opt_dcd = Adam(dcd.parameters(), cfg.adam(cfg.lr_dcd))
    stream = PairBatchStream(pairs, cfg.pair_batch_size,
                             seed=np.random.default_rng([cfg.seed, STREAM_ADV_PAIRS]).integers(2**31))
    batches = stream.forever()
    rng = np.random.default_rng([cfg.seed, STREAM_ADV_CLS])
    src_probe, val_probe = _probe(source, cfg.seed), _probe(validation, cfg.seed)
    hold = _as_batch(holdout)

    for epoch in range(cfg.adv_epochs):
        steps = []
        for _ in range(cfg.adv_batches_per_epoch):
            batch = next(batches)
            extra = [next(batches) for _ in range(cfg.dcd_steps_per_update - 1)]
            # target classification batch: resample the n-shot picks with replacement
            steps.append(fada_step(
                g, h, dcd, source, target, batch,
                source_rows=rng.integers(0, len(source), cfg.cls_batch_size),
                target_rows=rng.integers(0, len(target), cfg.cls_batch_size),
                gamma=cfg.gamma, opt_gh=opt_gh, opt_dcd=opt_dcd, dcd_batches=extra,
                verify_freeze=cfg.verify_freeze,
            ))
        means = {key: float(np.mean([s[key] for s in steps])) for key in steps[0]}
        held = _held_out(dcd, hold, lambda b: embed_pairs(g, source, target, b))
        metrics.log(epoch, **means, **held,
                    acc_source=_probe_accuracy(g, h, src_probe),
                    acc_target=_probe_accuracy(g, h, val_probe))
    return g, h, dcd, metrics


# ---------- Baselines ----------
def finetune_baseline(g: Module, h: PredictorHead, target_train, cfg: TrainConfig,
                      validation=None, sink=None) -> Tuple[Module, PredictorHead, StageMetrics]:
    """Continue cross-entropy training of the LB model on the n-shot target picks.

    Gets as many optimizer steps as the adversarial stage, at its learning rate.
    """
    if len(target_train) == 0:
        raise ValueError("few-shot target set is empty")
    metrics = StageMetrics("finetune", sink=sink)
    opt = Adam(_params(g, h), cfg.adam(cfg.lr_adv))
    rng = np.random.default_rng([cfg.seed, STREAM_FINETUNE])
    val_probe = _probe(validation, cfg.seed)
    for epoch in range(cfg.adv_epochs):
        losses = []
        for _ in range(cfg.adv_batches_per_epoch):
            rows = rng.integers(0, len(target_train), cfg.cls_batch_size)
            with Tape() as tape:
                loss = classification_loss(g, h, target_train.inputs[rows], target_train.labels[rows])
            losses.append(opt.minimize(loss, tape))
        metrics.log(epoch, loss_cls_target=float(np.mean(losses)),
                    acc_train=_probe_accuracy(g, h, target_train),
                    acc_target=_probe_accuracy(g, h, val_probe))
    return g, h, metrics


def uda_loss(d_bin: BinaryDomainDiscriminator, zs: Tensor, zt: Tensor) -> Tensor:
    """Binary domain cross-entropy: source embeddings labelled 0, target 1."""
    return add(cross_entropy(d_bin(zs), np.zeros(zs.shape[0], dtype=np.int64)),
               cross_entropy(d_bin(zt), np.ones(zt.shape[0], dtype=np.int64)))


def domain_accuracy(d_bin: BinaryDomainDiscriminator, zs: np.ndarray, zt: np.ndarray) -> float:
    hits = np.sum(d_bin(Tensor(zs)).data.argmax(axis=1) == 0) + np.sum(d_bin(Tensor(zt)).data.argmax(axis=1) == 1)
    return float(hits / (len(zs) + len(zt)))


def _split_rows(n: int, fraction: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_hold = min(int(np.floor(n * fraction)), n - 1)
    return np.sort(order[n_hold:]), np.sort(order[:n_hold])


def uda_binary_baseline(g: Module, h: PredictorHead, d_bin: BinaryDomainDiscriminator, source,
                        target_unlabeled, cfg: TrainConfig, holdout_fraction: float = 0.2,
                        validation=None, sink=None) -> Tuple[Module, PredictorHead, StageMetrics]:
    """Binary domain-adversarial baseline; target labels are never read.

    D learns source-vs-target; g is updated with inverted domain labels on
    target embeddings plus the source classification loss.
    """
    if len(source) < 2 or len(target_unlabeled) < 2:
        raise ValueError("UDA baseline needs at least two source and two target samples")
    metrics = StageMetrics("uda", sink=sink)
    opt_gh = Adam(_params(g, h), cfg.adam(cfg.lr_adv))
    opt_d = Adam(d_bin.parameters(), cfg.adam(cfg.lr_dcd))
    rng = np.random.default_rng([cfg.seed, STREAM_UDA])
    s_train, s_hold = _split_rows(len(source), holdout_fraction, rng)
    t_train, t_hold = _split_rows(len(target_unlabeled), holdout_fraction, rng)
    s_hold, t_hold = s_hold[:PROBE_SIZE], t_hold[:PROBE_SIZE]
    val_probe = _probe(validation, cfg.seed)
    bs = cfg.cls_batch_size
    xt_all = target_unlabeled.inputs

    for epoch in range(cfg.adv_epochs):
        d_losses, g_losses, c_losses = [], [], []
        for _ in range(cfg.adv_batches_per_epoch):
            s_rows = s_train[rng.integers(0, s_train.size, bs)]
            t_rows = t_train[rng.integers(0, t_train.size, bs)]
            with frozen(g, h, verify=cfg.verify_freeze):
                zs = Tensor(g(source.inputs[s_rows]).data)
                zt = Tensor(g(xt_all[t_rows]).data)
                with Tape() as tape:
                    loss_d = uda_loss(d_bin, zs, zt)
                d_losses.append(opt_d.minimize(loss_d, tape))
            with frozen(d_bin, verify=cfg.verify_freeze):
                with Tape() as tape:
                    l_cls = classification_loss(g, h, source.inputs[s_rows], source.labels[s_rows])
                    # inverted labels: target embeddings scored as source
                    l_adv = cross_entropy(d_bin(g(xt_all[t_rows])), np.zeros(bs, dtype=np.int64))
                    total = l_cls + l_adv
                opt_gh.minimize(total, tape)
            c_losses.append(l_cls.item())
            g_losses.append(l_adv.item())
        acc_domain = None
        if s_hold.size and t_hold.size:
            acc_domain = domain_accuracy(d_bin, embed_dataset(g, source, s_hold), embed_dataset(g, target_unlabeled, t_hold))
        metrics.log(epoch, loss_domain=float(np.mean(d_losses)), loss_confuse=float(np.mean(g_losses)),
                    loss_cls_source=float(np.mean(c_losses)), acc_domain=acc_domain,
                    acc_target=_probe_accuracy(g, h, val_probe))
    return g, h, metrics

