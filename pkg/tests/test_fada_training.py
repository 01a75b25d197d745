import math

import numpy as np
import pytest

from app.services.data_ingest import VectorDataset
from app.services.fada_training import (
    ConfigError,
    FreezeViolation,
    StageMetrics,
    TrainConfig,
    confusion_loss,
    dcd_holdout_metrics,
    dcd_loss,
    evaluate,
    fada_loop,
    fada_step,
    finetune_baseline,
    frozen,
    pretrain_source,
    train_dcd,
    uda_binary_baseline,
    uda_loss,
)
from app.services.models import (
    BinaryDomainDiscriminator,
    init_binary_discriminator,
    init_models,
    zero_parameters,
)
from app.services.pair_groups import PairBatchStream, build_grouped_pairs, split_holdout
from app.services.tensor_autodiff import (
    Adam,
    AdamConfig,
    Tensor,
    add,
    cross_entropy,
    gradient_check,
    precision,
    scale,
)

from .conftest import make_digits, make_vectors, tiny_config

LN4 = math.log(4)


def vector_models(seed=0, activation="relu"):
    return init_models(seed, activation=activation, input_dim=6, hidden=16, embed_dim=8, num_classes=4)


class Sink:
    def __init__(self):
        self.records = []

    def emit(self, stage, record):
        self.records.append((stage, record))


# ---------- config ----------
def test_config_defaults():
    cfg = TrainConfig()
    assert cfg.gamma == 0.5 and cfg.lr_adv == 1e-4
    assert cfg.pair_batch_size % 4 == 0
    assert cfg.group_ratios == (1.0, 1.0, 1.0, 1.0)


def test_config_collects_every_problem():
    with pytest.raises(ConfigError) as err:
        TrainConfig(lr_adv=0.0, pair_batch_size=6, gamma=-1.0)
    assert len(err.value.errors) == 3


def test_config_coercion_from_strings():
    cfg = TrainConfig.from_mapping({"FADA_GAMMA": "0.3", "verify_freeze": "no", "group_ratios": "1,1,2,1",
                                    "dcd_epochs": "4"})
    assert cfg.gamma == 0.3 and cfg.verify_freeze is False
    assert cfg.group_ratios == (1.0, 1.0, 2.0, 1.0) and cfg.dcd_epochs == 4
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"learning_rate": "0.1"})
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"dcd_epochs": "many"})


def test_fast_halves_epoch_budgets():
    cfg = TrainConfig().fast()
    assert (cfg.pretrain_epochs, cfg.dcd_epochs, cfg.adv_epochs) == (10, 5, 15)
    assert tiny_config().fast().adv_epochs == 1


# ---------- metrics ----------
def test_stage_metrics_forward_records_and_reject_bad_values():
    sink = Sink()
    m = StageMetrics("dcd", sink=sink)
    m.log(0, loss_dcd=1.2, acc_dcd4=None)
    assert sink.records == [("dcd", {"epoch": 0, "loss_dcd": 1.2})]
    with pytest.raises(FloatingPointError):
        m.log(1, loss_dcd=float("nan"))
    with pytest.raises(ValueError):
        m.log(1, acc_dcd4=1.5)
    assert m.series("loss_dcd") == [1.2]


# ---------- losses ----------
def test_dcd_loss_of_uniform_discriminator_is_log_four():
    bundle = vector_models()
    zero_parameters(bundle.dcd)
    z = Tensor(np.ones((4, 8)))
    assert dcd_loss(bundle.dcd, z, z, [1, 2, 3, 4]).item() == pytest.approx(LN4, rel=1e-6)
    with pytest.raises(ValueError):
        dcd_loss(bundle.dcd, z, z, [0, 1, 2, 3])


def test_dcd_loss_matches_hand_computation():
    bundle = vector_models(2)
    rng = np.random.default_rng(0)
    za, zb = Tensor(rng.normal(size=(4, 8))), Tensor(rng.normal(size=(4, 8)))
    groups = np.array([3, 1, 4, 2])
    p = bundle.dcd(za, zb).data
    expected = -np.mean(np.log(p[np.arange(4), groups - 1]))
    assert dcd_loss(bundle.dcd, za, zb, groups).item() == pytest.approx(expected, rel=1e-5)


def test_confusion_loss_values():
    bundle = vector_models()
    zero_parameters(bundle.dcd)
    z = Tensor(np.ones((4, 8)))
    assert confusion_loss(bundle.dcd, z, z, [2, 4, 2, 4]).item() == pytest.approx(2 * LN4, rel=1e-6)
    assert confusion_loss(bundle.dcd, z, z, [2, 2, 2, 2]).item() == pytest.approx(LN4, rel=1e-6)
    with pytest.raises(ValueError):
        confusion_loss(bundle.dcd, z, z, [1, 2, 3, 4])

    # a discriminator sure every pair is G1 leaves nothing to confuse on G2 pairs
    bundle.dcd.fc2.bias.assign(np.array([30.0, 0.0, 0.0, 0.0]))
    assert confusion_loss(bundle.dcd, z, z, [2, 2, 2, 2]).item() < 1e-6


def test_confusion_loss_gradient_reaches_embedding():
    with precision(np.float64):
        bundle = vector_models(activation="tanh")
        rng = np.random.default_rng(1)
        xa, xb = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        loss = lambda: confusion_loss(bundle.dcd, bundle.g(xa), bundle.g(xb), [2, 4, 2, 4])  # noqa: E731
        with frozen(bundle.dcd):
            assert gradient_check(loss, bundle.g.parameters(), eps=1e-6) < 1e-5


def test_combined_objective_gradient():
    with precision(np.float64):
        bundle = vector_models(activation="tanh")
        rng = np.random.default_rng(2)
        xs, xt = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        ys, yt = np.array([0, 1, 2, 3]), np.array([3, 2, 1, 0])

        def loss():
            zs, zt = bundle.g(xs), bundle.g(xt)
            conf = confusion_loss(bundle.dcd, zs, zt, [2, 4, 4, 2])
            return add(add(scale(conf, 0.5), cross_entropy(bundle.h(zs), ys)), cross_entropy(bundle.h(zt), yt))

        with frozen(bundle.dcd):
            params = bundle.g.parameters() + bundle.h.parameters()
            assert gradient_check(loss, params, eps=1e-6) < 1e-5


def test_uda_loss_value_and_gradient():
    d = init_binary_discriminator(0, embed_dim=5)
    zero_parameters(d)
    z = Tensor(np.ones((3, 5)))
    assert uda_loss(d, z, z).item() == pytest.approx(2 * math.log(2), rel=1e-6)
    with precision(np.float64):
        rng = np.random.default_rng(0)
        d = BinaryDomainDiscriminator(rng, embed_dim=5, activation="tanh")
        d.bind_names("dbin.")
        zs, zt = Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=(4, 5)))
        assert gradient_check(lambda: uda_loss(d, zs, zt), d.parameters()) < 1e-5


def test_dcd_holdout_metrics():
    bundle = vector_models()
    zero_parameters(bundle.dcd)
    bundle.dcd.fc2.bias.assign(np.array([1.0, 0.0, 1.0, 0.0]))
    z = Tensor(np.zeros((4, 8)))
    out = dcd_holdout_metrics(bundle.dcd, z, z, np.array([1, 2, 3, 4]))
    assert out["acc_dcd_1v2"] == 0.5 and out["acc_dcd_3v4"] == 0.5
    assert out["acc_dcd4"] == 0.25


# ---------- freezing ----------
def test_frozen_detects_changes_and_restores_flags():
    bundle = vector_models()
    with pytest.raises(FreezeViolation):
        with frozen(bundle.h):
            bundle.h.fc.weight.value.data += 1.0
    assert all(p.trainable for p in bundle.h.parameters())
    with frozen(bundle.g):
        assert not any(p.trainable for p in bundle.g.parameters())


# ---------- evaluation ----------
def test_evaluate_hand_computed_confusion():
    bundle = init_models(0, activation="identity", final_activation=False, input_dim=4, hidden=4,
                         embed_dim=4, num_classes=4)
    for lin in (bundle.g.fc1, bundle.g.fc2, bundle.h.fc):
        lin.weight.assign(np.eye(4))
        lin.bias.assign(np.zeros(4))
    labels = np.repeat(np.arange(4), 5)
    preds = np.array([0] * 5 + [1, 1, 1, 0, 0] + [3] * 5 + [3, 3, 3, 3, 2])
    ds = VectorDataset(np.eye(4)[preds], labels, "t", provenance="fixture", n_classes=4)
    result = evaluate(bundle.g, bundle.h, ds)
    assert result.accuracy == pytest.approx(0.6)
    assert result.per_class == pytest.approx({0: 1.0, 1: 0.6, 2: 0.0, 3: 0.8})
    assert result.confusion[1, 0] == 2 and result.confusion[2, 3] == 5 and result.confusion[3, 2] == 1
    assert result.confusion.sum() == result.count == 20


def test_uniform_predictor_scores_chance():
    bundle = init_models(0)
    zero_parameters(bundle.h)
    ds = make_digits(2, seed=0, domain="usps")
    assert evaluate(bundle.g, bundle.h, ds).accuracy == pytest.approx(0.1)


# ---------- stages ----------
def test_pretrain_learns_the_source(source_vectors):
    bundle = vector_models()
    cfg = tiny_config(pretrain_epochs=30, lr_pretrain=0.01)
    g, h, metrics = pretrain_source(bundle.g, bundle.h, source_vectors, cfg)
    losses = metrics.series("loss_cls")
    assert len(losses) == 30 and losses[-1] < losses[0]
    assert evaluate(g, h, source_vectors).accuracy > 0.9


def test_train_dcd_keeps_g_and_h_fixed(source_vectors, target_vectors):
    bundle = vector_models()
    before = (bundle.g.checksum(), bundle.h.checksum())
    pairs, holdout = split_holdout(build_grouped_pairs(source_vectors, target_vectors, seed=0), 0.2, seed=0)
    cfg = tiny_config(dcd_epochs=5, lr_dcd=0.01)
    _, metrics = train_dcd(bundle.dcd, bundle.g, bundle.h, source_vectors, target_vectors, pairs, cfg,
                           holdout=holdout)
    assert (bundle.g.checksum(), bundle.h.checksum()) == before
    assert metrics.last()["loss_dcd"] < LN4
    assert 0.0 <= metrics.last()["acc_dcd4"] <= 1.0
    assert all(p.trainable for p in bundle.g.parameters())


def test_fada_step_loss_decomposition(source_vectors, target_vectors):
    pairs = build_grouped_pairs(source_vectors, target_vectors, seed=0)
    batch = next(PairBatchStream(pairs, 16, seed=0).epoch(0))
    with precision(np.float64):
        bundle = vector_models()
        dcd_before, g_before = bundle.dcd.checksum(), bundle.g.checksum()
        opt_gh = Adam(bundle.g.parameters() + bundle.h.parameters(), AdamConfig(lr=1e-3))
        opt_dcd = Adam(bundle.dcd.parameters(), AdamConfig(lr=1e-3))
        out = fada_step(bundle.g, bundle.h, bundle.dcd, source_vectors, target_vectors, batch,
                        source_rows=np.arange(8), target_rows=np.arange(4), gamma=0.5,
                        opt_gh=opt_gh, opt_dcd=opt_dcd)
    expected = 0.5 * out["loss_conf"] + out["loss_cls_source"] + out["loss_cls_target"]
    assert out["loss_total"] == pytest.approx(expected, abs=1e-6)
    assert bundle.dcd.checksum() != dcd_before and bundle.g.checksum() != g_before
    with pytest.raises(ValueError):
        fada_step(bundle.g, bundle.h, bundle.dcd, source_vectors, target_vectors, batch,
                  np.arange(8), np.arange(4), gamma=-0.1, opt_gh=opt_gh, opt_dcd=opt_dcd)


def _run_loop(source, target, seed=0):
    bundle = vector_models(seed)
    pairs = build_grouped_pairs(source, target, seed=0)
    g, h, dcd, metrics = fada_loop(bundle.g, bundle.h, bundle.dcd, source, target, pairs,
                                   tiny_config(adv_epochs=2), validation=target)
    return g.checksum(), h.checksum(), dcd.checksum(), metrics


def test_fada_loop_is_deterministic(source_vectors, target_vectors):
    a, b = _run_loop(source_vectors, target_vectors), _run_loop(source_vectors, target_vectors)
    assert a[:3] == b[:3]
    assert a[3].epochs == b[3].epochs
    assert len(a[3].epochs) == 2
    assert {"loss_conf", "loss_dcd", "acc_target"} <= set(a[3].last())


def test_finetune_baseline_runs_adversarial_step_budget(target_vectors):
    bundle = vector_models()
    cfg = tiny_config(adv_epochs=3)
    _, _, metrics = finetune_baseline(bundle.g, bundle.h, target_vectors, cfg, validation=target_vectors)
    assert metrics.stage == "finetune" and len(metrics.epochs) == 3


def test_uda_baseline_never_reads_target_labels(source_vectors):
    target = make_vectors(6, seed=5, domain="tgt", shift=0.8)
    shuffled = VectorDataset(target.features, np.random.default_rng(0).permutation(target.labels), "tgt",
                             provenance="shuffled", n_classes=4)
    results = []
    for tgt in (target, shuffled):
        bundle = vector_models()
        d = init_binary_discriminator(0, embed_dim=8)
        g, h, metrics = uda_binary_baseline(bundle.g, bundle.h, d, source_vectors, tgt, tiny_config())
        results.append((g.checksum(), h.checksum()))
        assert 0.0 <= metrics.last()["acc_domain"] <= 1.0
    assert results[0] == results[1]
