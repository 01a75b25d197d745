import os

import numpy as np
import pytest

from app import create_app
from app.services.data_ingest import ImageDataset, VectorDataset, archive_path, write_archive
from app.services.fada_training import TrainConfig

# overrides that keep every stage to a handful of steps
TINY = {
    "pretrain_epochs": "1",
    "dcd_epochs": "1",
    "adv_epochs": "1",
    "adv_batches_per_epoch": "2",
    "cls_batch_size": "16",
    "pair_batch_size": "16",
}


def tiny_config(**kw) -> TrainConfig:
    return TrainConfig.from_mapping({**TINY, **{k: str(v) for k, v in kw.items()}})


def make_digits(n_per_class: int, seed: int, domain: str, shift: float = 0.0, classes=range(10)) -> ImageDataset:
    """Digit-like images: class c lights its own 4×4 tile; ``shift`` brightens the background."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for c in classes:
        r, col = divmod(c, 4)
        base = np.zeros((16, 16))
        base[r * 4:(r + 1) * 4, col * 4:(col + 1) * 4] = 0.7
        for _ in range(n_per_class):
            img = base + shift + rng.uniform(0.0, 0.2, size=(16, 16))
            images.append(np.clip(img, 0.0, 1.0)[None])
            labels.append(c)
    return ImageDataset(np.stack(images), np.asarray(labels), domain, provenance=f"synthetic:{domain}")


def make_vectors(n_per_class: int, seed: int, domain: str, dim: int = 6, classes: int = 4,
                 shift: float = 0.0) -> VectorDataset:
    """Well separated Gaussian clusters; ``shift`` translates the whole domain."""
    rng = np.random.default_rng(seed)
    centers = np.random.default_rng(1234).normal(0.0, 2.0, size=(classes, dim))
    feats = np.concatenate([centers[c] + shift + rng.normal(0.0, 0.3, size=(n_per_class, dim)) for c in range(classes)])
    labels = np.repeat(np.arange(classes), n_per_class)
    return VectorDataset(feats, labels, domain, provenance=f"synthetic:{domain}", n_classes=classes)


@pytest.fixture
def source_vectors():
    return make_vectors(12, seed=1, domain="src")


@pytest.fixture
def target_vectors():
    return make_vectors(3, seed=2, domain="tgt", shift=0.8)


@pytest.fixture
def data_dir(tmp_path):
    """Small S->U corpus: 12 SVHN-like training images per class, 10 USPS-like test images per class."""
    root = tmp_path / "data"
    write_archive(make_digits(12, seed=3, domain="svhn"), archive_path(str(root), "svhn", "train"))
    write_archive(make_digits(10, seed=4, domain="usps", shift=0.1), archive_path(str(root), "usps", "test"))
    return str(root)


@pytest.fixture
def app(tmp_path, data_dir, monkeypatch):
    for name in list(os.environ):
        if name.startswith("FADA_"):
            monkeypatch.delenv(name, raising=False)
    app = create_app({
        "TESTING": True,
        "DATA_DIR": data_dir,
        "OUT_DIR": str(tmp_path / "out"),
    })
    yield app


@pytest.fixture
def client(app):
    return app.test_client()


@pytest.fixture
def runner(app):
    return app.test_cli_runner()
