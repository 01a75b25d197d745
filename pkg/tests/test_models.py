import numpy as np
import pytest

from app.services.data_ingest import DataFormatError
from app.services.models import (
    DomainClassDiscriminator,
    EmbeddingNet,
    decode_checkpoint,
    dcd_forward,
    embed,
    init_binary_discriminator,
    init_models,
    load_checkpoint,
    predict,
    save_checkpoint,
    zero_parameters,
)
from app.services.tensor_autodiff import (
    AdamState,
    ShapeError,
    Tensor,
    cross_entropy,
    gradient_check,
    precision,
)


def _images(n, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, size=(n, 1, 16, 16))


def test_shapes_through_all_networks():
    bundle = init_models(0)
    z = embed(bundle.g, _images(5))
    assert z.shape == (5, 84)
    p = predict(bundle.h, z)
    assert p.shape == (5, 10)
    np.testing.assert_allclose(p.data.sum(axis=1), 1.0, rtol=1e-5)
    d = dcd_forward(bundle.dcd, z, z)
    assert d.shape == (5, 4)
    np.testing.assert_allclose(d.data.sum(axis=1), 1.0, rtol=1e-5)


def test_wrong_input_shapes_are_rejected():
    bundle = init_models(0)
    with pytest.raises(ShapeError):
        embed(bundle.g, np.zeros((2, 1, 28, 28)))
    with pytest.raises(ShapeError):
        predict(bundle.h, Tensor(np.zeros((2, 83))))
    with pytest.raises(ShapeError):
        bundle.dcd(Tensor(np.zeros((2, 84))), Tensor(np.zeros((2, 10))))


def test_parameter_counts():
    bundle = init_models(0)
    # conv1 156 + conv2 2416 + fc1 2040 + fc2 10164
    assert bundle.g.num_parameters() == 14776
    assert bundle.h.num_parameters() == 84 * 10 + 10
    assert bundle.dcd.num_parameters() == 168 * 64 + 64 + 64 * 4 + 4


def test_glorot_bounds_and_zero_biases():
    bundle = init_models(3)
    for name, p in bundle.named_parameters():
        if name.endswith("bias"):
            assert not p.value.data.any()
    w = bundle.g.fc1.weight.value.data
    assert np.abs(w).max() <= np.sqrt(6.0 / (16 + 120))


def test_init_is_seeded_and_names_are_qualified():
    a, b, c = init_models(1), init_models(1), init_models(2)
    assert a.g.checksum() == b.g.checksum()
    assert a.g.checksum() != c.g.checksum()
    names = [n for n, _ in a.named_parameters()]
    assert "g.conv1.weight" in names and "dcd.fc2.bias" in names
    assert all(p.name == n for n, p in a.named_parameters())


def test_activation_registry():
    assert init_models(0, activation="tanh").activation == "tanh"
    with pytest.raises(ValueError):
        init_models(0, activation="sigmoid")


def test_uniform_predictor_from_zero_parameters():
    bundle = init_models(0)
    zero_parameters(bundle.h)
    p = predict(bundle.h, embed(bundle.g, _images(3))).data
    np.testing.assert_allclose(p, 0.1, rtol=1e-6)


def test_freeze_and_unfreeze():
    bundle = init_models(0)
    bundle.g.freeze()
    assert not any(p.trainable for p in bundle.g.parameters())
    bundle.g.unfreeze()
    assert all(p.trainable for p in bundle.g.parameters())


def test_state_dict_round_trip():
    a, b = init_models(1), init_models(2)
    b.g.load_state_dict(a.g.state_dict())
    assert a.g.checksum() == b.g.checksum()


def test_checkpoint_round_trip_with_adam_state(tmp_path):
    bundle = init_models(4)
    bundle.stage = "dcd"
    name, p = bundle.named_parameters()[0]
    bundle.optimizer_states = {name: AdamState(m=np.ones(p.shape, np.float32), v=np.full(p.shape, 2.0, np.float32), t=7)}
    path = str(tmp_path / "ckpt" / "model.ckpt")
    save_checkpoint(bundle, path, extra={"note": "x"})

    other = init_models(5)
    manifest = load_checkpoint(other, path)
    assert manifest["note"] == "x" and manifest["stage"] == "dcd"
    for (_, p1), (_, p2) in zip(bundle.named_parameters(), other.named_parameters()):
        np.testing.assert_array_equal(p1.value.data, p2.value.data)
    assert other.optimizer_states[name].t == 7
    np.testing.assert_array_equal(other.optimizer_states[name].v, 2.0)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(DataFormatError):
        decode_checkpoint(b"XXXX\x02")
    bundle = init_models(0)
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(bundle, path)
    data = open(path, "rb").read()
    with pytest.raises(DataFormatError):
        decode_checkpoint(data[:-10])
    vector = init_models(0, input_dim=5, hidden=8, embed_dim=6, num_classes=3)
    with pytest.raises(DataFormatError):
        load_checkpoint(vector, path)


def test_vector_embedding_mode():
    bundle = init_models(0, input_dim=5, hidden=8, embed_dim=6, num_classes=3)
    z = embed(bundle.g, np.zeros((4, 5)))
    assert z.shape == (4, 6)
    assert predict(bundle.h, z).shape == (4, 3)
    assert bundle.dcd(z, z).shape == (4, 4)
    assert bundle.arch == "mlp-5-8-6"


def test_binary_discriminator():
    d = init_binary_discriminator(0, embed_dim=84)
    assert d(Tensor(np.zeros((3, 84)))).shape == (3, 2)
    assert d.parameters()[0].name == "dbin.fc1.weight"


def test_embedding_gradients_tanh_network():
    with precision(np.float64):
        bundle = init_models(0, activation="tanh")
        x = _images(3, seed=1)
        labels = np.array([1, 4, 7])
        loss = lambda: cross_entropy(bundle.h(bundle.g(x)), labels)  # noqa: E731
        params = bundle.g.parameters() + bundle.h.parameters()
        assert gradient_check(loss, params, eps=1e-6, max_entries=6) < 1e-5


def test_discriminator_gradients():
    with precision(np.float64):
        rng = np.random.default_rng(0)
        dcd = DomainClassDiscriminator(rng, embed_dim=6, activation="tanh")
        dcd.bind_names("dcd.")
        za, zb = Tensor(rng.normal(size=(4, 6))), Tensor(rng.normal(size=(4, 6)))
        loss = lambda: cross_entropy(dcd(za, zb), [0, 1, 2, 3])  # noqa: E731
        assert gradient_check(loss, dcd.parameters()) < 1e-5


def test_flatten_width_matches_architecture():
    assert EmbeddingNet.flatten_width(16) == 16
