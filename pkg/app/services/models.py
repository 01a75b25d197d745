# app/services/models.py
"""Embedding g, predictor h and the domain-class discriminator, plus checkpoints."""
import hashlib
import json
import logging
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .data_ingest import ARCHIVE_MAGIC, IMAGE_SIZE, NUM_CLASSES, DataFormatError
from .tensor_autodiff import (
    ACTIVATIONS,
    AdamState,
    Parameter,
    ShapeError,
    Tensor,
    concat,
    conv2d,
    flatten,
    linear,
    maxpool2,
    softmax,
)

logger = logging.getLogger(__name__)

EMBED_DIM = 84
NUM_GROUPS = 4
DCD_HIDDEN = 64
CHECKPOINT_VERSION = 2
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_CODE_DTYPES = {0: "<f4", 1: "<f8"}


def glorot_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


class Module:
    """Named parameter container."""

    def __init__(self):
        self._params: "OrderedDict[str, Parameter]" = OrderedDict()
        self._children: "OrderedDict[str, Module]" = OrderedDict()

    def add_parameter(self, name: str, value: np.ndarray) -> Parameter:
        p = Parameter(value, name=name)
        self._params[name] = p
        return p

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Parameter]]:
        out = [(prefix + n, p) for n, p in self._params.items()]
        for cname, child in self._children.items():
            out.extend(child.named_parameters(f"{prefix}{cname}."))
        return out

    def bind_names(self, prefix: str) -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(int(np.prod(p.shape)) for p in self.parameters())

    def freeze(self) -> None:
        for p in self.parameters():
            p.trainable = False

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.trainable = True

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.value.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for n, p in self.named_parameters():
            if n not in state:
                raise KeyError(f"missing parameter {n!r} in state")
            p.assign(state[n])

    def checksum(self) -> str:
        h = hashlib.sha256()
        for n, p in self.named_parameters():
            h.update(n.encode())
            h.update(np.ascontiguousarray(p.value.data).tobytes())
        return h.hexdigest()


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.weight = self.add_parameter("weight", glorot_uniform(rng, (in_features, out_features), in_features, out_features))
        self.bias = self.add_parameter("bias", np.zeros(out_features))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight.value, self.bias.value)


class Conv2d(Module):
    def __init__(self, in_channels: int, filters: int, kernel: int, rng: np.random.Generator):
        super().__init__()
        fan_in, fan_out = in_channels * kernel * kernel, filters * kernel * kernel
        self.kernel = kernel
        self.weight = self.add_parameter("weight", glorot_uniform(rng, (filters, in_channels, kernel, kernel), fan_in, fan_out))
        self.bias = self.add_parameter("bias", np.zeros(filters))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight.value, self.bias.value)


class EmbeddingNet(Module):
    """LeNet-style g: conv(6,5×5) → pool → conv(16,5×5) → pool → fc 120 → fc 84."""

    arch = "lenet16"

    def __init__(self, rng: np.random.Generator, activation: str = "relu", final_activation: bool = True):
        super().__init__()
        self.act = _activation(activation)
        self.final_activation = final_activation
        self.conv1 = self.add_module("conv1", Conv2d(1, 6, 5, rng))
        self.conv2 = self.add_module("conv2", Conv2d(6, 16, 5, rng))
        flat = self.flatten_width(IMAGE_SIZE)
        if flat != 16:
            raise ShapeError(f"16×16 inputs should flatten to 16 features, got {flat}")
        self.fc1 = self.add_module("fc1", Linear(flat, 120, rng))
        self.fc2 = self.add_module("fc2", Linear(120, EMBED_DIM, rng))
        self.output_dim = EMBED_DIM

    @staticmethod
    def flatten_width(size: int) -> int:
        # 16 -conv5-> 12 -pool-> 6 -conv5-> 2 -pool-> 1
        s = (size - 4) // 2
        s = (s - 4) // 2
        return 16 * s * s

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1:] != (1, IMAGE_SIZE, IMAGE_SIZE):
            raise ShapeError(f"embedding expects B×1×{IMAGE_SIZE}×{IMAGE_SIZE} images, got {x.shape}")
        h = maxpool2(self.act(self.conv1(x)))
        h = maxpool2(self.act(self.conv2(h)))
        h = self.act(self.fc1(flatten(h)))
        h = self.fc2(h)
        return self.act(h) if self.final_activation else h


class VectorEmbeddingNet(Module):
    """Two fully connected layers d → h1 → h2 for precomputed feature vectors."""

    def __init__(self, in_features: int, hidden: int, output_dim: int, rng: np.random.Generator,
                 activation: str = "relu", final_activation: bool = True):
        super().__init__()
        self.act = _activation(activation)
        self.final_activation = final_activation
        self.in_features = in_features
        self.fc1 = self.add_module("fc1", Linear(in_features, hidden, rng))
        self.fc2 = self.add_module("fc2", Linear(hidden, output_dim, rng))
        self.output_dim = output_dim
        self.arch = f"mlp-{in_features}-{hidden}-{output_dim}"

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"vector embedding expects B×{self.in_features}, got {x.shape}")
        h = self.fc2(self.act(self.fc1(x)))
        return self.act(h) if self.final_activation else h


class PredictorHead(Module):
    def __init__(self, rng: np.random.Generator, embed_dim: int = EMBED_DIM, num_classes: int = NUM_CLASSES):
        super().__init__()
        self.embed_dim = embed_dim
        self.fc = self.add_module("fc", Linear(embed_dim, num_classes, rng))

    def logits(self, z: Tensor) -> Tensor:
        if z.ndim != 2 or z.shape[1] != self.embed_dim:
            raise ShapeError(f"predictor expects B×{self.embed_dim} embeddings, got {z.shape}")
        return self.fc(z)

    def __call__(self, z: Tensor) -> Tensor:
        return softmax(self.logits(z))


class DomainClassDiscriminator(Module):
    """D over φ = concat(za, zb): fc 2·e → 64 → 4, softmax."""

    def __init__(self, rng: np.random.Generator, embed_dim: int = EMBED_DIM, hidden: int = DCD_HIDDEN,
                 outputs: int = NUM_GROUPS, activation: str = "relu"):
        super().__init__()
        self.embed_dim = embed_dim
        self.act = _activation(activation)
        self.fc1 = self.add_module("fc1", Linear(2 * embed_dim, hidden, rng))
        self.fc2 = self.add_module("fc2", Linear(hidden, outputs, rng))

    def __call__(self, za: Tensor, zb: Tensor) -> Tensor:
        for z in (za, zb):
            if z.ndim != 2 or z.shape[1] != self.embed_dim:
                raise ShapeError(f"DCD expects B×{self.embed_dim} embeddings, got {z.shape}")
        return softmax(self.fc2(self.act(self.fc1(concat(za, zb)))))


class BinaryDomainDiscriminator(Module):
    """Source-vs-target discriminator on a single embedding (e → 64 → 2)."""

    def __init__(self, rng: np.random.Generator, embed_dim: int = EMBED_DIM, hidden: int = DCD_HIDDEN,
                 activation: str = "relu"):
        super().__init__()
        self.embed_dim = embed_dim
        self.act = _activation(activation)
        self.fc1 = self.add_module("fc1", Linear(embed_dim, hidden, rng))
        self.fc2 = self.add_module("fc2", Linear(hidden, 2, rng))

    def __call__(self, z: Tensor) -> Tensor:
        if z.ndim != 2 or z.shape[1] != self.embed_dim:
            raise ShapeError(f"domain discriminator expects B×{self.embed_dim}, got {z.shape}")
        return softmax(self.fc2(self.act(self.fc1(z))))


# ---------- Functional surface ----------
def embed(g, images) -> Tensor:
    return g(images)


def predict(h: PredictorHead, z: Tensor) -> Tensor:
    return h(z)


def dcd_forward(dcd: DomainClassDiscriminator, za: Tensor, zb: Tensor) -> Tensor:
    return dcd(za, zb)


def zero_parameters(module: Module) -> None:
    for p in module.parameters():
        p.assign(np.zeros(p.shape))


@dataclass
class ModelBundle:
    g: Module
    h: PredictorHead
    dcd: DomainClassDiscriminator
    seed: int
    arch: str
    activation: str = "relu"
    stage: str = "init"
    optimizer_states: Dict[str, AdamState] = field(default_factory=dict)

    def modules(self) -> Dict[str, Module]:
        return {"g": self.g, "h": self.h, "dcd": self.dcd}

    def named_parameters(self) -> List[Tuple[str, Parameter]]:
        out = []
        for prefix, m in self.modules().items():
            out.extend(m.named_parameters(prefix + "."))
        return out

    def manifest(self) -> Dict:
        return {"arch": self.arch, "seed": self.seed, "stage": self.stage, "activation": self.activation}


def init_models(seed: int, activation: str = "relu", final_activation: bool = True,
                input_dim: Optional[int] = None, hidden: int = 256, embed_dim: int = EMBED_DIM,
                num_classes: int = NUM_CLASSES) -> ModelBundle:
    """Glorot-uniform weights, zero biases; image mode unless ``input_dim`` is given."""
    rng = np.random.default_rng([int(seed), 1])
    if input_dim is None:
        g = EmbeddingNet(rng, activation=activation, final_activation=final_activation)
    else:
        g = VectorEmbeddingNet(input_dim, hidden, embed_dim, rng, activation=activation,
                               final_activation=final_activation)
    h = PredictorHead(rng, g.output_dim, num_classes)
    dcd = DomainClassDiscriminator(rng, g.output_dim, activation=activation)
    bundle = ModelBundle(g, h, dcd, seed=int(seed), arch=g.arch, activation=activation)
    for prefix, module in bundle.modules().items():
        module.bind_names(prefix + ".")
    logger.debug(f"Initialised {g.arch} models (seed={seed}): g={g.num_parameters()} "
                 f"h={h.num_parameters()} dcd={dcd.num_parameters()} parameters")
    return bundle


def init_binary_discriminator(seed: int, embed_dim: int = EMBED_DIM, activation: str = "relu") -> BinaryDomainDiscriminator:
    d = BinaryDomainDiscriminator(np.random.default_rng([int(seed), 2]), embed_dim, activation=activation)
    d.bind_names("dbin.")
    return d


# ---------- Checkpoints ----------
def encode_checkpoint(tensors: Dict[str, np.ndarray], manifest: Dict) -> bytes:
    meta = json.dumps(manifest, sort_keys=True).encode("utf-8")
    parts = [ARCHIVE_MAGIC, bytes([CHECKPOINT_VERSION]), struct.pack("<I", len(meta)), meta,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype(_CODE_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> Tuple[Dict[str, np.ndarray], Dict]:
    if data[:4] != ARCHIVE_MAGIC:
        raise DataFormatError("not a FADA checkpoint (bad magic)", offset=0)
    if len(data) < 9 or data[4] != CHECKPOINT_VERSION:
        raise DataFormatError("unsupported checkpoint version", offset=4)
    try:
        (meta_len,) = struct.unpack_from("<I", data, 5)
        pos = 9
        manifest = json.loads(data[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            code, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            dtype = np.dtype(_CODE_DTYPES[code])
            n = int(np.prod(shape, dtype=np.int64))
            if pos + n * dtype.itemsize > len(data):
                raise DataFormatError(f"tensor {name!r} truncated", offset=pos)
            tensors[name] = np.frombuffer(data, dtype=dtype, count=n, offset=pos).reshape(shape).copy()
            pos += n * dtype.itemsize
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"corrupt checkpoint: {e}") from e
    return tensors, manifest


def save_checkpoint(bundle: ModelBundle, path: str, extra: Optional[Dict] = None) -> None:
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict(
        (name, p.value.data) for name, p in bundle.named_parameters()
    )
    steps = {}
    for name, st in bundle.optimizer_states.items():
        tensors[f"adam.{name}.m"] = st.m
        tensors[f"adam.{name}.v"] = st.v
        steps[name] = st.t
    manifest = dict(bundle.manifest(), adam_steps=steps, **(extra or {}))
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.{os.getpid()}.tmp"
    with open(tmp, "wb") as f:
        f.write(encode_checkpoint(tensors, manifest))
    os.replace(tmp, path)
    logger.info(f"Saved {bundle.arch} checkpoint (stage={bundle.stage}) to {path}")


def load_checkpoint(bundle: ModelBundle, path: str) -> Dict:
    """Load parameters (and Adam state, if stored) into ``bundle``; returns the manifest."""
    with open(path, "rb") as f:
        tensors, manifest = decode_checkpoint(f.read())
    if manifest.get("arch") != bundle.arch:
        raise DataFormatError(f"checkpoint architecture {manifest.get('arch')!r} does not match {bundle.arch!r}")
    for name, p in bundle.named_parameters():
        if name not in tensors:
            raise DataFormatError(f"checkpoint lacks parameter {name!r}")
        p.assign(tensors[name])
    bundle.optimizer_states = {
        name: AdamState(m=tensors[f"adam.{name}.m"], v=tensors[f"adam.{name}.v"], t=int(t))
        for name, t in manifest.get("adam_steps", {}).items()
    }
    bundle.stage = manifest.get("stage", bundle.stage)
    return manifest
