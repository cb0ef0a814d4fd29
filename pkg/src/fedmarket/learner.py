"""Model-owner compute: MLP definition, local training, evaluation,
non-IID partitioning and a bit-exact weight serialization.

Everything here is a pure function of its inputs. Shuffling and
initialization draw from numpy's PCG64 generator seeded explicitly, so
the same seed reproduces the same weights bit for bit on a given
platform.

Serialized weight format (little endian throughout)::

    magic   4 bytes  "OFLW"
    version u16      currently 1
    layers  u16      number of weight layers (len(dims) - 1)
    per layer: in u32, out u32
    per layer: W as out*in float32 row-major, then bias as out float32

A (784, 100, 10) network therefore occupies 24 header bytes plus
318,040 payload bytes: 318,064 total.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"OFLW"
FORMAT_VERSION = 1


# --------------------------------------------------------------------------- #
# Errors
# --------------------------------------------------------------------------- #

class SerializationError(Exception):
    pass


class BadMagic(SerializationError):
    pass


class TruncatedPayload(SerializationError):
    pass


class ShapeMismatch(SerializationError):
    pass


class TrainingDiverged(Exception):
    pass


# --------------------------------------------------------------------------- #
# Types
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class MlpArch:
    """Layer widths, input first. Default matches a 784-100-10 classifier."""

    dims: tuple[int, ...] = (784, 100, 10)

    def __post_init__(self) -> None:
        if len(self.dims) < 2:
            raise ValueError("arch needs at least input and output widths")
        if any(d < 1 for d in self.dims):
            raise ValueError("all layer widths must be >= 1")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @property
    def n_in(self) -> int:
        return self.dims[0]

    @property
    def n_out(self) -> int:
        return self.dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1


@dataclass
class ModelWeights:
    """Dense MLP parameters: per layer a (out, in) float32 weight matrix
    and an (out,) float32 bias vector."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, nonempty weight/bias lists")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i}: W must be (out,in) with matching bias")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input width does not chain")
        self.weights = [np.ascontiguousarray(w, dtype=np.float32) for w in self.weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float32) for b in self.biases]

    @property
    def arch(self) -> MlpArch:
        dims = [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]
        return MlpArch(tuple(dims))

    def copy(self) -> "ModelWeights":
        return ModelWeights([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def allclose(self, other: "ModelWeights", atol: float = 0.0) -> bool:
        return self.arch == other.arch and all(
            np.allclose(a, b, atol=atol)
            for a, b in zip(self.weights + self.biases, other.weights + other.biases)
        )


@dataclass
class Dataset:
    """Feature matrix in [0,1] with integer class labels."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self) -> None:
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("features must be a nonempty (n, d) matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must be (n,)")
        if self.features.min() < 0.0 or self.features.max() > 1.0:
            raise ValueError("features must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ValueError("labels must lie in [0, n_classes)")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)


@dataclass(frozen=True)
class Hyperparams:
    batch_size: int = 64
    learning_rate: float = 0.001
    local_epochs: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")


# --------------------------------------------------------------------------- #
# Initialization, forward, gradients
# --------------------------------------------------------------------------- #

def init_model(arch: MlpArch, seed: int) -> ModelWeights:
    """Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(arch.dims[:-1], arch.dims[1:]):
        limit = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-limit, limit, size=(n_out, n_in)).astype(np.float32))
        biases.append(np.zeros(n_out, dtype=np.float32))
    return ModelWeights(weights, biases)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=-1, keepdims=True)


def forward_logits(weights: list[np.ndarray], biases: list[np.ndarray], x: np.ndarray) -> np.ndarray:
    h = x
    for w, b in zip(weights[:-1], biases[:-1]):
        h = np.maximum(h @ w.T + b, 0.0)
    return h @ weights[-1].T + biases[-1]


def loss_and_grads(
    weights: list[np.ndarray],
    biases: list[np.ndarray],
    x: np.ndarray,
    y: np.ndarray,
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Mean softmax cross-entropy and its analytic gradients.

    Dtype-preserving: float64 inputs give float64 gradients, which is what
    the finite-difference check uses.
    """
    acts = [x]
    pre = []
    h = x
    for w, b in zip(weights[:-1], biases[:-1]):
        z = h @ w.T + b
        pre.append(z)
        h = np.maximum(z, 0.0)
        acts.append(h)
    logits = h @ weights[-1].T + biases[-1]

    probs = softmax(logits)
    n = x.shape[0]
    eps = np.finfo(probs.dtype).tiny
    loss = float(-np.log(probs[np.arange(n), y] + eps).mean())

    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n

    grad_w: list[np.ndarray] = [None] * len(weights)  # type: ignore[list-item]
    grad_b: list[np.ndarray] = [None] * len(biases)  # type: ignore[list-item]
    for layer in range(len(weights) - 1, -1, -1):
        grad_w[layer] = delta.T @ acts[layer]
        grad_b[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ weights[layer]) * (pre[layer - 1] > 0)
    return loss, grad_w, grad_b


# --------------------------------------------------------------------------- #
# Training and evaluation
# --------------------------------------------------------------------------- #

def train(init: ModelWeights, part: Dataset, hp: Hyperparams) -> ModelWeights:
    """Mini-batch gradient descent; deterministic in (init, part, hp)."""
    if part.features.shape[1] != init.arch.n_in:
        raise ValueError("dataset width does not match model input width")
    model = init.copy()
    rng = np.random.default_rng(hp.seed)
    x_all, y_all = part.features, part.labels
    for _epoch in range(hp.local_epochs):
        order = rng.permutation(part.n)
        for start in range(0, part.n, hp.batch_size):
            idx = order[start : start + hp.batch_size]
            loss, grad_w, grad_b = loss_and_grads(model.weights, model.biases, x_all[idx], y_all[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss}")
            lr = np.float32(hp.learning_rate)
            for w, gw in zip(model.weights, grad_w):
                w -= lr * gw
            for b, gb in zip(model.biases, grad_b):
                b -= lr * gb
    return model


def evaluate(model: ModelWeights, test: Dataset) -> float:
    """Fraction of argmax-correct predictions; ties go to the lower class."""
    logits = forward_logits(model.weights, model.biases, test.features)
    pred = logits.argmax(axis=1)
    return float((pred == test.labels).mean())


# --------------------------------------------------------------------------- #
# Partitioning
# --------------------------------------------------------------------------- #

def partition(data: Dataset, n_owners: int, skew: float, seed: int) -> list[Dataset]:
    """Split a dataset across owners with per-class Dirichlet(skew) shares.

    Low skew concentrates classes on few owners (the label-skew regime);
    very high skew approaches a uniform split. Remainder rows left over
    by the floor split are dealt round-robin, and every owner is
    guaranteed at least one sample.
    """
    if n_owners < 1:
        raise ValueError("n_owners must be >= 1")
    if skew <= 0:
        raise ValueError("skew must be > 0")
    if n_owners > data.n:
        raise ValueError(f"cannot split {data.n} samples across {n_owners} owners")

    rng = np.random.default_rng(seed)
    shares: list[list[int]] = [[] for _ in range(n_owners)]
    leftovers: list[int] = []
    for cls in range(data.n_classes):
        idx = np.flatnonzero(data.labels == cls)
        rng.shuffle(idx)
        if idx.size == 0:
            continue
        props = rng.dirichlet(np.full(n_owners, skew))
        counts = np.floor(props * idx.size).astype(int)
        pos = 0
        for owner, count in enumerate(counts):
            shares[owner].extend(idx[pos : pos + count].tolist())
            pos += count
        leftovers.extend(idx[pos:].tolist())
    for i, row in enumerate(leftovers):
        shares[i % n_owners].append(row)

    # every owner trains on something: rebalance singletons from the largest share
    while any(not s for s in shares):
        empty = min(i for i, s in enumerate(shares) if not s)
        donor = max(range(n_owners), key=lambda i: (len(shares[i]), -i))
        shares[empty].append(shares[donor].pop())

    return [data.subset(np.array(sorted(s), dtype=np.int64)) for s in shares]


# --------------------------------------------------------------------------- #
# Serialization
# --------------------------------------------------------------------------- #

def serialized_size(arch: MlpArch) -> int:
    params = sum(i * o + o for i, o in zip(arch.dims[:-1], arch.dims[1:]))
    return 8 + 8 * arch.n_layers + 4 * params


def serialize(model: ModelWeights) -> bytes:
    parts = [MAGIC, struct.pack("<HH", FORMAT_VERSION, len(model.weights))]
    for w in model.weights:
        parts.append(struct.pack("<II", w.shape[1], w.shape[0]))
    for w, b in zip(model.weights, model.biases):
        parts.append(w.astype("<f4", copy=False).tobytes(order="C"))
        parts.append(b.astype("<f4", copy=False).tobytes())
    return b"".join(parts)


def deserialize(payload: bytes) -> ModelWeights:
    if len(payload) < 4:
        raise TruncatedPayload("payload shorter than magic")
    if payload[:4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {payload[:4]!r}")
    if len(payload) < 8:
        raise TruncatedPayload("payload shorter than fixed header")
    version, n_layers = struct.unpack_from("<HH", payload, 4)
    if version != FORMAT_VERSION:
        raise ShapeMismatch(f"unsupported format version {version}")
    if n_layers < 1:
        raise ShapeMismatch("layer count must be >= 1")
    dims_end = 8 + 8 * n_layers
    if len(payload) < dims_end:
        raise TruncatedPayload("payload ends inside the layer table")
    shapes = [struct.unpack_from("<II", payload, 8 + 8 * i) for i in range(n_layers)]
    for (n_in, n_out) in shapes:
        if n_in < 1 or n_out < 1:
            raise ShapeMismatch("layer widths must be >= 1")
    for (_, prev_out), (next_in, _) in zip(shapes[:-1], shapes[1:]):
        if prev_out != next_in:
            raise ShapeMismatch("layer widths do not chain")

    expected = dims_end + 4 * sum(i * o + o for i, o in shapes)
    if len(payload) < expected:
        raise TruncatedPayload(f"expected {expected} bytes, got {len(payload)}")
    if len(payload) > expected:
        raise ShapeMismatch(f"{len(payload) - expected} trailing bytes")

    offset = dims_end
    weights, biases = [], []
    for n_in, n_out in shapes:
        w = np.frombuffer(payload, dtype="<f4", count=n_in * n_out, offset=offset)
        offset += 4 * n_in * n_out
        b = np.frombuffer(payload, dtype="<f4", count=n_out, offset=offset)
        offset += 4 * n_out
        weights.append(w.reshape(n_out, n_in).copy())
        biases.append(b.copy())
    return ModelWeights(weights, biases)


# --------------------------------------------------------------------------- #
# Synthetic data
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the built-in Gaussian-cluster digit surrogate."""

    seed: int = 0
    n_train: int = 2000
    n_test: int = 1000
    dim: int = 784
    classes: int = 10
    noise: float = 0.12
    mean_low: float = 0.2
    mean_high: float = 0.8

    def to_dict(self) -> dict:
        return {"kind": "synthetic_digits", **{k: getattr(self, k) for k in (
            "seed", "n_train", "n_test", "dim", "classes", "noise", "mean_low", "mean_high")}}

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        fields = {k: v for k, v in data.items() if k != "kind"}
        return cls(**fields)


def synthetic_digits(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Seeded (train, test) pair of clipped Gaussian clusters.

    Ten well-separated class means in ``dim`` dimensions make an easy
    stand-in for a digit task: any model generalizes on the classes it
    saw and fails on the ones it did not, which is exactly the regime
    label-skew experiments need. Test labels are balanced.
    """
    rng = np.random.default_rng(spec.seed)
    means = rng.uniform(spec.mean_low, spec.mean_high, size=(spec.classes, spec.dim))

    y_train = rng.integers(0, spec.classes, size=spec.n_train)
    x_train = means[y_train] + rng.normal(0.0, spec.noise, size=(spec.n_train, spec.dim))

    y_test = np.arange(spec.n_test) % spec.classes
    rng.shuffle(y_test)
    x_test = means[y_test] + rng.normal(0.0, spec.noise, size=(spec.n_test, spec.dim))

    train_ds = Dataset(np.clip(x_train, 0.0, 1.0), y_train, spec.classes)
    test_ds = Dataset(np.clip(x_test, 0.0, 1.0), y_test, spec.classes)
    return train_ds, test_ds
