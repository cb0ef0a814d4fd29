"""One-shot fusion of locally trained MLPs.

Three strategies:

- ``aggregate_naive``    coordinate-wise mean (baseline; assumes one arch)
- ``aggregate_matched``  align hidden units across models by solving an
                         optimal assignment before averaging (default)
- ``ensemble_predict``   average of member softmax outputs (reference)

Matched averaging treats each hidden unit as a point
``[incoming weights | bias | outgoing weights]`` and grows a global
hidden layer sequentially: the first model seeds it, every later model's
units are assigned to existing global units or, when the cheapest match
costs more than ``spawn_penalty``, to fresh ones. Matched units are
averaged with running counts, so a model fused with a hidden-permuted
copy of itself reproduces the original function exactly. Models are
processed in their given (on-chain CID index) order and ties are broken
by lowest index, which keeps the result deterministic.

Supports single-hidden-layer networks, the only depth the marketplace
workflow uses; two-layer (no hidden) models degenerate to the naive mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .learner import Dataset, MlpArch, ModelWeights, forward_logits, softmax


class ArchMismatch(Exception):
    pass


class InvalidConfig(Exception):
    pass


@dataclass(frozen=True)
class MatchConfig:
    """Knobs for matched averaging.

    ``spawn_penalty`` is the assignment cost of opening a fresh global
    unit; ``None`` selects the median pairwise match cost of the first
    model pair (resolve once per job with :func:`resolve_spawn_penalty`
    so every leave-one-out rerun uses the same value).
    """

    spawn_penalty: float | None = None
    max_global_width: int = 1024

    def __post_init__(self) -> None:
        if self.spawn_penalty is not None and self.spawn_penalty < 0:
            raise InvalidConfig("spawn_penalty must be >= 0")
        if self.max_global_width < 1:
            raise InvalidConfig("max_global_width must be >= 1")

    def to_dict(self) -> dict:
        return {"spawn_penalty": self.spawn_penalty, "max_global_width": self.max_global_width}

    @classmethod
    def from_dict(cls, data: dict) -> "MatchConfig":
        return cls(
            spawn_penalty=data.get("spawn_penalty"),
            max_global_width=int(data.get("max_global_width", 1024)),
        )


# --------------------------------------------------------------------------- #
# Naive mean
# --------------------------------------------------------------------------- #

def aggregate_naive(models: list[ModelWeights]) -> ModelWeights:
    """Coordinate-wise mean, accumulated left to right in float64."""
    if not models:
        raise ValueError("need at least one model")
    arch = models[0].arch
    for m in models[1:]:
        if m.arch != arch:
            raise ArchMismatch(f"expected arch {arch.dims}, got {m.arch.dims}")
    n = len(models)
    weights, biases = [], []
    for layer in range(arch.n_layers):
        w_sum = np.zeros_like(models[0].weights[layer], dtype=np.float64)
        b_sum = np.zeros_like(models[0].biases[layer], dtype=np.float64)
        for m in models:
            w_sum += m.weights[layer]
            b_sum += m.biases[layer]
        weights.append((w_sum / n).astype(np.float32))
        biases.append((b_sum / n).astype(np.float32))
    return ModelWeights(weights, biases)


# --------------------------------------------------------------------------- #
# Matched averaging
# --------------------------------------------------------------------------- #

def _unit_features(model: ModelWeights) -> np.ndarray:
    """(hidden, n_in + 1 + n_out) float64 matrix of per-unit descriptors."""
    w1, b1, w2 = model.weights[0], model.biases[0], model.weights[1]
    return np.hstack([w1, b1[:, None], w2.T]).astype(np.float64)


def _check_fusable(models: list[ModelWeights]) -> MlpArch:
    if not models:
        raise ValueError("need at least one model")
    first = models[0].arch
    for m in models[1:]:
        a = m.arch
        if a.n_in != first.n_in or a.n_out != first.n_out or a.n_layers != first.n_layers:
            raise ArchMismatch(
                f"models must share input/output widths and depth: {first.dims} vs {a.dims}"
            )
    return first


def resolve_spawn_penalty(models: list[ModelWeights], cfg: MatchConfig) -> float:
    """Effective spawn penalty for a job: explicit value, or the median
    pairwise unit-match cost of the first two models."""
    if cfg.spawn_penalty is not None:
        return float(cfg.spawn_penalty)
    if len(models) < 2 or models[0].arch.n_layers != 2:
        return 0.0
    costs = cdist(_unit_features(models[0]), _unit_features(models[1]), "sqeuclidean")
    return float(np.median(costs))


def aggregate_matched(models: list[ModelWeights], cfg: MatchConfig | None = None) -> ModelWeights:
    cfg = cfg or MatchConfig()
    arch = _check_fusable(models)
    if arch.n_layers > 2:
        raise ArchMismatch("matched averaging supports a single hidden layer")
    if arch.n_layers == 1:
        return aggregate_naive(models)
    if len(models) == 1:
        return models[0].copy()

    widest = max(m.arch.dims[1] for m in models)
    if cfg.max_global_width < widest:
        raise InvalidConfig(
            f"max_global_width {cfg.max_global_width} below widest hidden layer {widest}"
        )
    penalty = resolve_spawn_penalty(models, cfg)
    cap = cfg.max_global_width

    sums = _unit_features(models[0]).copy()
    counts = np.ones(sums.shape[0], dtype=np.int64)

    for model in models[1:]:
        local = _unit_features(model)
        means = sums / counts[:, None]
        n_local, n_global = local.shape[0], means.shape[0]
        allowed_new = max(0, min(n_local, cap - n_global))

        cost = cdist(local, means, "sqeuclidean")
        if allowed_new:
            spawn_block = np.full((n_local, allowed_new), penalty)
            cost = np.hstack([cost, spawn_block])

        if n_local <= cost.shape[1]:
            rows, cols = linear_sum_assignment(cost)
            leftovers: list[int] = []
        else:
            # width cap reached: give each target its best local, then force
            # the remaining locals onto their nearest global unit
            cols_t, rows_t = linear_sum_assignment(cost.T)
            rows, cols = rows_t, cols_t
            assigned = set(rows.tolist())
            leftovers = [i for i in range(n_local) if i not in assigned]

        order = np.argsort(rows)
        new_rows: list[np.ndarray] = []
        for r, c in zip(rows[order], cols[order]):
            if c < n_global:
                sums[c] += local[r]
                counts[c] += 1
            else:
                new_rows.append(local[r])
        if new_rows:
            sums = np.vstack([sums] + [row[None, :] for row in new_rows])
            counts = np.concatenate([counts, np.ones(len(new_rows), dtype=np.int64)])
        for r in leftovers:
            means = sums / counts[:, None]
            nearest = int(np.argmin(((means - local[r]) ** 2).sum(axis=1)))
            sums[nearest] += local[r]
            counts[nearest] += 1

    means = sums / counts[:, None]
    n_in, n_out = arch.n_in, arch.n_out
    w1 = means[:, :n_in].astype(np.float32)
    b1 = means[:, n_in].astype(np.float32)
    w2 = means[:, n_in + 1 :].T.astype(np.float32)

    b2_sum = np.zeros(n_out, dtype=np.float64)
    for m in models:
        b2_sum += m.biases[1]
    b2 = (b2_sum / len(models)).astype(np.float32)
    return ModelWeights([w1, w2], [b1, b2])


# --------------------------------------------------------------------------- #
# Ensemble
# --------------------------------------------------------------------------- #

def ensemble_predict(models: list[ModelWeights], x: np.ndarray) -> np.ndarray:
    """Arithmetic mean of member softmax outputs; accepts (d,) or (n, d)."""
    if not models:
        raise ValueError("need at least one model")
    n_in, n_out = models[0].arch.n_in, models[0].arch.n_out
    for m in models[1:]:
        if m.arch.n_in != n_in or m.arch.n_out != n_out:
            raise ArchMismatch("ensemble members must share input/output widths")
    x = np.asarray(x, dtype=np.float32)
    if x.shape[-1] != n_in:
        raise ArchMismatch(f"input width {x.shape[-1]} does not match model width {n_in}")
    batch = x if x.ndim == 2 else x[None, :]
    acc = np.zeros((batch.shape[0], n_out), dtype=np.float64)
    for m in models:
        acc += softmax(forward_logits(m.weights, m.biases, batch))
    probs = acc / len(models)
    return probs if x.ndim == 2 else probs[0]


def ensemble_accuracy(models: list[ModelWeights], test: Dataset) -> float:
    probs = ensemble_predict(models, test.features)
    return float((probs.argmax(axis=1) == test.labels).mean())
