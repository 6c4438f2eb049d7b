"""Synthetic object/label sequences for in-context classification.

A sequence is an ``e x s`` matrix whose columns alternate object and label
tokens. Object class ``i`` is paired with label class ``i % L`` in the
training table. The final label column is zeroed and its class is the
prediction target.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError


class TaskKind(str, enum.Enum):
    TEST = "test"
    IW = "iw"
    IC = "ic"
    IC2 = "ic2"

    @classmethod
    def parse(cls, value: "str | TaskKind") -> "TaskKind":
        if isinstance(value, TaskKind):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise ConfigError(f"unknown task kind {value!r}; valid: {valid}") from None


@dataclass(frozen=True)
class EmbeddingTable:
    e: int
    object_mu: np.ndarray  # (K, e)
    label_mu: np.ndarray  # (L, e)
    seed: int

    @property
    def num_objects(self) -> int:
        return self.object_mu.shape[0]

    @property
    def num_labels(self) -> int:
        return self.label_mu.shape[0]

    def label_of(self, obj) -> np.ndarray:
        return np.asarray(obj) % self.num_labels


@dataclass
class SequenceBatch:
    x: np.ndarray  # (batch, e, s)
    target: np.ndarray  # (batch,) label class of the zeroed final token
    pair_ids: np.ndarray  # (batch, num_pairs, 2) (object class, label class)
    label_mu: np.ndarray  # (L, e) shared, or (batch, L, e) per sequence, for scoring the completion
    kind: TaskKind
    epsilon: float
    object_mu: np.ndarray | None = field(default=None, repr=False)  # IC only: fresh object means of the context classes, (batch, num_pairs - 1, e)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.x.shape

    def __len__(self) -> int:
        return self.x.shape[0]


def _gaussian(rng: np.random.Generator, shape, e: int) -> np.ndarray:
    return rng.standard_normal(shape) / np.sqrt(e)


def make_table(K: int, L: int, e: int, seed: int) -> EmbeddingTable:
    """Draw object and label means with i.i.d. N(0, 1/e) components."""
    for name, v in (("K", K), ("L", L), ("e", e)):
        if int(v) < 1:
            raise ConfigError(f"make_table: {name} must be >= 1, got {v}")
    from .rng import stream

    rng = stream(seed, "table")
    obj = _gaussian(rng, (K, e), e)
    lab = _gaussian(rng, (L, e), e)
    return EmbeddingTable(e=e, object_mu=obj, label_mu=lab, seed=seed)


def instantiate_object(mu: np.ndarray, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """One noisy instance ``(mu + epsilon * eta) / sqrt(1 + epsilon**2)``.

    ``eta`` has N(0, 1/e) components, e being the last axis of ``mu``; any
    leading axes get independent noise.
    """
    if epsilon < 0:
        raise ConfigError(f"epsilon must be >= 0, got {epsilon}")
    mu = np.asarray(mu, dtype=np.float64)
    if epsilon == 0:
        return mu.copy()
    eta = _gaussian(rng, mu.shape, mu.shape[-1])
    return (mu + epsilon * eta) / np.sqrt(1.0 + epsilon * epsilon)


def _distinct_rows(rng: np.random.Generator, batch: int, pool: int, k: int) -> np.ndarray:
    # k distinct draws from range(pool) per row, via argsort of uniform keys
    if k > pool:
        raise ConfigError(f"need {k} distinct classes but the pool has {pool}")
    keys = rng.random((batch, pool))
    return np.argsort(keys, axis=1, kind="stable")[:, :k]


def sample_batch(table: EmbeddingTable, kind, num_pairs: int, batch: int,
                 epsilon: float, rng: np.random.Generator, dtype=np.float32) -> SequenceBatch:
    """Sample ``batch`` sequences of ``num_pairs`` object/label pairs.

    The last pair is the query. For Test, IC and IC2 the query's classes
    occur exactly once among the earlier pairs, at a uniform slot; for IW
    they are absent from the context. IC draws a fresh table per sequence;
    IC2 keeps the training objects but draws fresh labels and a fresh
    object-to-label assignment per sequence.
    """
    kind = TaskKind.parse(kind)
    if num_pairs < 2:
        raise ConfigError(f"num_pairs must be >= 2, got {num_pairs}")
    if batch < 1:
        raise ConfigError(f"batch must be >= 1, got {batch}")
    if epsilon < 0:
        raise ConfigError(f"epsilon must be >= 0, got {epsilon}")
    K, L, e = table.num_objects, table.num_labels, table.e
    n_ctx = num_pairs - 1
    s = 2 * num_pairs

    if kind is TaskKind.IW:
        classes = _distinct_rows(rng, batch, K, num_pairs)
        ctx_obj = classes[:, 1:]
        query_obj = classes[:, 0]
    else:
        if K < n_ctx:
            raise ConfigError(f"need {n_ctx} distinct classes but the pool has {K}")
        ctx_obj = _distinct_rows(rng, batch, K, n_ctx)
        slot = rng.integers(0, n_ctx, size=batch)
        query_obj = ctx_obj[np.arange(batch), slot]
    objs = np.concatenate([ctx_obj, query_obj[:, None]], axis=1)  # (batch, num_pairs)

    object_mu = None
    if kind is TaskKind.IC:
        # only the classes that occur need fresh object means
        object_mu = _gaussian(rng, (batch, n_ctx, e), e)
        label_mu = _gaussian(rng, (batch, L, e), e)
        labs = objs % L
    elif kind is TaskKind.IC2:
        label_mu = _gaussian(rng, (batch, L, e), e)
        assign = np.argsort(rng.random((batch, K)), axis=1, kind="stable") % L
        labs = np.take_along_axis(assign, objs, axis=1)
    else:
        label_mu = table.label_mu
        labs = objs % L

    bidx = np.arange(batch)[:, None]
    if object_mu is None:
        obj_mu = table.object_mu[objs]  # (batch, num_pairs, e)
    else:
        obj_mu = np.concatenate([object_mu, object_mu[np.arange(batch), slot][:, None]], axis=1)
    lab_mu = label_mu[labs] if label_mu.ndim == 2 else label_mu[bidx, labs]

    obj_inst = instantiate_object(obj_mu, epsilon, rng)
    x = np.empty((batch, e, s), dtype=np.float64)
    x[:, :, 0::2] = np.transpose(obj_inst, (0, 2, 1))
    x[:, :, 1::2] = np.transpose(lab_mu, (0, 2, 1))
    x[:, :, -1] = 0.0

    pair_ids = np.stack([objs, labs], axis=-1)
    return SequenceBatch(
        x=x.astype(dtype),
        target=labs[:, -1].astype(np.int64),
        pair_ids=pair_ids,
        label_mu=label_mu.astype(dtype),
        kind=kind,
        epsilon=float(epsilon),
        object_mu=object_mu,
    )


def dump_batch(batch: SequenceBatch, path) -> None:
    """Text dump: header ``e s batch kind epsilon``, then ``batch * e`` rows of ``s`` floats."""
    b, e, s = batch.x.shape
    with open(path, "w") as fh:
        fh.write(f"{e} {s} {b} {batch.kind.value} {batch.epsilon!r}\n")
        np.savetxt(fh, batch.x.reshape(b * e, s), fmt="%.9g")


def load_dump(path) -> tuple[np.ndarray, TaskKind, float]:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 5:
            raise ConfigError(f"{path}: bad header {header!r}")
        e, s, b = (int(v) for v in header[:3])
        rows = np.loadtxt(fh, ndmin=2)
    return rows.reshape(b, e, s), TaskKind.parse(header[3]), float(header[4])
