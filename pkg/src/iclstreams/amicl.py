"""Parameter-free associative memory that completes the final label in one step.

Keys and queries are bigram mixtures of neighbouring tokens, values are the
tokens themselves, and retrieval is ``projection(separation(similarity(K, Q)), V)``
with the projection fixed to the product with ``V``.
"""

from __future__ import annotations

import csv
import enum
import itertools
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import taskgen
from .errors import ConfigError
from .rng import stream


class Similarity(str, enum.Enum):
    DOT = "dot"
    PEARSON = "pearson"
    MANHATTAN = "manhattan"
    EUCLIDEAN = "euclidean"

    @classmethod
    def parse(cls, value) -> "Similarity":
        return _parse(cls, value)


class Separation(str, enum.Enum):
    IDENTITY = "identity"
    SOFTMAX = "softmax"
    ARGMAX = "argmax"

    @classmethod
    def parse(cls, value) -> "Separation":
        return _parse(cls, value)


def _parse(enum_cls, value):
    if isinstance(value, enum_cls):
        return value
    try:
        return enum_cls(str(value).lower())
    except ValueError:
        valid = ", ".join(v.value for v in enum_cls)
        raise ConfigError(f"invalid {enum_cls.__name__.lower()} {value!r}; valid: {valid}") from None


@dataclass(frozen=True)
class AmiclConfig:
    a: float = 2.0
    similarity: Similarity = Similarity.DOT
    separation: Separation = Separation.ARGMAX

    def __post_init__(self):
        if self.a < 0:
            raise ConfigError(f"a must be >= 0, got {self.a}")
        object.__setattr__(self, "similarity", _parse(Similarity, self.similarity))
        object.__setattr__(self, "separation", _parse(Separation, self.separation))


def build_kqv(x: np.ndarray, a: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Keys, queries and values for ``x`` of shape (..., e, s).

    Column i of K and Q is ``(a * x[i-1] + x[i]) / (a + 1)`` with the index
    wrapping so ``x[-1]`` precedes ``x[0]``; the final key is zero and V is x.
    """
    x = np.asarray(x)
    if x.shape[-1] < 2:
        raise ConfigError(f"build_kqv: need at least 2 tokens, got {x.shape[-1]}")
    q = (a * np.roll(x, 1, axis=-1) + x) / (a + 1.0)
    k = q.copy()
    k[..., -1] = 0.0
    return k, q, x


def similarity(k: np.ndarray, q: np.ndarray, kind) -> np.ndarray:
    """Score matrix S[..., i, j] = sim(k_i, q_j); larger means more similar.

    Distances are negated so the nearest key scores highest. Pearson
    correlation involving a constant vector is 0.
    """
    kind = _parse(Similarity, kind)
    if kind is Similarity.DOT:
        return np.swapaxes(k, -1, -2) @ q
    if kind is Similarity.PEARSON:
        kc = k - k.mean(axis=-2, keepdims=True)
        qc = q - q.mean(axis=-2, keepdims=True)
        kn = np.sqrt((kc * kc).sum(axis=-2, keepdims=True))
        qn = np.sqrt((qc * qc).sum(axis=-2, keepdims=True))
        kn_safe = np.where(kn > 0, kn, 1.0)
        qn_safe = np.where(qn > 0, qn, 1.0)
        r = np.swapaxes(kc / kn_safe, -1, -2) @ (qc / qn_safe)
        return np.clip(r, -1.0, 1.0)
    diff = k[..., :, :, None] - q[..., :, None, :]  # (..., e, s_k, s_q)
    if kind is Similarity.MANHATTAN:
        return -np.abs(diff).sum(axis=-3)
    return -np.sqrt((diff * diff).sum(axis=-3))


def separate(scores: np.ndarray, kind) -> np.ndarray:
    """Apply the separation function down each query column."""
    kind = _parse(Separation, kind)
    if kind is Separation.IDENTITY:
        return scores
    if kind is Separation.SOFTMAX:
        z = np.exp(scores - scores.max(axis=-2, keepdims=True))
        return z / z.sum(axis=-2, keepdims=True)
    # np.argmax returns the first maximum, i.e. lowest key index on ties
    idx = np.argmax(scores, axis=-2)
    out = np.zeros_like(scores)
    np.put_along_axis(out, idx[..., None, :], 1.0, axis=-2)
    return out


def attend(k: np.ndarray, q: np.ndarray, v: np.ndarray, cfg: AmiclConfig) -> np.ndarray:
    """Output tokens: column j is ``V @ separation(similarity(K, q_j))``."""
    if k.shape[:-1] != q.shape[:-1] or k.shape[-1] != v.shape[-1]:
        raise ConfigError(f"attend: shape mismatch K{k.shape} Q{q.shape} V{v.shape}")
    weights = separate(similarity(k, q, cfg.similarity), cfg.separation)
    return v @ weights


def attention_matrix(x: np.ndarray, cfg: AmiclConfig) -> np.ndarray:
    k, q, _ = build_kqv(x, cfg.a)
    return separate(similarity(k, q, cfg.similarity), cfg.separation)


def complete(x: np.ndarray, cfg: AmiclConfig) -> np.ndarray:
    """Full AMICL forward pass on (..., e, s)."""
    k, q, v = build_kqv(x, cfg.a)
    return attend(k, q, v, cfg)


def complete_final(x: np.ndarray, cfg: AmiclConfig) -> np.ndarray:
    """Only the completed final token, shape (..., e).

    Equal to ``complete(x, cfg)[..., -1]`` but scores a single query column,
    which keeps long sequences cheap.
    """
    k, q, v = build_kqv(x, cfg.a)
    out = attend(k, q[..., -1:], v, cfg)
    return out[..., 0]


def predict_label(out_s: np.ndarray, label_mu: np.ndarray) -> np.ndarray:
    """Label class with the largest dot product; ties go to the lowest index.

    ``label_mu`` is (L, e) or batched (..., L, e) matching leading axes of ``out_s``.
    """
    label_mu = np.asarray(label_mu)
    if label_mu.shape[-2] == 0:
        raise ConfigError("predict_label: empty label table")
    scores = (label_mu @ np.asarray(out_s)[..., None])[..., 0]
    return np.argmax(scores, axis=-1)


def sample_trials(e: int, s: int, trials: int, epsilon: float, seed: int,
                  chunk: int = 256) -> Iterable[taskgen.SequenceBatch]:
    """Test sequences for AMICL evaluation, each with its own fresh table.

    The class pool per sequence is ``s // 2`` so every context pair is distinct.
    """
    if s % 2 or s < 4:
        raise ConfigError(f"sequence length must be even and >= 4, got {s}")
    num_pairs = s // 2
    rng = stream(seed, "amicl-trials", e, s)
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        obj = rng.standard_normal((n, num_pairs, e)) / np.sqrt(e)
        lab = rng.standard_normal((n, num_pairs, e)) / np.sqrt(e)
        yield _batch_from_means(obj, lab, epsilon, rng)
        done += n


def _batch_from_means(obj, lab, epsilon, rng) -> taskgen.SequenceBatch:
    n, K, e = obj.shape
    num_pairs = K
    ctx = np.argsort(rng.random((n, K)), axis=1, kind="stable")[:, : num_pairs - 1]
    slot = rng.integers(0, num_pairs - 1, size=n)
    objs = np.concatenate([ctx, ctx[np.arange(n), slot][:, None]], axis=1)
    bidx = np.arange(n)[:, None]
    inst = taskgen.instantiate_object(obj[bidx, objs], epsilon, rng)
    x = np.empty((n, e, 2 * num_pairs))
    x[:, :, 0::2] = np.transpose(inst, (0, 2, 1))
    x[:, :, 1::2] = np.transpose(lab[bidx, objs], (0, 2, 1))
    x[:, :, -1] = 0.0
    return taskgen.SequenceBatch(
        x=x, target=objs[:, -1].copy(), pair_ids=np.stack([objs, objs], axis=-1),
        label_mu=lab, kind=taskgen.TaskKind.TEST, epsilon=float(epsilon), object_mu=obj,
    )


def accuracy(cfg: AmiclConfig, e: int, s: int, trials: int, epsilon: float = 0.1, seed: int = 0) -> float:
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    correct = 0
    for b in sample_trials(e, s, trials, epsilon, seed):
        pred = predict_label(complete_final(b.x, cfg), b.label_mu)
        correct += int((pred == b.target).sum())
    return correct / trials


SWEEP_HEADER = ("similarity", "separation", "a", "e", "s", "trials", "accuracy")


def sweep(similarities: Sequence, separations: Sequence, a_values: Sequence[float],
          e_values: Sequence[int], s_values: Sequence[int], trials: int,
          epsilon: float = 0.1, seed: int = 0) -> list[dict]:
    """Accuracy for every grid cell.

    Cells sharing (e, s) are scored on the same sequences, so differences
    across a/similarity/separation are not sampling noise.
    """
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    rows = []
    for sim, sep, a, e, s in itertools.product(similarities, separations, a_values, e_values, s_values):
        cfg = AmiclConfig(a=float(a), similarity=sim, separation=sep)
        acc = accuracy(cfg, int(e), int(s), trials, epsilon, seed)
        rows.append(dict(similarity=cfg.similarity.value, separation=cfg.separation.value,
                         a=float(a), e=int(e), s=int(s), trials=int(trials), accuracy=acc))
    return rows


def write_sweep_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([r["similarity"], r["separation"], repr(r["a"]), r["e"], r["s"],
                        r["trials"], f"{r['accuracy']:.6f}"])
