"""Two-layer single-head Transformer with optional residual Q/K/V streams.

Tokens are columns: inputs are (batch, e, s). Layer 2 optionally adds the
first layer's queries, keys or values to its own before attending. The final
token's hidden state goes through a three-layer ReLU MLP whose e-dim output
is scored against the sequence's label embeddings to give one logit per
label class.
"""

from __future__ import annotations

import enum
from collections import OrderedDict

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .rng import stream
from .taskgen import SequenceBatch

ATTN_DIM = 128
HIDDEN = 128


class StreamVariant(str, enum.Enum):
    CLASSIC = "classic"
    QUERIES = "queries"
    KEYS = "keys"
    VALUES = "values"

    @classmethod
    def parse(cls, value) -> "StreamVariant":
        if isinstance(value, StreamVariant):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            valid = ", ".join(v.value for v in cls)
            raise ConfigError(f"unknown stream variant {value!r}; valid: {valid}") from None


Params = "OrderedDict[str, T.Tensor]"


def init_params(e: int, s: int, seed: int, k: int = ATTN_DIM, hidden: int = HIDDEN,
                dtype=np.float32) -> "OrderedDict[str, T.Tensor]":
    """Weights ~ N(0, 1/fan_in), biases zero, deterministic per seed.

    The readout layer maps to e dimensions; logits come from dot products
    with label embeddings, so the label count does not enter the weights.
    """
    for name, v in (("e", e), ("s", s), ("k", k), ("hidden", hidden)):
        if v < 1:
            raise ConfigError(f"init_params: {name} must be positive, got {v}")
    rng = stream(seed, "toy-init")

    def w(rows, cols):
        return T.parameter(rng.standard_normal((rows, cols)) / np.sqrt(cols), dtype=dtype)

    p = OrderedDict()
    p["pos"] = w(e, s)
    for n in (1, 2):
        p[f"l{n}.wq"] = w(k, e)
        p[f"l{n}.wk"] = w(k, e)
        p[f"l{n}.wv"] = w(k, e)
        p[f"l{n}.wo"] = w(e, k)
    p["mlp.w1"] = w(hidden, e)
    p["mlp.b1"] = T.parameter(np.zeros((hidden, 1)), dtype=dtype)
    p["mlp.w2"] = w(hidden, hidden)
    p["mlp.b2"] = T.parameter(np.zeros((hidden, 1)), dtype=dtype)
    p["mlp.w3"] = w(e, hidden)
    p["mlp.b3"] = T.parameter(np.zeros((e, 1)), dtype=dtype)
    return p


def param_count(params) -> int:
    return int(sum(t.data.size for t in params.values()))


def _causal_mask(s: int) -> np.ndarray:
    # key i may serve query j only when i <= j
    return np.triu(np.ones((s, s), dtype=bool))


def _attention(h: T.Tensor, wq, wk, wv, wo, donated: dict, mask):
    q = wq @ h
    k = wk @ h
    v = wv @ h
    if "q" in donated:
        q = q + donated["q"]
    if "k" in donated:
        k = k + donated["k"]
    if "v" in donated:
        v = v + donated["v"]
    scores = T.scale(T.transpose(k) @ q, 1.0 / np.sqrt(wq.shape[0]))
    weights = T.softmax_columns(scores, mask)
    out = wo @ (v @ weights)
    return out, {"q": q, "k": k, "v": v}, weights


def hidden_states(params, x, variant=StreamVariant.CLASSIC, ablate_stream: bool = False,
                  drop_attention=()):
    """Residual-stream states (h0, h1, h2), each (batch, e, s).

    Layers (1 or 2) listed in ``drop_attention`` still compute Q/K/V (so a
    donated matrix exists) but add nothing to the residual stream.
    """
    variant = StreamVariant.parse(variant)
    xt = x if isinstance(x, T.Tensor) else T.constant(x, dtype=params["pos"].dtype)
    if xt.shape[-2:] != params["pos"].shape:
        raise ConfigError(f"input tokens {xt.shape[-2:]} do not match positional table {params['pos'].shape}")
    mask = _causal_mask(xt.shape[-1])
    h0 = xt + params["pos"]
    a1, qkv1, _ = _attention(h0, params["l1.wq"], params["l1.wk"], params["l1.wv"], params["l1.wo"], {}, mask)
    h1 = h0 if 1 in drop_attention else h0 + a1
    donated = {}
    if variant is not StreamVariant.CLASSIC:
        role = variant.value[0]  # q, k or v
        src = qkv1[role]
        donated[role] = T.constant(np.zeros_like(src.data)) if ablate_stream else src
    a2, _, _ = _attention(h1, params["l2.wq"], params["l2.wk"], params["l2.wv"], params["l2.wo"], donated, mask)
    h2 = h1 if 2 in drop_attention else h1 + a2
    return h0, h1, h2


def readout(params, h2: T.Tensor) -> T.Tensor:
    """MLP on the final column; returns (batch, e, 1)."""
    z = T.row_select(h2, -1, axis=-1)
    z = T.reshape(z, z.shape + (1,))
    z = T.relu(params["mlp.w1"] @ z + params["mlp.b1"])
    z = T.relu(params["mlp.w2"] @ z + params["mlp.b2"])
    return params["mlp.w3"] @ z + params["mlp.b3"]


def forward(params, x, label_mu, variant=StreamVariant.CLASSIC, ablate_stream: bool = False,
            drop_attention=()) -> T.Tensor:
    """Label logits, shape (batch, L).

    ``x`` is (batch, e, s); ``label_mu`` is (batch, L, e) or (L, e).
    ``ablate_stream`` replaces the donated first-layer matrix with zeros.
    """
    _, _, h2 = hidden_states(params, x, variant, ablate_stream, drop_attention)
    out = readout(params, h2)
    lm = np.asarray(label_mu, dtype=params["pos"].dtype)
    logits = T.constant(lm) @ out
    return T.reshape(logits, logits.shape[:-1])


def detached(params):
    return OrderedDict((k, T.Tensor(v.data, dtype=v.dtype)) for k, v in params.items())


def loss_and_grad(params, batch: SequenceBatch, variant=StreamVariant.CLASSIC) -> float:
    """Mean cross-entropy over the batch; gradients accumulate into ``params``."""
    logits = forward(params, batch.x, batch.label_mu, variant)
    loss = T.cross_entropy_logits(logits, batch.target)
    T.backward(loss)
    return loss.item()


def evaluate(params, batch: SequenceBatch, variant=StreamVariant.CLASSIC) -> tuple[float, float]:
    """(accuracy, mean loss) without touching gradients."""
    logits = forward(detached(params), batch.x, batch.label_mu, variant)
    loss = T.cross_entropy_logits(logits, batch.target).item()
    pred = np.argmax(logits.data, axis=-1)
    return float((pred == batch.target).mean()), loss
