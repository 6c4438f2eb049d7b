"""GPT-style multi-head decoder with an optional per-head residual value stream.

With ``variant=values`` head h of every layer after the first adds head h's
value matrix from the previous layer to its own values before attending.
Hidden states are (batch, d_model, T): tokens are columns, as in the toy model.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import corpus
from . import tensor as T
from .errors import ConfigError
from .rng import stream
from .toy import StreamVariant

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LmConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    context: int = 128
    vocab: int = corpus.VOCAB
    variant: StreamVariant = StreamVariant.CLASSIC
    seed: int = 0
    layer_norm: bool = True
    mlp_ratio: int = 4
    tie_weights: bool = True

    def __post_init__(self):
        v = StreamVariant.parse(self.variant)
        if v not in (StreamVariant.CLASSIC, StreamVariant.VALUES):
            raise ConfigError(f"language model supports classic or values streams, got {v.value}")
        object.__setattr__(self, "variant", v)
        for name in ("n_layers", "n_heads", "d_model", "context", "vocab", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"LmConfig.{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def architecture(self) -> dict:
        """Fields that determine parameter shapes (the variant does not)."""
        d = asdict(self)
        for k in ("variant", "seed"):
            d.pop(k)
        return d

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d


EMB_STD = 0.02
LARGE_SCALE = dict(n_layers=8, n_heads=16, d_model=256, context=256)


def init_params(cfg: LmConfig, dtype=np.float32) -> "OrderedDict[str, T.Tensor]":
    rng = stream(cfg.seed, "lm-init")
    d, H, dh, hid = cfg.d_model, cfg.n_heads, cfg.head_dim, cfg.mlp_ratio * cfg.d_model
    # residual-branch outputs shrink with depth, GPT-2 style
    out_std = 1.0 / np.sqrt(2 * cfg.n_layers)

    def normal(shape, std):
        return T.parameter(rng.standard_normal(shape) * std, dtype=dtype)

    def const(shape, value):
        return T.parameter(np.full(shape, value), dtype=dtype)

    p = OrderedDict()
    # small embeddings keep the tied readout near uniform at initialisation
    p["tok_emb"] = normal((cfg.vocab, d), EMB_STD)
    p["pos_emb"] = normal((d, cfg.context), EMB_STD)
    for n in range(cfg.n_layers):
        if cfg.layer_norm:
            p[f"h{n}.ln1.g"] = const((d, 1), 1.0)
            p[f"h{n}.ln1.b"] = const((d, 1), 0.0)
        p[f"h{n}.wq"] = normal((H, dh, d), 1.0 / np.sqrt(d))
        p[f"h{n}.wk"] = normal((H, dh, d), 1.0 / np.sqrt(d))
        p[f"h{n}.wv"] = normal((H, dh, d), 1.0 / np.sqrt(d))
        p[f"h{n}.wo"] = normal((d, d), out_std / np.sqrt(d))
        if cfg.layer_norm:
            p[f"h{n}.ln2.g"] = const((d, 1), 1.0)
            p[f"h{n}.ln2.b"] = const((d, 1), 0.0)
        p[f"h{n}.w1"] = normal((hid, d), 1.0 / np.sqrt(d))
        p[f"h{n}.b1"] = const((hid, 1), 0.0)
        p[f"h{n}.w2"] = normal((d, hid), out_std / np.sqrt(hid))
        p[f"h{n}.b2"] = const((d, 1), 0.0)
    if cfg.layer_norm:
        p["ln_f.g"] = const((d, 1), 1.0)
        p["ln_f.b"] = const((d, 1), 0.0)
    if not cfg.tie_weights:
        p["unembed"] = normal((cfg.vocab, d), EMB_STD)
    return p


def param_count(params) -> int:
    return int(sum(t.data.size for t in params.values()))


@dataclass
class Trace:
    """Per-layer intermediates recorded during a forward pass."""
    values: list = field(default_factory=list)  # (B, H, dh, T) value matrices incl. any donation
    donated: list = field(default_factory=list)  # what each layer received from the layer below, or None


def _norm(params, x, name, cfg):
    if not cfg.layer_norm:
        return x
    return T.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"], axis=-2)


def lm_forward(params, cfg: LmConfig, tokens, ablate_stream: bool = False,
               drop_attention=(), trace: Trace | None = None) -> T.Tensor:
    """Logits of shape (batch, T, vocab) for int tokens of shape (batch, T) or (T,).

    ``ablate_stream`` zeroes every donated value matrix; layers (0-based)
    listed in ``drop_attention`` compute Q/K/V but add nothing to the
    residual stream.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None, :]
    B, n_tok = tokens.shape
    if n_tok > cfg.context:
        raise ConfigError(f"sequence of {n_tok} tokens exceeds context {cfg.context}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise IndexError(f"token id out of range [0, {cfg.vocab})")
    d, dh = cfg.d_model, cfg.head_dim

    x = T.transpose(T.row_select(params["tok_emb"], tokens, axis=0))  # (B, d, T)
    x = x + T.row_select(params["pos_emb"], np.arange(n_tok), axis=1)
    mask = np.triu(np.ones((n_tok, n_tok), dtype=bool))
    scale = 1.0 / np.sqrt(dh)
    prev_v = None
    for n in range(cfg.n_layers):
        h = T.reshape(_norm(params, x, f"h{n}.ln1", cfg), (B, 1, d, n_tok))
        q = params[f"h{n}.wq"] @ h  # (B, H, dh, T)
        k = params[f"h{n}.wk"] @ h
        v = params[f"h{n}.wv"] @ h
        donated = None
        if cfg.variant is StreamVariant.VALUES and prev_v is not None:
            donated = T.constant(np.zeros_like(prev_v.data)) if ablate_stream else prev_v
            v = v + donated
        if trace is not None:
            trace.values.append(v)
            trace.donated.append(donated)
        prev_v = v
        if n not in drop_attention:
            weights = T.softmax_columns(T.scale(T.transpose(k) @ q, scale), mask)
            o = T.reshape(v @ weights, (B, d, n_tok))
            x = x + params[f"h{n}.wo"] @ o
        h = _norm(params, x, f"h{n}.ln2", cfg)
        mlp = params[f"h{n}.w2"] @ T.relu(params[f"h{n}.w1"] @ h + params[f"h{n}.b1"]) + params[f"h{n}.b2"]
        x = x + mlp
    x = _norm(params, x, "ln_f", cfg)
    unembed = params["tok_emb"] if cfg.tie_weights else params["unembed"]
    logits = T.transpose(unembed @ x)  # (B, T, vocab)
    if single:
        logits = T.reshape(logits, logits.shape[1:])
    return logits


def lm_loss(params, cfg: LmConfig, inputs, targets) -> T.Tensor:
    logits = lm_forward(params, cfg, inputs)
    flat = T.reshape(logits, (-1, cfg.vocab))
    return T.cross_entropy_logits(flat, np.asarray(targets).reshape(-1))


def detached(params):
    return OrderedDict((k, T.Tensor(v.data, dtype=v.dtype)) for k, v in params.items())


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    z = np.exp(z - z.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _fit_context(ids: np.ndarray, cfg: LmConfig) -> tuple[np.ndarray, bool]:
    if ids.size > cfg.context:
        return ids[-cfg.context:], True
    return ids, False


def next_token_distribution(params, cfg: LmConfig, prompt) -> tuple[np.ndarray, bool]:
    """Probabilities over the vocabulary after ``prompt`` (text or ids).

    Returns ``(probs, truncated)``; prompts longer than the context are
    truncated from the left and a warning is logged.
    """
    ids = corpus.encode(prompt) if isinstance(prompt, (str, bytes)) else np.asarray(prompt, dtype=np.int64)
    if ids.size == 0:
        raise ConfigError("prompt must contain at least one token")
    ids, truncated = _fit_context(ids, cfg)
    if truncated:
        log.warning("prompt truncated from the left to %d tokens", cfg.context)
    logits = lm_forward(detached(params), cfg, ids).data[-1]
    return _softmax(logits), truncated


def generate(params, cfg: LmConfig, prompt, max_new: int, temperature: float,
             rng: np.random.Generator | None = None) -> str:
    """Ancestral sampling; ``temperature == 0`` means greedy argmax."""
    if temperature < 0:
        raise ConfigError(f"temperature must be >= 0, got {temperature}")
    ids = list(corpus.encode(prompt))
    if temperature > 0 and rng is None:
        raise ConfigError("sampling with temperature > 0 needs an rng")
    frozen = detached(params)
    for _ in range(max_new):
        window, _ = _fit_context(np.asarray(ids, dtype=np.int64), cfg)
        logits = lm_forward(frozen, cfg, window).data[-1].astype(np.float64)
        if temperature == 0:
            nxt = int(np.argmax(logits))
        else:
            nxt = int(rng.choice(cfg.vocab, p=_softmax(logits / temperature)))
        ids.append(nxt)
    return corpus.decode_text(ids)


def sequence_probability(params, cfg: LmConfig, prompt: str, continuation: str) -> float:
    """P(continuation | prompt) as a product of teacher-forced next-token probabilities."""
    p_ids = corpus.encode(prompt)
    c_ids = corpus.encode(continuation)
    if c_ids.size == 0:
        raise ConfigError(f"continuation {continuation!r} has no tokens")
    ids, _ = _fit_context(np.concatenate([p_ids, c_ids]), cfg)
    n_c = c_ids.size
    if ids.size <= n_c:
        raise ConfigError(f"continuation {continuation!r} does not fit the context")
    logits = lm_forward(detached(params), cfg, ids[:-1]).data
    logp = np.log(_softmax(logits[-n_c:]))
    return float(np.exp(logp[np.arange(n_c), ids[-n_c:]].sum()))


@dataclass(frozen=True)
class IoiProbe:
    prompt: str
    correct: str
    incorrect: str


_TEMPLATES = [
    ("When John and Mary went to the shops, {} gave the bag to", "John", "Mary"),
    ("When Tom and James went to the park, {} gave the ball to", "Tom", "James"),
    ("When Dan and Emily went to the shops, {} gave an apple to", "Dan", "Emily"),
    ("After Sam and Amy went to the park, {} gave a drink to", "Sam", "Amy"),
]


def default_battery() -> list[IoiProbe]:
    """The four IOI sentences, each with the subject as either name (8 probes)."""
    probes = []
    for template, a, b in _TEMPLATES:
        probes.append(IoiProbe(template.format(a), " " + b, " " + a))
        probes.append(IoiProbe(template.format(b), " " + a, " " + b))
    return probes


def load_battery(path) -> list[IoiProbe]:
    """One probe per line: ``prompt TAB correct TAB incorrect``."""
    probes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ConfigError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            probes.append(IoiProbe(*parts))
    if not probes:
        raise ConfigError(f"{path}: battery is empty")
    return probes


def write_battery(probes, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pr in probes:
            fh.write(f"{pr.prompt}\t{pr.correct}\t{pr.incorrect}\n")


def ioi_probe(params, cfg: LmConfig, probes) -> list[tuple[float, float]]:
    """(p_correct, p_incorrect) of the two name continuations for every probe."""
    probes = list(probes)
    if not probes:
        raise ConfigError("IOI battery is empty")
    out = []
    for pr in probes:
        out.append((sequence_probability(params, cfg, pr.prompt, pr.correct),
                    sequence_probability(params, cfg, pr.prompt, pr.incorrect)))
    return out
