"""Training loops, snapshot evaluation and checkpoint files."""

from __future__ import annotations

import csv
import json
import logging
import os
import struct
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import evalstats, lm, taskgen, toy
from . import tensor as T
from .errors import ConfigError, CorruptionError, FormatError
from .rng import stream
from .taskgen import TaskKind
from .toy import StreamVariant

log = logging.getLogger(__name__)

MAGIC = b"AMICLCK1"
VERSION = 1
TASKS = tuple(k.value for k in TaskKind)
EVAL_CHUNK = 256


# ----------------------------------------------------------------- checkpoints


def save_checkpoint(params, path, meta: dict | None = None) -> None:
    """Write ``params`` (name -> Tensor or array) as little-endian float32 blobs."""
    names = list(params)
    arrays = [np.asarray(getattr(params[n], "data", params[n]), dtype="<f4") for n in names]
    header = {"names": names, "shapes": [list(a.shape) for a in arrays]}
    header.update(meta or {})
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(hbytes)))
        fh.write(hbytes)
        for a in arrays:
            fh.write(np.ascontiguousarray(a).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple["OrderedDict[str, T.Tensor]", dict]:
    """Inverse of :func:`save_checkpoint`; returns (params, header)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (expected magic {MAGIC.decode()!r}, found {raw[:8]!r})")
    if len(raw) < 16:
        raise CorruptionError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    if len(raw) < 16 + hlen:
        raise CorruptionError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable header: {exc}") from exc
    offset = 16 + hlen
    params = OrderedDict()
    for name, shape in zip(header["names"], header["shapes"]):
        n = int(np.prod(shape, dtype=np.int64)) * 4
        if offset + n > len(raw):
            raise CorruptionError(f"{path}: truncated while reading {name!r}")
        arr = np.frombuffer(raw, dtype="<f4", count=n // 4, offset=offset).reshape(shape)
        params[name] = T.parameter(arr.astype(np.float32))
        offset += n
    if offset != len(raw):
        raise CorruptionError(f"{path}: {len(raw) - offset} trailing bytes")
    return params, header


# ----------------------------------------------------------------- config / report


@dataclass(frozen=True)
class TrainConfig:
    model: str = "toy"
    variant: StreamVariant = StreamVariant.CLASSIC
    batch: int = 128
    lr: float = 0.01
    seeds: tuple = (0, 1, 2, 3)
    snapshot_interval: int = 500
    max_snapshots: int = 100
    eval_samples: int = 512
    # toy task
    e: int = 64
    num_pairs: int = 8
    num_objects: int = 128
    num_labels: int = 128
    epsilon: float = 0.1
    # stop a toy seed once every ICL probe has crossed this accuracy (None: never)
    stop_after: float | None = None
    keep_checkpoints: bool = False

    def __post_init__(self):
        if self.model not in ("toy", "lm"):
            raise ConfigError(f"model must be toy or lm, got {self.model!r}")
        object.__setattr__(self, "variant", StreamVariant.parse(self.variant))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        for name in ("snapshot_interval", "max_snapshots", "eval_samples", "e", "num_objects", "num_labels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.num_pairs < 2:
            raise ConfigError("num_pairs must be >= 2")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["seeds"] = list(self.seeds)
        return d


@dataclass
class RunReport:
    """Series for one variant; ``accuracy[task]`` holds one list per seed."""
    variant: str
    snapshot_interval: int
    seeds: list
    accuracy: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    checkpoints: list = field(default_factory=list)
    errors: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def crossings(self, thetas=evalstats.THETAS) -> dict:
        out = {}
        for task, per_seed in self.accuracy.items():
            out[task] = {str(th): [evalstats.first_crossing(s, th) if s else None for s in per_seed]
                         for th in thetas}
        return out


class NonFiniteError(FloatingPointError):
    pass


def _sgd_update(params, lr: float, step: int, compute_loss) -> None:
    """One optimizer step; any non-finite value aborts with the step index."""
    try:
        compute_loss()
    except T.NumericError as exc:
        raise NonFiniteError(f"training diverged at step {step}: {exc}") from exc
    T.sgd_step(params.values(), lr)
    for name, t in params.items():
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"parameter {name!r} became non-finite at step {step}")


def _seed_dir(out_dir, variant: str, seed: int) -> Path | None:
    if out_dir is None:
        return None
    d = Path(out_dir) / variant / f"seed{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_series_csv(path, series: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["snapshot", "task", "accuracy", "loss"])
        n = len(next(iter(series.values()))[0])
        for i in range(n):
            for task, (acc, loss) in series.items():
                w.writerow([i, task, "" if acc is None else repr(acc[i]), repr(loss[i])])


def _threads() -> int:
    raw = os.environ.get("ICLSTREAMS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ICLSTREAMS_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _map_seeds(fn, seeds):
    n = min(_threads(), len(seeds))
    if n == 1:
        return [fn(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, seeds))


# ----------------------------------------------------------------- toy training


def _evaluate_toy(params, cfg: TrainConfig, table, seed: int, snapshot: int) -> dict:
    frozen = toy.detached(params)
    out = {}
    for kind in TaskKind:
        rng = stream(seed, "eval", kind.value, snapshot)
        correct, loss_sum, done = 0, 0.0, 0
        while done < cfg.eval_samples:
            n = min(EVAL_CHUNK, cfg.eval_samples - done)
            b = taskgen.sample_batch(table, kind, cfg.num_pairs, n, cfg.epsilon, rng)
            acc, loss = toy.evaluate(frozen, b, cfg.variant)
            correct += round(acc * n)
            loss_sum += loss * n
            done += n
        out[kind.value] = (correct / cfg.eval_samples, loss_sum / cfg.eval_samples)
    return out


def _train_toy_seed(cfg: TrainConfig, seed: int, out_dir):
    """Returns (series, checkpoint path or None, error string or None)."""
    table = taskgen.make_table(cfg.num_objects, cfg.num_labels, cfg.e, seed)
    params = toy.init_params(cfg.e, 2 * cfg.num_pairs, seed)
    rng = stream(seed, "train")
    acc = {t: [] for t in TASKS}
    loss = {t: [] for t in TASKS}
    d = _seed_dir(out_dir, cfg.variant.value, seed)
    meta = {"kind": "toy", "seed": seed, "config": cfg.to_dict()}
    ckpt = None
    error = None
    t0 = time.perf_counter()
    try:
        for snap in range(cfg.max_snapshots + 1):
            if snap:
                for i in range(cfg.snapshot_interval):
                    b = taskgen.sample_batch(table, TaskKind.TEST, cfg.num_pairs, cfg.batch, cfg.epsilon, rng)
                    _sgd_update(params, cfg.lr, (snap - 1) * cfg.snapshot_interval + i + 1,
                                lambda: toy.loss_and_grad(params, b, cfg.variant))
            res = _evaluate_toy(params, cfg, table, seed, snap)
            for t in TASKS:
                acc[t].append(res[t][0])
                loss[t].append(res[t][1])
            if d is not None:
                name = f"snap{snap:04d}.ckpt" if cfg.keep_checkpoints else "latest.ckpt"
                ckpt = d / name
                save_checkpoint(params, ckpt, dict(meta, snapshot=snap))
            log.info("%s seed %d snapshot %d: %s (%.0fs)", cfg.variant.value, seed, snap,
                     " ".join(f"{t}={res[t][0]:.3f}" for t in TASKS), time.perf_counter() - t0)
            if cfg.stop_after is not None and all(acc[t][-1] > cfg.stop_after for t in evalstats.ICL_TASKS):
                break
    except OSError as exc:
        error = f"I/O failure for seed {seed}: {exc}"
        log.error(error)
    if d is not None and error is None:
        _write_series_csv(d / "series.csv", {t: (acc[t], loss[t]) for t in TASKS})
    return {"acc": acc, "loss": loss}, ckpt, error


def train_toy(cfg: TrainConfig, out_dir=None) -> RunReport:
    """Train one variant on every seed in ``cfg.seeds``."""
    if cfg.model != "toy":
        raise ConfigError("train_toy needs model='toy'")
    results = _map_seeds(lambda s: _train_toy_seed(cfg, s, out_dir), list(cfg.seeds))
    report = RunReport(cfg.variant.value, cfg.snapshot_interval, list(cfg.seeds), config=cfg.to_dict())
    for t in TASKS:
        report.accuracy[t] = [r[0]["acc"][t] for r in results]
        report.loss[t] = [r[0]["loss"][t] for r in results]
    for seed, (_, ckpt, err) in zip(cfg.seeds, results):
        if ckpt is not None:
            report.checkpoints.append(str(ckpt))
        if err is not None:
            report.errors[seed] = err
    if out_dir is not None:
        write_summary(report, Path(out_dir) / cfg.variant.value / "summary.json")
    return report


def write_summary(report: RunReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {
        "variant": report.variant,
        "seeds": report.seeds,
        "snapshot_interval": report.snapshot_interval,
        "config": report.config,
        # relative to the summary's directory so the file does not depend on where --out points
        "checkpoints": [_relative(c, path.parent) for c in report.checkpoints],
        "errors": {str(k): v for k, v in report.errors.items()},
    }
    if report.accuracy.get(TASKS[0]) and report.accuracy[TASKS[0]][0] is not None:
        body["crossings"] = report.crossings()
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _relative(path, base: Path) -> str:
    try:
        return Path(path).resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        return str(path)


def load_report(variant_dir) -> RunReport:
    """Rebuild a toy RunReport from a variant directory written by :func:`train_toy`."""
    variant_dir = Path(variant_dir)
    summary = json.loads((variant_dir / "summary.json").read_text())
    report = RunReport(summary["variant"], summary["snapshot_interval"], summary["seeds"],
                       config=summary["config"],
                       checkpoints=[str(variant_dir / c) for c in summary["checkpoints"]])
    for t in TASKS:
        report.accuracy[t] = []
        report.loss[t] = []
    for seed in summary["seeds"]:
        rows = {t: ([], []) for t in TASKS}
        with open(variant_dir / f"seed{seed}" / "series.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                rows[row["task"]][0].append(float(row["accuracy"]))
                rows[row["task"]][1].append(float(row["loss"]))
        for t in TASKS:
            report.accuracy[t].append(rows[t][0])
            report.loss[t].append(rows[t][1])
    return report


# ----------------------------------------------------------------- language model training


def _split(corpus: corpus_mod.TokenizedCorpus, context: int):
    """Hold out the last tenth for validation when both parts can fill a window."""
    n = len(corpus)
    cut = int(n * 0.9)
    if cut > context and n - cut > context:
        train = replace(corpus, tokens=corpus.tokens[:cut])
        val = replace(corpus, tokens=corpus.tokens[cut:])
        return train, val
    return corpus, None


def _lm_eval_loss(params, lmcfg, corp, rng, samples, context) -> float:
    frozen = lm.detached(params)
    total, done = 0.0, 0
    while done < samples:
        n = min(32, samples - done)
        x, y = corpus_mod.sample_lm_batch(corp, context, n, rng)
        total += lm.lm_loss(frozen, lmcfg, x, y).item() * n
        done += n
    return total / samples


def _train_lm_seed(cfg: TrainConfig, lmcfg: lm.LmConfig, corp, seed: int, out_dir, context: int):
    lmcfg = replace(lmcfg, seed=seed, variant=cfg.variant)
    params = lm.init_params(lmcfg)
    train_part, val_part = _split(corp, context)
    rng = stream(seed, "lm-train")
    series = {"train": [], "val": []}
    d = _seed_dir(out_dir, cfg.variant.value, seed)
    meta = {"kind": "lm", "seed": seed, "config": cfg.to_dict(), "lm": lmcfg.to_dict(), "corpus": corp.digest}
    ckpt, error = None, None
    try:
        for snap in range(cfg.max_snapshots + 1):
            if snap:
                for i in range(cfg.snapshot_interval):
                    x, y = corpus_mod.sample_lm_batch(train_part, context, cfg.batch, rng)
                    _sgd_update(params, cfg.lr, (snap - 1) * cfg.snapshot_interval + i + 1,
                                lambda: T.backward(lm.lm_loss(params, lmcfg, x, y)))
            erng = stream(seed, "lm-eval", snap)
            series["train"].append(_lm_eval_loss(params, lmcfg, train_part, erng, cfg.eval_samples, context))
            series["val"].append(None if val_part is None else
                                 _lm_eval_loss(params, lmcfg, val_part, erng, cfg.eval_samples, context))
            if d is not None:
                name = f"snap{snap:04d}.ckpt" if cfg.keep_checkpoints else "latest.ckpt"
                ckpt = d / name
                save_checkpoint(params, ckpt, dict(meta, snapshot=snap))
            log.info("lm %s seed %d snapshot %d: train loss %.4f", cfg.variant.value, seed, snap, series["train"][-1])
    except OSError as exc:
        error = f"I/O failure for seed {seed}: {exc}"
        log.error(error)
    if d is not None and error is None:
        with open(d / "series.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["snapshot", "task", "accuracy", "loss"])
            for i in range(len(series["train"])):
                for split in ("train", "val"):
                    v = series[split][i]
                    if v is not None:
                        w.writerow([i, split, "", repr(v)])
    return series, ckpt, error


def train_lm(cfg: TrainConfig, lmcfg: lm.LmConfig, corp: corpus_mod.TokenizedCorpus,
             out_dir=None, context: int | None = None) -> RunReport:
    """Next-token training on ``corp``; the report carries loss series only.

    ``context`` is the training window (defaults to the model's context,
    shortened to fit small corpora).
    """
    if cfg.model != "lm":
        raise ConfigError("train_lm needs model='lm'")
    if context is None:
        context = min(lmcfg.context, len(corp) - 1)
    if not 1 <= context <= lmcfg.context:
        raise ConfigError(f"training window {context} must lie in [1, {lmcfg.context}]")
    results = _map_seeds(lambda s: _train_lm_seed(cfg, lmcfg, corp, s, out_dir, context), list(cfg.seeds))
    report = RunReport(cfg.variant.value, cfg.snapshot_interval, list(cfg.seeds),
                       config=dict(cfg.to_dict(), lm=lmcfg.to_dict(), context=context))
    report.loss["train"] = [r[0]["train"] for r in results]
    report.loss["val"] = [r[0]["val"] for r in results]
    for seed, (_, ckpt, err) in zip(cfg.seeds, results):
        if ckpt is not None:
            report.checkpoints.append(str(ckpt))
        if err is not None:
            report.errors[seed] = err
    if out_dir is not None:
        write_summary(report, Path(out_dir) / cfg.variant.value / "summary.json")
    return report


def lm_from_checkpoint(path, expect: lm.LmConfig | None = None):
    """Load an LM checkpoint; returns (params, LmConfig). Architecture mismatch is a FormatError."""
    params, header = load_checkpoint(path)
    if header.get("kind") != "lm":
        raise FormatError(f"{path}: not a language-model checkpoint (kind={header.get('kind')!r})")
    stored = lm.LmConfig(**header["lm"])
    if expect is not None and expect.architecture() != stored.architecture():
        diff = {k: (v, stored.architecture()[k]) for k, v in expect.architecture().items()
                if stored.architecture()[k] != v}
        raise FormatError(f"{path}: architecture mismatch (expected, stored): {diff}")
    want = lm.init_params(replace(stored, seed=0))
    if [(k, v.shape) for k, v in want.items()] != [(k, v.shape) for k, v in params.items()]:
        raise FormatError(f"{path}: parameter set does not match its recorded architecture")
    return params, stored
