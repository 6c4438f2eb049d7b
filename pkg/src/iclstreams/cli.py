"""Command-line entry point: ``iclstreams <command> [flags]``.

Every command writes plain CSV/JSON under ``--out`` and renders PNG figures
next to them. A JSON ``--config`` file may supply any setting; flags given
on the command line win over the file.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import amicl, corpus, evalstats, lm, plotting, trainer
from .errors import ConfigError, FormatError
from .toy import StreamVariant
from .trainer import TrainConfig

log = logging.getLogger("iclstreams")

SECTIONS = {
    "out": None,
    "seed": None,
    "amicl": {"a", "e", "s", "similarity", "separation", "trials", "epsilon"},
    "train": {f.name for f in fields(TrainConfig)} - {"model", "variant"} | {"variants", "n_seeds"},
    "lm": {f.name for f in fields(lm.LmConfig)} - {"variant", "seed"},
    "lm_train": {"batch", "lr", "snapshot_interval", "max_snapshots", "eval_samples", "variants",
                 "n_seeds", "seeds", "context", "corpus"},
}
ALL_VARIANTS = [v.value for v in StreamVariant]


class UsageError(ConfigError):
    pass


def load_config(path) -> dict:
    """Parse a JSON config and reject any key this program does not know."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for key, value in cfg.items():
        if key not in SECTIONS:
            raise ConfigError(f"{path}: unknown config key {key!r}")
        allowed = SECTIONS[key]
        if allowed is None:
            continue
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: section {key!r} must be an object")
        for sub in value:
            if sub not in allowed:
                raise ConfigError(f"{path}: unknown config key '{key}.{sub}'")
    return cfg


def derive_seeds(master: int, n: int) -> list[int]:
    """Per-run seeds fanned out from the master seed."""
    return [int(np.random.SeedSequence([master, i]).generate_state(1)[0]) for i in range(n)]


def _pick(flag, section: dict, key: str, default):
    if flag is not None:
        return flag
    return section.get(key, default)


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def _parse_variants(values) -> list[str]:
    return [StreamVariant.parse(v).value for v in values]


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ----------------------------------------------------------------- commands


def cmd_amicl_sweep(args, cfg: dict, out: Path, master: int) -> int:
    sec = cfg.get("amicl", {})
    trials = _pick(args.trials, sec, "trials", 1000)
    if trials < 1:
        raise UsageError(f"--trials must be >= 1, got {trials}")
    rows = amicl.sweep(
        _as_list(_pick(args.similarity, sec, "similarity", ["dot"])),
        _as_list(_pick(args.separation, sec, "separation", ["argmax"])),
        [float(a) for a in _as_list(_pick(args.a, sec, "a", [2.0]))],
        [int(e) for e in _as_list(_pick(args.e, sec, "e", [128]))],
        [int(s) for s in _as_list(_pick(args.s, sec, "s", [16]))],
        trials=trials,
        epsilon=float(_pick(args.epsilon, sec, "epsilon", 0.1)),
        seed=master,
    )
    out.mkdir(parents=True, exist_ok=True)
    amicl.write_sweep_csv(rows, out / "amicl_sweep.csv")
    plotting.sweep_figure(rows, out / "amicl_sweep.png")
    print(f"wrote {len(rows)} rows to {out / 'amicl_sweep.csv'}")
    return 0


def _toy_configs(args, cfg: dict, master: int):
    sec = dict(cfg.get("train", {}))
    if args.config and "train" in cfg and "variants" not in sec and args.variants is None:
        raise ConfigError("missing config key 'train.variants'")
    variants = _parse_variants(_pick(args.variants, sec, "variants", ALL_VARIANTS))
    n_seeds = int(_pick(args.n_seeds, sec, "n_seeds", 4))
    seeds = sec.pop("seeds", None) or derive_seeds(master, n_seeds)
    sec.pop("variants", None)
    sec.pop("n_seeds", None)
    for flag in ("snapshot_interval", "max_snapshots", "eval_samples", "e", "batch", "lr", "num_labels",
                 "num_objects", "stop_after"):
        val = getattr(args, flag, None)
        if val is not None:
            sec[flag] = val
    return [TrainConfig(model="toy", variant=v, seeds=tuple(seeds), **sec) for v in variants]


def _write_stats(reports, out: Path) -> tuple[list, list]:
    rows, tests = evalstats.aggregate(reports)
    evalstats.write_threshold_csv(rows, out / "thresholds.csv")
    evalstats.write_ttest_csv(tests, out / "ttests.csv")
    plotting.threshold_figure(rows, out / "thresholds.png")
    plotting.training_figure(reports, out / "accuracy.png")
    return rows, tests


def cmd_train_toy(args, cfg: dict, out: Path, master: int) -> int:
    configs = _toy_configs(args, cfg, master)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    failed = False
    for c in configs:
        log.info("training %s on seeds %s", c.variant.value, list(c.seeds))
        rep = trainer.train_toy(c, out)
        failed |= bool(rep.errors)
        reports.append(rep)
    complete = [r for r in reports if not r.errors]
    if complete:
        rows, _ = _write_stats(complete, out)
        for r in rows:
            if r.theta == 0.95:
                shown = "not crossed" if r.mean is None else f"{r.mean:.2f} +- {r.std:.2f}"
                print(f"{r.task:4s} {r.variant:8s} theta=0.95: {shown}")
    return 1 if failed else 0


def cmd_stats(args, cfg: dict, out: Path, master: int) -> int:
    runs = Path(args.runs or out)
    dirs = sorted(p for p in runs.iterdir() if (p / "summary.json").exists()) if runs.is_dir() else []
    if not dirs:
        raise OSError(f"no training runs (summary.json) found under {runs}")
    reports = [trainer.load_report(d) for d in dirs]
    out.mkdir(parents=True, exist_ok=True)
    rows, tests = _write_stats(reports, out)
    print(f"wrote {len(rows)} threshold rows and {len(tests)} t-tests to {out}")
    return 0


def _lm_setup(args, cfg: dict, master: int):
    lsec = dict(cfg.get("lm", {}))
    if args.layers is not None:
        lsec["n_layers"] = args.layers
    if args.d_model is not None:
        lsec["d_model"] = args.d_model
    if args.heads is not None:
        lsec["n_heads"] = args.heads
    if args.context is not None:
        lsec["context"] = args.context
    base = lm.LmConfig(**lsec)
    return base


def cmd_train_lm(args, cfg: dict, out: Path, master: int) -> int:
    tsec = dict(cfg.get("lm_train", {}))
    corpus_path = _pick(args.corpus, tsec, "corpus", None)
    if corpus_path is None:
        raise UsageError("train-lm needs --corpus PATH (or lm_train.corpus in the config)")
    corp = corpus.ingest(corpus_path)
    base = _lm_setup(args, cfg, master)
    variants = _parse_variants(_pick(args.variants, tsec, "variants", ["classic", "values"]))
    seeds = tsec.get("seeds") or derive_seeds(master, int(_pick(args.n_seeds, tsec, "n_seeds", 1)))
    context = _pick(args.train_context, tsec, "context", None)
    out.mkdir(parents=True, exist_ok=True)
    reports, failed = [], False
    for v in variants:
        tc = TrainConfig(model="lm", variant=v, seeds=tuple(seeds),
                         batch=int(_pick(args.batch, tsec, "batch", 16)),
                         lr=float(_pick(args.lr, tsec, "lr", 0.1)),
                         snapshot_interval=int(_pick(args.snapshot_interval, tsec, "snapshot_interval", 100)),
                         max_snapshots=int(_pick(args.max_snapshots, tsec, "max_snapshots", 10)),
                         eval_samples=int(_pick(args.eval_samples, tsec, "eval_samples", 32)))
        rep = trainer.train_lm(tc, base, corp, out, context=context)
        failed |= bool(rep.errors)
        reports.append(rep)
        final = [s[-1] for s in rep.loss["train"] if s]
        print(f"{v:8s} params={lm.param_count(lm.init_params(base))} final train loss "
              + ", ".join(f"{x:.4f}" for x in final))
    plotting.loss_figure(reports, out / "lm_loss.png")
    return 1 if failed else 0


def cmd_ioi(args, cfg: dict, out: Path, master: int) -> int:
    if not args.checkpoint:
        raise UsageError("ioi needs at least one --checkpoint")
    probes = lm.load_battery(args.battery) if args.battery else lm.default_battery()
    per_ckpt = []
    for path in args.checkpoint:
        params, lmcfg = trainer.lm_from_checkpoint(path)
        per_ckpt.append(lm.ioi_probe(params, lmcfg, probes))
    arr = np.asarray(per_ckpt)  # (checkpoints, probes, 2)
    rows = []
    for i, pr in enumerate(probes):
        pc, pi = arr[:, i, 0], arr[:, i, 1]
        rows.append({"probe": i + 1, "prompt": pr.prompt, "correct": pr.correct, "incorrect": pr.incorrect,
                     "p_correct_mean": float(pc.mean()), "p_correct_std": float(pc.std()),
                     "p_incorrect_mean": float(pi.mean()), "p_incorrect_std": float(pi.std()),
                     "n": len(pc)})
    out.mkdir(parents=True, exist_ok=True)
    header = list(rows[0])
    _write_rows(out / "ioi.csv", header, [[r[k] if not isinstance(r[k], float) else repr(r[k]) for k in header]
                                          for r in rows])
    plotting.ioi_figure(rows, out / "ioi.png")
    print(f"wrote {len(rows)} probes to {out / 'ioi.csv'}")
    return 0


# ----------------------------------------------------------------- parser


def _enum_choice(enum_cls):
    def parse(value):
        try:
            return enum_cls.parse(value).value
        except ConfigError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    parse.__name__ = enum_cls.__name__
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iclstreams", description=__doc__.splitlines()[0])
    p.add_argument("--out", default=None, help="output directory (default: ./out)")
    p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    p.add_argument("--config", default=None, help="JSON configuration file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("amicl-sweep", help="grid over AMICL settings")
    s.add_argument("--a", type=float, nargs="+")
    s.add_argument("--e", type=int, nargs="+")
    s.add_argument("--s", type=int, nargs="+")
    s.add_argument("--similarity", type=_enum_choice(amicl.Similarity), nargs="+")
    s.add_argument("--separation", type=_enum_choice(amicl.Separation), nargs="+")
    s.add_argument("--trials", type=int)
    s.add_argument("--epsilon", type=float)
    s.set_defaults(func=cmd_amicl_sweep)

    s = sub.add_parser("train-toy", help="train the two-layer model on the pair task")
    s.add_argument("--variants", type=_enum_choice(StreamVariant), nargs="+")
    s.add_argument("--n-seeds", type=int)
    for name, typ in (("snapshot-interval", int), ("max-snapshots", int), ("eval-samples", int), ("e", int),
                      ("batch", int), ("lr", float), ("num-labels", int), ("num-objects", int),
                      ("stop-after", float)):
        s.add_argument(f"--{name}", type=typ)
    s.set_defaults(func=cmd_train_toy)

    s = sub.add_parser("train-lm", help="train the byte-level decoder on a text corpus")
    s.add_argument("--corpus")
    s.add_argument("--variants", type=_enum_choice(StreamVariant), nargs="+")
    s.add_argument("--n-seeds", type=int)
    s.add_argument("--layers", type=int)
    s.add_argument("--heads", type=int)
    s.add_argument("--d-model", type=int)
    s.add_argument("--context", type=int, help="model context length")
    s.add_argument("--train-context", type=int, help="training window (default: model context)")
    for name, typ in (("snapshot-interval", int), ("max-snapshots", int), ("eval-samples", int),
                      ("batch", int), ("lr", float)):
        s.add_argument(f"--{name}", type=typ)
    s.set_defaults(func=cmd_train_lm)

    s = sub.add_parser("ioi", help="indirect-object probe on LM checkpoints")
    s.add_argument("--checkpoint", action="append", default=[])
    s.add_argument("--battery", help="tab-separated prompt/correct/incorrect file (default: built-in)")
    s.set_defaults(func=cmd_ioi)

    s = sub.add_parser("stats", help="threshold tables and t-tests from train-toy output")
    s.add_argument("--runs", help="directory written by train-toy (default: --out)")
    s.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else {}
        out = Path(args.out or cfg.get("out", "out"))
        master = int(args.seed if args.seed is not None else cfg.get("seed", 0))
        return args.func(args, cfg, out, master)
    except ConfigError as exc:
        parser.error(str(exc))  # exits with status 2
    except (OSError, FormatError) as exc:
        print(f"iclstreams: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
