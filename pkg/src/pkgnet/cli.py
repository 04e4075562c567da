"""Command-line entry point.

Subcommands: ``synth-data``, ``train``, ``calibrate``, ``score``, ``eval``,
``plot`` and ``run`` (all stages). Any ``--section.field VALUE`` flag
overrides a config field; values are parsed as YAML scalars.

Failures print one JSON line ``{"error": ..., "message": ...}`` to stderr
and exit nonzero (2 for usage/config problems, 1 otherwise).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import config as cfgmod
from . import pipeline
from .config import ConfigError
from .data import generate_synthetic_dataset, load_labels, write_dataset
from .evaluation import export_curves
from .scoring import load_scores


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _overrides(extra: list[str]) -> dict:
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unrecognized argument {tok}")
        key, eq, val = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(extra):
                raise UsageError(f"override {tok} needs a value")
            i += 1
            val = extra[i]
        out[key] = yaml.safe_load(val)
        i += 1
    return out


def _config(args, extra) -> cfgmod.Config:
    ov = _overrides(extra)
    if getattr(args, "seed", None) is not None:
        ov.setdefault("train.seed", args.seed)
    return cfgmod.load(args.config, ov)


def _need_run(args) -> Path:
    run = Path(args.out)
    if not (run / "manifest.json").is_file():
        raise FileNotFoundError(f"missing run manifest {run / 'manifest.json'}")
    return run


def cmd_synth_data(args, extra):
    ov = _overrides(extra)
    raw = cfgmod._read(args.config) if args.config else {}
    for k, v in ov.items():
        cfgmod.set_dotted(raw, k, v)
    cfg = cfgmod.from_dict(raw)
    syn = cfg.data.synthetic
    if args.seed is not None:
        syn.seed = args.seed
    errs = syn.validate()
    if errs:
        raise ConfigError([f"data.synthetic: {e}" for e in errs])
    out = Path(args.out)
    write_dataset(generate_synthetic_dataset(syn), out)
    # a ready-to-train config pointing at the written directory
    cfg.data.source, cfg.data.root = "directory", str(out.resolve())
    cfgmod.dump(cfg, out / "config.yaml")
    return {"dataset": str(out), "config": str(out / "config.yaml")}


def cmd_train(args, extra):
    cfg = _config(args, extra)
    m = pipeline.train(cfg, args.out)
    return {"run": args.out, "checkpoint": m.final_checkpoint, "final_loss": m.history[-1]["total"]}


def cmd_calibrate(args, extra):
    if extra:
        raise UsageError(f"unrecognized arguments {' '.join(extra)}")
    run = _need_run(args)
    stats = pipeline.calibrate_run(run)
    return {"stats": str(run / "stats.json"), "n": stats.n}


def cmd_score(args, extra):
    if extra:
        raise UsageError(f"unrecognized arguments {' '.join(extra)}")
    run = _need_run(args)
    if not (run / "stats.json").is_file():
        raise FileNotFoundError(f"missing stats file {run / 'stats.json'} (run calibrate first)")
    pipeline.score_run(run)
    return {"scores": str(run / "scores.json")}


def cmd_eval(args, extra):
    if extra:
        raise UsageError(f"unrecognized arguments {' '.join(extra)}")
    scores = Path(args.scores) if args.scores else Path(args.out) / "scores.json"
    if not scores.is_file():
        raise FileNotFoundError(f"missing score file {scores}")
    if args.labels is None:
        _need_run(args)
    r = pipeline.eval_run(args.out, scores, args.labels, smoothed=False if args.no_smooth else None)
    return {"auroc_micro": r.auroc_micro, "report": str(Path(args.out) / "eval_report.json")}


def cmd_plot(args, extra):
    if extra:
        raise UsageError(f"unrecognized arguments {' '.join(extra)}")
    scores = Path(args.scores) if args.scores else Path(args.out) / "scores.json"
    run = load_scores(scores)
    if args.labels:
        labels = load_labels(args.labels)
    else:
        m = pipeline.RunManifest.read(_need_run(args))
        labels = pipeline.split_labels(cfgmod.from_dict(m.config))
    dest = Path(args.dest) if args.dest else Path(args.out) / "curves"
    files = export_curves(run, labels, dest)
    return {"files": [str(p) for p in files]}


def cmd_run(args, extra):
    cfg = _config(args, extra)
    m, r = pipeline.run_all(cfg, args.out)
    return {"run": args.out, "auroc_micro": r.auroc_micro, "train_seconds": m.train_seconds}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pkgnet", description="Student/teacher video anomaly detection")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help, config=False, seed=False):
        s = sub.add_parser(name, help=help)
        s.add_argument("--out", "--run", dest="out", required=True, help="output / run directory")
        if config:
            s.add_argument("--config", help="YAML file or preset name")
        if seed:
            s.add_argument("--seed", type=int)
        s.set_defaults(fn=fn)
        return s

    add("synth-data", cmd_synth_data, "write the synthetic dataset", config=True, seed=True)
    add("train", cmd_train, "train a student", config=True, seed=True)
    add("calibrate", cmd_calibrate, "fit score statistics on the training split")
    add("score", cmd_score, "score the test split")
    e = add("eval", cmd_eval, "frame-level AUROC")
    e.add_argument("--scores", help="score file (default RUN/scores.json)")
    e.add_argument("--labels", help="label JSON (default: the run's test split)")
    e.add_argument("--no-smooth", action="store_true", help="evaluate raw instead of smoothed scores")
    pl = add("plot", cmd_plot, "per-video score curves and curves.csv")
    pl.add_argument("--scores")
    pl.add_argument("--labels")
    pl.add_argument("--dest", help="output directory (default RUN/curves)")
    add("run", cmd_run, "train, calibrate, score and eval", config=True, seed=True)
    return p


def _fail(exc: BaseException, code: int) -> int:
    payload = {"error": type(exc).__name__, "message": " ".join(str(exc).split())}
    if isinstance(exc, ConfigError):
        payload["problems"] = exc.problems
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        result = args.fn(args, extra)
    except (UsageError, ConfigError) as exc:
        return _fail(exc, 2)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one line
        return _fail(exc, 1)
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
