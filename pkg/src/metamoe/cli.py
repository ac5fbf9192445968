"""Command-line interface: ``metamoe {synth,train,eval,sweep}``.

Exit codes: 0 success, 1 usage error, 2 data or parse error, 3 numerical
failure. Every command accepts ``--config FILE`` with ``key=value`` lines
naming long options (dashes or underscores); flags given on the command line
win over the file.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from metamoe import __version__
from metamoe.data import (
    DomainDataset,
    SynthSpec,
    build_vocab,
    fingerprint,
    load_sparse,
    load_token_tagged,
    read_tagged,
    synthesize,
    synthesize_tagging,
    write_sparse,
    write_token_tagged,
)
from metamoe.errors import ConfigError, NumericalError, ParseError
from metamoe.model import MoEModel
from metamoe.trainer import MODES, TrainConfig, cross_validate, default_learning_rate, evaluate, run

log = logging.getLogger("metamoe")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
TAGGED_SUFFIXES = (".tag", ".conll", ".tsv")
# config fields whose command-line flag differs
FLAG_NAMES = {"lam": "lambda", "learning_rate": "lr", "max_epochs": "epochs"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# data helpers


def _is_tagged(path: Path) -> bool:
    return path.suffix in TAGGED_SUFFIXES


def load_sources(paths: list[Path]) -> list[DomainDataset]:
    """Load training sources; token files share a vocabulary and tag set."""
    kinds = {_is_tagged(p) for p in paths}
    if len(kinds) > 1:
        raise UsageError("sources mix sparse and token files")
    if kinds == {True}:
        raw = [read_tagged(p) for p in paths]
        vocab = build_vocab(raw)
        tags = sorted({t for sents in raw for s in sents for _, t in s if t is not None})
        return [load_token_tagged(p, vocab, tags) for p in paths]
    loaded = [load_sparse(p) for p in paths]
    dim = max(d.dim for d in loaded)
    C = max(d.n_classes for d in loaded)
    return [load_sparse(p, dim=dim, n_classes=C) for p in paths]


def load_like(path: Path, task: str, dim: int | None, label_set: list[str], vocab: list[str] | None) -> DomainDataset:
    """Load a file against a model's (or the sources') input space."""
    if task == "tagging":
        if not _is_tagged(path):
            raise UsageError(f"tagging model cannot read sparse file {path}")
        return load_token_tagged(path, vocab, label_set)
    if _is_tagged(path):
        raise UsageError(f"classification model cannot read token file {path}")
    return load_sparse(path, dim=dim, n_classes=len(label_set))


def _paths(csv_list: str | None) -> list[Path]:
    return [Path(p) for p in csv_list.split(",") if p] if csv_list else []


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    if args.task == "tagging":
        sources, target = synthesize_tagging(K=args.k, n_sentences=args.n, n_tags=args.classes, seed=args.seed)
        ext, writer = ".tag", write_token_tagged
        spec = {"task": "tagging", "K": args.k, "n_sentences": args.n, "n_tags": args.classes, "seed": args.seed}
    else:
        spec = SynthSpec(
            K=args.k,
            classes=args.classes,
            dim=args.dim,
            per_domain_n=args.n,
            domain_shift=args.shift,
            outlier_domains=args.outliers,
            outlier_noise=args.outlier_noise,
            outlier_n=args.outlier_n,
            target_n=args.target_n,
            translation=args.translation,
            max_angle=args.max_angle,
            noise=args.noise,
            seed=args.seed,
        )
        sources, target = synthesize(spec)
        ext, writer = ".svm", write_sparse
        spec = {"task": "classification", **spec.__dict__}
    for ds in [*sources, target]:
        path = out / f"{ds.name}{ext}"
        writer(ds, path)
        files.append({"name": ds.name, "path": path.name, "role": "target" if ds is target else "source",
                      "outlier": ds.outlier, "n": len(ds), "sha256": fingerprint(path)})
    _write_json(out / "manifest.json", {"command": "synth", "version": __version__, "seed": args.seed, "spec": spec, "files": files})
    print(f"wrote {len(files)} files to {out}")
    return EXIT_OK


def _train_config(args, sources) -> TrainConfig:
    lr = args.lr if args.lr is not None else default_learning_rate(sources[0])
    return TrainConfig(
        mode=args.mode,
        adversarial=args.adversarial,
        batch_size=args.batch_size,
        lam=args.lam,
        gamma=args.gamma,
        eta=args.eta,
        rank=args.rank,
        hidden=args.hidden,
        d_emb=args.d_emb,
        radius=args.radius,
        learning_rate=lr,
        weight_decay=args.weight_decay,
        max_epochs=args.epochs,
        patience=args.patience,
        seed=args.seed,
        val_fraction=args.val_fraction,
        confidence=args.confidence,
        shared_metric=args.shared_metric,
        stop_grad_means=args.stop_grad_means,
        classifier_bias=args.classifier_bias,
    )


def cmd_train(args) -> int:
    source_paths = _paths(args.sources)
    if not source_paths:
        raise UsageError("--sources is required")
    if args.mode == "moe" and len(source_paths) < 2:
        raise UsageError("the mixture of experts needs at least two source files")
    if args.adversarial and not args.target:
        raise UsageError("--adversarial needs --target")
    sources = load_sources(source_paths)
    first = sources[0]
    target = None
    if args.target:
        target = load_like(Path(args.target), first.task, first.dim, first.label_set, first.vocab)
    cfg = _train_config(args, sources)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = {"checkpoint": "checkpoint.npz", "epoch_log": "epochs.jsonl", "metrics": "metrics.json"}
    data_paths = [*source_paths, *([Path(args.target)] if args.target else [])]
    manifest = {
        "command": "train",
        "argv": args.argv,
        "version": __version__,
        "seed": args.seed,
        "config": cfg.as_dict(),
        "data": {str(p): fingerprint(p) for p in data_paths},
        "artifacts": artifacts,
    }
    _write_json(out / "manifest.json", manifest)

    with open(out / artifacts["epoch_log"], "w") as fh:
        def log_fn(rec):
            fh.write(json.dumps({k: float(v) if k != "epoch" else int(v) for k, v in rec.items()}, sort_keys=True) + "\n")

        res = run(sources, cfg, target=target, evaluation=target, log_fn=log_fn)
    res.model.save(out / artifacts["checkpoint"], cfg.as_dict())

    metrics = {
        "task": first.task,
        "mode": cfg.mode + ("-A" if cfg.adversarial else ""),
        "seed": cfg.seed,
        "accuracy": res.accuracy,
        "best_epoch": res.best_epoch,
        "epochs_run": len(res.history),
        "sources": [s.name for s in sources],
    }
    if res.mean_alpha is not None:
        metrics["mean_alpha"] = dict(zip(metrics["sources"], res.mean_alpha))
    if res.selected_source is not None:
        metrics["selected_source"] = sources[res.selected_source].name
    if res.per_source_accuracy is not None:
        metrics["per_source_accuracy"] = dict(zip(metrics["sources"], res.per_source_accuracy))
    _write_json(out / artifacts["metrics"], metrics)
    acc = "n/a" if res.accuracy is None else f"{res.accuracy:.4f}"
    print(f"{metrics['mode']}: accuracy {acc}, best epoch {res.best_epoch}, artifacts in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = MoEModel.load(args.checkpoint)
    path = Path(args.data)
    if (model.task == "tagging") != _is_tagged(path):
        raise UsageError(f"{model.task} checkpoint cannot evaluate {path.name}")
    dim = model.encoder.d_in if model.task == "classification" else None
    data = load_like(path, model.task, dim, model.label_set, model.vocab)
    try:
        ev = evaluate(model, data)
    except ConfigError as e:
        raise UsageError(str(e)) from None
    if args.export_alpha:
        names = model.source_names or [f"source_{i}" for i in range(ev.mixture.alpha.shape[1])]
        with open(args.export_alpha, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "true", "pred", *[f"alpha_{n}" for n in names]])
            labels = ev.labels if ev.labels is not None else [None] * len(ev.predictions)
            for i, (y, p, a) in enumerate(zip(labels, ev.predictions, ev.mixture.alpha)):
                w.writerow([i, "" if y is None else model.label_set[int(y)], model.label_set[int(p)], *[repr(float(v)) for v in a]])
    result = {"accuracy": None if math.isnan(ev.accuracy) else ev.accuracy, "n": int(len(ev.predictions)),
              "mean_alpha": ev.mean_alpha().tolist()}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "eval.json", result)
    print("accuracy n/a (unlabeled data)" if result["accuracy"] is None else f"accuracy {ev.accuracy:.6f}")
    return EXIT_OK


def parse_grid(text: str) -> list[dict]:
    """'lam=0.1,0.5;eta=0,0.01' -> cartesian product of the listed values."""
    axes = []
    for part in filter(None, (p.strip() for p in (text or "").split(";"))):
        key, sep, vals = part.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not vals.strip():
            raise UsageError(f"bad grid axis {part!r}")
        if key not in TrainConfig.__dataclass_fields__:
            raise UsageError(f"unknown grid key {key!r}")
        axes.append([(key, _coerce(key, v.strip())) for v in vals.split(",")])
    if not axes:
        raise UsageError("empty hyper-parameter grid")
    return [dict(combo) for combo in itertools.product(*axes)]


def _coerce(key: str, value: str):
    default = TrainConfig.__dataclass_fields__[key].default
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if value.lower() == "none":
        return None
    try:
        return int(value)
    except ValueError:
        return value


def cmd_sweep(args) -> int:
    grid = parse_grid(args.grid)
    source_paths = _paths(args.sources)
    if len(source_paths) < 2:
        raise UsageError("sweeping needs at least two source files")
    sources = load_sources(source_paths)
    cfg = _train_config(args, sources)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "manifest.json", {
        "command": "sweep", "argv": args.argv, "version": __version__, "seed": args.seed, "config": cfg.as_dict(),
        "grid": grid, "data": {str(p): fingerprint(p) for p in source_paths},
        "artifacts": {"report": "report.csv", "best": "best_config.txt"},
    })
    cv = cross_validate(sources, grid, cfg)
    keys = sorted({k for point in grid for k in point})
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["point", *keys, "cv_accuracy", "selected"])
        for i, (point, score) in enumerate(zip(grid, cv.scores)):
            w.writerow([i, *[point.get(k, "") for k in keys], repr(score), int(i == cv.best_index)])
    best = replace(cfg, **cv.best_point).as_dict()
    # written with flag names so the file can be passed back as --config
    flags = {FLAG_NAMES.get(k, k).replace("_", "-"): v for k, v in best.items() if v is not None}
    lines = [f"{k}={v}" for k, v in sorted(flags.items())]
    (out / "best_config.txt").write_text("\n".join(lines) + "\n")
    print(f"selected point {cv.best_index}: {cv.best_point} (cv accuracy {cv.scores[cv.best_index]:.4f})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="file of key=value lines; explicit flags take precedence")
    p.add_argument("-v", "--verbose", action="store_true")


def _hyper(p):
    p.add_argument("--mode", choices=MODES, default="moe")
    p.add_argument("--sources", help="comma-separated source files")
    p.add_argument("--target", help="target file (unlabeled data for the adversary; labels, if any, only for scoring)")
    p.add_argument("--adversarial", action="store_true")
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--eta", type=float, default=0.01)
    p.add_argument("--rank", type=int, default=None, help="metric rank (default min(hidden, 64))")
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--d-emb", type=int, default=32)
    p.add_argument("--radius", type=int, default=2)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=None, help="default: 1e-4 for sparse inputs, 1e-3 otherwise")
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--confidence", choices=["mcd", "negdist"], default=None)
    p.add_argument("--shared-metric", action="store_true")
    p.add_argument("--stop-grad-means", action="store_true")
    p.add_argument("--classifier-bias", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="metamoe", description="Multi-source domain adaptation with a metric-gated mixture of experts.")
    parser.add_argument("--version", action="version", version=f"metamoe {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic multi-domain task")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=["classification", "tagging"], default="classification")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--dim", type=int, default=10)
    p.add_argument("--n", type=int, default=500, help="examples (sentences for tagging) per domain")
    p.add_argument("--shift", type=float, default=1.0)
    p.add_argument("--outliers", type=int, default=0)
    p.add_argument("--outlier-noise", type=float, default=1.0)
    p.add_argument("--outlier-n", type=int, default=None)
    p.add_argument("--target-n", type=int, default=None)
    p.add_argument("--translation", type=float, default=4.0)
    p.add_argument("--max-angle", type=float, default=math.pi / 4)
    p.add_argument("--noise", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write checkpoint, epoch log and metrics")
    _common(p)
    _hyper(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a data file")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--export-alpha", help="CSV of per-example source weights")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="choose hyper-parameters by cross-validation over sources")
    _common(p)
    _hyper(p)
    p.add_argument("--grid", required=True, help="e.g. 'lam=0.1,0.5;eta=0,0.01'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def read_config(path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        values[key.strip()] = val.strip()
    return values


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = argv[0] if argv and not argv[0].startswith("-") else None
    subs = parser._subparsers._group_actions[0].choices
    if known.config is None or command not in subs:
        return parser.parse_args(argv)
    sub = subs[command]
    actions = {a.dest: a for a in sub._actions}
    aliases = {s.lstrip("-").replace("-", "_"): a.dest for a in sub._actions for s in a.option_strings}
    defaults = {}
    for key, raw in read_config(known.config).items():
        dest = aliases.get(key.replace("-", "_"))
        if dest is None or dest in ("config", "help"):
            raise UsageError(f"unknown config key {key!r}")
        action = actions[dest]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[dest] = raw.lower() in ("1", "true", "yes")
        elif raw.lower() == "none":
            defaults[dest] = None
        else:
            try:
                defaults[dest] = action.type(raw) if action.type else raw
            except ValueError:
                raise UsageError(f"config {key}={raw}: bad value") from None
            if action.choices is not None and defaults[dest] not in action.choices:
                raise UsageError(f"config {key}={raw}: choose from {list(action.choices)}")
    # file values become defaults, so explicit flags still win
    sub.set_defaults(**defaults)
    for a in sub._actions:
        if a.dest in defaults:
            a.required = False
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        args.argv = argv
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"metamoe: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, OSError, ValueError) as e:
        print(f"metamoe: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as e:
        print(f"metamoe: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
