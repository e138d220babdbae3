"""Command-line entry point: ``dgprtn {verify,gen,train,eval,export-graph}``.

Exit codes: 0 success, 1 a check failed, 2 usage or domain error, 3 I/O
error (missing, unreadable or corrupt file). Every command writes one
``*.manifest.json`` next to its outputs.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import json
import logging
import platform
import sys
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import evaluation as ev
from . import export, synthdata, verify
from .config import ConfigError, FormatError, TrainConfig, load_train_config
from .numcore import DomainError, NonFiniteError
from .training import EpochRecord, evaluate, load_checkpoint, split_dataset, train

log = logging.getLogger("dgprtn")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    build: str
    started: str
    finished: str = ""
    outputs: list[str] = field(default_factory=list)

    def write(self, path: Path) -> None:
        self.finished = _now()
        self.outputs = [str(p) for p in self.outputs]
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def build_id() -> str:
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    return f"dgprtn-{version} numpy-{np.__version__} python-{platform.python_version()}"


def _manifest(args: argparse.Namespace, config: dict, seed: int | None) -> RunManifest:
    return RunManifest(args.command, config, seed, build_id(), _now())


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".manifest.json")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_verify(args: argparse.Namespace) -> int:
    groups = [g.strip() for g in args.checks.split(",") if g.strip()]
    rows = verify.run_checks(groups, extra_n=args.n or (), perturb=args.perturb)
    out = Path(args.out)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "inputs", "expected", "got", "pass"])
        for r in rows:
            w.writerow([r.name, r.inputs, r.expected, r.got, int(r.passed)])
    failed = [r for r in rows if not r.passed]
    for r in failed:
        print(f"FAIL {r.name} [{r.inputs}] expected {r.expected} got {r.got}")
    print(f"{len(rows) - len(failed)}/{len(rows)} checks passed; report: {out}")
    man = _manifest(args, {"checks": groups, "n": list(args.n or ()), "perturb": args.perturb}, 0)
    man.outputs = [out]
    man.write(_sidecar(out))
    return EXIT_OK if not failed else EXIT_CHECK


def cmd_gen(args: argparse.Namespace) -> int:
    cfg = synthdata.load_gen_config(args.config) if args.config else synthdata.GenConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    convs = synthdata.generate(cfg, args.count)
    out = Path(args.out)
    synthdata.write_dataset(out, convs)
    print(f"wrote {len(convs)} conversations to {out}")
    man = _manifest(args, {**asdict(cfg), "count": args.count}, cfg.seed)
    man.outputs = [out]
    man.write(_sidecar(out))
    return EXIT_OK


def _check_compatible(cfg: TrainConfig, convs: Sequence[synthdata.Conversation]) -> None:
    for conv in convs:
        for u in conv.utterances:
            if u.frames.shape[1] != cfg.model.d_in:
                raise ConfigError(f"{conv.id}: frame dim {u.frames.shape[1]} but the model "
                                  f"expects d_in={cfg.model.d_in}")
            if u.labels.size and (u.labels.min() < 0 or u.labels.max() >= cfg.model.n_classes):
                raise ConfigError(f"{conv.id}: labels outside [0, {cfg.model.n_classes})")


METRIC_FIELDS = [f.name for f in dataclasses.fields(EpochRecord)]


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    convs = synthdata.read_dataset(args.data)
    _check_compatible(cfg, convs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)

        def on_epoch(rec: EpochRecord) -> None:
            w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(rec).values()])
            fh.flush()
            print(f"epoch {rec.epoch:3d}  train_ce {rec.train_ce:.4f}  train_acc "
                  f"{rec.train_acc:.4f}  test_ce {rec.test_ce:.4f}  test_acc {rec.test_acc:.4f}")

        result = train(cfg, convs, out_dir=out, on_epoch=on_epoch)
    man = _manifest(args, asdict(cfg), cfg.seed)
    man.outputs = [metrics_path, *result.checkpoints]
    man.write(out / "train.manifest.json")
    if result.diverged:
        print("training diverged; the last finite checkpoint is kept", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def _select(convs, cfg: TrainConfig, split: str):
    train_set, test_set = split_dataset(convs, cfg.heldout)
    return {"heldout": test_set, "train": train_set, "all": list(convs)}[split]


def _report_paths(args: argparse.Namespace, default_stem: str) -> tuple[Path, Path]:
    stem = Path(args.out) if args.out else Path(args.ckpt).with_name(default_stem)
    return stem.with_name(stem.name + ".csv"), stem.with_name(stem.name + ".json")


def cmd_eval(args: argparse.Namespace) -> int:
    model, cfg, manifest = load_checkpoint(args.ckpt)
    convs = synthdata.read_dataset(args.data)
    _check_compatible(cfg, convs)
    subset = _select(convs, cfg, args.split)
    if not subset:
        raise DomainError(f"split {args.split!r} is empty")
    rows: list[tuple[str, object]] = [("epoch", manifest["epoch"]), ("split", args.split)]
    if args.mode == "frames":
        rows += ev.report_rows(evaluate(model, subset, cfg.o))
    else:
        scores = ev.score_edges(model, subset, cfg.o, mode=args.graph)
        rows += [("graph", args.graph)] + ev.report_rows(ev.relation_error(scores))
    csv_path, json_path = _report_paths(
        args, f"{Path(args.ckpt).stem}.eval-{args.mode}-{args.split}")
    csv_text = ev.to_csv(rows)
    csv_path.write_text(csv_text, encoding="utf-8")
    json_path.write_text(ev.to_json(rows), encoding="utf-8")
    sys.stdout.write(csv_text)
    man = _manifest(args, {"mode": args.mode, "split": args.split, "graph": args.graph,
                           "ckpt": str(args.ckpt), "data": str(args.data)}, cfg.seed)
    man.outputs = [csv_path, json_path]
    man.write(_sidecar(csv_path))
    return EXIT_OK


def cmd_export_graph(args: argparse.Namespace) -> int:
    model, cfg, _ = load_checkpoint(args.ckpt)
    convs = synthdata.read_dataset(args.data)
    _check_compatible(cfg, convs)
    by_id = {c.id: c for c in convs}
    if args.conversation not in by_id:
        raise DomainError(f"conversation {args.conversation!r} not in {args.data}")
    conv = by_id[args.conversation]
    utt = len(conv.utterances) - 1 if args.utterance is None else args.utterance
    graph = export.window_graph(model, conv, utt, cfg.o)
    out = Path(args.out) if args.out else Path(f"{conv.id}-u{utt}.{args.format}")
    out.write_text(export.render(graph, args.format), encoding="utf-8")
    print(f"wrote {len(graph.nodes)} nodes, {len(graph.edges)} edges to {out}")
    man = _manifest(args, {"conversation": conv.id, "utterance": utt, "format": args.format,
                           "ckpt": str(args.ckpt), "data": str(args.data)}, cfg.seed)
    man.outputs = [out]
    man.write(_sidecar(out))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dgprtn", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1,
                   help="cap on BLAS/OpenMP threads (default 1, bit-deterministic)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("verify", help="check closed forms against numeric oracles")
    v.add_argument("--out", default="verify_report.csv")
    v.add_argument("--n", type=int, action="append",
                   help="extra Binomial n for the KL-bound sweep (repeatable)")
    v.add_argument("--checks", default=",".join(verify.GROUPS),
                   help=f"comma-separated subset of {', '.join(verify.GROUPS)}")
    v.add_argument("--perturb", type=float, default=0.0,
                   help="offset added to every closed-form m (negative control)")
    v.set_defaults(func=cmd_verify)

    g = sub.add_parser("gen", help="generate a synthetic conversation dataset")
    g.add_argument("--config", help="generator config (JSON)")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=250)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model and write metrics + checkpoints")
    t.add_argument("--config", help="training config (JSON)")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True, help="checkpoint manifest (.json)")
    e.add_argument("--data", required=True)
    e.add_argument("--mode", choices=("frames", "relations"), default="frames")
    e.add_argument("--split", choices=("heldout", "train", "all"), default="heldout")
    e.add_argument("--graph", choices=ev.MODES, default="summary",
                   help="edge statistic ranked in relations mode")
    e.add_argument("--out", help="report stem (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-graph", help="export one window's graphs as DOT or JSON")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--conversation", required=True)
    x.add_argument("--utterance", type=int, help="window end (default: last utterance)")
    x.add_argument("--format", choices=export.FORMATS, default="dot")
    x.add_argument("--out")
    x.set_defaults(func=cmd_export_graph)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:       # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("dgprtn: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except FormatError as exc:
        print(f"dgprtn: corrupt input: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"dgprtn: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DomainError, NonFiniteError) as exc:
        print(f"dgprtn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
