"""Command-line entry point: ``fedssl <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .datasets import (DatasetContainer, PartitionConfig, convert_medmnist, dirichlet_partition,
                       partition_stats, synth_train_test, PATTERNS)
from .errors import FedSSLError
from .federation import SCHEMES
from .losses import METHODS
from .runner import (DEFAULT_CLIENT_COUNTS, ExperimentConfig, load_config, read_metrics,
                     reevaluate, run_experiment, run_grid)

log = logging.getLogger("fedssl")

# exit codes by error category; anything unexpected exits 1
EXIT_CODES = {
    "config": 2,
    "spec": 2,
    "integrity": 3,
    "partition": 4,
    "dimension": 5,
    "domain": 5,
    "non-finite": 6,
    "degenerate-batch": 6,
    "contract": 7,
    "aggregation": 8,
    "round": 9,
    "metric": 10,
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    """One ``--key`` flag per ExperimentConfig field; unset flags keep file/default values."""
    p.add_argument("--config", help="flat 'key = value' config file")
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = str(f.type)
        if kind == "bool":
            p.add_argument(flag, dest=f.name, default=None, type=lambda s: s.lower() in ("1", "true", "yes", "on"),
                           metavar="BOOL")
        elif kind == "int" or "Optional[int]" in kind:
            p.add_argument(flag, dest=f.name, type=int, default=None)
        elif kind == "float":
            p.add_argument(flag, dest=f.name, type=float, default=None)
        else:
            p.add_argument(flag, dest=f.name, default=None)


def _config_from_args(args) -> ExperimentConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(ExperimentConfig)}
    return load_config(args.config, **overrides)


def _csv(kind):
    def parse(text: str):
        return [kind(x) for x in text.split(",") if x.strip()]
    return parse


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    manifest = run_experiment(cfg)
    print(f"{manifest['status']}\t{cfg.output_dir}\t{manifest['wall_clock_seconds']:.1f}s")
    return 0


def cmd_grid(args) -> int:
    base = _config_from_args(args)
    manifests = run_grid(base, args.methods, args.schemes, args.clients, args.out or base.output_dir, args.jobs)
    failed = [m for m in manifests if m.get("status") != "ok"]
    root = Path(args.out or base.output_dir)
    print((root / "summary.md").read_text(), end="")
    print(f"{len(manifests) - len(failed)}/{len(manifests)} cells ok")
    return 0 if not failed else EXIT_CODES["round"]


def cmd_partition(args) -> int:
    data = DatasetContainer.load(args.dataset)
    shards = dirichlet_partition(data.labels, PartitionConfig(args.n_clients, args.alpha, args.seed))
    stats = partition_stats(data.labels, shards, data.n_classes)
    print("client\tn\tentropy\t" + "\t".join(f"class{c}" for c in range(data.n_classes)))
    for s in stats:
        counts = "\t".join(str(c) for c in s["class_counts"])
        print(f"{s['client']}\t{s['size']}\t{s['entropy']:.6f}\t{counts}")
    if args.out:
        payload = {"n_clients": args.n_clients, "alpha": args.alpha, "seed": args.seed,
                   "shards": [s.tolist() for s in shards]}
        Path(args.out).write_text(json.dumps(payload))
    return 0


def cmd_convert(args) -> int:
    train, test = convert_medmnist(args.source, args.name, args.out, check_counts=not args.no_check)
    for c in (train, test):
        print(f"{c.name}:{c.split}\t{len(c)} images\t{c.n_classes} classes")
    return 0


def cmd_synth(args) -> int:
    train, test = synth_train_test(args.n_train, args.n_test, args.classes, args.pattern, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train.save(out / f"{args.name}_train.fssld")
    test.save(out / f"{args.name}_test.fssld")
    print(f"wrote {out / (args.name + '_train.fssld')} ({len(train)}) and "
          f"{out / (args.name + '_test.fssld')} ({len(test)})")
    return 0


def cmd_eval(args) -> int:
    records, mean, std = reevaluate(args.run_dir)
    print("client\taccuracy\tweighted_f1")
    for r in records:
        print(f"{r.client_id}\t{r.accuracy:.6f}\t{r.weighted_f1:.6f}")
    print(f"mean\t{mean['accuracy']:.6f}\t{mean['weighted_f1']:.6f}")
    print(f"std\t{std['accuracy']:.6f}\t{std['weighted_f1']:.6f}")
    return 0


def cmd_plots(args) -> int:
    from .plots import emit_plots

    records = read_metrics(args.logs)
    result = emit_plots(records, args.kind, args.out, args.metric, figures=not args.no_figures)
    print(f"data\t{result['data']}")
    for f in result["figures"]:
        print(f"figure\t{f}")
    for m in result["missing"]:
        print("missing\t" + "\t".join(str(x) for x in m))
    return 0


def cmd_gradcheck(args) -> int:
    from .selftest import run_suite

    rows = run_suite(seed=args.seed)
    for r in rows:
        print(f"{'PASS' if r['passed'] else 'FAIL'}\t{r['case']}\t{r['max_rel_error']:.3e}\t{r['seconds']:.2f}s")
    failed = sum(not r["passed"] for r in rows)
    print(f"{len(rows) - failed}/{len(rows)} cases passed")
    return 0 if failed == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedssl", description="Federated self-supervised learning simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train and evaluate one cell")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("grid", help="run methods x schemes x client counts and write the summary table")
    _add_config_flags(p)
    p.add_argument("--methods", type=_csv(str), default=list(METHODS))
    p.add_argument("--schemes", type=_csv(str), default=list(SCHEMES))
    p.add_argument("--clients", type=_csv(int), default=list(DEFAULT_CLIENT_COUNTS))
    p.add_argument("--out", help="grid root directory (default: output_dir)")
    p.add_argument("--jobs", type=int, default=1, help="cells run in parallel processes")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("partition", help="inspect a Dirichlet label-skew split")
    p.add_argument("dataset")
    p.add_argument("--n-clients", type=int, default=5)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write shard indices as JSON")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("convert-dataset", help="convert a MedMNIST .npz into train/test containers")
    p.add_argument("source")
    p.add_argument("--name", required=True)
    p.add_argument("--out", default=".")
    p.add_argument("--no-check", action="store_true", help="skip the published split-size check")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("synth", help="generate a synthetic train/test pair")
    p.add_argument("--n-train", type=int, default=1024)
    p.add_argument("--n-test", type=int, default=256)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--pattern", choices=sorted(PATTERNS), default="blobs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="synth")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="re-evaluate the final weights saved by a run")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plots", help="emit plot-data TSV and PNG figures from metrics logs")
    p.add_argument("logs", nargs="+", help="metrics.jsonl files or run directories")
    p.add_argument("--kind", choices=("clients-vs-score", "ncl-best-vs-simclr"), required=True)
    p.add_argument("--metric", choices=("accuracy", "weighted_f1"), default="weighted_f1")
    p.add_argument("--out", default="plots")
    p.add_argument("--no-figures", action="store_true", help="write the TSV only")
    p.set_defaults(func=cmd_plots)

    p = sub.add_parser("gradcheck", help="finite-difference self-test of the tensor engine")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FedSSLError as exc:
        print(f"error [{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except FileNotFoundError as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return 11
