"""Command-line entry point: ``archxform {transform,train-baseline,bench,oracle,export}``.

Exit codes (stable):

====  ==========================================================
0     success (bench: at least one run succeeded)
2     configuration error (the message names the offending key)
3     training diverged (non-finite loss)
4     discretization disconnected the network under ``reject``
5     run failure (data error, or every bench run failed)
6     checkpoint error (integrity, version, or config-hash mismatch)
====  ==========================================================
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig, load_config
from .data import DataError
from .discretize import DisconnectedError, decisions_from_json, decisions_to_json
from .graph import build_network, to_dot, to_json
from .harness import emit_report, enumerate_discrete, make_dataset, run_experiment
from .mixed import theta_to_csv
from .trainer import TrainingDiverged, run_two_stage

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_DISCONNECTED = 4
EXIT_FAILED = 5
EXIT_CHECKPOINT = 6

log = logging.getLogger("archxform")


def _load(args, **extra) -> RunConfig:
    overrides = {"seed": args.seed, "out_dir": args.out, **extra}
    if getattr(args, "workers", None) is not None:
        overrides["workers"] = args.workers
    return load_config(args.config, **overrides)


def _metrics_csv(metrics, config_hash: str) -> str:
    import io

    buf = io.StringIO()
    buf.write(f"# config_hash: {config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "stage", "loss", "train_acc", "test_acc", "seconds"])
    for m in metrics:
        w.writerow([m.epoch, m.stage, repr(m.loss), repr(m.train_acc), repr(m.test_acc), f"{m.seconds:.3f}"])
    return buf.getvalue()


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def cmd_transform(args, baseline: bool = False) -> int:
    cfg = _load(args, **({"transform_mode": "off"} if baseline else {}))
    h = cfg.hash()
    os.makedirs(cfg.out_dir, exist_ok=True)
    dataset = make_dataset(cfg)
    net = build_network(cfg.model, cfg.net_config())
    ck_path = os.path.join(cfg.out_dir, "checkpoint.json")
    model = run_two_stage(cfg.train_config(), dataset, net, on_epoch=lambda s: ckpt.save_checkpoint(ck_path, s, h))
    _write(os.path.join(cfg.out_dir, "architecture.json"), to_json(model.network, config_hash=h) + "\n")
    _write(os.path.join(cfg.out_dir, "decisions.json"), decisions_to_json(model.decisions, h))
    _write(os.path.join(cfg.out_dir, "metrics.csv"), _metrics_csv(model.metrics, h))
    _write(os.path.join(cfg.out_dir, "diff.dot"), to_dot(model.original, model.network, header=f"config_hash: {h}"))
    print(f"test accuracy {model.test_accuracy:.2f}%  changed edges {model.arch_diff.n_changed}  "
          f"wall {model.wall_seconds:.1f}s  -> {cfg.out_dir}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load(args)
    report = run_experiment(cfg)
    for fmt in ("csv", "markdown", "dot-bundle"):
        out = cfg.out_dir if fmt != "dot-bundle" else os.path.join(cfg.out_dir, "dot")
        emit_report(report, fmt, out)
    with open(os.path.join(cfg.out_dir, "report.md"), encoding="utf-8") as fh:
        print(fh.read())
    if report.runs and len(report.failures()) == len(report.runs):
        return EXIT_FAILED
    return EXIT_OK


def cmd_oracle(args) -> int:
    cfg = _load(args)
    dataset = make_dataset(cfg)
    net = build_network(cfg.model, cfg.net_config())
    tc = cfg.train_config()
    model = run_two_stage(tc, dataset, net)
    result = enumerate_discrete(net, dataset, cfg.oracle_epochs, tc, selected=model.decisions)
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "oracle.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# config_hash: {cfg.hash()}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", *result.edge_ids, "accuracy_pct", "selected"])
        for cand, acc in result.ranking:
            w.writerow([result.rank_of(cand), *cand, f"{acc:.4f}", int(cand == result.selected)])
    for cand, acc in result.ranking:
        mark = "  <- selected" if cand == result.selected else ""
        print(f"{result.rank_of(cand):4d}  {' '.join(f'{c:>4}' for c in cand)}  {acc:6.2f}%{mark}")
    print(f"{result.n_candidates} candidates; selected architecture rank {result.selected_rank} "
          f"({'top half' if result.in_top_half() else 'bottom half'})")
    return EXIT_OK


def cmd_export(args) -> int:
    state, h = ckpt.load_checkpoint(args.checkpoint)
    if args.decisions:
        with open(args.decisions, encoding="utf-8") as fh:
            _, dh = decisions_from_json(fh.read())
        if dh != h:
            raise ckpt.CheckpointError(f"config hash mismatch: checkpoint {h} vs decisions {dh}")
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out, exist_ok=True)
    if args.format == "json":
        path = os.path.join(out, "architecture.json")
        _write(path, to_json(state.network, config_hash=h) + "\n")
    elif args.format == "dot":
        path = os.path.join(out, "architecture.dot")
        _write(path, to_dot(state.original, state.network, header=f"config_hash: {h}"))
    else:
        if state.arch is None:
            raise ckpt.CheckpointError("checkpoint has no theta table (baseline run)")
        path = os.path.join(out, "theta.csv")
        _write(path, theta_to_csv(state.arch, h))
    print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="archxform", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_opts(sp, workers=False):
        sp.add_argument("--config", required=True, metavar="PATH")
        sp.add_argument("--out", metavar="DIR")
        sp.add_argument("--seed", type=int, metavar="N")
        if workers:
            sp.add_argument("--workers", type=int, metavar="N")

    run_opts(sub.add_parser("transform", help="two-stage transformation and training"))
    run_opts(sub.add_parser("train-baseline", help="train the untransformed network"))
    run_opts(sub.add_parser("bench", help="multi-seed experiment report"), workers=True)
    run_opts(sub.add_parser("oracle", help="exhaustive ranking of discrete architectures"))
    ex = sub.add_parser("export", help="architecture JSON / DOT / theta CSV from a checkpoint")
    ex.add_argument("checkpoint")
    ex.add_argument("--format", choices=("json", "dot", "theta-csv"), default="json")
    ex.add_argument("--out", metavar="DIR")
    ex.add_argument("--decisions", metavar="PATH", help="decisions JSON that must share the checkpoint's hash")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {
        "transform": cmd_transform,
        "train-baseline": lambda a: cmd_transform(a, baseline=True),
        "bench": cmd_bench,
        "oracle": cmd_oracle,
        "export": cmd_export,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DisconnectedError as exc:
        print(f"disconnected: {exc}", file=sys.stderr)
        return EXIT_DISCONNECTED
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ckpt.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
