"""Multi-seed experiments, aggregation, exhaustive-search oracle, and reports."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import engine as E
from .config import METHOD_MODES, RunConfig
from .data import Dataset, gen_synthetic, load_cifar10
from .discretize import CHOICES, Decisions
from .graph import ArchDiff, Network, apply_decisions, build_network, count_cost, identity_legal, to_dot
from .model import accuracy, init_weights
from .trainer import STREAM_OMEGA, TrainConfig, TrainState, network_train_epoch, rng_stream, run_two_stage

log = logging.getLogger(__name__)

__all__ = [
    "Aggregate",
    "RunResult",
    "ExperimentReport",
    "OracleResult",
    "aggregate",
    "make_dataset",
    "run_experiment",
    "enumerate_discrete",
    "emit_report",
    "report_to_csv",
    "parse_report_csv",
    "rows_to_csv",
    "REPORT_COLUMNS",
]

REPORT_COLUMNS = ("model", "method", "seed", "accuracy_pct", "wall_seconds", "params", "flops", "changed_edges",
                  "status")


@dataclass(frozen=True)
class Aggregate:
    mean: float
    std: float
    n: int

    @property
    def single(self) -> bool:
        return self.n == 1

    def display(self) -> tuple[str, str]:
        return f"{self.mean:.2f}", f"{self.std:.2f}"


def aggregate(values) -> Aggregate:
    """Mean and sample (n-1) standard deviation; std is 0 for a single value."""
    x = np.asarray(list(values), dtype=np.float64)
    if x.size == 0:
        raise ValueError("aggregate of an empty sequence")
    mean = float(math.fsum(x) / x.size)
    if x.size == 1:
        return Aggregate(mean, 0.0, 1)
    var = math.fsum((v - mean) ** 2 for v in x) / (x.size - 1)
    return Aggregate(mean, math.sqrt(var), int(x.size))


@dataclass
class RunResult:
    model: str
    method: str
    seed: int
    accuracy_pct: float = float("nan")
    wall_seconds: float = 0.0
    params: int = 0
    flops: int = 0
    changed_edges: int = 0
    status: str = "ok"
    arch_diff: ArchDiff | None = None
    original: Network | None = None
    network: Network | None = None
    decisions: Decisions | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class ExperimentReport:
    model: str
    methods: tuple[str, ...]
    seeds: tuple[int, ...]
    runs: list[RunResult]
    config_hash: str = ""

    def runs_for(self, method: str) -> list[RunResult]:
        return [r for r in self.runs if r.method == method]

    def aggregate(self, method: str) -> Aggregate | None:
        ok = [r.accuracy_pct for r in self.runs_for(method) if r.ok]
        return aggregate(ok) if ok else None

    def total_cost_seconds(self, method: str) -> float:
        return float(sum(r.wall_seconds for r in self.runs_for(method)))

    def failures(self) -> list[RunResult]:
        return [r for r in self.runs if not r.ok]


def make_dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset == "cifar10":
        return load_cifar10(cfg.cifar_dir, cfg.train_per_class, cfg.test_per_class, cfg.normalize_mean,
                            cfg.normalize_std)
    return gen_synthetic(cfg.synthetic_spec())


def _one_run(cfg: RunConfig, method: str, seed: int, dataset: Dataset | None = None) -> RunResult:
    res = RunResult(cfg.model, method, seed)
    t0 = time.perf_counter()
    try:
        dataset = dataset if dataset is not None else make_dataset(cfg)
        net = build_network(cfg.model, cfg.net_config())
        tc = cfg.train_config(transform_mode=METHOD_MODES[method], seed=seed)
        model = run_two_stage(tc, dataset, net)
        cost = count_cost(model.network)
        res.accuracy_pct = model.test_accuracy
        res.params, res.flops = cost.params, cost.flops
        res.arch_diff = model.arch_diff
        res.changed_edges = model.arch_diff.n_changed
        res.original, res.network, res.decisions = model.original, model.network, model.decisions
    except Exception as exc:  # a failed seed is reported, never dropped
        res.status = f"failed: {type(exc).__name__}: {exc}"
        log.error("run %s seed %d failed\n%s", method, seed, traceback.format_exc())
    res.wall_seconds = time.perf_counter() - t0
    return res


def run_experiment(cfg: RunConfig, dataset: Dataset | None = None, workers: int | None = None) -> ExperimentReport:
    """Every (method, seed) pair, each from its own seed-derived RNG streams."""
    jobs = [(m, s) for m in cfg.methods for s in cfg.seeds]
    workers = cfg.workers if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_one_run, cfg, m, s, dataset) for m, s in jobs]
            runs = [f.result() for f in futures]
    else:
        dataset = dataset if dataset is not None else make_dataset(cfg)
        runs = [_one_run(cfg, m, s, dataset) for m, s in jobs]
    return ExperimentReport(cfg.model, tuple(cfg.methods), tuple(cfg.seeds), runs, cfg.hash())


# --------------------------------------------------------------------------
# exhaustive oracle


@dataclass
class OracleResult:
    ranking: list[tuple[tuple[str, ...], float]]  # (choices in edge order, accuracy), best first
    edge_ids: tuple[str, ...]
    selected: tuple[str, ...] | None = None
    selected_rank: int | None = None
    selected_accuracy: float | None = None

    @property
    def n_candidates(self) -> int:
        return len(self.ranking)

    def rank_of(self, choices: tuple[str, ...]) -> int:
        """Competition rank: 1 + number of candidates strictly more accurate."""
        acc = dict(self.ranking)[tuple(choices)]
        return 1 + sum(a > acc for _, a in self.ranking)

    def in_top_half(self) -> bool:
        return self.selected_rank is not None and self.selected_rank <= math.ceil(self.n_candidates / 2)


def candidate_space(net: Network) -> tuple[list[str], list[tuple[str, ...]]]:
    """Edge ids and every legal choice tuple (identity excluded where illegal)."""
    edges = net.edges()
    ids = list(edges)
    options = [tuple(c for c in CHOICES if c != "id" or identity_legal(edges[e][1].op)) for e in ids]
    return ids, list(itertools.product(*options))


def _short_train(net: Network, choices: dict, dataset: Dataset, tc: TrainConfig, epochs: int) -> float:
    base = init_weights(net, rng_stream(tc.seed, STREAM_OMEGA), np.dtype(tc.dtype))
    cand = apply_decisions(net, choices)
    keep = {"stem", "head"} | {eid for eid, (_, e) in cand.edges().items() if e.op.weight_count}
    weights = {k: E.Parameter(v.data, name=k) for k, v in base.items() if k.rsplit(".", 1)[0] in keep}
    state = TrainState(tc, net, cand, weights, None, E.SGD(list(weights.values()), tc.lr_omega, tc.momentum), None,
                       stage="network")
    for _ in range(epochs):
        network_train_epoch(state, dataset, evaluate=False)
    return accuracy(cand, weights, dataset.test_images.astype(tc.dtype), dataset.test_labels)


def enumerate_discrete(net: Network, dataset: Dataset, epochs: int, config: TrainConfig,
                       selected: Decisions | dict | None = None, max_candidates: int = 243) -> OracleResult:
    """Train every legal discrete architecture from the same initial weights.

    Each candidate starts from the weights ``init_weights`` gives the
    original network under ``config.seed`` (removed edges drop theirs) and
    trains ``epochs`` epochs of plain SGD.  Disconnected candidates are
    trained as they are.
    """
    ids, space = candidate_space(net)
    if len(space) > max_candidates:
        raise ValueError(f"{len(space)} candidates exceed the budget of {max_candidates}")
    scored = []
    for cand in space:
        acc = _short_train(net, dict(zip(ids, cand)), dataset, config, epochs)
        scored.append((cand, acc))
        log.info("oracle %s -> %.2f%%", ",".join(cand), acc)
    ranking = sorted(scored, key=lambda t: -t[1])  # stable: ties keep enumeration order
    result = OracleResult(ranking, tuple(ids))
    if selected is not None:
        choices = getattr(selected, "choices", selected)
        key = tuple(choices[e] for e in ids)
        result.selected = key
        result.selected_rank = result.rank_of(key)
        result.selected_accuracy = dict(ranking)[key]
    return result


# --------------------------------------------------------------------------
# reports


def rows_to_csv(rows, header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([r[c] for c in REPORT_COLUMNS])
    return buf.getvalue()


def _row(r: RunResult) -> dict:
    return {
        "model": r.model,
        "method": r.method,
        "seed": str(r.seed),
        "accuracy_pct": f"{r.accuracy_pct:.4f}",
        "wall_seconds": f"{r.wall_seconds:.3f}",
        "params": str(r.params),
        "flops": str(r.flops),
        "changed_edges": str(r.changed_edges),
        "status": r.status,
    }


def report_to_csv(report: ExperimentReport) -> str:
    return rows_to_csv([_row(r) for r in report.runs], f"config_hash: {report.config_hash}")


def parse_report_csv(text: str) -> tuple[list[dict], str | None]:
    comment = None
    lines = text.splitlines(keepends=True)
    if lines and lines[0].startswith("# "):
        comment = lines[0][2:].rstrip("\n")
        lines = lines[1:]
    rows = list(csv.DictReader(lines))
    return rows, comment


def _markdown(report: ExperimentReport) -> str:
    out = [f"<!-- config_hash: {report.config_hash} -->", f"## {report.model}", "",
           "| Model | Method | Avg Acc (%) | Std (%) | n | Total Cost (hours) |",
           "|---|---|---:|---:|---:|---:|"]
    for m in report.methods:
        agg = report.aggregate(m)
        hours = report.total_cost_seconds(m) / 3600.0
        if agg is None:
            out.append(f"| {report.model} | {m} | - | - | 0 | {hours:.4f} |")
        else:
            mean, std = agg.display()
            n = f"{agg.n}" if agg.n == len(report.seeds) else f"{agg.n} of {len(report.seeds)}"
            out.append(f"| {report.model} | {m} | {mean} | {std} | {n} | {hours:.4f} |")
    out += ["", "| Model | Method | " + " | ".join(f"Seed {s}" for s in report.seeds) + " |",
            "|---|---|" + "---:|" * len(report.seeds)]
    for m in report.methods:
        by_seed = {r.seed: r for r in report.runs_for(m)}
        cells = []
        for s in report.seeds:
            r = by_seed.get(s)
            cells.append("missing" if r is None else (f"{r.accuracy_pct:.2f}" if r.ok else "failed"))
        out.append(f"| {report.model} | {m} | " + " | ".join(cells) + " |")
    fails = report.failures()
    if fails:
        out += ["", "Failed runs:", ""] + [f"- {r.method} seed {r.seed}: {r.status}" for r in fails]
    return "\n".join(out) + "\n"


def emit_report(report: ExperimentReport, fmt: str, out_dir) -> list[str]:
    """Write ``report.csv``, ``report.md``, or one DOT file per transformed cell."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if fmt == "csv":
        path = os.path.join(out_dir, "report.csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(report_to_csv(report))
        written.append(path)
    elif fmt == "markdown":
        path = os.path.join(out_dir, "report.md")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(_markdown(report))
        written.append(path)
    elif fmt == "dot-bundle":
        for r in report.runs:
            if METHOD_MODES.get(r.method) == "off" or not r.ok or r.original is None:
                continue
            for ci in range(len(r.original.cells)):
                path = os.path.join(out_dir, f"{r.method}_seed{r.seed}_cell{ci}.dot")
                with open(path, "w", encoding="utf-8") as fh:
                    fh.write(to_dot(r.original, r.network, [ci], header=f"config_hash: {report.config_hash}"))
                written.append(path)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return written
