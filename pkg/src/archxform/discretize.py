"""Turn a trained theta table into per-edge choices, guarding connectivity."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .graph import GraphError, Network, apply_decisions, edge_id, identity_legal
from .mixed import ArchParams, ThetaRow

log = logging.getLogger(__name__)

__all__ = [
    "CHOICES",
    "POLICIES",
    "Decisions",
    "DisconnectedError",
    "select_ops",
    "select_row",
    "guard_and_repair",
    "all_same",
    "decisions_to_json",
    "decisions_from_json",
]

CHOICES = ("none", "id", "same")
POLICIES = ("repair-to-identity", "reject", "allow-with-warning")
# tie priority, highest first
_PRIORITY = (2, 1, 0)


class DisconnectedError(GraphError):
    """Discretization would leave a cell output without a non-zero path."""

    def __init__(self, message: str, nodes: list[str] | None = None):
        super().__init__(message)
        self.nodes = nodes or []


@dataclass
class Decisions:
    choices: dict[str, str]
    provenance: dict[str, ThetaRow] = field(default_factory=dict)
    repaired: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __getitem__(self, eid: str) -> str:
        return self.choices[eid]

    def __iter__(self):
        return iter(self.choices)

    def __len__(self) -> int:
        return len(self.choices)

    def counts(self) -> dict[str, int]:
        return {c: sum(v == c for v in self.choices.values()) for c in CHOICES}

    def key(self) -> tuple[str, ...]:
        return tuple(self.choices[k] for k in sorted(self.choices))


def select_row(row: ThetaRow) -> str:
    """Argmax over the legal entries of one row; ties go same > id > none."""
    vals = (row.theta_none, row.theta_id, row.theta_same)
    best = None
    for j in _PRIORITY:
        if j == 1 and not row.mask_id:
            continue
        if best is None or vals[j] > vals[best]:
            best = j
    return CHOICES[best]


def select_ops(arch: ArchParams | Mapping[str, ThetaRow]) -> Decisions:
    """Per-edge argmax decisions from a theta table."""
    table = arch.edge_table() if isinstance(arch, ArchParams) else dict(arch)
    if not table:
        raise ValueError("empty theta table")
    return Decisions({eid: select_row(row) for eid, row in table.items()}, dict(table))


def all_same(net: Network) -> Decisions:
    return Decisions({eid: "same" for eid in net.edge_ids()})


def _disconnected_cells(net: Network, d: Decisions) -> list[int]:
    out = apply_decisions(net, d)
    return [ci for ci, cell in enumerate(out.cells) if not any(e.dst == cell.output for e in cell.edges)] \
        if out.disconnected else []


def _cut_candidates(net: Network, d: Decisions, ci: int) -> list[str]:
    """None-decided edges whose revival links input-reachable nodes to output-reaching ones."""
    cell = net.cells[ci]
    live = [e for e in cell.edges if d.choices.get(edge_id(ci, e.index), "same") != "none"]
    fwd, rev = {}, {}
    for e in live:
        fwd.setdefault(e.src, []).append(e.dst)
        rev.setdefault(e.dst, []).append(e.src)

    def reach(start, adj):
        seen, stack = {start}, [start]
        while stack:
            for m in adj.get(stack.pop(), ()):
                if m not in seen:
                    seen.add(m)
                    stack.append(m)
        return seen

    from_in = reach(cell.input, fwd)
    to_out = reach(cell.output, rev)
    dead = [e for e in cell.edges if d.choices.get(edge_id(ci, e.index)) == "none" and e.src in from_in]
    cut = [edge_id(ci, e.index) for e in dead if e.dst in to_out]
    if cut:
        return cut
    # no single flip reconnects: grow the input-reachable frontier instead
    return [edge_id(ci, e.index) for e in dead if e.dst not in from_in]


def guard_and_repair(d: Decisions, net: Network, policy: str = "repair-to-identity") -> Decisions:
    """Check that ``d`` keeps every cell connected; act on ``policy`` if not.

    ``repair-to-identity`` repeatedly flips, on the disconnecting cut, the
    none-decided edge with the highest theta_id (theta_same breaks ties) to
    id, or to same where identity is illegal.  ``reject`` raises
    :class:`DisconnectedError`; ``allow-with-warning`` logs and passes
    ``d`` through.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown repair policy {policy!r}")
    missing = set(net.edge_ids()) - set(d.choices)
    if missing:
        raise GraphError(f"decisions do not cover edges: {sorted(missing)}")
    d = Decisions(dict(d.choices), dict(d.provenance), list(d.repaired), list(d.warnings))
    bad = _disconnected_cells(net, d)
    if not bad:
        return d
    names = [f"cell {ci} output node {net.cells[ci].output}" for ci in bad]
    if policy == "reject":
        raise DisconnectedError("decisions disconnect " + ", ".join(names), names)
    if policy == "allow-with-warning":
        msg = "WARNING: decisions disconnect " + ", ".join(names) + "; zero tensors reach the next layer"
        log.warning(msg)
        d.warnings.append(msg)
        return d
    edges = net.edges()
    while bad:
        ci = bad[0]
        cands = _cut_candidates(net, d, ci)
        if not cands:
            raise DisconnectedError(f"no repair candidate for cell {ci}", names)

        def score(eid):
            row = d.provenance.get(eid)
            if row is None:
                return (0.0, 0.0)
            return (row.theta_id if row.mask_id else -np.inf, row.theta_same)

        # stable under ties: first candidate in edge order wins
        best = max(cands, key=score)
        op = edges[best][1].op
        d.choices[best] = "id" if identity_legal(op) and (best not in d.provenance or d.provenance[best].mask_id) else "same"
        d.repaired.append(best)
        log.info("repaired edge %s -> %s", best, d.choices[best])
        bad = _disconnected_cells(net, d)
    return d


def decisions_to_json(d: Decisions, config_hash: str | None = None) -> str:
    edges = {}
    for eid in sorted(d.choices):
        row = d.provenance.get(eid)
        edges[eid] = {
            "choice": d.choices[eid],
            "theta": [row.theta_none, row.theta_id, row.theta_same] if row is not None else None,
            "repaired": eid in d.repaired,
        }
        if row is not None:
            edges[eid]["mask_id"] = row.mask_id
    doc = {"config_hash": config_hash, "edges": edges}
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def decisions_from_json(text: str) -> tuple[Decisions, str | None]:
    doc = json.loads(text)
    edges = doc["edges"]
    choices, prov, repaired = {}, {}, []
    for eid, rec in edges.items():
        if rec["choice"] not in CHOICES:
            raise ValueError(f"edge {eid}: unknown choice {rec['choice']!r}")
        choices[eid] = rec["choice"]
        if rec.get("theta") is not None:
            n, i, s = rec["theta"]
            prov[eid] = ThetaRow(n, i, s, bool(rec.get("mask_id", True)))
        if rec.get("repaired"):
            repaired.append(eid)
    return Decisions(choices, prov, repaired), doc.get("config_hash")
