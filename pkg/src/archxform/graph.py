"""Architecture graphs: operations, cells, networks, and rewrites on them.

A :class:`Network` is a stem operation, a sequence of cells, and a fixed
head (global average pool followed by a dense classifier).  Each cell is a
small DAG whose node ``nodes[0]`` is the input, ``nodes[-1]`` the output, and
whose nodes sum the outputs of their incoming edges.

Networks are immutable; every rewrite returns a new value.
"""

from __future__ import annotations

import dataclasses
import enum
import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping

__all__ = [
    "OpKind",
    "OperationSpec",
    "Edge",
    "Cell",
    "Network",
    "NetConfig",
    "CostReport",
    "EdgeChange",
    "ArchDiff",
    "ValidationReport",
    "GraphError",
    "ShapeError",
    "TEMPLATES",
    "edge_id",
    "build_network",
    "validate",
    "infer_shapes",
    "node_shapes",
    "identity_legal",
    "count_cost",
    "apply_decisions",
    "prune",
    "diff",
    "to_json",
    "from_json",
    "to_dot",
]


class GraphError(ValueError):
    pass


class ShapeError(GraphError):
    pass


class OpKind(str, enum.Enum):
    CONV3X3_RELU = "Conv3x3ReLU"
    CONV1X1_RELU = "Conv1x1ReLU"
    DENSE_RELU = "DenseReLU"
    AVGPOOL2X2 = "AvgPool2x2"
    IDENTITY = "Identity"
    ZERO = "Zero"


_SPATIAL = {OpKind.CONV3X3_RELU, OpKind.CONV1X1_RELU, OpKind.AVGPOOL2X2}
_KERNEL = {OpKind.CONV3X3_RELU: 3, OpKind.CONV1X1_RELU: 1}

Shape = tuple  # (C, H, W) feature map or (F,) vector


@dataclass(frozen=True)
class OperationSpec:
    kind: OpKind
    in_channels: int
    out_channels: int
    stride: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", OpKind(self.kind))
        for name in ("in_channels", "out_channels", "stride"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise GraphError(f"{self.kind.value}: {name} must be a positive integer, got {v!r}")
        if self.kind in (OpKind.IDENTITY, OpKind.AVGPOOL2X2) and self.in_channels != self.out_channels:
            raise GraphError(f"{self.kind.value} cannot change channel count")
        if self.kind == OpKind.IDENTITY and self.stride != 1:
            raise GraphError("Identity has stride 1")
        if self.kind == OpKind.DENSE_RELU and self.stride != 1:
            raise GraphError("DenseReLU has no stride")

    @property
    def weight_count(self) -> int:
        if self.kind in _KERNEL:
            k = _KERNEL[self.kind]
            return self.in_channels * self.out_channels * k * k + self.out_channels
        if self.kind == OpKind.DENSE_RELU:
            return self.in_channels * self.out_channels + self.out_channels
        return 0

    def out_shape(self, in_shape: Shape) -> Shape:
        in_shape = tuple(in_shape)
        if in_shape[0] != self.in_channels:
            raise ShapeError(f"{self.kind.value} expects {self.in_channels} channels, got shape {in_shape}")
        if self.kind == OpKind.DENSE_RELU:
            if len(in_shape) != 1:
                raise ShapeError(f"DenseReLU expects a vector input, got {in_shape}")
            return (self.out_channels,)
        if len(in_shape) == 1:
            if self.kind in _SPATIAL:
                raise ShapeError(f"{self.kind.value} expects a feature map, got {in_shape}")
            return (self.out_channels,)
        _, h, w = in_shape
        s = 2 if self.kind == OpKind.AVGPOOL2X2 else self.stride
        if h // s < 1 or w // s < 1:
            raise ShapeError(f"{self.kind.value} reduces {in_shape} to nothing")
        return (self.out_channels, h // s, w // s)

    def flops(self, in_shape: Shape) -> int:
        """Multiply-accumulate count for one sample."""
        out = self.out_shape(in_shape)
        if self.kind in _KERNEL:
            k = _KERNEL[self.kind]
            return out[1] * out[2] * self.out_channels * self.in_channels * k * k
        if self.kind == OpKind.DENSE_RELU:
            return self.in_channels * self.out_channels
        if self.kind == OpKind.AVGPOOL2X2:
            return out[0] * out[1] * out[2] * 4
        return 0

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "in": self.in_channels, "out": self.out_channels, "stride": self.stride}

    @classmethod
    def from_dict(cls, d: Mapping) -> "OperationSpec":
        return cls(OpKind(d["kind"]), int(d["in"]), int(d["out"]), int(d.get("stride", 1)))


def identity_legal(op: OperationSpec) -> bool:
    """Whether swapping ``op`` for Identity keeps the edge's output shape."""
    if op.kind == OpKind.AVGPOOL2X2:
        return False
    return op.in_channels == op.out_channels and op.stride == 1


@dataclass(frozen=True)
class Edge:
    index: int  # position in the template; stable across rewrites
    src: int
    dst: int
    op: OperationSpec


@dataclass(frozen=True)
class Cell:
    name: str  # template key; cells with equal names share theta rows in cell mode
    nodes: tuple[int, ...]
    edges: tuple[Edge, ...]
    out_shape: Shape

    @property
    def input(self) -> int:
        return self.nodes[0]

    @property
    def output(self) -> int:
        return self.nodes[-1]

    def in_edges(self, node: int) -> list[Edge]:
        return [e for e in self.edges if e.dst == node]


def edge_id(cell_index: int, edge_index: int) -> str:
    return f"c{cell_index}.e{edge_index}"


@dataclass(frozen=True)
class Network:
    template: str
    input_shape: Shape
    num_classes: int
    stem: OperationSpec
    cells: tuple[Cell, ...]
    disconnected: bool = False

    @property
    def head_in(self) -> int:
        return self.cells[-1].out_shape[0] if self.cells else self.stem.out_channels

    def edges(self) -> dict[str, tuple[int, Edge]]:
        """Edge id -> (cell index, edge), in cell then template order."""
        return {edge_id(ci, e.index): (ci, e) for ci, cell in enumerate(self.cells) for e in cell.edges}

    def edge_ids(self) -> list[str]:
        return list(self.edges())


@dataclass(frozen=True)
class NetConfig:
    channels: int = 8
    num_classes: int = 10
    input_shape: Shape = (3, 16, 16)
    cells: int | None = None
    edges_per_cell: int = 4


@dataclass(frozen=True)
class CostReport:
    params: int
    flops: int

    def __le__(self, other: "CostReport") -> bool:
        return self.params <= other.params and self.flops <= other.flops


@dataclass(frozen=True)
class EdgeChange:
    edge_id: str
    original: OpKind
    new: OpKind

    @property
    def changed(self) -> bool:
        return self.original != self.new


@dataclass(frozen=True)
class ArchDiff:
    records: tuple[EdgeChange, ...]

    @property
    def changed(self) -> list[EdgeChange]:
        return [r for r in self.records if r.changed]

    @property
    def n_changed(self) -> int:
        return len(self.changed)

    def by_id(self) -> dict[str, EdgeChange]:
        return {r.edge_id: r for r in self.records}


@dataclass
class ValidationReport:
    acyclic: bool = True
    shapes_ok: bool = True
    connected: bool = True
    findings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.acyclic and self.shapes_ok

    @property
    def disconnected(self) -> bool:
        return not self.connected


# --------------------------------------------------------------------------
# templates


def _conv3(c_in, c_out, stride=1):
    return OperationSpec(OpKind.CONV3X3_RELU, c_in, c_out, stride)


def _conv1(c_in, c_out, stride=1):
    return OperationSpec(OpKind.CONV1X1_RELU, c_in, c_out, stride)


def _tiny_cell(name: str, c: int, spatial: Shape) -> Cell:
    edges = (
        Edge(0, 0, 1, _conv3(c, c)),
        Edge(1, 0, 2, _conv1(c, c)),
        Edge(2, 1, 2, _conv3(c, c)),
        Edge(3, 2, 3, _conv3(c, c)),
    )
    return Cell(name, (0, 1, 2, 3), edges, (c,) + tuple(spatial))


def _residual_cell(c: int, spatial: Shape) -> Cell:
    edges = (
        Edge(0, 0, 1, _conv3(c, c)),
        Edge(1, 1, 2, _conv3(c, c)),
        Edge(2, 0, 2, OperationSpec(OpKind.IDENTITY, c, c)),
    )
    return Cell("normal", (0, 1, 2), edges, (c,) + tuple(spatial))


def _reduction_cell(c: int, spatial: Shape) -> Cell:
    c2 = 2 * c
    edges = (
        Edge(0, 0, 1, _conv3(c, c2, stride=2)),
        Edge(1, 1, 3, _conv3(c2, c2)),
        Edge(2, 0, 2, OperationSpec(OpKind.AVGPOOL2X2, c, c)),
        Edge(3, 2, 3, _conv1(c, c2)),
    )
    h, w = spatial
    return Cell("reduce", (0, 1, 2, 3), edges, (c2, h // 2, w // 2))


def _build_tiny(cfg: NetConfig) -> tuple[Cell, ...]:
    if cfg.cells not in (None, 1):
        raise GraphError("tiny has exactly one cell")
    return (_tiny_cell("tiny", cfg.channels, cfg.input_shape[1:]),)


def _build_plain(cfg: NetConfig) -> tuple[Cell, ...]:
    n = 8 if cfg.cells is None else cfg.cells
    if n < 1:
        raise GraphError("plain-cnn needs at least one cell")
    if cfg.edges_per_cell != 4:
        raise GraphError("plain-cnn cells have 4 edges")
    return tuple(_tiny_cell("plain", cfg.channels, cfg.input_shape[1:]) for _ in range(n))


def _build_resnet(cfg: NetConfig) -> tuple[Cell, ...]:
    n = 3 if cfg.cells is None else cfg.cells
    if n < 1:
        raise GraphError("resnet-mini needs at least one cell")
    c, spatial = cfg.channels, tuple(cfg.input_shape[1:])
    cells = []
    for i in range(n):
        if n > 1 and i == n // 2:
            if spatial[0] < 2 or spatial[1] < 2:
                raise GraphError(f"input {cfg.input_shape} too small for a reduction cell")
            cell = _reduction_cell(c, spatial)
            c, spatial = cell.out_shape[0], cell.out_shape[1:]
        else:
            cell = _residual_cell(c, spatial)
        cells.append(cell)
    return tuple(cells)


TEMPLATES = {"tiny": _build_tiny, "plain-cnn": _build_plain, "resnet-mini": _build_resnet}


def build_network(template_name: str, config: NetConfig | Mapping | None = None) -> Network:
    """Instantiate one of the built-in templates.

    ``tiny`` is one 4-edge cell; ``plain-cnn`` repeats that cell (8 times by
    default); ``resnet-mini`` stacks residual cells (conv-conv plus an
    identity skip) around one stride-2 reduction cell.
    """
    if template_name not in TEMPLATES:
        raise GraphError(f"unknown template {template_name!r}; expected one of {sorted(TEMPLATES)}")
    if config is None:
        config = NetConfig()
    elif isinstance(config, Mapping):
        config = NetConfig(**config)
    shape = tuple(config.input_shape)
    if len(shape) != 3 or any(not isinstance(s, int) or s < 1 for s in shape):
        raise GraphError(f"input_shape must be three positive ints, got {config.input_shape!r}")
    for name in ("channels", "num_classes"):
        v = getattr(config, name)
        if not isinstance(v, int) or v < 1:
            raise GraphError(f"{name} must be a positive integer, got {v!r}")
    config = dataclasses.replace(config, input_shape=shape)
    cells = TEMPLATES[template_name](config)
    net = Network(template_name, shape, config.num_classes, _conv3(shape[0], config.channels), cells)
    report = validate(net)
    if not report.ok or report.disconnected:
        raise GraphError("template produced an invalid network: " + "; ".join(report.findings))
    return net


# --------------------------------------------------------------------------
# analysis


def _topo_order(cell: Cell) -> list[int] | None:
    indeg = {n: 0 for n in cell.nodes}
    succ = defaultdict(list)
    for e in cell.edges:
        if e.src not in indeg or e.dst not in indeg:
            return None
        indeg[e.dst] += 1
        succ[e.src].append(e.dst)
    ready = [n for n in cell.nodes if indeg[n] == 0]
    order = []
    while ready:
        n = ready.pop(0)
        order.append(n)
        for m in succ[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                ready.append(m)
    return order if len(order) == len(cell.nodes) else None


def _reachable(start: int, adj: Mapping[int, Iterable[int]]) -> set[int]:
    seen, stack = {start}, [start]
    while stack:
        n = stack.pop()
        for m in adj.get(n, ()):
            if m not in seen:
                seen.add(m)
                stack.append(m)
    return seen


def _live_adjacency(cell: Cell) -> tuple[dict, dict]:
    fwd, rev = defaultdict(list), defaultdict(list)
    for e in cell.edges:
        if e.op.kind != OpKind.ZERO:
            fwd[e.src].append(e.dst)
            rev[e.dst].append(e.src)
    return fwd, rev


def _cell_connected(cell: Cell) -> bool:
    fwd, _ = _live_adjacency(cell)
    return cell.output in _reachable(cell.input, fwd)


def node_shapes(net: Network) -> list[dict[int, Shape]]:
    """Per-cell map node -> feature shape.  Raises :class:`ShapeError`."""
    shapes_per_cell = []
    h = net.stem.out_shape(net.input_shape)
    for ci, cell in enumerate(net.cells):
        order = _topo_order(cell)
        if order is None:
            raise GraphError(f"cell {ci} is not a DAG")
        shapes = {cell.input: h}
        for node in order:
            if node == cell.input:
                continue
            incoming = cell.in_edges(node)
            outs = []
            for e in incoming:
                if e.src not in shapes:
                    raise ShapeError(f"cell {ci}: node {e.src} has undefined shape")
                outs.append(e.op.out_shape(shapes[e.src]))
            if outs:
                if any(o != outs[0] for o in outs):
                    raise ShapeError(f"cell {ci}: shape mismatch summing at node {node}: {sorted(set(outs))}")
                shapes[node] = outs[0]
            elif node == cell.output:
                shapes[node] = tuple(cell.out_shape)
        if shapes.get(cell.output) != tuple(cell.out_shape):
            raise ShapeError(f"cell {ci}: output shape {shapes.get(cell.output)} != declared {cell.out_shape}")
        shapes_per_cell.append(shapes)
        h = shapes[cell.output]
    return shapes_per_cell


def infer_shapes(net: Network, input_shape: Shape | None = None) -> dict[str, tuple[Shape, Shape]]:
    """Edge id -> (input shape, output shape)."""
    if input_shape is not None and tuple(input_shape) != tuple(net.input_shape):
        net = dataclasses.replace(net, input_shape=tuple(input_shape))
    per_cell = node_shapes(net)
    out = {}
    for ci, (cell, shapes) in enumerate(zip(net.cells, per_cell)):
        for e in cell.edges:
            out[edge_id(ci, e.index)] = (shapes[e.src], e.op.out_shape(shapes[e.src]))
    return out


def validate(net: Network) -> ValidationReport:
    rep = ValidationReport()
    for ci, cell in enumerate(net.cells):
        if _topo_order(cell) is None:
            rep.acyclic = False
            rep.findings.append(f"cell {ci}: cycle or dangling edge")
        elif any(e.dst == cell.input for e in cell.edges):
            rep.acyclic = False
            rep.findings.append(f"cell {ci}: edge into input node")
    if rep.acyclic:
        try:
            node_shapes(net)
        except GraphError as exc:
            rep.shapes_ok = False
            rep.findings.append(str(exc))
    for ci, cell in enumerate(net.cells):
        if not _cell_connected(cell):
            rep.connected = False
            rep.findings.append(f"cell {ci}: disconnected, output node {cell.output} receives no non-zero path")
    return rep


def count_cost(net: Network) -> CostReport:
    """Trainable scalars and per-sample multiply-accumulates, head included."""
    per_cell = node_shapes(net)
    params = net.stem.weight_count
    flops = net.stem.flops(net.input_shape)
    for cell, shapes in zip(net.cells, per_cell):
        for e in cell.edges:
            params += e.op.weight_count
            flops += e.op.flops(shapes[e.src])
    final = per_cell[-1][net.cells[-1].output] if net.cells else net.stem.out_shape(net.input_shape)
    c = final[0]
    params += c * net.num_classes + net.num_classes
    spatial = final[1] * final[2] if len(final) == 3 else 1
    flops += c * spatial + c * net.num_classes
    return CostReport(params, flops)


# --------------------------------------------------------------------------
# rewrites


def prune(net: Network) -> Network:
    """Drop Zero edges and every node not on an input-to-output path.

    The input and output nodes of each cell always survive.
    """
    cells = []
    for cell in net.cells:
        fwd, rev = _live_adjacency(cell)
        keep = _reachable(cell.input, fwd) & _reachable(cell.output, rev)
        keep |= {cell.input, cell.output}
        edges = tuple(
            e for e in cell.edges
            if e.op.kind != OpKind.ZERO and e.src in keep and e.dst in keep
        )
        # edges leaving the output or entering the input cannot lie on a path
        edges = tuple(e for e in edges if e.src != cell.output and e.dst != cell.input)
        nodes = tuple(n for n in cell.nodes if n in keep)
        cells.append(dataclasses.replace(cell, nodes=nodes, edges=edges))
    out = dataclasses.replace(net, cells=tuple(cells))
    return dataclasses.replace(out, disconnected=validate(out).disconnected)


CHOICES = ("none", "id", "same")


def apply_decisions(net: Network, decisions: Mapping[str, str]) -> Network:
    """Rewrite each edge per its choice (same / id / none), then prune.

    ``decisions`` maps edge id to a choice; a :class:`~archxform.discretize.Decisions`
    works too.  The result carries ``disconnected=True`` when no non-zero
    path reaches some cell's output.
    """
    choices = getattr(decisions, "choices", decisions)
    edges = net.edges()
    unknown = set(choices) - set(edges)
    if unknown:
        raise GraphError(f"decisions reference unknown edges: {sorted(unknown)}")
    missing = set(edges) - set(choices)
    if missing:
        raise GraphError(f"decisions do not cover edges: {sorted(missing)}")
    cells = []
    for ci, cell in enumerate(net.cells):
        new_edges = []
        for e in cell.edges:
            eid = edge_id(ci, e.index)
            choice = choices[eid]
            if choice == "same":
                op = e.op
            elif choice == "id":
                if not identity_legal(e.op):
                    raise GraphError(f"identity is illegal on shape-changing edge {eid}")
                op = OperationSpec(OpKind.IDENTITY, e.op.in_channels, e.op.out_channels)
            elif choice == "none":
                op = OperationSpec(OpKind.ZERO, e.op.in_channels, e.op.out_channels, e.op.stride)
            else:
                raise GraphError(f"edge {eid}: unknown choice {choice!r}")
            new_edges.append(dataclasses.replace(e, op=op))
        cells.append(dataclasses.replace(cell, edges=tuple(new_edges)))
    return prune(dataclasses.replace(net, cells=tuple(cells)))


def diff(original: Network, transformed: Network) -> ArchDiff:
    """One record per original edge; removed edges show up as ``Zero``."""
    if len(original.cells) != len(transformed.cells):
        raise GraphError("networks have different cell counts")
    orig_edges = original.edges()
    new_edges = transformed.edges()
    extra = set(new_edges) - set(orig_edges)
    if extra:
        raise GraphError(f"transformed network has edges absent from the original: {sorted(extra)}")
    records = []
    for eid, (_, e) in orig_edges.items():
        new = new_edges[eid][1].op.kind if eid in new_edges else OpKind.ZERO
        records.append(EdgeChange(eid, e.op.kind, new))
    return ArchDiff(tuple(records))


# --------------------------------------------------------------------------
# serialization


def to_json(net: Network, **extra) -> str:
    doc = {
        "version": 1,
        "template": net.template,
        "input_shape": list(net.input_shape),
        "num_classes": net.num_classes,
        "stem": net.stem.to_dict(),
        "disconnected": net.disconnected,
        "cells": [
            {
                "name": cell.name,
                "nodes": list(cell.nodes),
                "out_shape": list(cell.out_shape),
                "edges": [
                    {"index": e.index, "src": e.src, "dst": e.dst, "op": e.op.to_dict()}
                    for e in cell.edges
                ],
            }
            for cell in net.cells
        ],
    }
    doc.update(extra)
    return json.dumps(doc, sort_keys=True, indent=1)


def from_json(text: str | Mapping) -> Network:
    doc = json.loads(text) if isinstance(text, (str, bytes)) else text
    if doc.get("version") != 1:
        raise GraphError(f"unsupported architecture version {doc.get('version')!r}")
    cells = []
    for c in doc["cells"]:
        edges = tuple(
            Edge(int(e.get("index", i)), int(e["src"]), int(e["dst"]), OperationSpec.from_dict(e["op"]))
            for i, e in enumerate(c["edges"])
        )
        nodes = tuple(c.get("nodes") or sorted({n for e in edges for n in (e.src, e.dst)}))
        cells.append(Cell(c.get("name", "cell"), nodes, edges, tuple(c["out_shape"])))
    return Network(
        doc["template"],
        tuple(doc["input_shape"]),
        int(doc["num_classes"]),
        OperationSpec.from_dict(doc["stem"]),
        tuple(cells),
        bool(doc.get("disconnected", False)),
    )


def _dot_cell(name: str, ci: int, original: Network, transformed: Network | None) -> str:
    cell = original.cells[ci]
    lines = [f"digraph {name} {{", "  rankdir=LR;"]
    for n in cell.nodes:
        label = "in" if n == cell.input else ("out" if n == cell.output else str(n))
        lines.append(f'  n{n} [label="{label}"];')
    new = transformed.edges() if transformed is not None else None
    for e in cell.edges:
        eid = edge_id(ci, e.index)
        kind = e.op.kind
        if new is not None:
            kind = new[eid][1].op.kind if eid in new else OpKind.ZERO
        attrs = [f'label="{kind.value}"']
        if kind != e.op.kind:
            attrs.append("color=red")
            if kind == OpKind.ZERO:
                attrs.append("style=dashed")
        lines.append(f"  n{e.src} -> n{e.dst} [{', '.join(attrs)}];")
    lines.append("}")
    return "\n".join(lines)


def to_dot(original: Network, transformed: Network | None = None, cells: Iterable[int] | None = None,
           header: str | None = None) -> str:
    """One ``digraph`` per cell; edges whose kind changed get ``color=red``."""
    idx = range(len(original.cells)) if cells is None else cells
    parts = [f"// {header}"] if header else []
    parts += [_dot_cell(f"cell{ci}", ci, original, transformed) for ci in idx]
    return "\n".join(parts) + "\n"
