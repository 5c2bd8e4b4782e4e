"""Weights for a :class:`~archxform.graph.Network` and its forward pass."""

from __future__ import annotations

import numpy as np

from . import engine as E
from .graph import Network, OpKind, OperationSpec, edge_id, node_shapes
from .mixed import ArchParams, coefficient_table, mixed_forward

__all__ = ["init_weights", "weight_names", "apply_op", "forward", "predict", "accuracy", "loss_fn"]


def weight_names(net: Network) -> list[tuple[str, OperationSpec | None]]:
    out = [("stem", net.stem)]
    for ci, cell in enumerate(net.cells):
        for e in cell.edges:
            if e.op.weight_count:
                out.append((edge_id(ci, e.index), e.op))
    out.append(("head", None))
    return out


def init_weights(net: Network, rng: np.random.Generator, dtype=np.float64) -> dict[str, E.Parameter]:
    """Fan-in scaled normal weights (variance 2/fan_in, 1/fan_in for the head); zero biases."""
    params = {}
    for prefix, op in weight_names(net):
        if op is None:
            fan_in, shape = net.head_in, (net.num_classes, net.head_in)
            std = np.sqrt(1.0 / fan_in)
            n_out = net.num_classes
        elif op.kind == OpKind.DENSE_RELU:
            fan_in, shape, n_out = op.in_channels, (op.out_channels, op.in_channels), op.out_channels
            std = np.sqrt(2.0 / fan_in)
        else:
            k = 3 if op.kind == OpKind.CONV3X3_RELU else 1
            fan_in, shape, n_out = op.in_channels * k * k, (op.out_channels, op.in_channels, k, k), op.out_channels
            std = np.sqrt(2.0 / fan_in)
        params[f"{prefix}.w"] = E.Parameter((rng.standard_normal(shape) * std).astype(dtype), name=f"{prefix}.w")
        params[f"{prefix}.b"] = E.Parameter(np.zeros(n_out, dtype=dtype), name=f"{prefix}.b")
    return params


def apply_op(op: OperationSpec, x: E.Tensor, weights: dict, prefix: str) -> E.Tensor | None:
    """Original operation ``o(x)``; ``None`` stands for the zero tensor."""
    kind = op.kind
    if kind in (OpKind.CONV3X3_RELU, OpKind.CONV1X1_RELU):
        return E.relu(E.conv2d(x, weights[f"{prefix}.w"], weights[f"{prefix}.b"], stride=op.stride))
    if kind == OpKind.DENSE_RELU:
        return E.relu(E.dense(x, weights[f"{prefix}.w"], weights[f"{prefix}.b"]))
    if kind == OpKind.AVGPOOL2X2:
        return E.avgpool2x2(x)
    if kind == OpKind.IDENTITY:
        return x
    return None


def forward(net: Network, weights: dict, x, arch: ArchParams | None = None) -> E.Tensor:
    """Logits for a batch ``x`` of shape (N,) + input_shape.

    With ``arch`` every edge bound to a theta row is evaluated as a mixed
    edge; otherwise edges run their own operation.
    """
    x = x if isinstance(x, E.Tensor) else E.Tensor(x)
    n = x.shape[0]
    coeffs = coefficient_table(arch) if arch is not None else None
    shapes = node_shapes(net)
    h = apply_op(net.stem, x, weights, "stem")
    for ci, cell in enumerate(net.cells):
        vals = {cell.input: h}
        for node in cell.nodes[1:]:
            acc = None
            for e in cell.in_edges(node):
                if e.op.kind == OpKind.ZERO:
                    continue
                src = vals.get(e.src)
                if src is None:
                    src = E.Tensor(np.zeros((n,) + tuple(shapes[ci][e.src]), dtype=x.dtype))
                eid = edge_id(ci, e.index)
                y = apply_op(e.op, src, weights, eid)
                if arch is not None and eid in arch.edge_rows:
                    r = arch.edge_rows[eid]
                    y = mixed_forward(src, y, coeffs, r, bool(arch.mask_id[r]))
                acc = y if acc is None else E.add(acc, y)
            vals[node] = acc
        h = vals[cell.output]
        if h is None:
            h = E.Tensor(np.zeros((n,) + tuple(cell.out_shape), dtype=x.dtype))
    pooled = E.global_avg_pool(h) if h.data.ndim == 4 else h
    return E.dense(pooled, weights["head.w"], weights["head.b"])


def loss_fn(net: Network, weights: dict, x, y, arch: ArchParams | None = None) -> E.Tensor:
    return E.softmax_cross_entropy(forward(net, weights, x, arch), y)


def predict(net: Network, weights: dict, images: np.ndarray, batch_size: int = 256,
            arch: ArchParams | None = None) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        out.append(forward(net, weights, images[i : i + batch_size], arch).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(net: Network, weights: dict, images: np.ndarray, labels: np.ndarray, **kw) -> float:
    """Percentage of correctly classified samples."""
    if len(labels) == 0:
        return 0.0
    return float(100.0 * np.mean(predict(net, weights, images, **kw) == labels))
