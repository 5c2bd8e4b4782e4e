"""Per-edge operation coefficients and the mixed-edge computation.

Every mixed edge computes ``c_none * Z + c_id * x + c_same * o(x)``.  The
zero tensor never affects the value, so it is not materialized; only its
coefficient exists.  Coefficients come from a theta table with one row
``(theta_none, theta_id, theta_same)`` per edge (full tying) or per template
edge position (cell tying).

``raw`` mode uses theta verbatim; ``softmax`` mode normalizes each row over
its legal entries.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .engine import Parameter, Tensor, add, backward, mask_rows, pick, scale_by_scalar, softmax_rows
from .graph import Network, edge_id, identity_legal, OpKind

__all__ = [
    "MODES",
    "TYING",
    "NONE",
    "ID",
    "SAME",
    "ThetaRow",
    "ArchParams",
    "init_arch_params",
    "coefficients",
    "coefficient_table",
    "mixed_forward",
    "theta_grads",
    "theta_to_csv",
    "theta_from_csv",
]

MODES = ("raw", "softmax")
TYING = ("cell", "full")
NONE, ID, SAME = 0, 1, 2
INIT_ROW = (0.0, 0.0, 1.0)


class ThetaRow(NamedTuple):
    theta_none: float
    theta_id: float
    theta_same: float
    mask_id: bool = True


@dataclass
class ArchParams:
    """Theta table plus the edge -> row binding.

    ``keys[r]`` names row ``r``: a template position like ``plain.e2`` under
    cell tying, or an edge id like ``c3.e2`` under full tying.
    """

    keys: tuple[str, ...]
    theta: Parameter
    mask_id: np.ndarray
    edge_rows: dict[str, int]
    mode: str = "softmax"
    tying: str = "full"

    @property
    def shape(self) -> tuple[int, int]:
        return self.theta.data.shape

    def column_mask(self) -> np.ndarray:
        m = np.ones(self.theta.data.shape, dtype=bool)
        m[:, ID] = self.mask_id
        return m

    def row(self, key_or_edge: str) -> ThetaRow:
        r = self.edge_rows[key_or_edge] if key_or_edge in self.edge_rows else self.keys.index(key_or_edge)
        n, i, s = (float(v) for v in self.theta.data[r])
        return ThetaRow(n, i, s, bool(self.mask_id[r]))

    def rows(self) -> list[ThetaRow]:
        return [self.row(k) for k in self.keys]

    def edge_table(self) -> dict[str, ThetaRow]:
        """Theta row seen by every mixed edge."""
        return {eid: self.row(self.keys[r]) for eid, r in self.edge_rows.items()}


def init_arch_params(net: Network, tying: str = "full", mode: str = "softmax", dtype=np.float64) -> ArchParams:
    """Theta rows initialized to (0, 0, 1) for every non-zero edge of ``net``.

    A row's identity entry is masked when identity is illegal on any edge
    bound to that row.
    """
    if tying not in TYING:
        raise ValueError(f"tying must be one of {TYING}, got {tying!r}")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    keys: list[str] = []
    legal: dict[str, bool] = {}
    edge_rows: dict[str, int] = {}
    for ci, cell in enumerate(net.cells):
        for e in cell.edges:
            if e.op.kind == OpKind.ZERO:
                continue
            key = f"{cell.name}.e{e.index}" if tying == "cell" else edge_id(ci, e.index)
            if key not in legal:
                keys.append(key)
                legal[key] = True
            legal[key] = legal[key] and identity_legal(e.op)
            edge_rows[edge_id(ci, e.index)] = keys.index(key)
    theta = np.tile(np.asarray(INIT_ROW, dtype=dtype), (len(keys), 1))
    mask = np.array([legal[k] for k in keys], dtype=bool)
    return ArchParams(tuple(keys), Parameter(theta, name="theta"), mask, edge_rows, mode, tying)


def coefficient_table(arch: ArchParams) -> Tensor:
    """Traced (R, 3) coefficient tensor for the whole table."""
    cmask = arch.column_mask()
    if arch.mode == "raw":
        return mask_rows(arch.theta, cmask)
    return softmax_rows(arch.theta, cmask)


def coefficients(row: ThetaRow, mode: str = "raw") -> tuple[float, float, float]:
    """(c_none, c_id, c_same) for a single row."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    theta = np.array([[row.theta_none, row.theta_id, row.theta_same]], dtype=np.float64)
    cmask = np.array([[True, row.mask_id, True]])
    c = mask_rows(theta, cmask) if mode == "raw" else softmax_rows(theta, cmask)
    return tuple(float(v) for v in c.data[0])


def mixed_forward(x: Tensor, o_x: Tensor, coeffs: Tensor, row: int, mask_id: bool) -> Tensor:
    """``c_id * x + c_same * o(x)`` for row ``row`` of ``coeffs``.

    ``o_x`` is the original operation already applied to ``x``.  The zero
    tensor term is omitted, and so is the identity term when ``mask_id`` is
    False.
    """
    out = scale_by_scalar(o_x, pick(coeffs, (row, SAME)))
    if mask_id:
        if x.shape != o_x.shape:
            raise ValueError(f"identity term needs matching shapes, got {x.shape} and {o_x.shape}")
        out = add(scale_by_scalar(x, pick(coeffs, (row, ID))), out)
    return out


def theta_grads(loss: Tensor, arch: ArchParams, tape=None) -> np.ndarray:
    """Backpropagate ``loss`` into theta only; returns an (R, 3) copy of the gradient.

    Rows shared by several edges (cell tying) receive the sum of the
    per-edge contributions.
    """
    backward(loss, [arch.theta], tape)
    return arch.theta.grad.copy()


CSV_FIELDS = ("edge_id", "theta_none", "theta_id", "theta_same", "mask_id")


def theta_to_csv(arch: ArchParams, config_hash: str | None = None) -> str:
    """One row per mixed edge (tied edges repeat their shared row)."""
    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_hash: {config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for eid, row in arch.edge_table().items():
        w.writerow([eid, repr(row.theta_none), repr(row.theta_id), repr(row.theta_same), int(row.mask_id)])
    return buf.getvalue()


def theta_from_csv(text: str) -> list[tuple[str, ThetaRow]]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    rows = []
    for rec in csv.DictReader(lines):
        rows.append((rec["edge_id"], ThetaRow(float(rec["theta_none"]), float(rec["theta_id"]),
                                              float(rec["theta_same"]), rec["mask_id"] == "1")))
    return rows
