"""Checkpoint container.

A checkpoint is one UTF-8 JSON document, keys sorted, no insignificant
whitespace::

    {
      "format": "archxform-checkpoint",
      "version": [MAJOR, MINOR],
      "config_hash": "<16 hex>",
      "body": {
        "epoch": int, "stage": "arch" | "network", "seed": int,
        "train_config": {...},            # TrainConfig fields
        "original": <architecture JSON>,   # network before transformation
        "network": <architecture JSON>,    # current network
        "decisions": <decisions JSON> | null,
        "theta": {"keys": [...], "mask_id": [...], "mode": ..., "tying": ...} | null,
        "metrics": [{epoch, stage, loss, train_acc, test_acc, seconds}, ...],
        "arrays": {name: {"dtype": "<f8", "shape": [...], "data": base64}}
      },
      "sha256": "<hex digest of the canonical body text>"
    }

``arrays`` holds the weights (``w:<name>``), theta (``theta``), momentum
buffers (``sgd:<name>``) and adaptive-moment state (``adam:<key>``).  Data
order is the RNG state: every random stream is derived from ``seed`` and
``epoch``.  Readers refuse other major versions.
"""

from __future__ import annotations

import base64
import dataclasses
import hashlib
import json
import math

import numpy as np

from . import engine as E
from .discretize import decisions_from_json, decisions_to_json
from .graph import from_json, to_json
from .mixed import ArchParams
from .trainer import EpochMetrics, TrainConfig, TrainState

__all__ = ["FORMAT", "VERSION", "CheckpointError", "dumps_checkpoint", "loads_checkpoint", "save_checkpoint",
           "load_checkpoint"]

FORMAT = "archxform-checkpoint"
VERSION = (1, 0)


class CheckpointError(ValueError):
    pass


def _canon(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _enc(arr: np.ndarray) -> dict:
    arr = np.asarray(arr)  # not ascontiguousarray: it would promote 0-d arrays to 1-d
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return {"dtype": le.dtype.str, "shape": list(arr.shape), "data": base64.b64encode(le.tobytes()).decode("ascii")}


def _dec(d: dict) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["data"]), dtype=np.dtype(d["dtype"])).reshape(d["shape"]).copy()


def _nan_safe(x: float):
    return None if isinstance(x, float) and math.isnan(x) else x


def dumps_checkpoint(state: TrainState, config_hash: str) -> str:
    cfg = state.config
    arrays = {f"w:{k}": _enc(p.data) for k, p in state.weights.items()}
    arrays.update({f"sgd:{k}": _enc(v) for k, v in state.omega_opt.velocity.items()})
    theta = None
    if state.arch is not None:
        arrays["theta"] = _enc(state.arch.theta.data)
        theta = {"keys": list(state.arch.keys), "mask_id": state.arch.mask_id.tolist(),
                 "edge_rows": state.arch.edge_rows, "mode": state.arch.mode, "tying": state.arch.tying}
        if state.theta_opt is not None:
            arrays.update({f"adam:{k}": _enc(v) for k, v in state.theta_opt.state_dict().items()})
    body = {
        "epoch": state.epoch,
        "stage": state.stage,
        "seed": cfg.seed,
        "train_config": {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(cfg).items()},
        "original": json.loads(to_json(state.original)),
        "network": json.loads(to_json(state.network)),
        "decisions": json.loads(decisions_to_json(state.decisions)) if state.decisions is not None else None,
        "theta": theta,
        "metrics": [{k: _nan_safe(v) for k, v in dataclasses.asdict(m).items()} for m in state.metrics],
        "arrays": arrays,
    }
    body_text = _canon(body)
    doc = {"format": FORMAT, "version": list(VERSION), "config_hash": config_hash, "body": body,
           "sha256": hashlib.sha256(body_text.encode()).hexdigest()}
    return _canon(doc) + "\n"


def loads_checkpoint(text: str) -> tuple[TrainState, str]:
    """Rebuild a :class:`TrainState`; returns ``(state, config_hash)``."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CheckpointError("not an archxform checkpoint")
    version = tuple(doc.get("version", ()))
    if not version or version[0] != VERSION[0]:
        raise CheckpointError(f"checkpoint version {version} is incompatible with reader version {VERSION}")
    body = doc.get("body")
    if body is None or hashlib.sha256(_canon(body).encode()).hexdigest() != doc.get("sha256"):
        raise CheckpointError("checkpoint integrity check failed (sha256 mismatch)")
    tc = dict(body["train_config"])
    tc["theta_betas"] = tuple(tc["theta_betas"])
    cfg = TrainConfig(**tc)
    arrays = {k: _dec(v) for k, v in body["arrays"].items()}
    weights = {k[2:]: E.Parameter(v, name=k[2:]) for k, v in arrays.items() if k.startswith("w:")}
    omega_opt = E.SGD(list(weights.values()), lr=cfg.lr_omega, momentum=cfg.momentum)
    omega_opt.load_state_dict({k[4:]: v for k, v in arrays.items() if k.startswith("sgd:")})
    arch = theta_opt = None
    if body["theta"] is not None:
        t = body["theta"]
        arch = ArchParams(tuple(t["keys"]), E.Parameter(arrays["theta"], name="theta"),
                          np.asarray(t["mask_id"], dtype=bool), dict(t["edge_rows"]), t["mode"], t["tying"])
        b1, b2 = cfg.theta_betas
        theta_opt = E.Adam([arch.theta], lr=cfg.lr_theta, beta1=b1, beta2=b2)
        adam = {k[5:]: v for k, v in arrays.items() if k.startswith("adam:")}
        if adam:
            theta_opt.load_state_dict(adam)
    decisions = None
    if body["decisions"] is not None:
        decisions, _ = decisions_from_json(json.dumps(body["decisions"]))
    metrics = [EpochMetrics(**{k: (float("nan") if v is None else v) for k, v in m.items()}) for m in body["metrics"]]
    state = TrainState(cfg, from_json(body["original"]), from_json(body["network"]), weights, arch, omega_opt,
                       theta_opt, body["epoch"], body["stage"], decisions, metrics)
    return state, doc.get("config_hash")


def save_checkpoint(path, state: TrainState, config_hash: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_checkpoint(state, config_hash))


def load_checkpoint(path) -> tuple[TrainState, str]:
    with open(path, encoding="utf-8") as fh:
        return loads_checkpoint(fh.read())
