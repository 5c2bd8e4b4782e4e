"""Two-stage training: joint weight/theta training, discretization, weight-only training."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .data import Dataset, augment_flip_crop, batches
from .discretize import Decisions, all_same, guard_and_repair, select_ops
from .graph import ArchDiff, Network, apply_decisions, diff
from .mixed import ArchParams, init_arch_params
from .model import accuracy, forward, init_weights

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainState",
    "EpochMetrics",
    "TrainedModel",
    "TrainingDiverged",
    "TRANSFORM_MODES",
    "THETA_PRESETS",
    "rng_stream",
    "epoch_seed",
    "init_state",
    "arch_train_epoch",
    "discretize_and_fix",
    "network_train_epoch",
    "run_two_stage",
]

TRANSFORM_MODES = ("cell", "full", "off")
THETA_PRESETS = ("init", "all-none", "all-id")

# named RNG substreams
STREAM_SHUFFLE, STREAM_OMEGA, STREAM_AUGMENT = 1, 2, 3


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_epochs: int = 8
    arch_epochs: int | None = None  # None -> 25% of total_epochs
    batch_size: int = 64
    lr_omega: float = 0.025
    momentum: float = 0.9
    lr_theta: float = 3e-4
    theta_betas: tuple[float, float] = (0.5, 0.999)
    parameterization: str = "softmax"
    transform_mode: str = "cell"
    seed: int = 1
    repair_policy: str = "repair-to-identity"
    theta_preset: str = "init"
    cosine: bool = False
    augment: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        if self.arch_epochs is None:
            object.__setattr__(self, "arch_epochs", self.total_epochs // 4)
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        if not 0 <= self.arch_epochs < self.total_epochs:
            raise ValueError(f"arch_epochs must be in [0, total_epochs), got {self.arch_epochs}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.transform_mode not in TRANSFORM_MODES:
            raise ValueError(f"transform_mode must be one of {TRANSFORM_MODES}")
        if self.parameterization not in ("raw", "softmax"):
            raise ValueError("parameterization must be raw or softmax")
        if self.theta_preset not in THETA_PRESETS:
            raise ValueError(f"theta_preset must be one of {THETA_PRESETS}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    @property
    def stage_epochs(self) -> int:
        """Epochs of joint weight/theta training (0 when transformation is off)."""
        return 0 if self.transform_mode == "off" else self.arch_epochs


@dataclass
class EpochMetrics:
    epoch: int
    stage: str
    loss: float
    train_acc: float
    test_acc: float
    seconds: float


@dataclass
class TrainState:
    config: TrainConfig
    original: Network
    network: Network
    weights: dict[str, E.Parameter]
    arch: ArchParams | None
    omega_opt: E.SGD
    theta_opt: E.Adam | None
    epoch: int = 0
    stage: str = "arch"
    decisions: Decisions | None = None
    metrics: list[EpochMetrics] = field(default_factory=list)

    @property
    def theta_frozen(self) -> bool:
        return self.stage == "network"


@dataclass
class TrainedModel:
    network: Network
    original: Network
    weights: dict[str, E.Parameter]
    decisions: Decisions
    arch_diff: ArchDiff
    metrics: list[EpochMetrics]
    wall_seconds: float
    test_accuracy: float
    arch: ArchParams | None = None
    state: TrainState | None = None


def rng_stream(seed: int, stream: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, *extra])


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, STREAM_SHUFFLE, epoch]).generate_state(1)[0])


def _apply_preset(arch: ArchParams, preset: str) -> None:
    if preset == "all-none":
        arch.theta.data[:] = (1.0, 0.0, 0.0)
    elif preset == "all-id":
        arch.theta.data[:] = (0.0, 1.0, 0.0)


def init_state(config: TrainConfig, network: Network) -> TrainState:
    dtype = np.dtype(config.dtype)
    weights = init_weights(network, rng_stream(config.seed, STREAM_OMEGA), dtype)
    arch = theta_opt = None
    if config.transform_mode != "off":
        arch = init_arch_params(network, config.transform_mode, config.parameterization, dtype)
        _apply_preset(arch, config.theta_preset)
        b1, b2 = config.theta_betas
        theta_opt = E.Adam([arch.theta], lr=config.lr_theta, beta1=b1, beta2=b2)
    omega_opt = E.SGD(list(weights.values()), lr=config.lr_omega, momentum=config.momentum)
    stage = "arch" if config.stage_epochs > 0 else "network"
    state = TrainState(config, network, network, weights, arch, omega_opt, theta_opt, stage=stage)
    if stage == "network":
        discretize_and_fix(state)
    return state


def _lr(config: TrainConfig, epoch: int) -> float:
    if not config.cosine:
        return config.lr_omega
    return 0.5 * config.lr_omega * (1 + math.cos(math.pi * epoch / config.total_epochs))


def _step(loss_fn, params, tape_params, opt):
    with E.Tape() as tape:
        logits, loss = loss_fn()
    if not np.isfinite(loss.data):
        raise TrainingDiverged("non-finite loss")
    E.backward(loss, tape_params, tape)
    opt.step()
    return logits, loss


def _iter_batches(state: TrainState, dataset: Dataset):
    cfg = state.config
    aug_rng = rng_stream(cfg.seed, STREAM_AUGMENT, state.epoch) if cfg.augment else None
    dtype = np.dtype(cfg.dtype)
    for xb, yb in batches(dataset, cfg.batch_size, epoch_seed(cfg.seed, state.epoch)):
        if aug_rng is not None:
            xb = augment_flip_crop(xb, aug_rng)
        yield xb.astype(dtype, copy=False), yb


def _finish_epoch(state, dataset, stage, losses, correct, seen, t0, evaluate) -> EpochMetrics:
    test_acc = float("nan")
    if evaluate:
        test_acc = accuracy(state.network, state.weights, dataset.test_images.astype(state.config.dtype),
                            dataset.test_labels, arch=state.arch if stage == "arch" else None)
    m = EpochMetrics(state.epoch, stage, float(np.sum(losses) / max(seen, 1)), 100.0 * correct / max(seen, 1),
                     test_acc, time.perf_counter() - t0)
    state.metrics.append(m)
    state.epoch += 1
    log.info("epoch %d [%s] loss %.4f train %.2f%% test %.2f%%", m.epoch, stage, m.loss, m.train_acc, m.test_acc)
    return m


def arch_train_epoch(state: TrainState, dataset: Dataset, evaluate: bool = True) -> EpochMetrics:
    """One epoch of alternating updates: weights on a batch, then theta on the same batch.

    The theta step recomputes the forward pass with the just-updated weights.
    """
    if state.stage != "arch" or state.arch is None:
        raise RuntimeError("architecture stage is over")
    cfg = state.config
    state.omega_opt.lr = _lr(cfg, state.epoch)
    omega = list(state.weights.values())
    t0 = time.perf_counter()
    losses, correct, seen = [], 0, 0
    for xb, yb in _iter_batches(state, dataset):
        def loss_fn():
            logits = forward(state.network, state.weights, xb, state.arch)
            return logits, E.softmax_cross_entropy(logits, yb)

        logits, loss = _step(loss_fn, omega, omega, state.omega_opt)
        losses.append(float(loss.data) * len(yb))
        correct += int(np.sum(logits.data.argmax(axis=1) == yb))
        seen += len(yb)
        _step(loss_fn, [state.arch.theta], [state.arch.theta], state.theta_opt)
    return _finish_epoch(state, dataset, "arch", losses, correct, seen, t0, evaluate)


def discretize_and_fix(state: TrainState) -> Decisions:
    """Argmax theta, repair if needed, rewrite the network, and freeze theta.

    Weights of surviving edges carry over; weights of removed edges are
    dropped.
    """
    cfg = state.config
    if state.arch is None:
        d = all_same(state.network)
    else:
        d = guard_and_repair(select_ops(state.arch), state.network, cfg.repair_policy)
    new_net = apply_decisions(state.network, d)
    keep = {"stem", "head"} | set(new_net.edge_ids())
    dropped = {k for k in state.weights if k.rsplit(".", 1)[0] not in keep}
    kept_edges = new_net.edges()
    for k in list(state.weights):
        prefix = k.rsplit(".", 1)[0]
        if prefix in kept_edges and kept_edges[prefix][1].op.weight_count == 0:
            dropped.add(k)
    weights = {k: v for k, v in state.weights.items() if k not in dropped}
    state.network = new_net
    state.weights = weights
    state.decisions = d
    state.stage = "network"
    # theta leaves the trainable set; the optimizer only ever sees weights
    omega_opt = E.SGD(list(weights.values()), lr=cfg.lr_omega, momentum=cfg.momentum)
    omega_opt.load_state_dict({k: v for k, v in state.omega_opt.velocity.items() if k in weights})
    state.omega_opt = omega_opt
    if new_net.disconnected:
        log.warning("transformed network is disconnected")
    return d


def network_train_epoch(state: TrainState, dataset: Dataset, evaluate: bool = True) -> EpochMetrics:
    if state.stage != "network":
        raise RuntimeError("theta must be frozen before the network stage")
    cfg = state.config
    state.omega_opt.lr = _lr(cfg, state.epoch)
    omega = list(state.weights.values())
    t0 = time.perf_counter()
    losses, correct, seen = [], 0, 0
    for xb, yb in _iter_batches(state, dataset):
        def loss_fn():
            logits = forward(state.network, state.weights, xb)
            return logits, E.softmax_cross_entropy(logits, yb)

        logits, loss = _step(loss_fn, omega, omega, state.omega_opt)
        losses.append(float(loss.data) * len(yb))
        correct += int(np.sum(logits.data.argmax(axis=1) == yb))
        seen += len(yb)
    return _finish_epoch(state, dataset, "network", losses, correct, seen, t0, evaluate)


def run_two_stage(config: TrainConfig, dataset: Dataset, network: Network, state: TrainState | None = None,
                  on_epoch=None, evaluate_every_epoch: bool = False) -> TrainedModel:
    """Architecture stage, one discretization, then the network stage.

    ``state`` resumes a run (e.g. from a checkpoint); ``on_epoch(state)`` is
    called at every epoch boundary.
    """
    t0 = time.perf_counter()
    if state is None:
        state = init_state(config, network)
    n_arch = config.stage_epochs
    while state.epoch < config.total_epochs:
        if state.stage == "arch":
            arch_train_epoch(state, dataset, evaluate=evaluate_every_epoch)
            if state.epoch >= n_arch:
                discretize_and_fix(state)
        else:
            network_train_epoch(state, dataset, evaluate=evaluate_every_epoch or state.epoch + 1 == config.total_epochs)
        if on_epoch is not None:
            on_epoch(state)
    test_acc = accuracy(state.network, state.weights, dataset.test_images.astype(config.dtype), dataset.test_labels)
    if state.metrics:
        state.metrics[-1].test_acc = test_acc
    return TrainedModel(state.network, state.original, state.weights, state.decisions, diff(state.original, state.network),
                        state.metrics, time.perf_counter() - t0, test_acc, state.arch, state)
