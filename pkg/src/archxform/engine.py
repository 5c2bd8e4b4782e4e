"""Minimal tape-based reverse-mode differentiation over numpy arrays.

Every primitive computes its forward value eagerly and, when a :class:`Tape`
is active, records a closure that maps the output adjoint to input adjoints.
:func:`backward` replays those closures in reverse execution order.

Only the handful of primitives the architecture networks need are provided.
"""

from __future__ import annotations

import contextvars
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "EngineError",
    "NonFiniteError",
    "conv2d",
    "dense",
    "relu",
    "avgpool2x2",
    "add",
    "scale_by_scalar",
    "global_avg_pool",
    "softmax_cross_entropy",
    "softmax_rows",
    "mask_rows",
    "pick",
    "sum_all",
    "backward",
    "finite_diff_check",
    "SGD",
    "Adam",
]


class EngineError(RuntimeError):
    pass


class NonFiniteError(EngineError, FloatingPointError):
    pass


_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "archxform_tape", default=None
)
_param_ids = itertools.count()


class Tensor:
    """An array value that may carry a node on the active tape."""

    __slots__ = ("data", "_node")

    def __init__(self, data):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self._node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape}, dtype={self.dtype})"


class Parameter(Tensor):
    """A trainable leaf.  ``grad`` always has the shape of ``data``."""

    __slots__ = ("grad", "id", "name")

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, copy=True))
        self.grad = np.zeros_like(self.data)
        self.id = next(_param_ids)
        self.name = name if name is not None else f"param{self.id}"


class _Node:
    __slots__ = ("inputs", "adjoint_fn", "out")

    def __init__(self, inputs, adjoint_fn, out):
        self.inputs = inputs
        self.adjoint_fn = adjoint_fn
        self.out = out


class Tape:
    """Records primitive applications in execution order.

    Use as a context manager; primitives evaluated inside the ``with`` block
    are recorded on this tape.  A tape is consumed by :func:`backward`.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)


def _tracked(t: Tensor) -> bool:
    return isinstance(t, Parameter) or t._node is not None


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite output")


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], adjoint_fn: Callable, op: str) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor(out_data)
    tape = _active_tape.get()
    if tape is not None and any(_tracked(t) for t in inputs):
        node = _Node(tuple(inputs), adjoint_fn, out)
        out._node = node
        tape.nodes.append(node)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# primitives


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x, w, b=None, stride: int = 1) -> Tensor:
    """Same-padded 2-D convolution (cross-correlation).

    ``x`` is (N, C, H, W), ``w`` is (O, C, k, k) with odd ``k``, ``b`` is (O,).
    Output spatial size is ``H // stride``.  The forward pass is a single
    contraction over a strided window view; the input adjoint scatters the
    column gradient back one kernel offset at a time, in fixed order.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4 or wd.shape[1] != xd.shape[1] or wd.shape[2] != wd.shape[3] or wd.shape[2] % 2 == 0:
        raise EngineError(f"conv2d shape mismatch: x{xd.shape} w{wd.shape}")
    n, c, h, wid = xd.shape
    o, _, k, _ = wd.shape
    p = k // 2
    ho, wo = h // stride, wid // stride
    if ho < 1 or wo < 1:
        raise EngineError(f"conv2d stride {stride} too large for input {xd.shape}")
    xp = _pad_hw(xd, p)
    # (N, C, Ho, Wo, k, k)
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : ho * stride : stride, : wo * stride : stride]
    out = np.tensordot(cols, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    inputs = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.data.shape != (o,):
            raise EngineError(f"conv2d bias shape {b.data.shape} != ({o},)")
        out = out + b.data[None, :, None, None]
        inputs.append(b)
    out = np.ascontiguousarray(out)

    def adjoint(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g, wd, axes=([1], [0]))  # (N, Ho, Wo, C, k, k)
        gx_p = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gx_p[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += gcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gx_p[:, :, p : p + h, p : p + wid] if p else gx_p
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _record(out, inputs, adjoint, "conv2d")


def dense(x, w, b=None) -> Tensor:
    """``x @ w.T + b`` with ``x`` (N, I), ``w`` (O, I)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise EngineError(f"dense shape mismatch: x{x.shape} w{w.shape}")
    out = x.data @ w.data.T
    inputs = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.data.shape != (w.data.shape[0],):
            raise EngineError(f"dense bias shape {b.data.shape}")
        out = out + b.data
        inputs.append(b)

    def adjoint(g):
        grads = [g @ w.data, g.T @ x.data]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _record(out, inputs, adjoint, "dense")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, 0.0).astype(x.data.dtype, copy=False)
    # adjoint at exactly 0 is 0
    return _record(out, [x], lambda g: [g * pos], "relu")


def avgpool2x2(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise EngineError(f"avgpool2x2 expects 4-D input, got {x.shape}")
    n, c, h, w = x.data.shape
    ho, wo = h // 2, w // 2
    if ho < 1 or wo < 1:
        raise EngineError(f"avgpool2x2 input too small: {x.shape}")
    xc = x.data[:, :, : 2 * ho, : 2 * wo]
    out = xc.reshape(n, c, ho, 2, wo, 2).mean(axis=(3, 5))

    def adjoint(g):
        gx = np.zeros_like(x.data)
        gx[:, :, : 2 * ho, : 2 * wo] = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return [gx]

    return _record(out, [x], adjoint, "avgpool2x2")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise EngineError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _record(a.data + b.data, [a, b], lambda g: [g, g], "add")


def scale_by_scalar(x, s) -> Tensor:
    """Multiply every entry of ``x`` by the 0-d tensor ``s``."""
    x, s = _as_tensor(x), _as_tensor(s)
    if s.data.shape != ():
        raise EngineError(f"scale_by_scalar expects a 0-d scale, got {s.shape}")
    sv = s.data
    out = x.data * sv
    return _record(out, [x, s], lambda g: [g * sv, np.asarray(np.sum(g * x.data))], "scale_by_scalar")


def global_avg_pool(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise EngineError(f"global_avg_pool expects 4-D input, got {x.shape}")
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))
    return _record(out, [x], lambda g: [np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).copy()], "global_avg_pool")


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    logits = _as_tensor(logits)
    z = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise EngineError(f"softmax_cross_entropy shape mismatch: {z.shape} vs labels {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= z.shape[1]:
        raise EngineError("label out of range")
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    loss = np.asarray(-logp[np.arange(n), labels].mean())

    def adjoint(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return [p * (g / n)]

    return _record(loss, [logits], adjoint, "softmax_cross_entropy")


def softmax_rows(t, mask=None) -> Tensor:
    """Row-wise softmax of a 2-D tensor; entries where ``mask`` is False get 0."""
    t = _as_tensor(t)
    d = t.data
    if d.ndim != 2:
        raise EngineError(f"softmax_rows expects 2-D input, got {t.shape}")
    m = np.ones(d.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    shifted = np.where(m, d, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.where(m, np.exp(shifted), 0.0)
    s = e / e.sum(axis=1, keepdims=True)

    def adjoint(g):
        return [s * (g - (g * s).sum(axis=1, keepdims=True))]

    return _record(s, [t], adjoint, "softmax_rows")


def mask_rows(t, mask) -> Tensor:
    """Zero the entries of ``t`` where ``mask`` is False (gradient likewise)."""
    t = _as_tensor(t)
    m = np.asarray(mask, dtype=bool)
    return _record(np.where(m, t.data, 0.0), [t], lambda g: [np.where(m, g, 0.0)], "mask_rows")


def pick(t, index) -> Tensor:
    """Extract one entry of ``t`` as a 0-d tensor."""
    t = _as_tensor(t)
    idx = tuple(index) if isinstance(index, (tuple, list)) else (index,)
    val = np.asarray(t.data[idx])

    def adjoint(g):
        gt = np.zeros_like(t.data)
        gt[idx] = g
        return [gt]

    return _record(val, [t], adjoint, "pick")


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    return _record(np.asarray(x.data.sum()), [x], lambda g: [np.broadcast_to(g, x.data.shape).copy()], "sum_all")


# --------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, params: Iterable[Parameter], tape: Tape | None = None) -> None:
    """Populate ``p.grad`` with d(loss)/d(p) for every parameter in ``params``.

    Gradients are zeroed first, so parameters the loss does not depend on end
    with an exactly-zero gradient.  The tape is consumed.
    """
    tape = tape if tape is not None else _active_tape.get()
    params = list(params)
    for p in params:
        p.grad = np.zeros_like(p.data)
    if loss.data.shape != ():
        raise EngineError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None or tape.consumed:
        raise EngineError("backward called without an active trace")
    if loss._node is None:
        # loss does not depend on anything traced
        tape.consumed = True
        return

    wanted = {p.id: p for p in params}
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = adj.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.adjoint_fn(g)):
            if isinstance(inp, Parameter):
                if inp.id in wanted:
                    inp.grad = inp.grad + gi
            elif inp._node is not None:
                key = id(inp)
                if key in adj:
                    adj[key] = adj[key] + gi
                else:
                    adj[key] = gi
    tape.consumed = True
    tape.nodes.clear()


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Parameter], eps: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a zero-argument closure computing a scalar loss from the current
    values of ``params``.  Relative error per coordinate uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data):
        raise NonFiniteError("f is not finite")
    backward(loss, params, tape)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("f is not finite")
            numeric = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# optimizers


class SGD:
    """Heavy-ball SGD: ``v <- momentum*v + grad``; ``value <- value - lr*v``."""

    def __init__(self, params: Sequence[Parameter], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        for p in self.params:
            v = self.velocity[p.name]
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.velocity.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.velocity[k][...] = v


class Adam:
    """Adaptive-moment update with bias correction."""

    def __init__(self, params: Sequence[Parameter], lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            m, v = self.m[p.name], self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": v.copy() for k, v in self.m.items()}
        out.update({f"v.{k}": v.copy() for k, v in self.v.items()})
        out["t"] = np.asarray(float(self.t))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"])
        for k, v in state.items():
            if k.startswith("m."):
                self.m[k[2:]][...] = v
            elif k.startswith("v."):
                self.v[k[2:]][...] = v
