"""Small reverse-mode autodiff over float64 numpy arrays.

Only the handful of primitives the grader needs are provided: affine maps,
ReLU, batch normalization, concatenation, constant masks and the fused
softmax/cross-entropy loss. Every op takes an optional ``tape``; when the tape
is ``None`` or no input requires a gradient the op is evaluated eagerly and
nothing is recorded.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionError, GradCheckError, InvariantError

DTYPE = np.float64
LOG_CLAMP = 1e-12
POS, NEG = 0, 1


class Tensor:
    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def watch(self) -> "Tensor":
        """Mark this tensor as a gradient sink for the next recorded ops."""
        self.requires_grad = True
        return self

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records primitive ops in execution order; ``backward`` replays them reversed."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []
        self._grads: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn) -> None:
        self._nodes.append((out, inputs, backward))

    def backward(self, out: Tensor, seed: np.ndarray | None = None) -> "Tape":
        if seed is None:
            seed = np.ones_like(out.data)
        seed = np.asarray(seed, dtype=DTYPE)
        if seed.shape != out.shape:
            raise DimensionError(f"seed shape {seed.shape} != output shape {out.shape}")
        grads = {id(out): seed}
        for node_out, inputs, fn in reversed(self._nodes):
            g = grads.get(id(node_out))
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        self._grads = grads
        return self

    def grad(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g


def _recording(tape: Tape | None, *inputs: Tensor) -> bool:
    return tape is not None and any(t.requires_grad for t in inputs)


def linear(x, W, b, tape: Tape | None = None) -> Tensor:
    """``x @ W.T + b`` for ``x`` of shape (..., n), ``W`` (m, n), ``b`` (m,)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.data.ndim != 2:
        raise DimensionError(f"weight must be 2-D, got shape {W.shape}")
    m, n = W.shape
    if x.shape[-1:] != (n,):
        raise DimensionError(f"input has {x.shape[-1] if x.shape else 0} features, weight expects {n} (W is {m}x{n})")
    if b.shape != (m,):
        raise DimensionError(f"bias shape {b.shape} does not match {m} output units")
    out = Tensor(x.data @ W.data.T + b.data)
    if _recording(tape, x, W, b):
        out.requires_grad = True

        def backward(g):
            g2 = g.reshape(-1, m)
            gx = g @ W.data if x.requires_grad else None
            gW = g2.T @ x.data.reshape(-1, n) if W.requires_grad else None
            gb = g2.sum(axis=0) if b.requires_grad else None
            return gx, gW, gb

        tape.record(out, (x, W, b), backward)
    return out


def relu(x, tape: Tape | None = None) -> Tensor:
    x = as_tensor(x)
    active = x.data > 0
    out = Tensor(np.where(active, x.data, 0.0))
    if _recording(tape, x):
        out.requires_grad = True
        tape.record(out, (x,), lambda g: (np.where(active, g, 0.0),))
    return out


def mul_const(x, c, tape: Tape | None = None) -> Tensor:
    """Elementwise product with a constant array (no gradient flows into ``c``)."""
    x = as_tensor(x)
    c = np.asarray(c, dtype=DTYPE)
    data = x.data * c
    if data.shape != x.shape:
        raise DimensionError(f"constant of shape {c.shape} would broadcast input {x.shape} to {data.shape}")
    out = Tensor(data)
    if _recording(tape, x):
        out.requires_grad = True
        tape.record(out, (x,), lambda g: (g * c,))
    return out


def concat(tensors: Sequence, tape: Tape | None = None) -> Tensor:
    """Concatenate along the last axis."""
    ts = tuple(as_tensor(t) for t in tensors)
    lead = {t.shape[:-1] for t in ts}
    if len(lead) != 1:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in ts]}")
    out = Tensor(np.concatenate([t.data for t in ts], axis=-1))
    if _recording(tape, *ts):
        out.requires_grad = True
        bounds = np.cumsum([0] + [t.shape[-1] for t in ts])

        def backward(g):
            return [g[..., lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]

        tape.record(out, ts, backward)
    return out


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, width: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(width, DTYPE), np.ones(width, DTYPE), momentum, eps)


def batchnorm(x, gamma, beta, state: BatchNormState, train: bool, tape: Tape | None = None) -> Tensor:
    """Batch normalization over axis 0 of a (batch, features) input.

    In train mode the batch statistics are used and the running statistics are
    updated in place (unbiased variance, as is customary). In eval mode the
    op is a fixed per-feature affine map.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 2 or x.shape[1] != gamma.shape[0] or gamma.shape != beta.shape:
        raise DimensionError(f"batchnorm shapes: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    eps = state.eps
    if train:
        n = x.shape[0]
        if n < 2:
            raise InvariantError("batchnorm in train mode needs a batch of at least 2")
        mean = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        mom = state.momentum
        state.running_mean = (1 - mom) * state.running_mean + mom * mean
        state.running_var = (1 - mom) * state.running_var + mom * var * n / (n - 1)
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = Tensor(gamma.data * xhat + beta.data)
    if _recording(tape, x, gamma, beta):
        out.requires_grad = True

        def backward(g):
            ggamma = (g * xhat).sum(axis=0) if gamma.requires_grad else None
            gbeta = g.sum(axis=0) if beta.requires_grad else None
            gx = None
            if x.requires_grad:
                gxhat = g * gamma.data
                if train:
                    gx = inv_std * (gxhat - gxhat.mean(axis=0) - xhat * (gxhat * xhat).mean(axis=0))
                else:
                    gx = gxhat * inv_std
            return gx, ggamma, gbeta

        tape.record(out, (x, gamma, beta), backward)
    return out


def softmax_probability(s, T: float = 1.0) -> np.ndarray:
    """Softmax of ``s / T`` over the last axis."""
    if not T > 0:
        raise InvariantError(f"temperature must be positive, got {T}")
    z = np.asarray(s, dtype=DTYPE) / T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(probabilities, label: int) -> float:
    p = np.asarray(probabilities, dtype=DTYPE)
    return float(-np.log(max(p[label], LOG_CLAMP)))


def softmax_cross_entropy(logits, labels, tape: Tape | None = None) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(logits).

    The backward pass uses the fused rule ``(p - onehot) / batch``.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise DimensionError(f"logits {z.shape} vs labels {labels.shape}")
    p = softmax_probability(z)
    rows = np.arange(z.shape[0])
    loss = -np.log(np.maximum(p[rows, labels], LOG_CLAMP)).mean()
    out = Tensor(loss)
    if _recording(tape, logits):
        out.requires_grad = True

        def backward(g):
            d = p.copy()
            d[rows, labels] -= 1.0
            return (d * (g / z.shape[0]),)

        tape.record(out, (logits,), backward)
    return out


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update, applied to ``params`` in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise DimensionError(f"{name}: grad {g.shape} vs param {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        tmp = np.empty_like(p)
        m *= b1
        np.multiply(g, 1 - b1, out=tmp)
        m += tmp
        v *= b2
        np.multiply(g, g, out=tmp)
        tmp *= 1 - b2
        v += tmp
        if lr:
            # p -= lr * m_hat / (sqrt(v_hat) + eps)
            np.divide(v, c2, out=tmp)
            np.sqrt(tmp, out=tmp)
            tmp += state.eps
            np.divide(m, tmp, out=tmp)
            tmp *= lr / c1
            p -= tmp
    return params, state


def sgd_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    for name, g in grads.items():
        params[name] -= lr * g
    return params


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_name: str | None
    worst_index: tuple[int, ...] | None
    analytic: dict[str, np.ndarray]
    numeric: dict[str, np.ndarray]

    @property
    def ok(self) -> bool:
        return self.max_rel_err <= self.tolerance

    tolerance: float = 1e-5


def relative_error(a: np.ndarray, n: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; exact agreement (including 0 vs 0) gives 0."""
    diff = np.abs(a - n)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return diff / scale


def grad_check(fn: Callable[[dict[str, Tensor], Tape | None], Tensor],
               inputs: Mapping[str, np.ndarray], tolerance: float = 1e-5,
               h: float = 1e-6, wrt: Iterable[str] | None = None,
               floor: float = 1e-8, raise_on_fail: bool = True) -> GradCheckReport:
    """Compare tape gradients of ``sum(fn(inputs))`` against central differences.

    ``wrt`` restricts the checked inputs (default: all). Every coordinate of every
    checked input is perturbed, so keep the inputs small.
    """
    base = {k: np.array(v, dtype=DTYPE) for k, v in inputs.items()}
    names = list(base) if wrt is None else list(wrt)

    tape = Tape()
    tensors = {k: Tensor(v, requires_grad=k in names) for k, v in base.items()}
    out = fn(tensors, tape)
    tape.backward(out)
    analytic = {k: tape.grad(tensors[k]).copy() for k in names}

    def objective(vals):
        return float(fn({k: Tensor(v) for k, v in vals.items()}, None).data.sum())

    numeric = {}
    worst = (0.0, None, None)
    for k in names:
        arr = base[k]
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            fp = objective(base)
            arr[idx] = orig - h
            fm = objective(base)
            arr[idx] = orig
            num[idx] = (fp - fm) / (2 * h)
        numeric[k] = num
        if num.size:
            err = relative_error(analytic[k], num, floor)
            i = np.unravel_index(int(np.argmax(err)), err.shape)
            if err[i] > worst[0]:
                worst = (float(err[i]), k, tuple(int(j) for j in i))
    report = GradCheckReport(worst[0], worst[1], worst[2], analytic, numeric, tolerance)
    if raise_on_fail and not report.ok:
        raise GradCheckError(
            f"gradient mismatch at {worst[1]}{list(worst[2])}: relative error {worst[0]:.3e} > {tolerance:g}",
            name=worst[1], index=worst[2], rel_err=worst[0])
    return report
