"""Minimal reverse-mode autodiff over float64 numpy arrays (ndim <= 2).

A Tape collects backward closures in forward execution order, which is a
topological order by construction; backward walks it once in reverse. Every
op validates its output for non-finite values and raises immediately, so a
diverging run fails at the op that produced the NaN.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

check_finite = True


class NonFiniteError(FloatingPointError):
    pass


def _validate(data: np.ndarray, op: str) -> None:
    if check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.ndim > 2:
            raise ValueError("tensors are at most 2-D")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Named leaf tensor with persistent gradient and AdamW state."""

    __slots__ = ("name", "m", "v", "step")

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0


class Tape:
    """Op records for one forward pass; backward may run exactly once."""

    def __init__(self):
        self.records: list = []
        self.consumed = False

    def record(self, fn) -> None:
        self.records.append(fn)

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise RuntimeError("tape already backpropagated")
        self.consumed = True
        if loss.data.size != 1:
            raise ValueError("backward starts from a scalar")
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self.records):
            fn()


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _accum(t: Tensor, g: np.ndarray) -> None:
    g = _unbroadcast(np.asarray(g, dtype=np.float64), t.data.shape)
    t.grad = g if t.grad is None else t.grad + g


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _binary(tape: Tape, a, b, op: str, fwd, da, db) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(fwd(a.data, b.data), requires_grad=a.requires_grad or b.requires_grad)
    _validate(out.data, op)

    def bwd():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, da(g, a.data, b.data))
        if b.requires_grad:
            _accum(b, db(g, a.data, b.data))

    tape.record(bwd)
    return out


def add(tape, a, b):
    return _binary(tape, a, b, "add", lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(tape, a, b):
    return _binary(tape, a, b, "sub", lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(tape, a, b):
    return _binary(tape, a, b, "mul", lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(tape, a, b):
    return _binary(tape, a, b, "div", lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def matmul(tape: Tape, x: Tensor, w: Tensor) -> Tensor:
    out = Tensor(x.data @ w.data, requires_grad=x.requires_grad or w.requires_grad)
    _validate(out.data, "matmul")

    def bwd():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            _accum(x, g @ w.data.T)
        if w.requires_grad:
            _accum(w, x.data.T @ g)

    tape.record(bwd)
    return out


def linear(tape: Tape, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ W + b for x (n, c_in), W (c_in, c_out), b (c_out,)."""
    out = Tensor(x.data @ w.data + b.data,
                 requires_grad=x.requires_grad or w.requires_grad or b.requires_grad)
    _validate(out.data, "linear")

    def bwd():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            _accum(x, g @ w.data.T)
        if w.requires_grad:
            _accum(w, x.data.T @ g)
        if b.requires_grad:
            _accum(b, g.sum(axis=0))

    tape.record(bwd)
    return out


def relu(tape: Tape, x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), requires_grad=x.requires_grad)

    def bwd():
        if out.grad is not None and x.requires_grad:
            _accum(x, out.grad * (x.data > 0))

    tape.record(bwd)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(tape: Tape, x: Tensor) -> Tensor:
    """log(1 + exp(x)) evaluated in the overflow-safe form."""
    out = Tensor(np.logaddexp(0.0, x.data), requires_grad=x.requires_grad)
    _validate(out.data, "softplus")

    def bwd():
        if out.grad is not None and x.requires_grad:
            _accum(x, out.grad * _sigmoid(x.data))

    tape.record(bwd)
    return out


def group_norm(tape: Tape, x: Tensor, groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Per-row, per-group standardization followed by a channel affine."""
    n, c = x.data.shape
    if c % groups != 0:
        raise ValueError(f"{c} channels not divisible by {groups} groups")
    s = c // groups
    xg = x.data.reshape(n, groups, s)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * istd).reshape(n, c)
    out = Tensor(xhat * gamma.data + beta.data,
                 requires_grad=x.requires_grad or gamma.requires_grad or beta.requires_grad)
    _validate(out.data, "group_norm")

    def bwd():
        g = out.grad
        if g is None:
            return
        if beta.requires_grad:
            _accum(beta, g.sum(axis=0))
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=0))
        if x.requires_grad:
            dxh = (g * gamma.data).reshape(n, groups, s)
            xh = xhat.reshape(n, groups, s)
            m1 = dxh.mean(axis=2, keepdims=True)
            m2 = (dxh * xh).mean(axis=2, keepdims=True)
            _accum(x, (istd * (dxh - m1 - xh * m2)).reshape(n, c))

    tape.record(bwd)
    return out


class ScatterPlan:
    """Precomputed grouping for repeated scatters with the same targets."""

    __slots__ = ("n", "targets", "order", "starts", "rows")

    def __init__(self, targets: np.ndarray, n: int):
        targets = np.asarray(targets, dtype=np.int64)
        if targets.size and (targets.min() < 0 or targets.max() >= n):
            raise IndexError("scatter target out of range")
        self.n = n
        self.targets = targets
        if targets.size and np.any(targets[1:] < targets[:-1]):
            self.order = np.argsort(targets, kind="stable")
            sorted_targets = targets[self.order]
        else:
            self.order = None
            sorted_targets = targets
        if targets.size:
            self.starts = np.flatnonzero(np.r_[True, sorted_targets[1:] != sorted_targets[:-1]])
            self.rows = sorted_targets[self.starts]
        else:
            self.starts = np.zeros(0, dtype=np.int64)
            self.rows = np.zeros(0, dtype=np.int64)

    def apply(self, g: np.ndarray) -> np.ndarray:
        out = np.zeros((self.n,) + g.shape[1:])
        if self.targets.size == 0:
            return out
        gs = g if self.order is None else g[self.order]
        out[self.rows] = np.add.reduceat(gs, self.starts, axis=0)
        return out


def _rows_scatter(g: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    return ScatterPlan(idx, n).apply(g)


def gather_rows(tape: Tape, x: Tensor, idx: np.ndarray,
                scatter_plan: ScatterPlan | None = None) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise IndexError("gather index out of range")
    out = Tensor(x.data[idx], requires_grad=x.requires_grad)

    def bwd():
        if out.grad is not None and x.requires_grad:
            plan = scatter_plan or ScatterPlan(idx, x.data.shape[0])
            _accum(x, plan.apply(out.grad))

    tape.record(bwd)
    return out


def scatter_sum(tape: Tape, messages: Tensor, targets: np.ndarray, n: int,
                plan: ScatterPlan | None = None) -> Tensor:
    """Row i of the result is the sum of messages whose target is i."""
    if plan is None:
        plan = ScatterPlan(targets, n)
    if plan.targets.shape[0] != messages.data.shape[0]:
        raise ValueError("one target per message required")
    out = Tensor(plan.apply(messages.data), requires_grad=messages.requires_grad)

    def bwd():
        if out.grad is not None and messages.requires_grad:
            _accum(messages, out.grad[plan.targets])

    tape.record(bwd)
    return out


def adjacency_sum(tape: Tape, x: Tensor, table: np.ndarray,
                  table_t: np.ndarray | None = None) -> Tensor:
    """Row i of the result is sum_s x[table[i, s]].

    `table` is an (n, max_degree) index table padded with n (one past the
    last row), which addresses an implicit zero row. The backward pass sums
    with `table_t`, the table of the transposed adjacency; pass the same
    table for symmetric neighborhoods.
    """
    n = x.data.shape[0]
    padded = np.concatenate([x.data, np.zeros((1,) + x.data.shape[1:])], axis=0)
    out = Tensor(padded[table].sum(axis=1), requires_grad=x.requires_grad)

    def bwd():
        g = out.grad
        if g is None or not x.requires_grad:
            return
        tt = table if table_t is None else table_t
        if tt.shape[0] != n:
            raise ValueError("transpose table must have one row per input row")
        gp = np.concatenate([g, np.zeros((1,) + g.shape[1:])], axis=0)
        _accum(x, gp[tt].sum(axis=1))

    tape.record(bwd)
    return out


def concat_linear(tape: Tape, parts: list, w: Tensor) -> Tensor:
    """concat_cols(parts) @ w without materializing the concatenation."""
    parts = [_wrap(p) for p in parts]
    offsets = np.cumsum([0] + [p.data.shape[1] for p in parts])
    if offsets[-1] != w.data.shape[0]:
        raise ValueError("weight rows must match total part width")
    acc = None
    for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
        term = p.data @ w.data[lo:hi]
        acc = term if acc is None else acc + term
    out = Tensor(acc, requires_grad=w.requires_grad or any(p.requires_grad for p in parts))
    _validate(out.data, "concat_linear")

    def bwd():
        g = out.grad
        if g is None:
            return
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accum(p, g @ w.data[lo:hi].T)
        if w.requires_grad:
            _accum(w, np.concatenate([p.data.T @ g for p in parts], axis=0))

    tape.record(bwd)
    return out


def concat_cols(tape: Tape, parts: list) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=1),
                 requires_grad=any(p.requires_grad for p in parts))
    offsets = np.cumsum([0] + [p.data.shape[1] for p in parts])

    def bwd():
        g = out.grad
        if g is None:
            return
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accum(p, g[:, lo:hi])

    tape.record(bwd)
    return out


def sum_all(tape: Tape, x: Tensor) -> Tensor:
    out = Tensor(x.data.sum(), requires_grad=x.requires_grad)

    def bwd():
        if out.grad is not None and x.requires_grad:
            _accum(x, np.broadcast_to(out.grad, x.data.shape))

    tape.record(bwd)
    return out


def mean_all(tape: Tape, x: Tensor) -> Tensor:
    out = Tensor(x.data.mean(), requires_grad=x.requires_grad)
    inv = 1.0 / x.data.size

    def bwd():
        if out.grad is not None and x.requires_grad:
            _accum(x, np.broadcast_to(out.grad * inv, x.data.shape))

    tape.record(bwd)
    return out


# -- optimizer ----------------------------------------------------------------

def adamw_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.01) -> None:
    """Decoupled weight decay, then a bias-corrected Adam moment update."""
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name!r} has no gradient")
        p.step += 1
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        g = p.grad
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        mhat = p.m / (1.0 - beta1 ** p.step)
        vhat = p.v / (1.0 - beta2 ** p.step)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


class AdamW:
    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params.values()) if isinstance(params, dict) else list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay

    def step(self) -> None:
        adamw_step(self.params, self.lr, self.betas[0], self.betas[1],
                   self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- initialization -----------------------------------------------------------

def kaiming_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, params: dict, extra: dict | None = None) -> None:
    """Directory checkpoint: manifest.json plus one params.bin blob file."""
    os.makedirs(path, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name in sorted(params):
        p = params[name]
        blob = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(p.data.shape),
                        "offset": offset, "nbytes": len(blob), "step": p.step})
        blobs.append(blob)
        offset += len(blob)
    manifest = {"format": 1, "params": entries, "extra": extra or {}}
    with open(os.path.join(path, "params.bin"), "wb") as f:
        for blob in blobs:
            f.write(blob)
    tmp = os.path.join(path, "manifest.json.tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    os.replace(tmp, os.path.join(path, "manifest.json"))


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns ({name: Parameter}, extra-manifest dict)."""
    with open(os.path.join(path, "manifest.json"), "r", encoding="utf-8") as f:
        manifest = json.load(f)
    with open(os.path.join(path, "params.bin"), "rb") as f:
        raw = f.read()
    params = {}
    for ent in manifest["params"]:
        arr = np.frombuffer(raw, dtype="<f8", count=int(np.prod(ent["shape"], dtype=int)),
                            offset=ent["offset"]).reshape(ent["shape"])
        p = Parameter(ent["name"], arr.copy())
        p.step = ent.get("step", 0)
        params[ent["name"]] = p
    return params, manifest.get("extra", {})
