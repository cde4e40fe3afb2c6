"""Small reverse-mode autodiff over 2-D numpy arrays, with Adam and checkpoints."""

from __future__ import annotations

import contextlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class Tensor:
    """A value in the computation graph.

    Every op returns a new ``Tensor`` whose ``_backward`` closure pushes
    ``out.grad`` into its parents. Leaves that need gradients are created
    with ``requires_grad=True`` (usually through :class:`ParamStore`).
    """

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, _prev: tuple = (), name: str = ""):
        self.data = np.asarray(data, dtype=DEFAULT_DTYPE) if not isinstance(data, np.ndarray) else data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._prev = _prev
        self._backward: Callable[[], None] = _noop
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def _acc(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar output")
        order = _topo(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            node._backward()

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _noop():
    pass


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if id(p) not in seen:
                stack.append((p, False))
    return order


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (forward values only)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _make(data, parents: tuple, backward_fn) -> Tensor:
    rg = _GRAD_ENABLED and any(t.requires_grad for t in parents)
    out = Tensor(data, requires_grad=rg, _prev=parents if rg else ())
    if rg:
        out._backward = lambda: backward_fn(out)
    return out


def constant(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=DEFAULT_DTYPE))


# -- elementwise and linear ops ------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(out):
        if a.requires_grad:
            a._acc(out.grad @ b.data.T)
        if b.requires_grad:
            b._acc(a.data.T @ out.grad)

    return _make(a.data @ b.data, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a (1, cols) row broadcast over ``a``'s rows."""
    if a.shape != b.shape and not (b.data.ndim == 2 and b.shape[0] == 1 and b.shape[1] == a.shape[-1]):
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")

    def bw(out):
        if a.requires_grad:
            a._acc(out.grad)
        if b.requires_grad:
            b._acc(out.grad if a.shape == b.shape else out.grad.sum(axis=0, keepdims=True))

    return _make(a.data + b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may be a broadcast row."""
    if a.shape != b.shape and not (b.data.ndim == 2 and b.shape[0] == 1 and b.shape[1] == a.shape[-1]):
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}")

    def bw(out):
        if a.requires_grad:
            a._acc(out.grad * b.data)
        if b.requires_grad:
            g = out.grad * a.data
            b._acc(g if a.shape == b.shape else g.sum(axis=0, keepdims=True))

    return _make(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    def bw(out):
        a._acc(out.grad * c)

    return _make(a.data * c, (a,), bw)


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array (masks, dropout keep-masks)."""

    def bw(out):
        a._acc(out.grad * c)

    return _make(a.data * c, (a,), bw)


def transpose(a: Tensor) -> Tensor:
    def bw(out):
        a._acc(out.grad.T)

    return _make(a.data.T, (a,), bw)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    if not 0 < slope < 1:
        raise ValueError(f"slope must lie in (0, 1), got {slope}")
    pos = a.data >= 0
    factor = np.where(pos, 1.0, slope)

    def bw(out):
        a._acc(out.grad * factor)

    return _make(a.data * factor, (a,), bw)


def relu(a: Tensor) -> Tensor:
    pos = (a.data > 0).astype(a.data.dtype)

    def bw(out):
        a._acc(out.grad * pos)

    return _make(a.data * pos, (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(out):
        a._acc(out.grad / a.data)

    return _make(np.log(a.data), (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    def bw(out):
        a._acc(np.broadcast_to(out.grad, a.shape))

    return _make(np.asarray(a.data.sum()), (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


# -- row softmax family --------------------------------------------------------

def softmax_rows(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(out):
        g = out.grad
        a._acc(s * (g - (g * s).sum(axis=1, keepdims=True)))

    return _make(s, (a,), bw)


def masked_softmax_rows(a: Tensor, mask: np.ndarray) -> Tensor:
    """Row softmax restricted to entries where ``mask`` is true.

    Every row must have at least one allowed entry; disallowed entries get
    probability exactly 0.
    """
    z = np.where(mask, a.data, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(out):
        g = out.grad
        a._acc(s * (g - (g * s).sum(axis=1, keepdims=True)))

    return _make(s, (a,), bw)


def log_softmax_rows(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out_data = z - lse
    s = np.exp(out_data)

    def bw(out):
        g = out.grad
        a._acc(g - s * g.sum(axis=1, keepdims=True))

    return _make(out_data, (a,), bw)


def _check_targets(targets, n_rows: int, n_cls: int) -> np.ndarray:
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (n_rows,):
        raise ValueError(f"expected {n_rows} targets, got shape {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= n_cls):
        raise IndexError(f"target out of range for {n_cls} classes")
    return t


def cross_entropy(pred_rows: Tensor, targets) -> Tensor:
    """Mean negative log-probability of the targets; rows are distributions."""
    n, k = pred_rows.shape
    t = _check_targets(targets, n, k)
    if n == 0:
        return constant(0.0)
    picked = pred_rows.data[np.arange(n), t]

    def bw(out):
        g = np.zeros_like(pred_rows.data)
        g[np.arange(n), t] = -out.grad / (n * picked)
        pred_rows._acc(g)

    return _make(np.asarray(-np.log(picked).mean()), (pred_rows,), bw)


def softmax_cross_entropy(logits: Tensor, targets, weights: Optional[np.ndarray] = None) -> Tensor:
    """Fused softmax + cross-entropy on logits.

    With ``weights`` the loss is ``sum(w_i * nll_i) / sum(w_i)``; rows with zero
    weight are ignored (used for loss masks).
    """
    n, k = logits.shape
    t = _check_targets(targets, n, k)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=logits.data.dtype)
    total = w.sum()
    if n == 0 or total == 0:
        return constant(0.0)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    nll = -logp[np.arange(n), t]

    def bw(out):
        p = np.exp(logp)
        p[np.arange(n), t] -= 1.0
        logits._acc(p * (w / total)[:, None] * out.grad)

    return _make(np.asarray((w * nll).sum() / total), (logits,), bw)


# -- structural ops -------------------------------------------------------------

def take_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def bw(out):
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)
        a._acc(g)

    return _make(a.data[idx], (a,), bw)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(out):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._acc(out.grad[lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    sizes = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(out):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._acc(out.grad[:, lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization followed by a learned affine map."""
    mu = a.data.mean(axis=1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = a.shape[1]

    def bw(out):
        g = out.grad
        if gain.requires_grad:
            gain._acc((g * xhat).sum(axis=0, keepdims=True))
        if bias.requires_grad:
            bias._acc(g.sum(axis=0, keepdims=True))
        if a.requires_grad:
            gx = g * gain.data
            a._acc(inv / d * (d * gx - gx.sum(axis=1, keepdims=True)
                               - xhat * (gx * xhat).sum(axis=1, keepdims=True)))

    return _make(xhat * gain.data + bias.data, (a, gain, bias), bw)


def dropout(a: Tensor, rate: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-rate) at train time."""
    if not train or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul_const(a, keep)


# -- parameters -------------------------------------------------------------------

def glorot_init(rows: int, cols: int, rng_seed, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Uniform Glorot samples in [-sqrt(6/(rows+cols)), +sqrt(6/(rows+cols))]."""
    if rows < 1 or cols < 1:
        raise ValueError("glorot_init needs rows, cols >= 1")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    bound = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols)).astype(dtype)


@dataclass
class ParamStore:
    """Named parameters with Adam moment buffers."""

    params: dict[str, Tensor] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.array(value, dtype=DEFAULT_DTYPE, copy=True), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def freeze(self, prefixes: Sequence[str]):
        for n, t in self.params.items():
            t.requires_grad = not any(n.startswith(p) for p in prefixes)

    def unfreeze(self):
        for t in self.params.values():
            t.requires_grad = True

    def copy(self) -> "ParamStore":
        out = ParamStore(step=self.step)
        for n, t in self.params.items():
            nt = out.add(n, t.data)
            nt.requires_grad = t.requires_grad
            out.m[n] = self.m[n].copy()
            out.v[n] = self.v[n].copy()
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}


def adam_step(store: ParamStore, lr: float = 1e-5, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, only: Optional[Sequence[str]] = None):
    """One bias-corrected Adam update over every parameter holding a gradient.

    ``only`` restricts the update to the named parameters. Gradients are
    cleared afterwards.
    """
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    names = store.names() if only is None else list(only)
    for n in names:
        p = store.params[n]
        if p.grad is None or not p.requires_grad:
            continue
        g = p.grad
        store.m[n] = beta1 * store.m[n] + (1.0 - beta1) * g
        store.v[n] = beta2 * store.v[n] + (1.0 - beta2) * g * g
        mhat = store.m[n] / c1
        vhat = store.v[n] / c2
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
    store.zero_grad()


# -- verification -------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    per_param: dict[str, float]
    n_checked: int

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(f: Callable[[ParamStore], Tensor], store: ParamStore, h: float = 1e-5,
               tol: float = 1e-4, names: Optional[Sequence[str]] = None,
               max_entries: Optional[int] = None, rng_seed: int = 0,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    The per-entry error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    entries whose true gradient is ~0 from dividing round-off by round-off.
    ``max_entries`` samples that many entries per tensor instead of all.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    names = store.names() if names is None else list(names)
    store.zero_grad()
    out = f(store)
    if not np.isfinite(out.data).all():
        raise FloatingPointError("f is not finite at the check point")
    if out.requires_grad:
        out.backward()
    rng = np.random.default_rng(rng_seed)
    per_param, worst, worst_name, count = {}, 0.0, "", 0
    for n in names:
        p = store.params[n]
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        err_p = 0.0
        for i in idx:
            old = flat[i]
            with no_grad():
                flat[i] = old + h
                fp = f(store).item()
                flat[i] = old - h
                fm = f(store).item()
            flat[i] = old
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(f"f not finite when perturbing {n}[{i}]")
            num = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            err_p = max(err_p, err)
            count += 1
        per_param[n] = err_p
        if err_p >= worst:
            worst, worst_name = err_p, n
    store.zero_grad()
    return GradCheckReport(worst, worst_name, per_param, count)


# -- checkpoints ----------------------------------------------------------------------

def save_checkpoint(store: ParamStore, path, extra: Optional[dict] = None):
    """Write ``manifest.json`` and ``tensors.bin`` (little-endian float64) under ``path``."""
    os.makedirs(path, exist_ok=True)
    manifest = {"format": "scenetext-ckpt-1", "dtype": "<f8", "step": store.step,
                "tensors": [], "extra": extra or {}}
    offset = 0
    with open(os.path.join(path, "tensors.bin"), "wb") as fh:
        for n, t in store.params.items():
            raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
            fh.write(raw)
            manifest["tensors"].append({"name": n, "shape": list(t.shape), "offset": offset,
                                        "nbytes": len(raw)})
            offset += len(raw)
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_checkpoint(path) -> ParamStore:
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    with open(os.path.join(path, "tensors.bin"), "rb") as fh:
        blob = fh.read()
    store = ParamStore(step=manifest["step"])
    for ent in manifest["tensors"]:
        raw = blob[ent["offset"]:ent["offset"] + ent["nbytes"]]
        store.add(ent["name"], np.frombuffer(raw, dtype="<f8").reshape(ent["shape"]))
    return store
