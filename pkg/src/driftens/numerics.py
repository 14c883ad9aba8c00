"""Dense numeric kernel: matrices, named parameter sets, optimizer steps,
and a central-finite-difference gradient checker.

Everything is float64. Matrices are plain 2-D numpy arrays; the helpers here
add the shape/finiteness checking that the rest of the package relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when operand dimensions are inconsistent."""


class NumericError(ArithmeticError):
    """Raised when a computation produces non-finite values."""


def as_matrix(a, rows=None, cols=None):
    """Coerce to a float64 2-D array, optionally enforcing a shape."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ShapeError(f"expected {cols} cols, got {m.shape[1]}")
    return m


def check_finite(a, what="result"):
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {what}")
    return a


def matmul(a, b):
    """Matrix product with explicit shape checking."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ ({a.shape} x {b.shape})")
    return check_finite(a @ b, "matmul output")


def make_rng(seed, *path):
    """Deterministic, splittable PRNG.

    `path` is a sequence of integers identifying a component; the same
    (seed, path) always yields the same stream, and disjoint paths yield
    independent streams.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, path)]))


@dataclass
class OptimConfig:
    """Optimizer hyper-parameters.

    method is 'sgd' or 'adamw' (bias-corrected adaptive moments with
    decoupled weight decay).
    """

    method: str = "adamw"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.method not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer method {self.method!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1/beta2 must lie in [0, 1)")


class ParamSet:
    """Named collection of float64 arrays plus optimizer moment buffers."""

    def __init__(self, slots=None):
        self.slots: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        if slots:
            for name, value in slots.items():
                self.add(name, value)

    def add(self, name, value):
        arr = np.array(value, dtype=np.float64)
        self.slots[name] = arr
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name):
        return self.slots[name]

    def __setitem__(self, name, value):
        if name not in self.slots:
            self.add(name, value)
            return
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self.slots[name].shape:
            raise ShapeError(f"slot {name!r}: shape {arr.shape} != {self.slots[name].shape}")
        self.slots[name] = arr

    def __contains__(self, name):
        return name in self.slots

    def names(self):
        return list(self.slots)

    def n_scalars(self):
        return sum(a.size for a in self.slots.values())

    def zeros_like(self):
        out = ParamSet()
        for name, arr in self.slots.items():
            out.add(name, np.zeros_like(arr))
        return out

    def copy(self):
        out = ParamSet()
        for name, arr in self.slots.items():
            out.add(name, arr.copy())
        for name in self.slots:
            out.m[name] = self.m[name].copy()
            out.v[name] = self.v[name].copy()
        out.step = self.step
        return out

    def flatten(self):
        """Concatenate all slots into one vector (stable name order)."""
        if not self.slots:
            return np.zeros(0)
        return np.concatenate([self.slots[n].ravel() for n in self.slots])

    def unflatten(self, vec):
        """Write a flat vector back into the named slots."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_scalars():
            raise ShapeError("flat vector length mismatch")
        i = 0
        for name in self.slots:
            size = self.slots[name].size
            self.slots[name] = vec[i:i + size].reshape(self.slots[name].shape).copy()
            i += size

    def check_finite(self):
        for name, arr in self.slots.items():
            check_finite(arr, f"parameter {name!r}")


def optim_step(params: ParamSet, grads: ParamSet, cfg: OptimConfig):
    """One in-place optimizer step; returns the updated ParamSet.

    sgd is exactly p - lr*(g + weight_decay*p). adamw applies the standard
    bias-corrected moment update with decoupled weight decay.
    """
    for name in params.names():
        if name not in grads:
            raise ShapeError(f"missing gradient for slot {name!r}")
        if grads[name].shape != params[name].shape:
            raise ShapeError(f"gradient shape mismatch for slot {name!r}")
        check_finite(grads[name], f"gradient {name!r}")

    params.step += 1
    t = params.step
    lr = cfg.learning_rate
    for name in params.names():
        p = params.slots[name]
        g = grads[name]
        if cfg.method == "sgd":
            p -= lr * (g + cfg.weight_decay * p)
        else:
            p -= lr * cfg.weight_decay * p
            m = params.m[name]
            v = params.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            m_hat = m / (1.0 - cfg.beta1 ** t)
            v_hat = v / (1.0 - cfg.beta2 ** t)
            p -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        check_finite(p, f"parameter {name!r} after step")
    return params


def finite_diff_check(loss_fn, params: ParamSet, analytic: ParamSet, h=1e-5):
    """Max relative error between analytic gradients and central differences.

    Relative error per entry is |analytic - numeric| / (|numeric| + 1e-8).
    Intended for small parameter sets only.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    n = params.n_scalars()
    if n >= 10_000:
        raise ValueError(f"parameter set too large for finite differences ({n} scalars)")

    flat = params.flatten()
    ana = np.concatenate([analytic[name].ravel() for name in params.names()])
    worst = 0.0
    probe = params.copy()
    for i in range(n):
        bumped = flat.copy()
        bumped[i] += h
        probe.unflatten(bumped)
        up = float(loss_fn(probe))
        bumped[i] -= 2.0 * h
        probe.unflatten(bumped)
        down = float(loss_fn(probe))
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError("non-finite loss during finite-difference probe")
        numeric = (up - down) / (2.0 * h)
        err = abs(ana[i] - numeric) / (abs(numeric) + 1e-8)
        worst = max(worst, err)
    probe.unflatten(flat)
    return worst
