"""Online-trainable forecasters.

Two complementary families: variable-independent models that share their
parameters across variables and predict each row on its own (linear-ar,
cross-time-mlp, cross-time-conv, concat-lite), and a cross-variable model
that mixes information across variables through convolution channels
(cross-variable-conv).

Each model exposes predict / loss / update with analytic gradients; the
gradients are hand-derived and validated against finite differences in the
test suite. Activations are tanh so per-round losses stay bounded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    NumericError,
    OptimConfig,
    ParamSet,
    ShapeError,
    as_matrix,
    check_finite,
    optim_step,
)

KINDS = ("linear-ar", "cross-time-mlp", "cross-time-conv", "cross-variable-conv", "concat-lite")

CONV_KERNEL = 3


@dataclass
class SeriesWindow:
    """One online round: look-back block x (M x L) and target block y (M x H)."""

    x: np.ndarray
    y: np.ndarray
    t: int = 0


@dataclass
class ForecasterSpec:
    kind: str = "cross-time-mlp"
    d_m: int = 16
    n_layers: int = 2
    instance_norm: bool = False
    optim: OptimConfig = field(default_factory=OptimConfig)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown forecaster kind {self.kind!r} (choose from {KINDS})")
        if self.d_m < 1 or self.n_layers < 1:
            raise ValueError("d_m and n_layers must be >= 1")


@dataclass
class NormStats:
    """Per-variable standardization statistics."""

    mu: np.ndarray
    sigma: np.ndarray
    eps: float = 1e-8

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if np.any(self.sigma < 0) or self.eps <= 0:
            raise ValueError("sigma must be >= 0 and eps > 0")


def mse_loss(yhat, y):
    """Squared error averaged over variables and horizon."""
    yhat = as_matrix(yhat)
    y = as_matrix(y, rows=yhat.shape[0], cols=yhat.shape[1])
    return float(np.mean((yhat - y) ** 2))


def mse_grad(yhat, y):
    """d(mse_loss)/d(yhat)."""
    return 2.0 * (yhat - y) / yhat.size


def _uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Forecaster:
    """Base class: subclasses implement forward/backward, the rest is shared."""

    def __init__(self, spec, M, L, H):
        self.spec = spec
        self.M, self.L, self.H = int(M), int(L), int(H)
        self.params = ParamSet()

    # subclass API -----------------------------------------------------
    def forward(self, x):
        """Return (yhat, cache)."""
        raise NotImplementedError

    def backward(self, cache, gy):
        """Return ParamSet of gradients given d(loss)/d(yhat)."""
        raise NotImplementedError

    # shared surface ---------------------------------------------------
    def predict(self, x):
        x = as_matrix(x, rows=self.M, cols=self.L)
        yhat, _ = self.forward(x)
        return check_finite(yhat, "forecast")

    def loss(self, x, y):
        return mse_loss(self.predict(x), y)

    def grads(self, x, y):
        x = as_matrix(x, rows=self.M, cols=self.L)
        y = as_matrix(y, rows=self.M, cols=self.H)
        yhat, cache = self.forward(x)
        g = self.backward(cache, mse_grad(yhat, y))
        return mse_loss(yhat, y), g

    def update(self, x, y):
        """One optimizer step on the model's own MSE loss; returns pre-step loss."""
        loss_before, g = self.grads(x, y)
        for name in g.names():
            if not np.all(np.isfinite(g[name])):
                raise NumericError(f"non-finite gradient in slot {name!r} (loss={loss_before})")
        optim_step(self.params, g, self.spec.optim)
        self.params.check_finite()
        return loss_before


class LinearAR(Forecaster):
    """Shared linear map from each variable's look-back row to its horizon."""

    def __init__(self, spec, M, L, H, rng):
        super().__init__(spec, M, L, H)
        self.params.add("W", _uniform_init(rng, (L, H), L))
        self.params.add("b", _uniform_init(rng, (H,), L))

    def forward(self, x):
        yhat = x @ self.params["W"] + self.params["b"]
        return yhat, x

    def backward(self, cache, gy):
        x = cache
        g = self.params.zeros_like()
        g["W"] = x.T @ gy
        g["b"] = gy.sum(axis=0)
        return g


class CrossTimeMLP(Forecaster):
    """tanh MLP encoder applied per variable with shared weights, linear head."""

    def __init__(self, spec, M, L, H, rng):
        super().__init__(spec, M, L, H)
        widths = [L] + [spec.d_m] * spec.n_layers
        for i in range(spec.n_layers):
            self.params.add(f"W{i}", _uniform_init(rng, (widths[i], widths[i + 1]), widths[i]))
            self.params.add(f"b{i}", _uniform_init(rng, (widths[i + 1],), widths[i]))
        self.params.add("Wh", _uniform_init(rng, (spec.d_m, H), spec.d_m))
        self.params.add("bh", _uniform_init(rng, (H,), spec.d_m))

    def forward(self, x):
        acts = [x]
        a = x
        for i in range(self.spec.n_layers):
            a = np.tanh(a @ self.params[f"W{i}"] + self.params[f"b{i}"])
            acts.append(a)
        yhat = a @ self.params["Wh"] + self.params["bh"]
        return yhat, acts

    def backward(self, cache, gy):
        acts = cache
        g = self.params.zeros_like()
        g["Wh"] = acts[-1].T @ gy
        g["bh"] = gy.sum(axis=0)
        da = gy @ self.params["Wh"].T
        for i in reversed(range(self.spec.n_layers)):
            dz = da * (1.0 - acts[i + 1] ** 2)
            g[f"W{i}"] = acts[i].T @ dz
            g[f"b{i}"] = dz.sum(axis=0)
            if i > 0:
                da = dz @ self.params[f"W{i}"].T
        return g


def _causal_unfold(x, k, dil):
    """Stack k causally shifted copies of x: U[..., kap, t] = x[..., t-(k-1-kap)*dil]."""
    B, C, L = x.shape
    U = np.zeros((B, C, k, L))
    for kap in range(k):
        s = (k - 1 - kap) * dil
        if s == 0:
            U[:, :, kap, :] = x
        elif s < L:
            U[:, :, kap, s:] = x[:, :, : L - s]
    return U


def _causal_fold(dU, dil):
    """Adjoint of _causal_unfold."""
    B, C, k, L = dU.shape
    dx = np.zeros((B, C, L))
    for kap in range(k):
        s = (k - 1 - kap) * dil
        if s == 0:
            dx += dU[:, :, kap, :]
        elif s < L:
            dx[:, :, : L - s] += dU[:, :, kap, s:]
    return dx


class _ConvStack(Forecaster):
    """Shared machinery for the dilated causal convolution models.

    Layer l uses dilation 2**l. Subclasses fix the batch/channel layout and
    the prediction head.
    """

    def _add_conv_params(self, rng, c_in):
        spec = self.spec
        chans = [c_in] + [spec.d_m] * spec.n_layers
        for i in range(spec.n_layers):
            fan = chans[i] * CONV_KERNEL
            self.params.add(f"C{i}", _uniform_init(rng, (chans[i + 1], chans[i], CONV_KERNEL), fan))
            self.params.add(f"c{i}", _uniform_init(rng, (chans[i + 1],), fan))

    def _conv_forward(self, x3):
        acts = [x3]
        unfolds = []
        a = x3
        for i in range(self.spec.n_layers):
            U = _causal_unfold(a, CONV_KERNEL, 2 ** i)
            z = np.einsum("ock,bckt->bot", self.params[f"C{i}"], U)
            z += self.params[f"c{i}"][None, :, None]
            a = np.tanh(z)
            unfolds.append(U)
            acts.append(a)
        return a, (acts, unfolds)

    def _conv_backward(self, conv_cache, da, g):
        acts, unfolds = conv_cache
        for i in reversed(range(self.spec.n_layers)):
            dz = da * (1.0 - acts[i + 1] ** 2)
            g[f"C{i}"] = np.einsum("bot,bckt->ock", dz, unfolds[i])
            g[f"c{i}"] = dz.sum(axis=(0, 2))
            if i > 0:
                dU = np.einsum("ock,bot->bckt", self.params[f"C{i}"], dz)
                da = _causal_fold(dU, 2 ** i)
        return g


class CrossTimeConv(_ConvStack):
    """Causal temporal convolution per variable with shared filters."""

    def __init__(self, spec, M, L, H, rng):
        Forecaster.__init__(self, spec, M, L, H)
        self._add_conv_params(rng, 1)
        self.params.add("Wh", _uniform_init(rng, (spec.d_m, H), spec.d_m))
        self.params.add("bh", _uniform_init(rng, (H,), spec.d_m))

    def forward(self, x):
        a, conv_cache = self._conv_forward(x[:, None, :])
        z = a[:, :, -1]  # per-variable last-step feature (M x d_m)
        yhat = z @ self.params["Wh"] + self.params["bh"]
        return yhat, (conv_cache, z)

    def backward(self, cache, gy):
        conv_cache, z = cache
        g = self.params.zeros_like()
        g["Wh"] = z.T @ gy
        g["bh"] = gy.sum(axis=0)
        da = np.zeros_like(conv_cache[0][-1])
        da[:, :, -1] = gy @ self.params["Wh"].T
        return self._conv_backward(conv_cache, da, g)


class CrossVariableConv(_ConvStack):
    """Temporal convolution whose channels mix all variables; the last-step
    feature feeds a head that emits every variable's forecast jointly."""

    def __init__(self, spec, M, L, H, rng):
        Forecaster.__init__(self, spec, M, L, H)
        self._add_conv_params(rng, M)
        self.params.add("Wh", _uniform_init(rng, (spec.d_m, M * H), spec.d_m))
        self.params.add("bh", _uniform_init(rng, (M * H,), spec.d_m))

    def forward(self, x):
        a, conv_cache = self._conv_forward(x[None, :, :])
        z = a[0, :, -1]  # last-step feature (d_m,)
        yhat = (z @ self.params["Wh"] + self.params["bh"]).reshape(self.M, self.H)
        return yhat, (conv_cache, z)

    def backward(self, cache, gy):
        conv_cache, z = cache
        gflat = gy.reshape(-1)
        g = self.params.zeros_like()
        g["Wh"] = np.outer(z, gflat)
        g["bh"] = gflat
        da = np.zeros_like(conv_cache[0][-1])
        da[0, :, -1] = self.params["Wh"] @ gflat
        return self._conv_backward(conv_cache, da, g)


class ConcatLite(Forecaster):
    """Two variable-independent encoders whose per-variable features are
    concatenated and fed to one shared head; the head size does not grow
    with the number of variables."""

    def __init__(self, spec, M, L, H, rng):
        super().__init__(spec, M, L, H)
        widths = [L] + [spec.d_m] * spec.n_layers
        for branch in ("a", "b"):
            for i in range(spec.n_layers):
                self.params.add(f"W{branch}{i}",
                                _uniform_init(rng, (widths[i], widths[i + 1]), widths[i]))
                self.params.add(f"b{branch}{i}",
                                _uniform_init(rng, (widths[i + 1],), widths[i]))
        self.params.add("Wh", _uniform_init(rng, (2 * spec.d_m, H), 2 * spec.d_m))
        self.params.add("bh", _uniform_init(rng, (H,), 2 * spec.d_m))

    def _encode(self, x, branch):
        acts = [x]
        a = x
        for i in range(self.spec.n_layers):
            a = np.tanh(a @ self.params[f"W{branch}{i}"] + self.params[f"b{branch}{i}"])
            acts.append(a)
        return acts

    def forward(self, x):
        acts_a = self._encode(x, "a")
        acts_b = self._encode(x, "b")
        u = np.concatenate([acts_a[-1], acts_b[-1]], axis=1)
        yhat = u @ self.params["Wh"] + self.params["bh"]
        return yhat, (acts_a, acts_b, u)

    def backward(self, cache, gy):
        acts_a, acts_b, u = cache
        g = self.params.zeros_like()
        g["Wh"] = u.T @ gy
        g["bh"] = gy.sum(axis=0)
        du = gy @ self.params["Wh"].T
        d_m = self.spec.d_m
        for branch, acts, da in (("a", acts_a, du[:, :d_m]), ("b", acts_b, du[:, d_m:])):
            for i in reversed(range(self.spec.n_layers)):
                dz = da * (1.0 - acts[i + 1] ** 2)
                g[f"W{branch}{i}"] = acts[i].T @ dz
                g[f"b{branch}{i}"] = dz.sum(axis=0)
                if i > 0:
                    da = dz @ self.params[f"W{branch}{i}"].T
        return g


class InstanceNormWrapper(Forecaster):
    """Normalize each window per variable by its own mean/std and
    de-normalize the inner model's forecast."""

    def __init__(self, inner, eps=1e-5):
        super().__init__(inner.spec, inner.M, inner.L, inner.H)
        self.inner = inner
        self.eps = float(eps)
        self.params = inner.params

    def window_stats(self, x):
        mu = x.mean(axis=1, keepdims=True)
        sigma = x.std(axis=1, keepdims=True)
        return mu, sigma

    def normalize(self, x):
        mu, sigma = self.window_stats(x)
        return (x - mu) / (sigma + self.eps), mu, sigma

    def denormalize(self, xn, mu, sigma):
        return xn * (sigma + self.eps) + mu

    def forward(self, x):
        xn, mu, sigma = self.normalize(x)
        yhat_n, inner_cache = self.inner.forward(xn)
        yhat = yhat_n * (sigma + self.eps) + mu
        return yhat, (inner_cache, sigma)

    def backward(self, cache, gy):
        inner_cache, sigma = cache
        return self.inner.backward(inner_cache, gy * (sigma + self.eps))


_BUILDERS = {
    "linear-ar": LinearAR,
    "cross-time-mlp": CrossTimeMLP,
    "cross-time-conv": CrossTimeConv,
    "cross-variable-conv": CrossVariableConv,
    "concat-lite": ConcatLite,
}


def build_forecaster(spec: ForecasterSpec, M, L, H, rng):
    """Instantiate a forecaster, applying the instance-norm wrapper if asked."""
    model = _BUILDERS[spec.kind](spec, M, L, H, rng)
    if spec.instance_norm:
        model = InstanceNormWrapper(model)
    return model
