"""Prediction-combination policies.

The main combiner keeps a long-term simplex weight per variable, updated
multiplicatively from expert losses, plus a short-term bias emitted by a
small trained network; the two are summed, clamped, and renormalized to
produce the combination weights actually used. Baseline combiners
(averaging, gating, mixture-of-experts, ridge regression on past
predictions, direct weight learning) share the same round interface.

Expert predictions are passed around as an array of shape (d, M, H):
d experts, M variables, H horizon steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import OptimConfig, ParamSet, ShapeError, check_finite, optim_step
from .forecasters import mse_loss

COMBINER_KINDS = ("average", "gating", "moe", "lr", "egd", "rl-w", "kstep-egd", "ocp")

SIMPLEX_TOL = 1e-9


@dataclass
class CombinerSpec:
    kind: str = "ocp"
    eta: float = 1e-2
    K: int = 10
    ridge_lambda: float = 1e-6
    clamp_eps: float = 1e-6
    bias_lr: float = 1e-3
    bias_hidden: int = 32
    loss_rescale: bool = True

    def __post_init__(self):
        if self.kind not in COMBINER_KINDS:
            raise ValueError(f"unknown combiner kind {self.kind!r} (choose from {COMBINER_KINDS})")
        if self.eta <= 0 and self.kind in ("egd", "kstep-egd", "ocp"):
            raise ValueError("eta must be positive")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.clamp_eps <= 0:
            raise ValueError("clamp_eps must be positive")


@dataclass
class EnsembleState:
    """Per-variable combination weights for d experts."""

    w: np.ndarray        # (M, d) long-term weights, one simplex row per variable
    b: np.ndarray        # (M, d) short-term biases
    w_tilde: np.ndarray  # (M, d) normalized combination weights
    eta: float
    t: int = 0
    clamp_eps: float = 1e-6

    @classmethod
    def uniform(cls, M, d, eta, clamp_eps=1e-6):
        w = np.full((M, d), 1.0 / d)
        return cls(w=w, b=np.zeros((M, d)), w_tilde=w.copy(), eta=float(eta),
                   clamp_eps=float(clamp_eps))

    @property
    def d(self):
        return self.w.shape[1]

    def check_simplex(self):
        for name, rows in (("w", self.w), ("w_tilde", self.w_tilde)):
            if np.any(rows < -SIMPLEX_TOL):
                raise ValueError(f"{name} has negative entries")
            if np.any(np.abs(rows.sum(axis=1) - 1.0) > SIMPLEX_TOL):
                raise ValueError(f"{name} rows do not sum to 1")


def as_pred_stack(preds, M=None, H=None):
    """Stack a list of (M, H) expert forecasts into a (d, M, H) array."""
    arr = np.asarray(preds, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"expected predictions of shape (d, M, H), got {arr.shape}")
    if M is not None and arr.shape[1] != M:
        raise ShapeError(f"expected {M} variables, got {arr.shape[1]}")
    if H is not None and arr.shape[2] != H:
        raise ShapeError(f"expected horizon {H}, got {arr.shape[2]}")
    return arr


def per_variable_losses(preds, y):
    """(M, d) matrix of per-variable per-expert MSEs."""
    preds = as_pred_stack(preds)
    y = np.asarray(y, dtype=np.float64)
    return np.mean((preds - y[None, :, :]) ** 2, axis=2).T


def combine(state: EnsembleState, preds):
    """Weighted combination using the normalized weights, per variable."""
    preds = as_pred_stack(preds, M=state.w.shape[0])
    yhat = np.einsum("ji,ijh->jh", state.w_tilde, preds)
    return check_finite(yhat, "combined forecast")


def combine_with(weights, preds):
    """Combination with an explicit (M, d) weight matrix."""
    preds = as_pred_stack(preds, M=weights.shape[0])
    return np.einsum("ji,ijh->jh", weights, preds)


def egd_update(state: EnsembleState, losses):
    """Multiplicative weight update per variable; losses is (M, d), >= 0.

    Callers are responsible for rescaling losses so eta * loss stays in a
    bounded range; see the loss_rescale option on the combiners.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.shape != state.w.shape:
        raise ShapeError(f"losses shape {losses.shape} != weights shape {state.w.shape}")
    if np.any(losses < 0):
        raise ValueError("losses must be nonnegative")
    scaled = state.w * np.exp(-state.eta * losses)
    z = scaled.sum(axis=1, keepdims=True)
    if np.any(z <= 0.0) or not np.all(np.isfinite(z)):
        raise ValueError("degenerate normalizer in multiplicative update")
    state.w = scaled / z
    state.t += 1
    return state


def kstep_update(state: EnsembleState, losses, K):
    """Like egd_update, but the weights are re-initialized to uniform every
    K updates, discarding long-term history."""
    if K < 1:
        raise ValueError("K must be >= 1")
    egd_update(state, losses)
    if state.t % K == 0:
        state.w = np.full_like(state.w, 1.0 / state.d)
    return state


def normalize_combined(state: EnsembleState):
    """w_tilde = clamped (w + b) renormalized onto the simplex, per variable."""
    raw = np.maximum(state.w + state.b, state.clamp_eps)
    state.w_tilde = raw / raw.sum(axis=1, keepdims=True)
    return state


class BiasNet:
    """Two-layer MLP shared across variables: it reads one variable's
    weighted expert forecasts plus the revealed target (length H*(d+1)) and
    emits one bias per expert. The output layer starts at zero so the net
    is inert until trained."""

    def __init__(self, d, H, hidden, rng, optim=None):
        self.d, self.H, self.hidden = int(d), int(H), int(hidden)
        n_in = H * (d + 1)
        self.params = ParamSet()
        bound = 1.0 / np.sqrt(n_in)
        self.params.add("W1", rng.uniform(-bound, bound, size=(n_in, hidden)))
        self.params.add("b1", rng.uniform(-bound, bound, size=(hidden,)))
        self.params.add("W2", np.zeros((hidden, d)))
        self.params.add("b2", np.zeros((d,)))
        self.optim = optim or OptimConfig(method="adamw", learning_rate=1e-3)

    def inputs(self, w, preds, y):
        """Per-variable conditioning rows: weighted forecasts then target."""
        preds = as_pred_stack(preds)
        d, M, H = preds.shape
        weighted = np.transpose(preds * w.T[:, :, None], (1, 0, 2)).reshape(M, d * H)
        return np.concatenate([weighted, np.asarray(y, dtype=np.float64)], axis=1)

    def forward(self, u):
        h = np.tanh(u @ self.params["W1"] + self.params["b1"])
        out = h @ self.params["W2"] + self.params["b2"]
        return out, h

    def backward(self, u, h, dout):
        g = self.params.zeros_like()
        g["W2"] = h.T @ dout
        g["b2"] = dout.sum(axis=0)
        dh = dout @ self.params["W2"].T
        dz = dh * (1.0 - h ** 2)
        g["W1"] = u.T @ dz
        g["b1"] = dz.sum(axis=0)
        return g


def bias_forward(net: BiasNet, state: EnsembleState, preds, y):
    """Evaluate the bias network after the outcome is revealed: (M, d)."""
    u = net.inputs(state.w, preds, y)
    out, _ = net.forward(u)
    return check_finite(out, "bias output")


def _combined_loss_grads(state, b, preds, y):
    """Forward+backward of the combination loss with respect to the bias
    entries, holding w fixed. Returns (loss, w_tilde, db)."""
    raw = state.w + b
    clamped = np.maximum(raw, state.clamp_eps)
    s = clamped.sum(axis=1, keepdims=True)
    w_tilde = clamped / s
    yhat = combine_with(w_tilde, preds)
    y = np.asarray(y, dtype=np.float64)
    loss = mse_loss(yhat, y)
    gy = 2.0 * (yhat - y) / yhat.size
    dwt = np.einsum("jh,ijh->ji", gy, as_pred_stack(preds))
    dclamped = (dwt - (dwt * w_tilde).sum(axis=1, keepdims=True)) / s
    db = dclamped * (raw > state.clamp_eps)
    return loss, w_tilde, db


def train_bias(net: BiasNet, state: EnsembleState, preds, y):
    """One optimizer step on the combination loss, with gradients flowing
    through the bias net, the clamp+renormalize step, and the combination.
    Returns the pre-step loss."""
    u = net.inputs(state.w, preds, y)
    out, h = net.forward(u)
    loss, _, db = _combined_loss_grads(state, out, preds, y)
    g = net.backward(u, h, db)
    for name in g.names():
        check_finite(g[name], f"bias-net gradient {name!r}")
    optim_step(net.params, g, net.optim)
    return loss


def _softmax_rows(h):
    z = h - h.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_backprop(w, dw):
    """Row-wise Jacobian-vector product of softmax."""
    return w * (dw - (dw * w).sum(axis=1, keepdims=True))


class Combiner:
    """Round interface shared by every combination policy.

    weights(x, preds) returns the (M, d) weights used for the emitted
    forecast; it must not look at the current round's target. observe(x,
    preds, y) runs after the truth is revealed and performs whatever
    learning the policy does.
    """

    name = "combiner"
    trainable = False

    def __init__(self, M, d, H):
        self.M, self.d, self.H = int(M), int(d), int(H)

    def weights(self, x, preds):
        raise NotImplementedError

    def observe(self, x, preds, y):
        pass

    def forecast(self, x, preds):
        return combine_with(self.weights(x, preds), as_pred_stack(preds, M=self.M, H=self.H))


class AverageCombiner(Combiner):
    name = "average"

    def weights(self, x, preds):
        return np.full((self.M, self.d), 1.0 / self.d)


class _LossRescaler:
    """Divide per-variable expert losses by the running per-variable max,
    so the multiplicative update sees losses in [0, 1]."""

    def __init__(self, M, enabled=True, floor=1e-8):
        self.running_max = np.full(M, floor)
        self.enabled = enabled
        self.floor = floor

    def scale(self, losses):
        if not self.enabled:
            return losses
        self.running_max = np.maximum(self.running_max, losses.max(axis=1))
        return losses / self.running_max[:, None]


class EGDCombiner(Combiner):
    """Plain multiplicative-weights combination, no bias term."""

    name = "egd"

    def __init__(self, M, d, H, spec: CombinerSpec):
        super().__init__(M, d, H)
        self.spec = spec
        self.state = EnsembleState.uniform(M, d, spec.eta, spec.clamp_eps)
        self.rescaler = _LossRescaler(M, enabled=spec.loss_rescale)

    def weights(self, x, preds):
        return self.state.w.copy()

    def observe(self, x, preds, y):
        losses = self.rescaler.scale(per_variable_losses(preds, y))
        egd_update(self.state, losses)
        self.state.w_tilde = self.state.w.copy()


class KStepEGDCombiner(EGDCombiner):
    """Multiplicative weights with uniform re-initialization every K rounds."""

    name = "kstep-egd"

    def observe(self, x, preds, y):
        losses = self.rescaler.scale(per_variable_losses(preds, y))
        kstep_update(self.state, losses, self.spec.K)
        self.state.w_tilde = self.state.w.copy()


class OCPCombiner(Combiner):
    """Long-term multiplicative weights plus a trained short-term bias.

    The forecast for round t uses the state stored at the end of round t-1
    (uniform weights, zero bias on the first round). After the truth is
    revealed the long-term weights take a multiplicative step, the bias net
    takes one training step on the combination loss, and the refreshed
    (w, b) pair is stored for the next round.
    """

    name = "ocp"
    trainable = True

    def __init__(self, M, d, H, spec: CombinerSpec, rng):
        super().__init__(M, d, H)
        self.spec = spec
        self.state = EnsembleState.uniform(M, d, spec.eta, spec.clamp_eps)
        self.net = BiasNet(d, H, spec.bias_hidden, rng,
                           OptimConfig(method="adamw", learning_rate=spec.bias_lr))
        self.rescaler = _LossRescaler(M, enabled=spec.loss_rescale)

    def weights(self, x, preds):
        normalize_combined(self.state)
        return self.state.w_tilde.copy()

    def observe(self, x, preds, y):
        losses = self.rescaler.scale(per_variable_losses(preds, y))
        egd_update(self.state, losses)
        train_bias(self.net, self.state, preds, y)
        self.state.b = bias_forward(self.net, self.state, preds, y)
        normalize_combined(self.state)

    def step(self, preds, y):
        """Full post-reveal update, exposed for direct use; returns the
        forecast that was (or would have been) emitted with the stale state."""
        used = self.forecast(None, preds)
        self.observe(None, preds, y)
        return self.state, used


class GatingCombiner(Combiner):
    """softmax(W concat(expert forecasts) + b) per variable, shared weights."""

    name = "gating"
    trainable = True

    def __init__(self, M, d, H, spec: CombinerSpec, rng):
        super().__init__(M, d, H)
        n_in = d * H
        bound = 1.0 / np.sqrt(n_in)
        self.params = ParamSet({
            "W": rng.uniform(-bound, bound, size=(n_in, d)),
            "b": np.zeros(d),
        })
        self.optim = OptimConfig(method="adamw", learning_rate=spec.bias_lr)

    def _inputs(self, preds):
        preds = as_pred_stack(preds)
        return np.transpose(preds, (1, 0, 2)).reshape(self.M, self.d * self.H)

    def weights(self, x, preds):
        u = self._inputs(preds)
        return _softmax_rows(u @ self.params["W"] + self.params["b"])

    def observe(self, x, preds, y):
        preds = as_pred_stack(preds)
        u = self._inputs(preds)
        w = _softmax_rows(u @ self.params["W"] + self.params["b"])
        yhat = combine_with(w, preds)
        gy = 2.0 * (yhat - y) / yhat.size
        dw = np.einsum("jh,ijh->ji", gy, preds)
        dh = _softmax_backprop(w, dw)
        g = self.params.zeros_like()
        g["W"] = u.T @ dh
        g["b"] = dh.sum(axis=0)
        optim_step(self.params, g, self.optim)


class MoeCombiner(Combiner):
    """softmax(W x + b) per variable from the look-back window itself."""

    name = "moe"
    trainable = True

    def __init__(self, M, d, H, L, spec: CombinerSpec, rng):
        super().__init__(M, d, H)
        self.L = int(L)
        bound = 1.0 / np.sqrt(L)
        self.params = ParamSet({
            "W": rng.uniform(-bound, bound, size=(L, d)),
            "b": np.zeros(d),
        })
        self.optim = OptimConfig(method="adamw", learning_rate=spec.bias_lr)

    def weights(self, x, preds):
        return _softmax_rows(x @ self.params["W"] + self.params["b"])

    def observe(self, x, preds, y):
        preds = as_pred_stack(preds)
        w = self.weights(x, preds)
        yhat = combine_with(w, preds)
        gy = 2.0 * (yhat - y) / yhat.size
        dw = np.einsum("jh,ijh->ji", gy, preds)
        dh = _softmax_backprop(w, dw)
        g = self.params.zeros_like()
        g["W"] = np.asarray(x).T @ dh
        g["b"] = dh.sum(axis=0)
        optim_step(self.params, g, self.optim)


class RLWCombiner(Combiner):
    """Weights learned directly from (expert forecasts, revealed target) by
    a two-layer net with a softmax head; the weights applied at round t were
    computed from round t-1's revealed data."""

    name = "rl-w"
    trainable = True

    def __init__(self, M, d, H, spec: CombinerSpec, rng):
        super().__init__(M, d, H)
        self.net = BiasNet(d, H, spec.bias_hidden, rng,
                           OptimConfig(method="adamw", learning_rate=spec.bias_lr))
        self.stale = np.full((M, d), 1.0 / d)

    def _inputs(self, preds, y):
        preds = as_pred_stack(preds)
        flat = np.transpose(preds, (1, 0, 2)).reshape(self.M, self.d * self.H)
        return np.concatenate([flat, np.asarray(y, dtype=np.float64)], axis=1)

    def weights(self, x, preds):
        return self.stale.copy()

    def observe(self, x, preds, y):
        preds = as_pred_stack(preds)
        u = self._inputs(preds, y)
        out, h = self.net.forward(u)
        w = _softmax_rows(out)
        yhat = combine_with(w, preds)
        gy = 2.0 * (yhat - y) / yhat.size
        dw = np.einsum("jh,ijh->ji", gy, preds)
        dout = _softmax_backprop(w, dw)
        g = self.net.backward(u, h, dout)
        optim_step(self.net.params, g, self.net.optim)
        out, _ = self.net.forward(u)
        self.stale = _softmax_rows(out)


class LRCombiner(Combiner):
    """Ridge-regularized least squares on the previous round's predictions;
    the fitted weight vector is applied to the current round."""

    name = "lr"

    def __init__(self, M, d, H, spec: CombinerSpec):
        super().__init__(M, d, H)
        self.ridge_lambda = float(spec.ridge_lambda)
        self.prev = None

    @staticmethod
    def solve(preds, y, ridge_lambda):
        """(X^T X + lambda I)^-1 X^T y with X the (M*H, d) prediction stack."""
        preds = as_pred_stack(preds)
        d = preds.shape[0]
        X = preds.reshape(d, -1).T
        yv = np.asarray(y, dtype=np.float64).reshape(-1)
        A = X.T @ X + ridge_lambda * np.eye(d)
        try:
            w = np.linalg.solve(A, X.T @ yv)
        except np.linalg.LinAlgError as exc:
            raise ValueError(
                "singular normal equations; set ridge_lambda > 0 to regularize"
            ) from exc
        if not np.all(np.isfinite(w)):
            raise ValueError(
                "singular normal equations; set ridge_lambda > 0 to regularize")
        return w

    def weights(self, x, preds):
        if self.prev is None:
            return np.full((self.M, self.d), 1.0 / self.d)
        w = self.solve(*self.prev, self.ridge_lambda)
        return np.tile(w, (self.M, 1))

    def observe(self, x, preds, y):
        self.prev = (as_pred_stack(preds).copy(), np.asarray(y, dtype=np.float64).copy())


def build_combiner(spec: CombinerSpec, M, d, H, L, rng):
    """Instantiate the combiner named by spec.kind."""
    if spec.kind == "average":
        return AverageCombiner(M, d, H)
    if spec.kind == "egd":
        return EGDCombiner(M, d, H, spec)
    if spec.kind == "kstep-egd":
        return KStepEGDCombiner(M, d, H, spec)
    if spec.kind == "ocp":
        return OCPCombiner(M, d, H, spec, rng)
    if spec.kind == "gating":
        return GatingCombiner(M, d, H, spec, rng)
    if spec.kind == "moe":
        return MoeCombiner(M, d, H, L, spec, rng)
    if spec.kind == "rl-w":
        return RLWCombiner(M, d, H, spec, rng)
    if spec.kind == "lr":
        return LRCombiner(M, d, H, spec)
    raise ValueError(f"unknown combiner kind {spec.kind!r}")
