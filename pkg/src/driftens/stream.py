"""The online learning loop: warm-up normalization, round-by-round
predict / reveal / update with decoupled expert training, cumulative
metrics, and the delayed-feedback variant where updates batch to every
H-th round."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .ensemble import as_pred_stack, combine_with
from .forecasters import NormStats, SeriesWindow, mse_grad
from .numerics import ShapeError, optim_step
from .regret import LossLedger, build_report


@dataclass
class StreamConfig:
    L: int = 60
    H: int = 1
    warmup_ratio: float = 0.25
    delayed_feedback: bool = False
    warmup_pretrain: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must lie in (0, 1)")
        if self.L < 1 or self.H < 1:
            raise ValueError("L and H must be >= 1")


class MetricsAccumulator:
    """Running per-round MSE/MAE with cumulative (mean-over-rounds) curves."""

    def __init__(self):
        self.mse = []
        self.mae = []
        self._sum_mse = 0.0
        self._sum_mae = 0.0
        self.cum_mse = []
        self.cum_mae = []

    def record(self, yhat, y):
        err = yhat - y
        mse = float(np.mean(err ** 2))
        mae = float(np.mean(np.abs(err)))
        self.mse.append(mse)
        self.mae.append(mae)
        self._sum_mse += mse
        self._sum_mae += mae
        n = len(self.mse)
        self.cum_mse.append(self._sum_mse / n)
        self.cum_mae.append(self._sum_mae / n)

    @property
    def count(self):
        return len(self.mse)

    def final_mse(self):
        return self.cum_mse[-1] if self.cum_mse else float("nan")

    def final_mae(self):
        return self.cum_mae[-1] if self.cum_mae else float("nan")


@dataclass
class RunReport:
    config: dict
    seed: int
    rounds: int
    mse: float
    mae: float
    mse_curve: list
    mae_curve: list
    cum_mse_curve: list
    cum_mae_curve: list
    weights: np.ndarray          # (T, M, d) combination weights used per round
    regret: dict
    wall_time: float
    update_events: int
    warnings: list = field(default_factory=list)
    ledger: LossLedger | None = None
    forecasts: np.ndarray | None = None  # (T, M, H) emitted forecasts


def split_and_normalize(raw, cfg: StreamConfig):
    """Split a raw (M, T_total) series into warm-up and online phases.

    Normalization statistics come from the warm-up segment only; the whole
    series is standardized by them. Returns (stats, warmup_windows,
    online_windows, warnings). Windows use stride 1; the first online
    window's look-back starts exactly at the split point.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2:
        raise ShapeError("raw series must be (M, T_total)")
    M, T_total = raw.shape
    if T_total <= cfg.L + cfg.H:
        raise ValueError(f"series too short: T_total={T_total} <= L+H={cfg.L + cfg.H}")
    split = int(np.floor(cfg.warmup_ratio * T_total))
    if split < 1:
        raise ValueError("warm-up segment is empty")
    warnings = []
    warm = raw[:, :split]
    mu = warm.mean(axis=1)
    sigma = warm.std(axis=1)
    zero = sigma == 0.0
    if np.any(zero):
        warnings.append(f"sigma=0 for variables {np.where(zero)[0].tolist()}; clamped to 1")
        sigma = np.where(zero, 1.0, sigma)
    stats = NormStats(mu=mu, sigma=sigma)
    normed = (raw - mu[:, None]) / sigma[:, None]

    def windows(start, stop):
        out = []
        for s in range(start, stop + 1):
            out.append(SeriesWindow(x=normed[:, s:s + cfg.L],
                                    y=normed[:, s + cfg.L:s + cfg.L + cfg.H],
                                    t=s))
        return out

    last = T_total - cfg.L - cfg.H
    warm_last = min(split - 1, last)
    warmup_windows = windows(0, warm_last) if warm_last >= 0 else []
    online_windows = windows(split, last) if last >= split else []
    if not online_windows:
        raise ValueError("no online windows; series too short for this L/H/warmup_ratio")
    return stats, warmup_windows, online_windows, warnings


def _update_experts(experts, x, y, coupled, weights_used, preds):
    """Decoupled by default: each expert takes one step on its own loss.
    The coupled mode (test-only) scales each expert's upstream gradient by
    its combination weight, which starves down-weighted experts."""
    if not coupled:
        for expert in experts:
            expert.update(x, y)
        return
    yhat = combine_with(weights_used, preds)
    gy = mse_grad(yhat, y)
    for i, expert in enumerate(experts):
        _, cache = expert.forward(x)
        g = expert.backward(cache, gy * weights_used[:, i][:, None])
        optim_step(expert.params, g, expert.spec.optim)


def run_online(experts, combiner, online_windows, cfg: StreamConfig,
               warmup_windows=(), pin_weights=None, coupled=False,
               intervals=(), param_trace=None):
    """Run the online protocol over the given windows and return a RunReport.

    Per round: every expert predicts; the combiner emits the used forecast
    from information available before the target is revealed; metrics are
    scored on that forecast; then (for this round in the standard setting,
    or batched every H rounds with delayed feedback) each expert trains on
    its own loss and the combiner updates.

    pin_weights forces the used combination weights (testing hook);
    param_trace, if a list, receives each expert's parameter-vector L2
    delta per update event.
    """
    t0 = time.perf_counter()
    d = len(experts)
    if d < 1:
        raise ValueError("need at least one expert")
    M, H = experts[0].M, experts[0].H
    delay = cfg.H if cfg.delayed_feedback else 1

    if cfg.warmup_pretrain:
        for win in warmup_windows:
            for expert in experts:
                expert.update(win.x, win.y)

    metrics = MetricsAccumulator()
    ledger = LossLedger(d)
    weight_log = np.zeros((len(online_windows), M, d))
    forecast_log = np.zeros((len(online_windows), M, H))
    pred_log = []
    update_events = 0

    for t, win in enumerate(online_windows, start=1):
        try:
            preds = as_pred_stack([expert.predict(win.x) for expert in experts], M=M, H=H)
            if pin_weights is not None:
                w_used = np.broadcast_to(np.asarray(pin_weights, dtype=np.float64),
                                         (M, d)).copy()
            else:
                w_used = combiner.weights(win.x, preds)
            used_forecast = combine_with(w_used, preds)

            metrics.record(used_forecast, win.y)
            weight_log[t - 1] = w_used
            forecast_log[t - 1] = used_forecast
            expert_losses = np.mean((preds - win.y[None]) ** 2, axis=(1, 2))
            ledger.record(w_used.mean(axis=0), expert_losses)
            pred_log.append((win, preds))

            if t % delay == 0:
                uwin, upreds = pred_log[t - delay]
                if param_trace is not None:
                    before = [e.params.flatten() for e in experts]
                _update_experts(experts, uwin.x, uwin.y, coupled,
                                weight_log[t - delay], upreds)
                if param_trace is not None:
                    param_trace.append([float(np.linalg.norm(e.params.flatten() - b))
                                        for e, b in zip(experts, before)])
                combiner.observe(uwin.x, upreds, uwin.y)
                update_events += 1
        except Exception as exc:
            raise RuntimeError(f"online round {t} failed: {exc}") from exc

    report = RunReport(
        config={"L": cfg.L, "H": cfg.H, "warmup_ratio": cfg.warmup_ratio,
                "delayed_feedback": cfg.delayed_feedback,
                "warmup_pretrain": cfg.warmup_pretrain,
                "combiner": getattr(combiner, "name", "unknown"),
                "experts": [e.spec.kind for e in experts]},
        seed=cfg.seed,
        rounds=metrics.count,
        mse=metrics.final_mse(),
        mae=metrics.final_mae(),
        mse_curve=metrics.mse,
        mae_curve=metrics.mae,
        cum_mse_curve=metrics.cum_mse,
        cum_mae_curve=metrics.cum_mae,
        weights=weight_log,
        regret=build_report(ledger, intervals=intervals).to_dict() if d >= 1 else {},
        wall_time=time.perf_counter() - t0,
        update_events=update_events,
        ledger=ledger,
        forecasts=forecast_log,
    )
    return report


def run_online_delayed(experts, combiner, online_windows, cfg: StreamConfig, **kwargs):
    """Delayed-feedback variant: forecasts every round, updates every H rounds."""
    if not cfg.delayed_feedback:
        cfg = StreamConfig(L=cfg.L, H=cfg.H, warmup_ratio=cfg.warmup_ratio,
                           delayed_feedback=True,
                           warmup_pretrain=cfg.warmup_pretrain, seed=cfg.seed)
    return run_online(experts, combiner, online_windows, cfg, **kwargs)


def run_fixed_experts(preds_seq, targets, combiner, intervals=()):
    """Drive a combiner with externally supplied expert predictions.

    preds_seq is (T, d, M, H), targets is (T, M, H). Used for scenario
    studies where the experts are fixed rules rather than trained models.
    """
    preds_seq = np.asarray(preds_seq, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    T, d, M, H = preds_seq.shape
    metrics = MetricsAccumulator()
    ledger = LossLedger(d)
    weight_log = np.zeros((T, M, d))
    for t in range(T):
        preds = preds_seq[t]
        y = targets[t]
        w_used = combiner.weights(None, preds)
        used = combine_with(w_used, preds)
        metrics.record(used, y)
        weight_log[t] = w_used
        ledger.record(w_used.mean(axis=0), np.mean((preds - y[None]) ** 2, axis=(1, 2)))
        combiner.observe(None, preds, y)
    return metrics, ledger, weight_log
