"""Regret accounting over a run: per-round loss ledger, external regret
against the best fixed expert, internal (swap) regret, interval regret, and
the closed-form comparison bounds."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class LedgerError(ValueError):
    pass


class LossLedger:
    """Append-only record of one run: per-round per-expert losses (already
    aggregated over variables), the combiner's weight snapshot, and the
    weighted combiner loss <w_t, l_t>."""

    def __init__(self, d):
        self.d = int(d)
        self.losses = []   # each (d,)
        self.weights = []  # each (d,), the weights used for the round
        self.combiner_losses = []

    def record(self, weights, losses):
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        l = np.asarray(losses, dtype=np.float64).reshape(-1)
        if w.size != self.d or l.size != self.d:
            raise LedgerError(f"expected {self.d} experts, got {w.size}/{l.size}")
        if np.any(l < 0):
            raise LedgerError("losses must be nonnegative")
        self.weights.append(w.copy())
        self.losses.append(l.copy())
        self.combiner_losses.append(float(w @ l))

    @property
    def T(self):
        return len(self.losses)

    def loss_matrix(self):
        return np.array(self.losses) if self.losses else np.zeros((0, self.d))

    def weight_matrix(self):
        return np.array(self.weights) if self.weights else np.zeros((0, self.d))


@dataclass
class RegretReport:
    external_regret: float
    external_bound: float
    internal_regret: float
    internal_bound: float
    per_interval: list = field(default_factory=list)

    def to_dict(self):
        return {
            "external_regret": self.external_regret,
            "external_bound": self.external_bound,
            "internal_regret": self.internal_regret,
            "internal_bound": self.internal_bound,
            "per_interval": [list(map(float, row)) for row in self.per_interval],
        }


def external_regret(ledger: LossLedger):
    """Cumulative weighted loss minus the best fixed expert's cumulative loss."""
    if ledger.T == 0:
        raise LedgerError("empty ledger")
    L = ledger.loss_matrix()
    combined = float(np.sum(ledger.combiner_losses))
    return combined - float(L.sum(axis=0).min())


def external_bound(T, d):
    """sqrt(2 T ln d), valid for T > 2 ln d."""
    if d >= 2 and T <= 2 * np.log(d):
        raise ValueError(f"bound requires T > 2 ln d (T={T}, d={d})")
    return float(np.sqrt(2.0 * T * np.log(d)))


def internal_regret(ledger: LossLedger):
    """max over ordered expert pairs (i, j), i != j, of
    sum_t w_{t,i} (l_{t,i} - l_{t,j})."""
    if ledger.d < 2:
        raise LedgerError("internal regret needs at least 2 experts")
    if ledger.T == 0:
        raise LedgerError("empty ledger")
    L = ledger.loss_matrix()
    W = ledger.weight_matrix()
    # pair_sums[i, j] = sum_t w_{t,i} (l_{t,i} - l_{t,j})
    wl = (W * L).sum(axis=0)                  # (d,)  sum_t w_i l_i
    cross = W.T @ L                           # (d, d) sum_t w_i l_j
    pair_sums = wl[:, None] - cross
    np.fill_diagonal(pair_sums, -np.inf)
    return float(pair_sums.max())


def internal_bound(T, d):
    """2 sqrt(T ln(d(d-1)))."""
    if d < 2:
        raise ValueError("internal bound needs at least 2 experts")
    return float(2.0 * np.sqrt(T * np.log(d * (d - 1))))


def interval_regret(ledger: LossLedger, l, r):
    """External regret restricted to rounds l..r (1-based, inclusive)."""
    if not (1 <= l <= r <= ledger.T):
        raise LedgerError(f"bad interval [{l}, {r}] for T={ledger.T}")
    L = ledger.loss_matrix()[l - 1:r]
    combined = float(np.sum(ledger.combiner_losses[l - 1:r]))
    return combined - float(L.sum(axis=0).min())


def build_report(ledger: LossLedger, intervals=()):
    """Full regret report; bounds use the ledger's T and d."""
    T, d = ledger.T, ledger.d
    ext_bound = external_bound(T, d) if (d < 2 or T > 2 * np.log(d)) else float("nan")
    if d >= 2:
        int_reg = internal_regret(ledger)
        int_bound = internal_bound(T, d)
    else:
        int_reg, int_bound = 0.0, 0.0
    per_interval = [(l, r, interval_regret(ledger, l, r)) for l, r in intervals]
    return RegretReport(
        external_regret=external_regret(ledger),
        external_bound=ext_bound,
        internal_regret=int_reg,
        internal_bound=int_bound,
        per_interval=per_interval,
    )
