"""Dataset loading (ETT-style CSV layout) and synthetic drift streams.

The CSV layout is: header row, first column a timestamp/date (kept but not
parsed numerically), remaining columns numeric variables. Synthetic
generators cover the two-expert switch scenario, piecewise autoregressive
streams whose cross-variable coupling changes between regimes, and
regime-switching sinusoids.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .numerics import make_rng


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    name: str
    values: np.ndarray               # (M, T_total)
    variable_names: list
    timestamps: list | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.size == 0:
            raise DataError("dataset values must be a nonempty M x T matrix")
        if len(self.variable_names) != self.values.shape[0]:
            raise DataError("variable_names length must match the number of rows")

    @property
    def M(self):
        return self.values.shape[0]

    @property
    def T_total(self):
        return self.values.shape[1]


@dataclass
class SynthSpec:
    scenario: str = "piecewise-ar"
    T_total: int = 1000
    M: int = 4
    boundaries: list = field(default_factory=list)  # regime change points in [1, T_total]
    noise_sigma: float = 0.1
    seed: int = 0
    # piecewise-ar: per-regime scalar AR coefficients and coupling strengths
    ar_coefs: list = field(default_factory=lambda: [[0.6, 0.2], [0.2]])
    coupling: list = field(default_factory=lambda: [0.0, 0.6])
    # sine-regime: per-regime frequencies (cycles per 100 steps) and phases
    freqs: list = field(default_factory=lambda: [1.0, 2.0])
    phases: list = field(default_factory=lambda: [0.0, 0.0])

    def __post_init__(self):
        bounds = list(self.boundaries)
        if bounds != sorted(set(bounds)) or any(not 1 <= b <= self.T_total for b in bounds):
            raise DataError("boundaries must be strictly increasing within [1, T_total]")

    def n_regimes(self):
        return len(self.boundaries) + 1

    def regime_of(self, t):
        """Regime index for 0-based time step t."""
        r = 0
        for b in self.boundaries:
            if t >= b:
                r += 1
        return r


def load_csv(path, name=None):
    """Load an ETT-layout CSV into a Dataset (variables as rows)."""
    rows = []
    timestamps = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) < 2:
            raise DataError(f"{path}: header must have a date column plus variables")
        var_names = header[1:]
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            timestamps.append(row[0])
            try:
                rows.append([float(cell) for cell in row[1:]])
            except ValueError:
                bad = next(i for i, cell in enumerate(row[1:], start=2)
                           if not _is_float(cell))
                raise DataError(
                    f"{path}:{lineno}: non-numeric cell in column {bad} "
                    f"({header[bad - 1]!r})") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    values = np.array(rows, dtype=np.float64).T
    return Dataset(name=name or str(path), values=values,
                   variable_names=var_names, timestamps=timestamps)


def _is_float(cell):
    try:
        float(cell)
        return True
    except ValueError:
        return False


def save_csv(dataset: Dataset, path):
    """Write a Dataset back out in the same layout load_csv reads."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date"] + list(dataset.variable_names))
        stamps = dataset.timestamps or [str(i) for i in range(dataset.T_total)]
        for t in range(dataset.T_total):
            writer.writerow([stamps[t]] + [repr(float(v)) for v in dataset.values[:, t]])


@dataclass
class SwitchScenario:
    """Two constant experts against a step-function target.

    Expert 0 always predicts 0, expert 1 always predicts 1; the target is 0
    up to and including the boundary round and 1 afterwards, so the experts'
    squared losses are exactly complementary across the two regimes.
    """

    T: int
    boundary: int
    preds: np.ndarray    # (T, 2, 1, 1)
    targets: np.ndarray  # (T, 1, 1)

    def losses(self):
        """(T, 2) squared losses per round."""
        return np.squeeze((self.preds - self.targets[:, None, :, :]) ** 2, axis=(2, 3))


def gen_switch(T=100, boundary=50):
    if not 0 < boundary < T:
        raise DataError("boundary must lie strictly inside [1, T]")
    y = np.zeros((T, 1, 1))
    y[boundary:] = 1.0
    preds = np.zeros((T, 2, 1, 1))
    preds[:, 1] = 1.0
    return SwitchScenario(T=T, boundary=boundary, preds=preds, targets=y)


def _stability_check(coefs, coupling, M):
    """Spectral radius of the companion matrix of the full linear system."""
    p = len(coefs)
    n = M * p
    A = np.zeros((n, n))
    mix = _coupling_matrix(M)
    A[:M, :M] = coefs[0] * np.eye(M) + coupling * mix
    for lag in range(1, p):
        A[:M, lag * M:(lag + 1) * M] = coefs[lag] * np.eye(M)
    if p > 1:
        A[M:, :-M] = np.eye(n - M)
    radius = np.max(np.abs(np.linalg.eigvals(A)))
    return float(radius)


def _coupling_matrix(M):
    """Neighbor-shift mixing with zero diagonal (each variable leans on the
    next one cyclically)."""
    mix = np.zeros((M, M))
    for j in range(M):
        mix[j, (j + 1) % M] = 1.0
    return mix


def gen_piecewise_ar(spec: SynthSpec):
    """Autoregressive stream whose AR coefficients and cross-variable
    coupling change at each regime boundary."""
    n_regimes = spec.n_regimes()
    if len(spec.ar_coefs) != n_regimes or len(spec.coupling) != n_regimes:
        raise DataError("need one ar_coefs list and one coupling value per regime")
    for coefs, coupling in zip(spec.ar_coefs, spec.coupling):
        radius = _stability_check(np.asarray(coefs, dtype=np.float64),
                                  float(coupling), spec.M)
        if radius >= 1.0:
            raise DataError(f"unstable regime (spectral radius {radius:.3f} >= 1)")
    rng = make_rng(spec.seed, 1)
    max_lag = max(len(c) for c in spec.ar_coefs)
    mix = _coupling_matrix(spec.M)
    x = np.zeros((spec.M, spec.T_total + max_lag))
    x[:, :max_lag] = rng.normal(0.0, max(spec.noise_sigma, 1e-3), size=(spec.M, max_lag))
    for t in range(spec.T_total):
        r = spec.regime_of(t)
        coefs = spec.ar_coefs[r]
        step = spec.coupling[r] * (mix @ x[:, t + max_lag - 1])
        for lag, c in enumerate(coefs, start=1):
            step = step + c * x[:, t + max_lag - lag]
        if spec.noise_sigma > 0:
            step = step + rng.normal(0.0, spec.noise_sigma, size=spec.M)
        x[:, t + max_lag] = step
    values = x[:, max_lag:]
    return Dataset(name=f"piecewise-ar-seed{spec.seed}", values=values,
                   variable_names=[f"v{j}" for j in range(spec.M)])


def gen_sine_regime(spec: SynthSpec):
    """Sinusoids whose frequency/phase switch at regime boundaries."""
    rng = make_rng(spec.seed, 2)
    n_regimes = spec.n_regimes()
    if len(spec.freqs) != n_regimes or len(spec.phases) != n_regimes:
        raise DataError("need one frequency and one phase per regime")
    t_idx = np.arange(spec.T_total)
    values = np.zeros((spec.M, spec.T_total))
    for j in range(spec.M):
        var_phase = 2.0 * np.pi * j / max(spec.M, 1)
        for t in t_idx:
            r = spec.regime_of(t)
            omega = 2.0 * np.pi * spec.freqs[r] / 100.0
            values[j, t] = np.sin(omega * t + spec.phases[r] + var_phase)
    if spec.noise_sigma > 0:
        values += rng.normal(0.0, spec.noise_sigma, size=values.shape)
    return Dataset(name=f"sine-regime-seed{spec.seed}", values=values,
                   variable_names=[f"v{j}" for j in range(spec.M)])


def generate(spec: SynthSpec):
    if spec.scenario == "piecewise-ar":
        return gen_piecewise_ar(spec)
    if spec.scenario == "sine-regime":
        return gen_sine_regime(spec)
    raise DataError(f"unknown synthetic scenario {spec.scenario!r}")
