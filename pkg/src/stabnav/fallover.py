"""Gait-cycle parsing and the feature-to-fallover logistic regression analysis."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateDataError, ParseError


@dataclass
class GaitCycleRecord:
    features: dict
    fallover: bool


def parse_gait_cycles(signals: dict, markers, fall_times=None, horizon: int = 2):
    """Split per-timestep ``signals`` into gait cycles and label them.

    ``markers`` are the timestep indices where each step starts; cycle ``k``
    covers ``[markers[k], markers[k+1])``.  A cycle is labeled as a fallover
    when a fall happens in it or within the next ``horizon`` cycles.
    """
    markers = [int(m) for m in markers]
    if any(b <= a for a, b in zip(markers, markers[1:])):
        raise ParseError("cycle markers must be strictly increasing")
    arrays = {k: np.asarray(v, dtype=float) for k, v in signals.items()}
    n_t = min((a.size for a in arrays.values()), default=0)
    if markers and (markers[0] < 0 or markers[-1] > n_t):
        raise ParseError("cycle markers fall outside the signal log")
    if fall_times is None:
        fall_times = []
    elif np.isscalar(fall_times):
        fall_times = [fall_times]

    n_cycles = max(len(markers) - 1, 0)
    fall_cycles = []
    for t in fall_times:
        # index of the cycle containing t; a fall after the last marker sits in
        # the (incomplete) cycle n_cycles
        fall_cycles.append(int(np.searchsorted(markers, t, side="right")) - 1)

    records = []
    for k in range(n_cycles):
        lo, hi = markers[k], markers[k + 1]
        feats = {name: float(np.sqrt(np.mean(a[lo:hi] ** 2))) for name, a in arrays.items()}
        label = any(k <= fc <= k + horizon for fc in fall_cycles)
        records.append(GaitCycleRecord(feats, label))
    return records


def read_gait_log(path):
    """CSV gait log: columns ``step`` (1 on rows where a new step starts),
    ``fall`` (1 on the row where the robot falls) and one column per signal."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ParseError(f"{path}: empty gait log")
    for col in ("step", "fall"):
        if col not in rows[0]:
            raise ParseError(f"{path}: missing column {col!r}")
    names = [c for c in rows[0] if c not in ("step", "fall")]
    if not names:
        raise ParseError(f"{path}: no signal columns")
    signals = {n: np.array([float(r[n]) for r in rows]) for n in names}
    markers = [i for i, r in enumerate(rows) if float(r["step"]) != 0]
    markers.append(len(rows))
    falls = [i for i, r in enumerate(rows) if float(r["fall"]) != 0]
    return signals, sorted(set(markers)), falls


@dataclass
class LogisticFit:
    intercept: float
    coef: float
    mcfadden_r2: float
    auc: float
    loglik: float
    null_loglik: float
    iterations: int


def auc_roc(scores, labels) -> float:
    """Mann-Whitney rank statistic; ties between classes score one half."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateDataError("AUC needs both classes")
    r = rankdata(s)
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _loglik(beta, X, y):
    z = X @ beta
    return float(np.sum(y * z - np.logaddexp(0.0, z)))


def fit_logistic(xs, ys, l2: float = 1e-6, tol: float = 1e-8, max_iter: int = 500) -> LogisticFit:
    """One-feature logistic regression by damped Newton steps.

    The L2 penalty applies to the slope only.  Returns the fitted coefficients
    with McFadden's pseudo R^2 and the AUC of the raw feature.
    """
    x = np.asarray(xs, dtype=float).ravel()
    y = np.asarray(ys, dtype=float).ravel()
    if x.size != y.size or x.size == 0:
        raise DegenerateDataError("features and labels must be non-empty and aligned")
    if not np.all(np.isfinite(x)):
        raise DegenerateDataError("non-finite feature values")
    p_bar = y.mean()
    if p_bar in (0.0, 1.0):
        raise DegenerateDataError("labels contain a single class")
    X = np.column_stack([np.ones_like(x), x])
    reg = np.array([0.0, l2])

    def objective(b):
        return _loglik(b, X, y) - 0.5 * np.sum(reg * b ** 2)

    beta = np.array([np.log(p_bar / (1 - p_bar)), 0.0])
    it = 0
    for it in range(1, max_iter + 1):
        p = 0.5 * (1.0 + np.tanh(0.5 * (X @ beta)))
        g = X.T @ (y - p) - reg * beta
        if np.linalg.norm(g) <= tol:
            break
        W = p * (1 - p)
        H = (X * W[:, None]).T @ X + np.diag(reg) + 1e-12 * np.eye(2)
        step = np.linalg.solve(H, g)
        f0, t = objective(beta), 1.0
        while objective(beta + t * step) < f0 and t > 1e-10:
            t *= 0.5
        beta = beta + t * step
    ll = _loglik(beta, X, y)
    ll0 = float(np.sum(y * np.log(p_bar) + (1 - y) * np.log(1 - p_bar)))
    r2 = max(0.0, 1.0 - ll / ll0)
    return LogisticFit(float(beta[0]), float(beta[1]), r2, auc_roc(x, y), ll, ll0, it)


def analyze_features(records):
    """Per-feature fits, sorted by AUC (descending)."""
    if not records:
        raise DegenerateDataError("no gait cycles to analyze")
    ys = np.array([r.fallover for r in records], dtype=float)
    rows = []
    for name in records[0].features:
        xs = np.array([r.features[name] for r in records])
        rows.append((name, fit_logistic(xs, ys)))
    rows.sort(key=lambda t: (-t[1].auc, t[0]))
    return rows


def format_feature_table(rows) -> str:
    width = max([len("feature")] + [len(n) for n, _ in rows])
    out = [f"{'feature':<{width}}  {'McFadden R2':>11}  {'AUC-ROC':>7}"]
    for name, fit in rows:
        out.append(f"{name:<{width}}  {fit.mcfadden_r2:>11.4f}  {fit.auc:>7.4f}")
    return "\n".join(out)


def write_gait_log(path, signals: dict, markers, falls=()) -> None:
    """Inverse of ``read_gait_log``: one row per timestep."""
    names = list(signals)
    n_t = min(len(signals[n]) for n in names)
    starts = set(int(m) for m in markers)
    fall_set = set(int(f) for f in falls)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step", "fall"] + names)
        for t in range(n_t):
            wr.writerow([int(t in starts), int(t in fall_set)] + [repr(float(signals[n][t])) for n in names])


def synthetic_gait_log(n_cycles: int = 400, samples_per_cycle: int = 10, seed: int = 0):
    """A log whose ``tilt`` signal drives falls while ``noise`` is unrelated and
    ``constant`` never changes.  Returns ``(signals, markers, falls)``.

    Tilt amplitude follows a mean-reverting random walk; each cycle falls
    with probability ``sigmoid(4 (amplitude - 2))``, after which the walk
    restarts at a low amplitude.
    """
    rng = np.random.default_rng(seed)
    n_t = n_cycles * samples_per_cycle
    tilt = np.empty(n_t)
    amp = 1.0
    falls = []
    phase = np.sin(np.linspace(0.0, 2 * np.pi, samples_per_cycle, endpoint=False))
    for k in range(n_cycles):
        lo = k * samples_per_cycle
        tilt[lo:lo + samples_per_cycle] = amp * np.sqrt(2.0) * phase + 0.05 * rng.standard_normal(samples_per_cycle)
        if rng.random() < 1.0 / (1.0 + np.exp(-4.0 * (amp - 2.0))):
            falls.append(lo + samples_per_cycle // 2)
            amp = 0.5
        else:
            amp = max(0.1, amp + 0.15 * (1.2 - amp) + 0.35 * rng.standard_normal())
    signals = {"tilt": tilt, "noise": rng.standard_normal(n_t), "constant": np.ones(n_t)}
    markers = list(range(0, n_t + 1, samples_per_cycle))
    return signals, markers, falls
