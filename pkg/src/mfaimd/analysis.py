"""Empirical-measure diagnostics: transport distance on the user state
space, finite-N convergence tables, and time-average estimators."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .model import UserState

__all__ = [
    "EmpiricalSnapshot",
    "wasserstein1",
    "chaoticity_report",
    "ChaosReport",
    "ergodic_average",
    "ErgodicEstimate",
]


@dataclass
class EmpiricalSnapshot:
    """Time-t marginal of the per-class empirical measures: one array of
    user values per class (OFF embedded at -1), uniform weights."""

    time: float
    values: list

    @classmethod
    def from_states(cls, time, states) -> "EmpiricalSnapshot":
        return cls(time, [np.array([s.value for s in cl], dtype=float) for cl in states])

    @classmethod
    def from_ensemble(cls, ensemble, grid_index: int, replica: int | None = None) -> "EmpiricalSnapshot":
        if ensemble.paths is None:
            raise ValueError("ensemble was run without store_paths")
        vals = []
        for k in range(len(ensemble.counts)):
            block = ensemble.paths[k][:, grid_index, :] if replica is None else ensemble.paths[k][replica, grid_index, :]
            vals.append(np.asarray(block).reshape(-1))
        return cls(float(ensemble.grid[grid_index]), vals)

    def class_values(self, k: int) -> np.ndarray:
        return self.values[k]


def _as_values(sample) -> np.ndarray:
    if isinstance(sample, EmpiricalSnapshot):
        if len(sample.values) != 1:
            raise ValueError("pass one class marginal, e.g. snapshot.class_values(k)")
        return sample.values[0]
    arr = np.asarray(sample, dtype=object)
    if arr.size and isinstance(arr.reshape(-1)[0], UserState):
        return np.array([s.value for s in arr.reshape(-1)], dtype=float)
    return np.asarray(sample, dtype=float).reshape(-1)


def wasserstein1(p, q, p_weights=None, q_weights=None) -> float:
    """Exact 1-Wasserstein distance between weighted samples of user states
    under the line embedding (OFF at -1), for which the state-space metric is
    the real-line metric, so sorted 1-d transport is exact."""
    pv = _as_values(p)
    qv = _as_values(q)
    if pv.size == 0 or qv.size == 0:
        raise ValueError("empty sample")
    return float(stats.wasserstein_distance(pv, qv, p_weights, q_weights))


# ---------------------------------------------------------------------------
# finite-N convergence diagnostics
# ---------------------------------------------------------------------------

def _ols_loglog(ns, ys):
    x = np.log(np.asarray(ns, dtype=float))
    z = np.log(np.asarray(ys, dtype=float))
    n = len(x)
    xm, zm = x.mean(), z.mean()
    sxx = float(((x - xm) ** 2).sum())
    slope = float(((x - xm) * (z - zm)).sum() / sxx)
    resid = z - (zm + slope * (x - xm))
    s2 = float((resid ** 2).sum() / (n - 2)) if n > 2 else float("nan")
    return slope, math.sqrt(s2 / sxx) if n > 2 else float("nan")


def _pair_cov_jackknife(m, s2, N):
    """Covariance of w+ between two distinct users from replica-level class
    means m_r and within-replica variances s2_r:

        Var(m_r) = s^2 / N + c  and  E[s2_r] = s^2 - ... => c = Var(m) - E[s2] / N

    returns (c_hat, jackknife standard error)."""
    R = len(m)
    c_hat = float(np.var(m, ddof=1) - s2.mean() / N)
    if R < 3:
        return c_hat, float("nan")
    S, SS, Q = m.sum(), float(m @ m), s2.sum()
    mean_loo = (S - m) / (R - 1)
    var_loo = (SS - m ** 2 - (R - 1) * mean_loo ** 2) / (R - 2)
    s2_loo = (Q - s2) / (R - 1)
    c_loo = var_loo - s2_loo / N
    se = math.sqrt((R - 1) / R * float(((c_loo - c_loo.mean()) ** 2).sum()))
    return c_hat, se


@dataclass
class ChaosReport:
    rows: list          # dicts: N, t, mean_error, mean_error_ci, pair_cov, pair_cov_se, cov_z
    mean_error_slopes: dict   # t -> (slope, stderr)
    pair_cov_slopes: dict     # t -> (slope, stderr) or None when covariances are not all positive
    overall_mean_error_slope: tuple
    overall_pair_cov_slope: tuple | None

    def zero_cov_accepted(self, level: float = 0.01) -> bool:
        """True when every (N, t) accepts the zero-covariance null."""
        crit = stats.norm.ppf(1.0 - level / 2.0)
        return all(abs(r["cov_z"]) < crit for r in self.rows)

    def to_doc(self) -> dict:
        return {
            "rows": self.rows,
            "mean_error_slopes": {str(t): list(v) for t, v in self.mean_error_slopes.items()},
            "pair_cov_slopes": {str(t): (list(v) if v else None) for t, v in self.pair_cov_slopes.items()},
            "overall_mean_error_slope": list(self.overall_mean_error_slope),
            "overall_pair_cov_slope": list(self.overall_pair_cov_slope) if self.overall_pair_cov_slope else None,
        }


def chaoticity_report(ensembles, reference, times, class_index: int = 0) -> ChaosReport:
    """Finite-N decay table against the limit solution.

    ``ensembles`` is one TrajectoryEnsemble per population size (at least 3);
    ``reference`` is a PicardReport or a (grid, class_means) pair giving the
    limit mean of w+.  For each N and time the table holds the mean absolute
    deviation of the per-replica class mean from the limit mean, and the
    pairwise covariance of w+ between distinct users estimated from the
    replica-level moment identity (all pairs at once, no pair subsampling).
    """
    if len(ensembles) < 3:
        raise ValueError("need at least 3 population sizes to fit decay slopes")
    if hasattr(reference, "trajectory"):
        ref_grid = reference.trajectory.grid
        ref_means = reference.class_means
    else:
        ref_grid, ref_means = reference
        ref_means = np.atleast_2d(ref_means)

    k = class_index
    rows = []
    byt = {float(t): {"N": [], "err": [], "cov": []} for t in times}
    for ens in ensembles:
        N = ens.counts[k]
        step = float(ens.grid[1] - ens.grid[0])
        for t in times:
            gi = int(np.argmin(np.abs(ens.grid - t)))
            if abs(float(ens.grid[gi]) - t) > 0.5 * step + 1e-9:
                raise ValueError(f"time {t} not on the ensemble grid")
            m = ens.mean_wplus[:, gi, k]
            q = ens.sumsq_wplus[:, gi, k] / N
            s2 = np.maximum(q - m ** 2, 0.0) * N / max(N - 1, 1)
            ref = float(np.interp(t, ref_grid, ref_means[k]))
            dev = np.abs(m - ref)
            me = float(dev.mean())
            me_ci = 1.96 * float(dev.std(ddof=1) / math.sqrt(len(dev)))
            c_hat, c_se = _pair_cov_jackknife(m, s2, N)
            rows.append(
                {
                    "N": N,
                    "t": float(t),
                    "mean_error": me,
                    "mean_error_ci": me_ci,
                    "pair_cov": c_hat,
                    "pair_cov_se": c_se,
                    "cov_z": c_hat / c_se if c_se > 0 else float("nan"),
                }
            )
            byt[float(t)]["N"].append(N)
            byt[float(t)]["err"].append(me)
            byt[float(t)]["cov"].append(c_hat)

    # congestion coupling is competitive, so pair covariances are typically
    # negative; decay slopes are fitted on their magnitudes
    me_slopes, cov_slopes = {}, {}
    for t, d in byt.items():
        me_slopes[t] = _ols_loglog(d["N"], d["err"])
        cov_slopes[t] = _ols_loglog(d["N"], np.abs(d["cov"])) if all(c != 0 for c in d["cov"]) else None

    ns = sorted({r["N"] for r in rows})
    err_avg = [np.mean([r["mean_error"] for r in rows if r["N"] == n]) for n in ns]
    cov_avg = [np.mean([r["pair_cov"] for r in rows if r["N"] == n]) for n in ns]
    overall_me = _ols_loglog(ns, err_avg)
    overall_cov = _ols_loglog(ns, np.abs(cov_avg)) if all(c != 0 for c in cov_avg) else None
    return ChaosReport(rows, me_slopes, cov_slopes, overall_me, overall_cov)


# ---------------------------------------------------------------------------
# time averages with batch-means confidence intervals
# ---------------------------------------------------------------------------

@dataclass
class ErgodicEstimate:
    value: float
    half_width: float
    batch_means: np.ndarray

    @property
    def interval(self):
        return (self.value - self.half_width, self.value + self.half_width)


def ergodic_average(times, values, f=None, burn_in: float = 0.0, n_batches: int = 20) -> ErgodicEstimate:
    """Time average of f over the path tail with a batch-means 95% CI.

    ``times`` is a uniform sampling grid and ``values`` the sampled path
    (user values with OFF at -1, or plain reals for permanent connections).
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float).reshape(-1)
    if len(times) != len(values):
        raise ValueError("times and values disagree in length")
    duration = float(times[-1] - times[0])
    if duration <= 2.0 * burn_in:
        raise ValueError("path duration must exceed twice the burn-in")
    keep = times >= times[0] + burn_in
    y = values[keep]
    if f is not None:
        y = np.asarray(f(y), dtype=float)
    if len(y) < n_batches:
        raise ValueError(f"need at least {n_batches} samples after burn-in")
    usable = len(y) - (len(y) % n_batches)
    batches = y[:usable].reshape(n_batches, -1).mean(axis=1)
    value = float(batches.mean())
    if n_batches > 1:
        tcrit = stats.t.ppf(0.975, n_batches - 1)
        half = float(tcrit * batches.std(ddof=1) / math.sqrt(n_batches))
    else:
        half = float("nan")
    return ErgodicEstimate(value=value, half_width=half, batch_means=batches)
