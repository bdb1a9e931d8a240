"""Finite-N simulation of the interacting ON/OFF AIMD system.

Two interchangeable integrators:

* ``simulate_exact`` — event-driven thinning.  Between jumps all ON windows
  grow along the coupled drift ODE (the load changes because every window
  grows), integrated with classical RK4 on an adaptive micro-window.  Jump
  times are drawn from a per-window majorant rate and accepted with ratio
  true-rate / majorant.  The majorant is exact on each micro-window because
  every rate family is coordinatewise monotone in (w, u), windows can grow by
  at most abar * h between jumps, and loads cannot decrease along the drift.

* ``simulate_euler`` — synchronous fixed-step scheme.  The load is frozen at
  the start of each step; each user fires at most one event per step with
  probability rate * dt.  Converges weakly to the exact scheme as dt -> 0.

Events (class k, load u): OFF -> ON(w ~ alpha_k) at rate lam_k(u);
ON(w) -> ON(r_k w) at rate b_k(w, u); ON(w) -> OFF at rate mu_k(w, u).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import partial

import numpy as np

from .model import ConfigError, ModelConfig, UserState, validate_config
from .rng import CH_EULER, CH_EVENTS, CH_INIT, stream
from .util import parallel_map

__all__ = [
    "SimulationError",
    "SystemState",
    "TrajectoryEnsemble",
    "simulate_exact",
    "simulate_euler",
]

# default micro-window: 0.1 / (estimated total event rate)
THINNING_FACTOR = 0.1


class SimulationError(RuntimeError):
    """Non-finite state or an unusable majorant during a run."""


@dataclass
class SystemState:
    """Snapshot of the finite system: time, per-class user states, and the
    load vector cached at construction."""

    t: float
    states: list[list[UserState]]
    loads: np.ndarray

    @classmethod
    def build(cls, t, states, allocation, scale=None) -> "SystemState":
        from .model import node_loads

        return cls(t=t, states=[list(s) for s in states], loads=node_loads(states, allocation, scale))

    def check_load_cache(self, allocation, scale=None, rtol=1e-9) -> bool:
        from .model import node_loads

        fresh = node_loads(self.states, allocation, scale)
        return bool(np.allclose(self.loads, fresh, rtol=rtol, atol=1e-300))


@dataclass
class TrajectoryEnsemble:
    """Sampled replica paths on a uniform grid.

    ``mean_wplus``, ``on_fraction`` and ``sumsq_wplus`` have shape
    (replicas, grid, classes); ``sumsq_wplus`` holds the per-class sum of
    squared positive parts (not divided by N_k).  ``paths``, when stored, is
    one (replicas, grid, N_k) array per class with OFF encoded as -1.
    """

    grid: np.ndarray
    counts: tuple[int, ...]
    mean_wplus: np.ndarray
    on_fraction: np.ndarray
    sumsq_wplus: np.ndarray
    seed: int
    scheme: str
    scaled: bool
    paths: list[np.ndarray] | None = None

    @property
    def replicas(self) -> int:
        return self.mean_wplus.shape[0]

    def class_mean(self, k: int) -> np.ndarray:
        """Across-replica average of the class-k empirical mean of w+."""
        return self.mean_wplus[:, :, k].mean(axis=0)

    def load_trajectories(self, allocation) -> np.ndarray:
        """Per-replica load paths, shape (replicas, grid, J); scaled by the
        total user count when the run was scaled."""
        A = np.asarray(allocation, dtype=float)
        counts = np.asarray(self.counts, dtype=float)
        totals = self.mean_wplus * counts  # (R, G, K)
        u = totals @ A.T
        if self.scaled:
            u = u / counts.sum()
        return u

    def snapshot_values(self, k: int, grid_index: int) -> np.ndarray:
        """All sampled class-k user values (OFF = -1) at one grid time,
        pooled across replicas.  Requires stored paths."""
        if self.paths is None:
            raise ValueError("ensemble was run without store_paths")
        return self.paths[k][:, grid_index, :].reshape(-1)


# ---------------------------------------------------------------------------
# initial conditions
# ---------------------------------------------------------------------------

def _init_arrays(cfg, counts, init, gen):
    """Per-class (on, w) arrays for one replica.

    ``init`` is None (all OFF), a fraction ON in [0, 1], one fraction per
    class, a SystemState, or per-class lists of UserState.  Fractions are
    deterministic counts round(f * N_k); initial windows are drawn from the
    class law alpha_k.
    """
    K = len(counts)
    if isinstance(init, SystemState):
        init = init.states
    if init is not None and isinstance(init, (list, tuple)) and init and isinstance(init[0], (list, tuple)):
        on, w = [], []
        for k, states in enumerate(init):
            if len(states) != counts[k]:
                raise ConfigError(f"init: class {k} has {len(states)} states, expected {counts[k]}")
            on.append(np.array([s.active for s in states], dtype=bool))
            w.append(np.array([s.wplus for s in states], dtype=float))
        return on, w
    if init is None:
        fracs = [0.0] * K
    elif np.isscalar(init):
        fracs = [float(init)] * K
    else:
        fracs = [float(f) for f in init]
        if len(fracs) != K:
            raise ConfigError(f"init: expected {K} ON fractions, got {len(fracs)}")
    on, w = [], []
    for k in range(K):
        n_on = int(round(fracs[k] * counts[k]))
        if not 0 <= n_on <= counts[k]:
            raise ConfigError(f"init: ON fraction {fracs[k]} outside [0, 1]")
        mask = np.zeros(counts[k], dtype=bool)
        mask[:n_on] = True
        wk = np.zeros(counts[k])
        if n_on:
            wk[:n_on] = cfg.classes[k].alpha.sample(gen, n_on)
        on.append(mask)
        w.append(wk)
    return on, w


def _loads(A, w, scale):
    totals = np.array([float(wk.sum()) for wk in w])
    return (A @ totals) / scale


def _rk4_drift(cfg, on, w, h, scale):
    """Advance all ON windows by one RK4 step of the coupled drift ODE.
    OFF windows stay at 0, so plain sums give the loads at every stage."""
    A = cfg.allocation
    K = len(w)

    def slopes(ws):
        u = _loads(A, ws, scale)
        return [np.asarray(cfg.classes[k].a.value(ws[k], u), dtype=float) * on[k] for k in range(K)]

    k1 = slopes(w)
    k2 = slopes([w[k] + 0.5 * h * k1[k] for k in range(K)])
    k3 = slopes([w[k] + 0.5 * h * k2[k] for k in range(K)])
    k4 = slopes([w[k] + h * k3[k] for k in range(K)])
    return [w[k] + (h / 6.0) * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]) for k in range(K)]


def _record(out, gi, counts, on, w, paths):
    for k in range(len(counts)):
        wk = w[k]
        out["mean"][gi, k] = wk.sum() / counts[k]
        out["onf"][gi, k] = on[k].sum() / counts[k]
        out["sumsq"][gi, k] = float(wk @ wk)
        if paths is not None:
            paths[k][gi] = np.where(on[k], wk, -1.0)


# ---------------------------------------------------------------------------
# exact event-driven scheme
# ---------------------------------------------------------------------------

def _exact_replica(replica, cfg, counts, grid, seed, scaled, store_paths, init, thinning_factor):
    gen = stream(seed, replica, CH_EVENTS)
    on, w = _init_arrays(cfg, counts, init, stream(seed, replica, CH_INIT))
    K = cfg.n_classes
    A = cfg.allocation
    scale = float(sum(counts)) if scaled else 1.0
    abar = np.array([c.abar for c in cfg.classes], dtype=float)
    T = float(grid[-1])
    G = len(grid)

    out = {
        "mean": np.empty((G, K)),
        "onf": np.empty((G, K)),
        "sumsq": np.empty((G, K)),
    }
    paths = [np.empty((G, counts[k])) for k in range(K)] if store_paths else None
    _record(out, 0, counts, on, w, paths)

    t = 0.0
    gi = 1
    while gi < G:
        t_next = float(grid[gi])
        u = _loads(A, w, scale)
        n_on = np.array([int(m.sum()) for m in on], dtype=float)
        n_off = np.array(counts, dtype=float) - n_on

        # crude total-rate estimate at the current state to size the window
        rate0 = 0.0
        for k in range(K):
            c = cfg.classes[k]
            rate0 += n_off[k] * float(c.lam.value(0.0, u))
            if n_on[k]:
                wk = w[k][on[k]]
                rate0 += float(np.sum(c.b.value(wk, u))) + float(np.sum(c.mu.value(wk, u)))
        h = t_next - t
        if rate0 > 0:
            h = min(h, thinning_factor / rate0)
        at_grid = t + h >= t_next - 1e-15

        # box bounds over [t, t+h]: windows grow by at most abar*h and the
        # load cannot decrease along the drift
        u_hi = u + h * (A @ (n_on * abar)) / scale
        lam_sup = np.empty(K)
        m_off = np.empty(K)
        b_sup, mu_sup, on_mass = [], [], np.empty(K)
        for k in range(K):
            c = cfg.classes[k]
            lam_sup[k] = float(c.lam.sup_box(0.0, u, u_hi))
            m_off[k] = n_off[k] * lam_sup[k]
            if n_on[k]:
                w_hi = w[k][on[k]] + abar[k] * h
                bs = np.broadcast_to(np.asarray(c.b.sup_box(w_hi, u, u_hi), dtype=float), w_hi.shape)
                ms = np.broadcast_to(np.asarray(c.mu.sup_box(w_hi, u, u_hi), dtype=float), w_hi.shape)
            else:
                bs = ms = np.zeros(0)
            b_sup.append(bs)
            mu_sup.append(ms)
            on_mass[k] = float(bs.sum() + ms.sum())
        m_total = float(m_off.sum() + on_mass.sum())
        if not math.isfinite(m_total):
            raise SimulationError("majorant overflow: jump rates are unbounded on the current window")

        delta = gen.exponential() / m_total if m_total > 0 else math.inf
        if delta >= h:
            w = _rk4_drift(cfg, on, w, h, scale)
            t = t_next if at_grid else t + h
            if at_grid:
                if not all(np.all(np.isfinite(wk)) for wk in w):
                    raise SimulationError(f"non-finite state at t={t}")
                _record(out, gi, counts, on, w, paths)
                gi += 1
            continue

        w = _rk4_drift(cfg, on, w, delta, scale)
        t += delta
        u_now = _loads(A, w, scale)

        # pick a channel proportionally to its majorant mass, then accept
        # with ratio true rate / majorant
        v = gen.random() * m_total
        for k in range(K):
            if v < m_off[k]:
                lam_true = float(cfg.classes[k].lam.value(0.0, u_now))
                if gen.random() * lam_sup[k] < lam_true:
                    idx = np.flatnonzero(~on[k])[min(int(v / lam_sup[k]), int(n_off[k]) - 1)]
                    on[k][idx] = True
                    w[k][idx] = float(cfg.classes[k].alpha.sample(gen))
                break
            v -= m_off[k]
            if v < on_mass[k]:
                tot = b_sup[k] + mu_sup[k]
                cum = np.cumsum(tot)
                pos = int(np.searchsorted(cum, v, side="right"))
                pos = min(pos, len(tot) - 1)
                v_in = v - (cum[pos - 1] if pos else 0.0)
                idx = np.flatnonzero(on[k])[pos]
                wi = w[k][idx]
                if v_in < b_sup[k][pos]:
                    b_true = float(cfg.classes[k].b.value(wi, u_now))
                    if gen.random() * b_sup[k][pos] < b_true:
                        w[k][idx] = cfg.classes[k].r * wi
                else:
                    mu_true = float(cfg.classes[k].mu.value(wi, u_now))
                    if gen.random() * mu_sup[k][pos] < mu_true:
                        on[k][idx] = False
                        w[k][idx] = 0.0
                break
            v -= on_mass[k]

    final = SystemState.build(
        T,
        [[UserState(bool(on[k][i]), float(w[k][i]) if on[k][i] else 0.0) for i in range(counts[k])] for k in range(K)],
        A,
        scale if scaled else None,
    )
    return out, paths, final


def simulate_exact(
    cfg: ModelConfig,
    counts,
    T: float,
    seed: int,
    *,
    replicas: int = 1,
    init=None,
    scaled: bool = False,
    n_grid: int = 200,
    store_paths: bool = False,
    workers: int = 1,
    thinning_factor: float = THINNING_FACTOR,
    _keep_final: bool = False,
):
    """Statistically exact sampling of the N-particle jump process.

    Returns a TrajectoryEnsemble sampled on ``n_grid + 1`` uniform grid
    points; with ``_keep_final`` the final SystemState of every replica is
    attached as ``ensemble.finals``.
    """
    validate_config(cfg).raise_for_errors()
    counts = tuple(int(n) for n in counts)
    if len(counts) != cfg.n_classes or any(n < 1 for n in counts):
        raise ConfigError(f"counts: need {cfg.n_classes} entries >= 1, got {counts}")
    if not T > 0:
        raise ConfigError("T must be > 0")
    grid = np.linspace(0.0, float(T), n_grid + 1)
    task = partial(
        _exact_replica,
        cfg=cfg,
        counts=counts,
        grid=grid,
        seed=seed,
        scaled=scaled,
        store_paths=store_paths,
        init=init,
        thinning_factor=thinning_factor,
    )
    results = parallel_map(task, range(replicas), workers)
    ens = _assemble(results, grid, counts, seed, "exact", scaled, store_paths)
    if _keep_final:
        ens.finals = [r[2] for r in results]
    return ens


# ---------------------------------------------------------------------------
# synchronous fixed-step scheme
# ---------------------------------------------------------------------------

def _euler_replica(replica, cfg, counts, grid, dt, n_steps, record_steps, seed, scaled, store_paths, init):
    gen = stream(seed, replica, CH_EULER)
    on, w = _init_arrays(cfg, counts, init, stream(seed, replica, CH_INIT))
    K = cfg.n_classes
    A = cfg.allocation
    scale = float(sum(counts)) if scaled else 1.0
    G = len(grid)
    out = {"mean": np.empty((G, K)), "onf": np.empty((G, K)), "sumsq": np.empty((G, K))}
    paths = [np.empty((G, counts[k])) for k in range(K)] if store_paths else None
    _record(out, 0, counts, on, w, paths)
    gi = 1

    for step in range(1, n_steps + 1):
        u = _loads(A, w, scale)
        for k in range(K):
            c = cfg.classes[k]
            onk, wk = on[k], w[k]
            U = gen.random(counts[k])
            # event probabilities from the frozen pre-step state; within one
            # step the priority is mu > b (both cannot fire)
            mu_p = np.minimum(np.asarray(c.mu.value(wk, u), dtype=float) * dt, 1.0)
            b_p = np.minimum(np.asarray(c.b.value(wk, u), dtype=float) * dt, 1.0 - mu_p)
            lam_p = min(float(c.lam.value(0.0, u)) * dt, 1.0)
            deact = onk & (U < mu_p)
            loss = onk & ~deact & (U < mu_p + b_p)
            act = ~onk & (U < lam_p)
            # drift with the frozen load, then apply the events
            a_val = np.asarray(c.a.value(wk, u), dtype=float)
            wk = np.where(onk, wk + a_val * dt, wk)
            wk[loss] *= c.r
            wk[deact] = 0.0
            n_act = int(act.sum())
            if n_act:
                wk[act] = c.alpha.sample(gen, n_act)
            on[k] = (onk | act) & ~deact
            w[k] = wk
        if gi < G and step == record_steps[gi]:
            if not all(np.all(np.isfinite(wk)) for wk in w):
                raise SimulationError(f"non-finite state at step {step}")
            _record(out, gi, counts, on, w, paths)
            gi += 1
    return out, paths, None


def _max_initial_rate(cfg, counts, on, w, scale):
    u = _loads(cfg.allocation, w, scale)
    worst = 0.0
    for k in range(cfg.n_classes):
        c = cfg.classes[k]
        worst = max(worst, float(c.lam.value(0.0, u)))
        if on[k].any():
            wk = w[k][on[k]]
            tot = np.asarray(c.mu.value(wk, u), dtype=float) + np.asarray(c.b.value(wk, u), dtype=float)
            worst = max(worst, float(tot.max()))
    return worst


def simulate_euler(
    cfg: ModelConfig,
    counts,
    T: float,
    dt: float,
    seed: int,
    *,
    replicas: int = 1,
    init=None,
    scaled: bool = False,
    n_grid: int = 200,
    store_paths: bool = False,
    workers: int = 1,
):
    """Weak approximation of the exact scheme with one frozen-load step per
    dt.  The step count is round(T / dt); the grid is laid on the effective
    horizon n_steps * dt."""
    validate_config(cfg).raise_for_errors()
    counts = tuple(int(n) for n in counts)
    if len(counts) != cfg.n_classes or any(n < 1 for n in counts):
        raise ConfigError(f"counts: need {cfg.n_classes} entries >= 1, got {counts}")
    if not dt > 0:
        raise ConfigError("dt must be > 0")
    if not T > 0:
        raise ConfigError("T must be > 0")
    n_steps = max(1, int(round(T / dt)))
    T_eff = n_steps * dt

    on0, w0 = _init_arrays(cfg, counts, init, stream(seed, 0, CH_INIT))
    rate = _max_initial_rate(cfg, counts, on0, w0, float(sum(counts)) if scaled else 1.0)
    if rate * dt > 0.5:
        raise ConfigError(f"dt too coarse: max rate * dt = {rate * dt:.3g} > 0.5")
    if rate * dt > 0.1:
        warnings.warn(f"max rate * dt = {rate * dt:.3g} > 0.1; events are visibly discretized", stacklevel=2)

    n_grid = min(n_grid, n_steps)
    grid = np.linspace(0.0, T_eff, n_grid + 1)
    record_steps = np.rint(grid / dt).astype(int)
    task = partial(
        _euler_replica,
        cfg=cfg,
        counts=counts,
        grid=grid,
        dt=dt,
        n_steps=n_steps,
        record_steps=record_steps,
        seed=seed,
        scaled=scaled,
        store_paths=store_paths,
        init=init,
    )
    results = parallel_map(task, range(replicas), workers)
    return _assemble(results, grid, counts, seed, "euler", scaled, store_paths)


def _assemble(results, grid, counts, seed, scheme, scaled, store_paths):
    R = len(results)
    G = len(grid)
    K = len(counts)
    mean = np.empty((R, G, K))
    onf = np.empty((R, G, K))
    sumsq = np.empty((R, G, K))
    paths = [np.empty((R, G, counts[k])) for k in range(K)] if store_paths else None
    for r, (out, p, _) in enumerate(results):
        mean[r] = out["mean"]
        onf[r] = out["onf"]
        sumsq[r] = out["sumsq"]
        if store_paths:
            for k in range(K):
                paths[k][r] = p[k]
    return TrajectoryEnsemble(
        grid=grid,
        counts=tuple(counts),
        mean_wplus=mean,
        on_fraction=onf,
        sumsq_wplus=sumsq,
        seed=seed,
        scheme=scheme,
        scaled=scaled,
        paths=paths,
    )
