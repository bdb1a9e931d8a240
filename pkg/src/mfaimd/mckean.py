"""Mean-field limit machinery.

The limit of the scaled N-particle system is a one-user process per class
whose rates read a deterministic load trajectory u(t) instead of the state of
the other users.  ``simulate_frozen_load`` samples that process for a fixed
exogenous u(.); ``picard_solve`` closes the loop by iterating

    u <- (1 - rho) u + rho F(u),
    F(u)(t)_j = sum_k A_jk p_k E[w_k(t)+ under load u]

on a uniform grid, with common random numbers across iterations so the Monte
Carlo map is a fixed function of u.  ``coupling_distance`` drives two copies
of the one-user process with the same point-process randomness and measures
the mean sup-path distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial

import numpy as np

from .model import ConfigError, ModelConfig, UserState, validate_config
from .particle import SimulationError, TrajectoryEnsemble
from .rng import CH_ACTIVATE, CH_DEACTIVATE, CH_INIT, CH_LOSS, stream
from .util import parallel_map

__all__ = [
    "LoadTrajectory",
    "PicardReport",
    "simulate_frozen_load",
    "picard_solve",
    "coupling_distance",
]

_THINNING_FACTOR = 0.1
_TINY = 1e-300


@dataclass
class LoadTrajectory:
    """Deterministic load path on a uniform grid with linear interpolation."""

    grid: np.ndarray   # (M+1,)
    values: np.ndarray  # (M+1, J)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if len(self.grid) != len(self.values):
            raise ValueError("grid and values disagree in length")
        if len(self.grid) < 2:
            raise ValueError("need at least two grid points")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("load values must be finite and >= 0")

    @classmethod
    def constant(cls, u, T: float, n_grid: int = 1) -> "LoadTrajectory":
        u = np.atleast_1d(np.asarray(u, dtype=float))
        grid = np.linspace(0.0, T, n_grid + 1)
        return cls(grid, np.tile(u, (n_grid + 1, 1)))

    @classmethod
    def zeros(cls, n_nodes: int, T: float, n_grid: int) -> "LoadTrajectory":
        return cls(np.linspace(0.0, T, n_grid + 1), np.zeros((n_grid + 1, n_nodes)))

    @property
    def T(self) -> float:
        return float(self.grid[-1])

    @property
    def step(self) -> float:
        return float(self.grid[1] - self.grid[0])

    def at(self, t: float) -> tuple:
        """Interpolated load as a tuple (cheap to consume in scalar loops)."""
        s = self.step
        i = min(int(t / s), len(self.grid) - 2)
        i = max(i, 0)
        frac = (t - self.grid[i]) / s
        frac = min(max(frac, 0.0), 1.0)
        rows = self._rows()
        row, nxt = rows[i], rows[i + 1]
        return tuple(a + frac * (b - a) for a, b in zip(row, nxt))

    def _rows(self):
        rows = getattr(self, "_row_cache", None)
        if rows is None:
            rows = [tuple(v) for v in self.values]
            object.__setattr__(self, "_row_cache", rows)
        return rows

    def cell_box(self, i: int) -> tuple:
        """Componentwise (lo, hi) envelope of cell [t_i, t_i+1]; a valid box
        for any sub-interval of the cell."""
        boxes = getattr(self, "_cell_cache", None)
        if boxes is None:
            lo = np.minimum(self.values[:-1], self.values[1:])
            hi = np.maximum(self.values[:-1], self.values[1:])
            boxes = [(tuple(a), tuple(b)) for a, b in zip(lo, hi)]
            object.__setattr__(self, "_cell_cache", boxes)
        return boxes[min(max(i, 0), len(boxes) - 1)]

    def bounds_on(self, t0: float, t1: float) -> tuple:
        """Componentwise (lo, hi) over [t0, t1]; exact because the path is
        piecewise linear, so extremes sit at endpoints or interior nodes."""
        a = np.asarray(self.at(t0))
        b = np.asarray(self.at(t1))
        lo = np.minimum(a, b)
        hi = np.maximum(a, b)
        s = self.step
        i0 = int(math.floor(t0 / s)) + 1
        i1 = int(math.ceil(t1 / s))
        if i1 > i0:
            inner = self.values[max(i0, 0): min(i1, len(self.grid))]
            if len(inner):
                lo = np.minimum(lo, inner.min(axis=0))
                hi = np.maximum(hi, inner.max(axis=0))
        return tuple(lo), tuple(hi)

    def sup_distance(self, other: "LoadTrajectory") -> float:
        if self.values.shape != other.values.shape:
            raise ValueError("trajectories live on different grids")
        return float(np.max(np.abs(self.values - other.values)))


# ---------------------------------------------------------------------------
# one-user process under an exogenous load
# ---------------------------------------------------------------------------

def _draw_init(cls_params, init, gen):
    """Normalize an initial condition for a single user: UserState, an ON
    fraction in [0, 1] (window from alpha), or None (OFF)."""
    if init is None:
        return False, 0.0
    if isinstance(init, UserState):
        return init.active, init.wplus
    frac = float(init)
    if not 0.0 <= frac <= 1.0:
        raise ConfigError(f"init: ON fraction must lie in [0, 1], got {frac}")
    if gen.random() < frac:
        return True, float(cls_params.alpha.sample(gen))
    return False, 0.0


def _rk4_window(a_fam, w, t, h, traj):
    if h <= 0.0:
        return w
    k1 = a_fam.value(w, traj.at(t))
    k2 = a_fam.value(w + 0.5 * h * k1, traj.at(t + 0.5 * h))
    k3 = a_fam.value(w + 0.5 * h * k2, traj.at(t + 0.5 * h))
    k4 = a_fam.value(w + h * k3, traj.at(t + h))
    return w + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _rate_mode(fam, n_nodes):
    """Precompiled evaluator for the scalar loops: ("const", v) when the
    family ignores window and load, ("wlin", slope) for window-proportional
    families with no load coupling, else ("gen", family)."""
    if fam.load_independent():
        kind, v = fam.at_load((0.0,) * n_nodes)
        return ("const", v) if kind == "const" else ("wlin", v)
    return ("gen", fam)


def _mode_sup(mode, w_hi, box):
    kind, v = mode
    if kind == "const":
        return v
    if kind == "wlin":
        return w_hi * v
    return float(v.sup_box(w_hi, box[0], box[1]))


def _mode_val(mode, w, u):
    kind, v = mode
    if kind == "const":
        return v
    if kind == "wlin":
        return w * v
    return float(v.value(w, u))


def _frozen_batch(replicas, cfg, k, traj, grid, seed, init, store_paths, thinning_factor):
    c = cfg.classes[k]
    abar = c.abar
    G = len(grid)
    n = len(replicas)
    wplus = np.zeros((n, G))
    onf = np.zeros((n, G))
    paths = np.empty((n, G)) if store_paths else None
    ustep = traj.step
    grid_f = [float(g) for g in grid]
    J = cfg.nodes
    lam_m = _rate_mode(c.lam, J)
    mu_m = _rate_mode(c.mu, J)
    b_m = _rate_mode(c.b, J)
    a_const = c.a.load_independent()
    a_c = c.a.at_load((0.0,) * J)[1] if a_const else None
    needs_u = "gen" in (lam_m[0], mu_m[0], b_m[0]) or not a_const

    for row, rep in enumerate(replicas):
        g_act = stream(seed, k, rep, CH_ACTIVATE)
        g_loss = stream(seed, k, rep, CH_LOSS)
        g_deact = stream(seed, k, rep, CH_DEACTIVATE)
        on, w = _draw_init(c, init, stream(seed, k, rep, CH_INIT))

        t = 0.0
        wplus[row, 0] = w if on else 0.0
        onf[row, 0] = 1.0 if on else 0.0
        if store_paths:
            paths[row, 0] = w if on else -1.0
        gi = 1
        while gi < G:
            t_next = grid_f[gi]
            # stay inside one linear cell of u so the cell envelope is a
            # valid box; the nudge keeps a boundary-adjacent t from
            # producing a vanishing window
            cell = int(math.floor(t / ustep + 1e-9))
            h = min(t_next, (cell + 1.0) * ustep) - t
            box = traj.cell_box(cell) if needs_u else None
            u_now = traj.at(t) if needs_u else None
            if on:
                rate0 = _mode_val(b_m, w, u_now) + _mode_val(mu_m, w, u_now)
                if rate0 > 0:
                    h = min(h, thinning_factor / rate0)
                w_hi = w + abar * h
                m_loss = _mode_sup(b_m, w_hi, box)
                m_deact = _mode_sup(mu_m, w_hi, box)
                e_loss = g_loss.exponential() / m_loss if m_loss > 0 else math.inf
                e_deact = g_deact.exponential() / m_deact if m_deact > 0 else math.inf
                first = min(e_loss, e_deact)
                step = min(first, h)
                if a_const:
                    w += a_c * step
                else:
                    w = _rk4_window(c.a, w, t, step, traj)
                t += step
                if first < h:
                    u_c = traj.at(t) if needs_u else None
                    if e_loss <= e_deact:
                        if g_loss.random() * m_loss < _mode_val(b_m, w, u_c):
                            w = c.r * w
                    else:
                        if g_deact.random() * m_deact < _mode_val(mu_m, w, u_c):
                            on, w = False, 0.0
                    continue
            else:
                m_act = _mode_sup(lam_m, 0.0, box)
                e_act = g_act.exponential() / m_act if m_act > 0 else math.inf
                if e_act < h:
                    t += e_act
                    mark = float(c.alpha.sample(g_act))
                    u_c = traj.at(t) if needs_u else None
                    if g_act.random() * m_act < _mode_val(lam_m, 0.0, u_c):
                        on, w = True, mark
                    continue
                t += h
            if t >= t_next - 1e-12:
                t = t_next
                if not math.isfinite(w):
                    raise SimulationError(f"non-finite window at t={t}")
                wplus[row, gi] = w if on else 0.0
                onf[row, gi] = 1.0 if on else 0.0
                if store_paths:
                    paths[row, gi] = w if on else -1.0
                gi += 1
    return wplus, onf, paths


def simulate_frozen_load(
    cfg: ModelConfig,
    k: int,
    u: LoadTrajectory,
    replicas: int,
    seed: int,
    *,
    init=None,
    grid: np.ndarray | None = None,
    store_paths: bool = False,
    workers: int = 1,
    thinning_factor: float = _THINNING_FACTOR,
) -> TrajectoryEnsemble:
    """M independent copies of the class-k one-user process driven by the
    exogenous load u(.).  Sampled on the trajectory grid unless ``grid`` is
    given (it must be a subset-compatible uniform grid on [0, T])."""
    validate_config(cfg).raise_for_errors()
    if replicas < 1:
        raise ConfigError("replicas must be >= 1")
    out_grid = u.grid if grid is None else np.asarray(grid, dtype=float)
    batches = _batches(replicas, workers)
    task = partial(
        _frozen_batch,
        cfg=cfg,
        k=k,
        traj=u,
        grid=out_grid,
        seed=seed,
        init=init,
        store_paths=store_paths,
        thinning_factor=thinning_factor,
    )
    parts = parallel_map(task, batches, workers)
    wplus = np.concatenate([p[0] for p in parts])
    onf = np.concatenate([p[1] for p in parts])
    paths = [np.concatenate([p[2] for p in parts])[:, :, None]] if store_paths else None
    return TrajectoryEnsemble(
        grid=out_grid,
        counts=(1,),
        mean_wplus=wplus[:, :, None],
        on_fraction=onf[:, :, None],
        sumsq_wplus=(wplus ** 2)[:, :, None],
        seed=seed,
        scheme="frozen",
        scaled=False,
        paths=paths,
    )


def _batches(n, workers):
    if workers is None or workers <= 1:
        return [list(range(n))]
    per = max(1, -(-n // (4 * workers)))
    return [list(range(i, min(i + per, n))) for i in range(0, n, per)]


# ---------------------------------------------------------------------------
# Picard iteration on the load trajectory
# ---------------------------------------------------------------------------

@dataclass
class PicardReport:
    iterations: int
    distances: list
    trajectory: LoadTrajectory
    class_means: np.ndarray  # (K, grid)
    converged: bool
    tol: float
    iterates: list | None = None  # per-iteration load values, for reporting

    def mean_at(self, k: int, t: float) -> float:
        return float(np.interp(t, self.trajectory.grid, self.class_means[k]))

    def to_doc(self) -> dict:
        return {
            "iterations": self.iterations,
            "distances": [float(d) for d in self.distances],
            "converged": self.converged,
            "tol": self.tol,
        }


def picard_solve(
    cfg: ModelConfig,
    T: float,
    *,
    n_grid: int = 100,
    replicas: int = 1000,
    tol: float = 1e-3,
    damping: float = 0.7,
    max_iter: int = 25,
    seed: int = 0,
    init=None,
    u0: LoadTrajectory | None = None,
    workers: int = 1,
    thinning_factor: float = _THINNING_FACTOR,
) -> PicardReport:
    """Successive substitution on the load trajectory of the nonlinear limit.

    ``init`` is a per-class initial condition (one value, or a list with one
    entry per class) as accepted by simulate_frozen_load.  Randomness is
    common across iterations, so the iteration is a deterministic map for a
    fixed seed.
    """
    validate_config(cfg).raise_for_errors()
    if not tol > 0:
        raise ConfigError("tol must be > 0")
    if not 0 < damping <= 1:
        raise ConfigError("damping must lie in (0, 1]")
    K = cfg.n_classes
    inits = init if isinstance(init, (list, tuple)) and not isinstance(init, UserState) else [init] * K
    if len(inits) != K:
        raise ConfigError(f"init: expected {K} per-class entries")
    u = u0 if u0 is not None else LoadTrajectory.zeros(cfg.nodes, T, n_grid)
    if abs(u.T - T) > 1e-9 or len(u.grid) != n_grid + 1:
        raise ConfigError("u0 must live on the requested grid")

    Ap = cfg.allocation * cfg.proportions  # (J, K), columns already weighted
    distances = []
    iterates = []
    means = np.zeros((K, n_grid + 1))
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        for k in range(K):
            ens = simulate_frozen_load(
                cfg, k, u, replicas, seed, init=inits[k], workers=workers,
                thinning_factor=thinning_factor,
            )
            means[k] = ens.mean_wplus[:, :, 0].mean(axis=0)
        F = (Ap @ means).T  # (grid, J)
        new_values = (1.0 - damping) * u.values + damping * F
        if not np.all(np.isfinite(new_values)):
            raise SimulationError("non-finite load trajectory in Picard iteration")
        dist = float(np.max(np.abs(new_values - u.values)))
        distances.append(dist)
        u = LoadTrajectory(u.grid, new_values)
        iterates.append(u.values.copy())
        if dist <= tol:
            converged = True
            break
    return PicardReport(
        iterations=it,
        distances=distances,
        trajectory=u,
        class_means=means.copy(),
        converged=converged,
        tol=tol,
        iterates=iterates,
    )


# ---------------------------------------------------------------------------
# synchronous coupling of two one-user processes
# ---------------------------------------------------------------------------

def _coupled_pair_sup(rep, cfg, k, traj, seed, init1, init2, n_grid, thinning_factor):
    """Sup over time of the state distance between two copies of the class-k
    process driven by the same candidate times and acceptance marks."""
    c = cfg.classes[k]
    abar = c.abar
    g_act = stream(seed, k, rep, CH_ACTIVATE)
    g_loss = stream(seed, k, rep, CH_LOSS)
    g_deact = stream(seed, k, rep, CH_DEACTIVATE)
    # identical stream keys: identical initial laws give identical draws
    on1, w1 = _draw_init(c, init1, stream(seed, k, rep, CH_INIT))
    on2, w2 = _draw_init(c, init2, stream(seed, k, rep, CH_INIT))

    def dist(a_on, a_w, b_on, b_w):
        va = a_w if a_on else -1.0
        vb = b_w if b_on else -1.0
        return abs(va - vb)

    T = traj.T
    ustep = traj.step
    check = np.linspace(0.0, T, n_grid + 1)
    sup = dist(on1, w1, on2, w2)
    t = 0.0
    gi = 1
    while gi <= n_grid:
        t_next = float(check[gi])
        cell_end = (math.floor(t / ustep + 1e-9) + 1.0) * ustep
        h = min(t_next, cell_end) - t
        u_now = traj.at(t)
        rate0 = 0.0
        for on, w in ((on1, w1), (on2, w2)):
            if on:
                rate0 += c.b.value(w, u_now) + c.mu.value(w, u_now)
            else:
                rate0 += c.lam.value(0.0, u_now)
        if rate0 > 0:
            h = min(h, thinning_factor / rate0)
        u_lo, u_hi = traj.bounds_on(t, t + h)
        w_top = max(w1 if on1 else 0.0, w2 if on2 else 0.0) + abar * h
        m_act = float(c.lam.sup_box(0.0, u_lo, u_hi)) if (not on1 or not on2) else 0.0
        m_loss = float(c.b.sup_box(w_top, u_lo, u_hi)) if (on1 or on2) else 0.0
        m_deact = float(c.mu.sup_box(w_top, u_lo, u_hi)) if (on1 or on2) else 0.0

        e_act = g_act.exponential() / m_act if m_act > 0 else math.inf
        e_loss = g_loss.exponential() / m_loss if m_loss > 0 else math.inf
        e_deact = g_deact.exponential() / m_deact if m_deact > 0 else math.inf
        first = min(e_act, e_loss, e_deact)
        step = min(first, h)
        if on1:
            w1 = _rk4_window(c.a, w1, t, step, traj)
        if on2:
            w2 = _rk4_window(c.a, w2, t, step, traj)
        t += step
        if first < h:
            u_c = traj.at(t)
            if first == e_act:
                mark = float(c.alpha.sample(g_act))
                z = g_act.random() * m_act
                if not on1 and z < c.lam.value(0.0, u_c):
                    on1, w1 = True, mark
                if not on2 and z < c.lam.value(0.0, u_c):
                    on2, w2 = True, mark
            elif first == e_loss:
                z = g_loss.random() * m_loss
                if on1 and z < c.b.value(w1, u_c):
                    w1 = c.r * w1
                if on2 and z < c.b.value(w2, u_c):
                    w2 = c.r * w2
            else:
                z = g_deact.random() * m_deact
                if on1 and z < c.mu.value(w1, u_c):
                    on1, w1 = False, 0.0
                if on2 and z < c.mu.value(w2, u_c):
                    on2, w2 = False, 0.0
        sup = max(sup, dist(on1, w1, on2, w2))
        if first >= h and t >= t_next - 1e-12:
            t = t_next
            gi += 1
    return sup


def coupling_distance(
    cfg: ModelConfig,
    init1,
    init2,
    u: LoadTrajectory,
    replicas: int,
    seed: int,
    *,
    n_grid: int = 200,
    workers: int = 1,
    thinning_factor: float = _THINNING_FACTOR,
) -> float:
    """Monte Carlo mean of sup_{t <= T} distance between two synchronously
    coupled copies of the one-user process.

    ``init1`` / ``init2`` are per-class initial conditions (scalar applies to
    every class).  For several classes the per-class path suprema are taken
    first and then the max over classes, a conservative upper bound of the
    sup of the product-space distance.
    """
    validate_config(cfg).raise_for_errors()
    K = cfg.n_classes
    i1 = init1 if isinstance(init1, (list, tuple)) else [init1] * K
    i2 = init2 if isinstance(init2, (list, tuple)) else [init2] * K
    sups = np.zeros((replicas, K))
    for k in range(K):
        task = partial(
            _coupled_pair_sup,
            cfg=cfg, k=k, traj=u, seed=seed, init1=i1[k], init2=i2[k],
            n_grid=n_grid, thinning_factor=thinning_factor,
        )
        sups[:, k] = parallel_map(task, range(replicas), workers)
    return float(sups.max(axis=1).mean())
