"""Domain model for a multi-class network of intermittent AIMD connections.

A network has J nodes and K user classes.  Each user is either OFF (idle) or
ON with a window w >= 0; the load of node j is the allocation-weighted sum of
the windows of all ON users.  Per class, four parametric rate functions drive
the dynamics:

  lam(u)    OFF -> ON rate (new window drawn from the class initial law)
  mu(w, u)  ON -> OFF rate
  a(w, u)   continuous window growth speed while ON
  b(w, u)   loss rate; a loss multiplies the window by the factor r in [0, 1]

All rate functions belong to a small parametric menu (see the family classes
below); arbitrary callables are deliberately not supported so that majorant
bounds needed by the exact simulator are always available.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ConfigError",
    "UserState",
    "OFF",
    "plus",
    "trace_distance",
    "Constant",
    "LoadAffine",
    "WindowTimesLoadAffine",
    "ReciprocalLoadAffine",
    "Dirac",
    "Exponential",
    "Uniform",
    "ClassParams",
    "ModelConfig",
    "ValidationReport",
    "node_loads",
    "eval_rates",
    "validate_config",
    "config_from_doc",
    "load_config",
]


class ConfigError(ValueError):
    """A structurally invalid model configuration."""


# ---------------------------------------------------------------------------
# user states
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UserState:
    """State of one user: OFF, or ON with a nonnegative window.

    For file formats and transport distances the state is embedded on the real
    line with OFF at -1 (``value``); the positive part ``wplus`` is what enters
    node loads.
    """

    active: bool
    window: float = 0.0

    def __post_init__(self) -> None:
        if self.active:
            if not (self.window >= 0.0 and math.isfinite(self.window)):
                raise ValueError(f"ON window must be finite and >= 0, got {self.window}")
        elif self.window != 0.0:
            raise ValueError("OFF carries no window")

    @staticmethod
    def on(window: float) -> "UserState":
        return UserState(True, float(window))

    @property
    def wplus(self) -> float:
        return self.window if self.active else 0.0

    @property
    def value(self) -> float:
        """Real-line embedding: OFF -> -1, ON(w) -> w."""
        return self.window if self.active else -1.0

    @staticmethod
    def from_value(x: float) -> "UserState":
        return OFF if x < 0 else UserState(True, float(x))


OFF = UserState(False)


def plus(state: UserState) -> float:
    """Positive part of a state: 0 for OFF, the window for ON."""
    return state.wplus


def trace_distance(s1: UserState, s2: UserState) -> float:
    """Distance on the state space: |w - w'| between ON states, 1 + w between
    ON(w) and OFF.  Equals the line metric under the ``value`` embedding."""
    return abs(s1.value - s2.value)


# ---------------------------------------------------------------------------
# rate-function families
# ---------------------------------------------------------------------------
#
# Every family evaluates to a nonnegative number at any (w, u) in
# R+ x R+^J and is coordinatewise monotone in (w, u).  Monotonicity is what
# makes the box suprema in sup_box exact, which the thinning simulators rely
# on for their majorants.


def _coeffs(x, J: int, where: str) -> tuple[float, ...]:
    if np.isscalar(x):
        vals = (float(x),) * J
    else:
        vals = tuple(float(v) for v in x)
        if len(vals) != J:
            raise ConfigError(f"{where}: expected {J} per-node coefficients, got {len(vals)}")
    if any(not math.isfinite(v) or v < 0 for v in vals):
        raise ConfigError(f"{where}: coefficients must be finite and >= 0")
    return vals


def _dot(cs: tuple[float, ...], u) -> float:
    return float(sum(c * float(uj) for c, uj in zip(cs, u)))


@dataclass(frozen=True)
class Constant:
    """Rate c, independent of state and load."""

    c: float

    def __post_init__(self):
        if not (math.isfinite(self.c) and self.c >= 0):
            raise ConfigError(f"Constant rate must be finite and >= 0, got {self.c}")

    depends_on_w = False

    def value(self, w, u):
        return self.c if np.isscalar(w) else np.full(np.shape(w), self.c)

    def sup_box(self, w_hi, u_lo, u_hi):
        return self.value(w_hi, u_hi)

    def inf_box(self, w_lo, u_lo, u_hi) -> float:
        return self.c

    def bound(self) -> float:
        return self.c

    def is_zero(self) -> bool:
        return self.c == 0.0

    def load_independent(self) -> bool:
        return True

    def at_load(self, u) -> tuple[str, float]:
        return ("const", self.c)

    def to_doc(self) -> dict:
        return {"family": "constant", "params": {"c": self.c}}


@dataclass(frozen=True)
class LoadAffine:
    """Rate c0 + sum_j c_j u_j, independent of the window."""

    c0: float
    c: tuple[float, ...]

    def __post_init__(self):
        if not (math.isfinite(self.c0) and self.c0 >= 0):
            raise ConfigError(f"LoadAffine offset must be finite and >= 0, got {self.c0}")
        object.__setattr__(self, "c", tuple(float(v) for v in self.c))
        if any(not math.isfinite(v) or v < 0 for v in self.c):
            raise ConfigError("LoadAffine coefficients must be finite and >= 0")

    depends_on_w = False

    def value(self, w, u):
        v = self.c0 + _dot(self.c, u)
        return v if np.isscalar(w) else np.full(np.shape(w), v)

    def sup_box(self, w_hi, u_lo, u_hi):
        return self.value(w_hi, u_hi)

    def inf_box(self, w_lo, u_lo, u_hi) -> float:
        return self.c0 + _dot(self.c, u_lo)

    def bound(self) -> float | None:
        return self.c0 if all(v == 0 for v in self.c) else None

    def is_zero(self) -> bool:
        return self.c0 == 0 and all(v == 0 for v in self.c)

    def load_independent(self) -> bool:
        return all(v == 0 for v in self.c)

    def at_load(self, u) -> tuple[str, float]:
        return ("const", self.c0 + _dot(self.c, u))

    def to_doc(self) -> dict:
        return {"family": "load_affine", "params": {"c0": self.c0, "c": list(self.c)}}


@dataclass(frozen=True)
class WindowTimesLoadAffine:
    """Rate w * (delta + sum_j d_j u_j): proportional to the window."""

    delta: float
    d: tuple[float, ...]

    def __post_init__(self):
        if not (math.isfinite(self.delta) and self.delta >= 0):
            raise ConfigError(f"WindowTimesLoadAffine offset must be finite and >= 0, got {self.delta}")
        object.__setattr__(self, "d", tuple(float(v) for v in self.d))
        if any(not math.isfinite(v) or v < 0 for v in self.d):
            raise ConfigError("WindowTimesLoadAffine coefficients must be finite and >= 0")

    depends_on_w = True

    def slope(self, u) -> float:
        return self.delta + _dot(self.d, u)

    def value(self, w, u):
        return w * self.slope(u)

    def sup_box(self, w_hi, u_lo, u_hi):
        return w_hi * self.slope(u_hi)

    def inf_box(self, w_lo, u_lo, u_hi) -> float:
        return w_lo * self.slope(u_lo)

    def bound(self) -> float | None:
        return 0.0 if self.is_zero() else None

    def is_zero(self) -> bool:
        return self.delta == 0 and all(v == 0 for v in self.d)

    def load_independent(self) -> bool:
        return all(v == 0 for v in self.d)

    def at_load(self, u) -> tuple[str, float]:
        return ("linear", self.slope(u))

    def to_doc(self) -> dict:
        return {"family": "window_times_load_affine", "params": {"delta": self.delta, "d": list(self.d)}}


@dataclass(frozen=True)
class ReciprocalLoadAffine:
    """Rate 1 / (tau + sum_j t_j u_j) with tau > 0: round-trip-time form,
    decreasing in the load and bounded by 1/tau."""

    tau: float
    t: tuple[float, ...]

    def __post_init__(self):
        if not (math.isfinite(self.tau) and self.tau > 0):
            raise ConfigError(f"ReciprocalLoadAffine requires tau > 0, got {self.tau}")
        object.__setattr__(self, "t", tuple(float(v) for v in self.t))
        if any(not math.isfinite(v) or v < 0 for v in self.t):
            raise ConfigError("ReciprocalLoadAffine coefficients must be finite and >= 0")

    depends_on_w = False

    def value(self, w, u):
        v = 1.0 / (self.tau + _dot(self.t, u))
        return v if np.isscalar(w) else np.full(np.shape(w), v)

    def sup_box(self, w_hi, u_lo, u_hi):
        # decreasing in u: the supremum sits at the low corner
        return self.value(w_hi, u_lo)

    def inf_box(self, w_lo, u_lo, u_hi) -> float:
        return 1.0 / (self.tau + _dot(self.t, u_hi))

    def bound(self) -> float:
        return 1.0 / self.tau

    def is_zero(self) -> bool:
        return False

    def load_independent(self) -> bool:
        return all(v == 0 for v in self.t)

    def at_load(self, u) -> tuple[str, float]:
        return ("const", 1.0 / (self.tau + _dot(self.t, u)))

    def to_doc(self) -> dict:
        return {"family": "reciprocal_load_affine", "params": {"tau": self.tau, "t": list(self.t)}}


RateFamily = Constant | LoadAffine | WindowTimesLoadAffine | ReciprocalLoadAffine

_FAMILY_NAMES = {
    "constant": Constant,
    "load_affine": LoadAffine,
    "window_times_load_affine": WindowTimesLoadAffine,
    "reciprocal_load_affine": ReciprocalLoadAffine,
}


def _parse_rate(doc, J: int, where: str) -> RateFamily:
    if not isinstance(doc, dict) or "family" not in doc:
        raise ConfigError(f"{where}: expected an object with 'family' and 'params'")
    name = doc["family"]
    params = doc.get("params", {})
    try:
        if name == "constant":
            return Constant(float(params["c"]))
        if name == "load_affine":
            return LoadAffine(float(params["c0"]), _coeffs(params.get("c", 0.0), J, where))
        if name == "window_times_load_affine":
            return WindowTimesLoadAffine(float(params["delta"]), _coeffs(params.get("d", 0.0), J, where))
        if name == "reciprocal_load_affine":
            return ReciprocalLoadAffine(float(params["tau"]), _coeffs(params.get("t", 0.0), J, where))
    except KeyError as exc:
        raise ConfigError(f"{where}: missing parameter {exc} for family '{name}'") from None
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    raise ConfigError(f"{where}: unknown rate family '{name}'")


# ---------------------------------------------------------------------------
# initial window laws
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dirac:
    w0: float

    def __post_init__(self):
        if not (math.isfinite(self.w0) and self.w0 >= 0):
            raise ConfigError(f"Dirac mass must sit in R+, got {self.w0}")

    @property
    def mean(self) -> float:
        return self.w0

    def sample(self, gen: np.random.Generator, size=None):
        return self.w0 if size is None else np.full(size, self.w0)

    def to_doc(self) -> dict:
        return {"family": "dirac", "params": {"w0": self.w0}}


@dataclass(frozen=True)
class Exponential:
    mean_value: float

    def __post_init__(self):
        if not (math.isfinite(self.mean_value) and self.mean_value > 0):
            raise ConfigError(f"Exponential mean must be > 0, got {self.mean_value}")

    @property
    def mean(self) -> float:
        return self.mean_value

    def sample(self, gen: np.random.Generator, size=None):
        return gen.exponential(self.mean_value, size)

    def to_doc(self) -> dict:
        return {"family": "exponential", "params": {"mean": self.mean_value}}


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def __post_init__(self):
        if not (0 <= self.lo <= self.hi and math.isfinite(self.hi)):
            raise ConfigError(f"Uniform law requires 0 <= lo <= hi, got [{self.lo}, {self.hi}]")

    @property
    def mean(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def sample(self, gen: np.random.Generator, size=None):
        return gen.uniform(self.lo, self.hi, size)

    def to_doc(self) -> dict:
        return {"family": "uniform", "params": {"lo": self.lo, "hi": self.hi}}


InitialLaw = Dirac | Exponential | Uniform


def _parse_law(doc, where: str) -> InitialLaw:
    if not isinstance(doc, dict) or "family" not in doc:
        raise ConfigError(f"{where}: expected an object with 'family' and 'params'")
    name = doc["family"]
    params = doc.get("params", {})
    try:
        if name == "dirac":
            return Dirac(float(params["w0"]))
        if name == "exponential":
            return Exponential(float(params["mean"]))
        if name == "uniform":
            return Uniform(float(params["lo"]), float(params["hi"]))
    except KeyError as exc:
        raise ConfigError(f"{where}: missing parameter {exc} for law '{name}'") from None
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    raise ConfigError(f"{where}: unknown initial law '{name}'")


# ---------------------------------------------------------------------------
# per-class parameters and the full model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassParams:
    """Rate functions and constants of one user class.

    ``lam`` must not depend on the window; ``a`` must have a finite global
    bound (``a.bound()``), which the simulators use as the drift majorant.
    """

    lam: RateFamily
    mu: RateFamily
    a: RateFamily
    b: RateFamily
    r: float
    alpha: InitialLaw

    @property
    def m(self) -> float:
        """First moment of the initial window law."""
        return self.alpha.mean

    @property
    def abar(self) -> float | None:
        return self.a.bound()


@dataclass(frozen=True)
class ModelConfig:
    """J nodes, K classes, a J x K allocation matrix, class proportions and
    per-class parameters.  Immutable; share freely across workers."""

    nodes: int
    allocation: np.ndarray
    proportions: np.ndarray
    classes: tuple[ClassParams, ...]

    def __post_init__(self):
        object.__setattr__(self, "allocation", np.asarray(self.allocation, dtype=float))
        object.__setattr__(self, "proportions", np.asarray(self.proportions, dtype=float))
        object.__setattr__(self, "classes", tuple(self.classes))

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def to_doc(self) -> dict:
        return {
            "nodes": self.nodes,
            "allocation": self.allocation.tolist(),
            "proportions": self.proportions.tolist(),
            "classes": [
                {
                    "lambda": c.lam.to_doc(),
                    "mu": c.mu.to_doc(),
                    "a": c.a.to_doc(),
                    "b": c.b.to_doc(),
                    "r": c.r,
                    "alpha": c.alpha.to_doc(),
                }
                for c in self.classes
            ],
        }


def config_from_doc(doc: dict) -> ModelConfig:
    """Build a ModelConfig from a parsed JSON document, naming the offending
    field in every error."""
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    for key in ("nodes", "classes", "allocation", "proportions"):
        if key not in doc:
            raise ConfigError(f"missing top-level key '{key}'")
    try:
        J = int(doc["nodes"])
    except (TypeError, ValueError):
        raise ConfigError("nodes: must be a positive integer") from None
    if J < 1:
        raise ConfigError("nodes: must be a positive integer")
    class_docs = doc["classes"]
    if not isinstance(class_docs, list) or not class_docs:
        raise ConfigError("classes: must be a non-empty list")
    K = len(class_docs)

    alloc = np.asarray(doc["allocation"], dtype=float)
    if alloc.shape != (J, K):
        raise ConfigError(f"allocation: expected {J} rows of {K} entries, got shape {alloc.shape}")
    props = np.asarray(doc["proportions"], dtype=float)
    if props.shape != (K,):
        raise ConfigError(f"proportions: expected {K} entries, got shape {props.shape}")

    classes = []
    for k, cdoc in enumerate(class_docs):
        where = f"classes[{k}]"
        if not isinstance(cdoc, dict):
            raise ConfigError(f"{where}: must be an object")
        for key in ("lambda", "mu", "a", "b", "r", "alpha"):
            if key not in cdoc:
                raise ConfigError(f"{where}.{key}: missing")
        r = float(cdoc["r"])
        if not (0.0 <= r <= 1.0):
            raise ConfigError(f"{where}.r: must lie in [0, 1], got {r}")
        classes.append(
            ClassParams(
                lam=_parse_rate(cdoc["lambda"], J, f"{where}.lambda"),
                mu=_parse_rate(cdoc["mu"], J, f"{where}.mu"),
                a=_parse_rate(cdoc["a"], J, f"{where}.a"),
                b=_parse_rate(cdoc["b"], J, f"{where}.b"),
                r=r,
                alpha=_parse_law(cdoc["alpha"], f"{where}.alpha"),
            )
        )
    cfg = ModelConfig(nodes=J, allocation=alloc, proportions=props, classes=classes)
    validate_config(cfg).raise_for_errors()
    return cfg


def load_config(path) -> ModelConfig:
    import json

    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return config_from_doc(doc)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def node_loads(states, allocation, scale: float | None = None) -> np.ndarray:
    """Load vector u_j = sum_k sum_n A_jk * wplus(state_{n,k}), optionally
    divided by a total-count scale.

    ``states`` is one list of UserState per class; the allocation matrix has
    one column per class.
    """
    A = np.asarray(allocation, dtype=float)
    if A.ndim != 2:
        raise ConfigError("allocation must be a J x K matrix")
    J, K = A.shape
    if len(states) != K:
        raise ConfigError(f"expected {K} classes of states, got {len(states)}")
    totals = np.array([sum(s.wplus for s in class_states) for class_states in states])
    u = A @ totals
    if scale is not None:
        if scale <= 0:
            raise ConfigError("scale must be a positive total user count")
        u = u / scale
    return u


def eval_rates(cfg: ModelConfig, k: int, state: UserState, u) -> tuple[float, float, float, float]:
    """Evaluate (lam, mu, a, b) for class k at the positive part of ``state``
    and load vector ``u``."""
    c = cfg.classes[k]
    w = state.wplus
    return (
        float(c.lam.value(0.0, u)),
        float(c.mu.value(w, u)),
        float(c.a.value(w, u)),
        float(c.b.value(w, u)),
    )


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

@dataclass
class ClassReport:
    """Hypothesis classification for one class over a load box."""

    branch: int | None          # 1: globally Lipschitz mu/b families, 2: window-proportional form
    a_bound: float | None
    a_positive: bool            # inf a > 0 on the box
    loss_positive: bool         # inf_{w >= w0} b > 0 achievable on the box
    gamma_finite: bool          # inf mu > 0 on the box guarantees finite invariant mass


_LIPSCHITZ_FAMILIES = (Constant, LoadAffine, ReciprocalLoadAffine)


@dataclass
class ValidationReport:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    class_reports: list[ClassReport] = field(default_factory=list)
    u_box: tuple | None = None

    @property
    def ok(self) -> bool:
        return not self.errors

    def raise_for_errors(self) -> None:
        if self.errors:
            raise ConfigError("; ".join(self.errors))

    def to_doc(self) -> dict:
        return {
            "ok": self.ok,
            "errors": self.errors,
            "warnings": self.warnings,
            "classes": [
                {
                    "condition_branch": c.branch,
                    "a_bound": c.a_bound,
                    "a_positive": c.a_positive,
                    "loss_positive": c.loss_positive,
                    "gamma_finite_guaranteed": c.gamma_finite,
                }
                for c in self.class_reports
            ],
        }


def validate_config(cfg: ModelConfig, u_max: float | np.ndarray = 10.0) -> ValidationReport:
    """Check structural invariants (errors) and classify each class against
    the model hypotheses (warnings) over the load box [0, u_max]^J.

    Errors make the configuration unusable; warnings flag classes for which
    well-posedness or ergodicity is not guaranteed by the structural checks.
    """
    rep = ValidationReport()
    J = cfg.nodes
    A, p = cfg.allocation, cfg.proportions

    if J < 1:
        rep.errors.append("nodes: must be >= 1")
    if A.shape != (J, cfg.n_classes):
        rep.errors.append(f"allocation: expected shape ({J}, {cfg.n_classes}), got {A.shape}")
        return rep
    if not np.all(np.isfinite(A)) or np.any(A < 0):
        rep.errors.append("allocation: entries must be finite and >= 0")
    else:
        dead = np.flatnonzero(~np.any(A > 0, axis=0))
        if dead.size:
            rep.errors.append(f"allocation: classes {dead.tolist()} have no nonzero entry")
    if p.shape != (cfg.n_classes,):
        rep.errors.append(f"proportions: expected {cfg.n_classes} entries, got {p.shape}")
    elif np.any(p < 0) or abs(float(p.sum()) - 1.0) > 1e-12:
        rep.errors.append("proportions: must be nonnegative and sum to 1 within 1e-12")

    u_hi = np.full(J, float(u_max)) if np.isscalar(u_max) else np.asarray(u_max, dtype=float)
    u_lo = np.zeros(J)
    rep.u_box = (u_lo.tolist(), u_hi.tolist())

    for k, c in enumerate(cfg.classes):
        where = f"classes[{k}]"
        if not (0.0 <= c.r <= 1.0):
            rep.errors.append(f"{where}.r: must lie in [0, 1], got {c.r}")
        if c.lam.depends_on_w:
            rep.errors.append(f"{where}.lambda: must not depend on the window")
        a_bound = c.a.bound()
        if a_bound is None:
            rep.errors.append(f"{where}.a: family is unbounded; the growth speed needs a finite bound")

        for name, fam in (("lambda", c.lam), ("mu", c.mu), ("a", c.a), ("b", c.b)):
            if fam.inf_box(0.0, u_lo, u_hi) < 0:
                rep.errors.append(f"{where}.{name}: negative values on the load box")

        if isinstance(c.mu, _LIPSCHITZ_FAMILIES) and isinstance(c.b, _LIPSCHITZ_FAMILIES):
            branch = 1
        elif isinstance(c.mu, WindowTimesLoadAffine) and isinstance(c.b, WindowTimesLoadAffine):
            branch = 2
        else:
            branch = None
            rep.warnings.append(
                f"{where}: mu/b mix window-proportional and load-only families; "
                "no moment-condition branch applies"
            )

        a_positive = c.a.inf_box(0.0, u_lo, u_hi) > 0
        if not a_positive:
            rep.warnings.append(f"{where}.a: not bounded away from 0 on the load box")

        if isinstance(c.b, WindowTimesLoadAffine):
            loss_positive = c.b.slope(u_lo) > 0
        else:
            loss_positive = c.b.inf_box(0.0, u_lo, u_hi) > 0
        if not loss_positive:
            rep.warnings.append(
                f"{where}.b: loss rate not bounded below on the box; "
                "positive recurrence of the permanent process is not guaranteed"
            )

        gamma_finite = c.mu.inf_box(0.0, u_lo, u_hi) > 0
        if not gamma_finite:
            rep.warnings.append(
                f"{where}.mu: inf mu = 0 on the box; finiteness of the invariant mass "
                "is not guaranteed structurally"
            )

        rep.class_reports.append(
            ClassReport(
                branch=branch,
                a_bound=a_bound,
                a_positive=a_positive,
                loss_positive=loss_positive,
                gamma_finite=gamma_finite,
            )
        )
    return rep
