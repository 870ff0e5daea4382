"""Stochastic demand and capacity models for the Monte Carlo stage.

Demand and per-supplier capacity are bounded processes on a discrete time
grid.  Marginals come from one of three families (uniform, truncated
normal, scaled beta); temporal continuity is modeled with an AR(1)
Gaussian copula: correlated standard normals are pushed through the
marginal inverse CDF, so marginals stay exact and paths stay in bounds.

Draws use a counter-based Philox generator keyed by
(seed, scenario index, path index), so sampling is order-independent and
reproducible under any parallel split.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

__all__ = [
    "DistributionSpec",
    "export_csv",
    "import_csv",
    "ScenarioModel",
    "MarketScenario",
    "ScenarioSet",
    "sample",
    "capacity_density",
    "shortfall_moment",
]


@dataclass(frozen=True)
class DistributionSpec:
    """Bounded marginal with optional AR(1)-copula temporal correlation."""

    family: str  # "uniform" | "truncnorm" | "beta"
    lo: float
    hi: float
    rho: float = 0.0
    mean: float = None  # truncnorm location
    sd: float = None  # truncnorm scale
    a: float = None  # beta shape alpha
    b: float = None  # beta shape beta

    def __post_init__(self):
        if self.family not in ("uniform", "truncnorm", "beta"):
            raise ValueError(f"unknown distribution family {self.family!r}")
        if not self.hi >= self.lo:
            raise ValueError("upper bound must be >= lower bound")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("temporal correlation must lie in [0, 1)")
        if self.family == "truncnorm" and (self.sd is None or self.sd <= 0):
            raise ValueError("truncnorm needs sd > 0")
        if self.family == "beta" and ((self.a or 0) <= 0 or (self.b or 0) <= 0):
            raise ValueError("beta needs positive shape parameters")

    @property
    def degenerate(self) -> bool:
        return self.hi == self.lo

    def ppf(self, u):
        """Marginal inverse CDF, clamped to the bounds."""
        u = np.asarray(u, dtype=float)
        if self.degenerate:
            return np.full_like(u, self.lo)
        if self.family == "uniform":
            x = self.lo + (self.hi - self.lo) * u
        elif self.family == "truncnorm":
            mu = self.mean if self.mean is not None else 0.5 * (self.lo + self.hi)
            az = (self.lo - mu) / self.sd
            bz = (self.hi - mu) / self.sd
            x = stats.truncnorm.ppf(u, az, bz, loc=mu, scale=self.sd)
        else:
            x = self.lo + (self.hi - self.lo) * stats.beta.ppf(u, self.a, self.b)
        return np.clip(x, self.lo, self.hi)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.degenerate:
            raise ValueError("degenerate distribution has no density")
        if self.family == "uniform":
            out = np.where((x >= self.lo) & (x <= self.hi), 1.0 / (self.hi - self.lo), 0.0)
        elif self.family == "truncnorm":
            mu = self.mean if self.mean is not None else 0.5 * (self.lo + self.hi)
            az = (self.lo - mu) / self.sd
            bz = (self.hi - mu) / self.sd
            out = stats.truncnorm.pdf(x, az, bz, loc=mu, scale=self.sd)
        else:
            w = self.hi - self.lo
            out = stats.beta.pdf((x - self.lo) / w, self.a, self.b) / w
        return out

    def mean_value(self) -> float:
        if self.degenerate:
            return self.lo
        if self.family == "uniform":
            return 0.5 * (self.lo + self.hi)
        if self.family == "truncnorm":
            mu = self.mean if self.mean is not None else 0.5 * (self.lo + self.hi)
            az = (self.lo - mu) / self.sd
            bz = (self.hi - mu) / self.sd
            return float(stats.truncnorm.mean(az, bz, loc=mu, scale=self.sd))
        return self.lo + (self.hi - self.lo) * self.a / (self.a + self.b)


@dataclass(frozen=True)
class ScenarioModel:
    """Joint model: one demand path and n_suppliers iid capacity paths."""

    time_steps: int
    n_suppliers: int
    demand: DistributionSpec
    capacity: DistributionSpec
    seed: int = 0

    def __post_init__(self):
        if self.time_steps < 1:
            raise ValueError("need at least one time step")
        if self.n_suppliers < 0:
            raise ValueError("supplier count must be nonnegative")
        if self.demand.lo < 0 or self.capacity.lo < 0:
            raise ValueError("demand and capacity bounds must be nonnegative")


@dataclass(frozen=True)
class MarketScenario:
    """One realization: demand (T,) and capacities (N, T)."""

    demand_path: np.ndarray
    capacity_paths: np.ndarray


@dataclass
class ScenarioSet:
    """Column store of n scenarios; indexable as MarketScenario views."""

    model: ScenarioModel
    demand: np.ndarray  # (n, T)
    capacity: np.ndarray  # (n, N, T)

    def __len__(self):
        return self.demand.shape[0]

    def __getitem__(self, i) -> MarketScenario:
        return MarketScenario(self.demand[i], self.capacity[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def head(self, n: int) -> "ScenarioSet":
        n = min(n, len(self))
        return ScenarioSet(self.model, self.demand[:n], self.capacity[:n])


def _path_normals(seed: int, scenario: int, path: int, t: int) -> np.ndarray:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, (scenario << 16) | path], dtype=np.uint64)
    gen = np.random.Generator(np.random.Philox(key=key))
    return gen.standard_normal(t)


def _correlate(eps: np.ndarray, rho: float) -> np.ndarray:
    if rho == 0.0:
        return eps
    z = np.empty_like(eps)
    z[..., 0] = eps[..., 0]
    w = np.sqrt(1.0 - rho * rho)
    for t in range(1, eps.shape[-1]):
        z[..., t] = rho * z[..., t - 1] + w * eps[..., t]
    return z


def sample(model: ScenarioModel, n: int, start_index: int = 0) -> ScenarioSet:
    """Draw n scenarios; identical (seed, index) always gives identical paths."""
    if n < 1:
        raise ValueError("need n >= 1 scenarios")
    t = model.time_steps
    n_sup = model.n_suppliers
    eps_d = np.empty((n, t))
    eps_q = np.empty((n, n_sup, t))
    for i in range(n):
        scen = start_index + i
        eps_d[i] = _path_normals(model.seed, scen, 0, t)
        for j in range(n_sup):
            eps_q[i, j] = _path_normals(model.seed, scen, j + 1, t)
    u_d = stats.norm.cdf(_correlate(eps_d, model.demand.rho))
    demand = model.demand.ppf(u_d)
    if n_sup:
        u_q = stats.norm.cdf(_correlate(eps_q, model.capacity.rho))
        capacity = model.capacity.ppf(u_q)
    else:
        capacity = np.zeros((n, 0, t))
    return ScenarioSet(model, demand, capacity)


def capacity_density(model: ScenarioModel, x):
    """Marginal density h(x) of the per-step renewable capacity."""
    return model.capacity.pdf(x)


def export_csv(scenarios: ScenarioSet, path):
    """Long-format dump (scenario_id, t, demand, q_1..q_N) for comparison."""
    n, t = scenarios.demand.shape
    n_sup = scenarios.capacity.shape[1]
    cols = ["scenario_id", "t", "demand"] + [f"q_{j+1}" for j in range(n_sup)]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(n):
            for k in range(t):
                row = [str(i), str(k), "%.12g" % scenarios.demand[i, k]]
                row += ["%.12g" % scenarios.capacity[i, j, k] for j in range(n_sup)]
                fh.write(",".join(row) + "\n")


def import_csv(model: ScenarioModel, path) -> ScenarioSet:
    """Inverse of export_csv; validates the grid against the model."""
    import csv as _csv

    with open(path) as fh:
        reader = _csv.DictReader(fh)
        q_cols = [c for c in reader.fieldnames if c.startswith("q_")]
        rows = list(reader)
    if not rows:
        raise ValueError("empty scenario file")
    n = max(int(r["scenario_id"]) for r in rows) + 1
    t = max(int(r["t"]) for r in rows) + 1
    if t != model.time_steps or len(q_cols) != model.n_suppliers:
        raise ValueError("scenario file does not match the model dimensions")
    demand = np.full((n, t), np.nan)
    capacity = np.full((n, len(q_cols), t), np.nan)
    for r in rows:
        i, k = int(r["scenario_id"]), int(r["t"])
        demand[i, k] = float(r["demand"])
        for j, c in enumerate(q_cols):
            capacity[i, j, k] = float(r[c])
    if np.isnan(demand).any() or np.isnan(capacity).any():
        raise ValueError("scenario file has missing (scenario, t) cells")
    return ScenarioSet(model, demand, capacity)


def shortfall_moment(scenarios: ScenarioSet, s: float, rt_prices, rt_price_derivs=None):
    """Monte Carlo moments of the shortfall event {Q < s}.

    rt_prices (and optionally their day-ahead price derivatives) are per
    (scenario, t), aligned with the set.  Returns a dict with
    ``price_mass``  = E[p_s 1{Q < s}]  (= E[p_s | Q < s] P(Q < s)) and
    ``integral``    = E[(Q - s) p_s' 1{Q < s}], each with standard errors.
    """
    if len(scenarios) == 0:
        raise ValueError("empty scenario set")
    q = scenarios.capacity  # (n, N, T)
    if q.shape[1] == 0:
        raise ValueError("model has no suppliers")
    p = np.asarray(rt_prices, dtype=float)
    if p.ndim == 1:
        p = p[:, None]
    short = q < s
    per_scen = (p[:, None, :] * short).mean(axis=(1, 2))
    out = {
        "price_mass": float(per_scen.mean()),
        "price_mass_se": float(per_scen.std(ddof=1) / np.sqrt(len(per_scen)))
        if len(per_scen) > 1
        else 0.0,
    }
    if rt_price_derivs is not None:
        dp = np.asarray(rt_price_derivs, dtype=float)
        if dp.ndim == 1:
            dp = dp[:, None]
        per_scen_i = ((q - s) * dp[:, None, :] * short).mean(axis=(1, 2))
        out["integral"] = float(per_scen_i.mean())
        out["integral_se"] = (
            float(per_scen_i.std(ddof=1) / np.sqrt(len(per_scen_i))) if len(per_scen_i) > 1 else 0.0
        )
    return out
