"""Centralised reference solvers for cross-checking the distributed solver.

Two independent routes to the optimum of the joint problem:

* :func:`solve_centralized` treats the whole interleaved vector at once.  The
  energy budget is priced by a multiplier found with an outer root search;
  for each price the smooth objective is minimised over the product of the
  servers' local sets by projected Newton steps.  The Hessian is diagonal, so
  each step is an exact projection in the Hessian metric, computed from the
  piecewise-linear structure of the box, pair-cap and per-server windows.
* :func:`grid_search` enumerates an integer lattice exhaustively.

Only the energy and load models are shared with the distributed solver.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import wrightomega

from . import energy, problem
from .problem import InfeasibleInstanceError
from .scenario import Allocation, ScenarioConfig

LN2 = math.log(2.0)
GRID_GUARD = 10**8


class OracleError(RuntimeError):
    pass


@dataclass
class OracleResult:
    allocation: Allocation
    objective: float
    solver: str
    iterations: int | None = None
    grid_step: float | None = None
    kkt_residual: float | None = None
    feasible_points: int | None = None
    multiplier: float | None = None


def _pl_root(knots: np.ndarray, vals: np.ndarray, target: float) -> float:
    """Root of a nonincreasing piecewise-linear function given at its kinks."""
    if target >= vals[0]:
        return float(knots[0])
    if target <= vals[-1]:
        return float(knots[-1])
    i = int(np.searchsorted(-vals, -target, side="left"))
    k0, k1, v0, v1 = knots[i - 1], knots[i], vals[i - 1], vals[i]
    return float(k1 if v0 == v1 else k0 + (v0 - target) * (k1 - k0) / (v0 - v1))


def _project_server(z2, h2, u2, cap, lo, hi):
    """``argmin sum h (x - z)^2`` over one server's box, pair caps and total window.

    With a common shift ``t`` on the total and a pair shift ``t_p`` each
    coordinate is ``clip(z - max(t, t_p) / h, 0, u)``; both totals are
    nonincreasing piecewise-linear functions of the shift, so each root is
    exact from its kinks.
    """
    t_cap = np.full(len(z2), -np.inf)
    for p in np.nonzero(u2.sum(axis=1) > cap)[0]:
        kn = np.sort(np.concatenate([h2[p] * (z2[p] - u2[p]), h2[p] * z2[p]]))
        vals = np.clip(z2[p][None, :] - kn[:, None] / h2[p][None, :], 0.0, u2[p][None, :]).sum(axis=1)
        t_cap[p] = _pl_root(kn, vals, cap[p])

    def at(t):
        return np.clip(z2 - np.maximum(t, t_cap)[:, None] / h2, 0.0, u2)

    x = at(0.0)
    total = x.sum()
    if lo <= total <= hi:
        return x
    target = hi if total > hi else lo
    knots = np.unique(np.concatenate([(h2 * (z2 - u2)).ravel(), (h2 * z2).ravel(), t_cap[np.isfinite(t_cap)]]))
    shifts = np.maximum(knots[:, None], t_cap[None, :])
    vals = np.clip(z2[None] - shifts[:, :, None] / h2[None], 0.0, u2[None]).sum(axis=(1, 2))
    return at(_pl_root(knots, vals, target))


def project_energy_ball_reference(z, a, k, budget) -> np.ndarray:
    """Euclidean projection onto ``{w >= 0 : sum a (exp(k w) - 1) <= budget}``.

    Closed form per coordinate for a given multiplier (Lambert W via the
    Wright omega function) and a bracketing root search on its logarithm.
    """
    z, a, k = (np.asarray(t, dtype=float) for t in (z, a, k))
    w0 = np.maximum(z, 0.0)

    def used(w):
        with np.errstate(over="ignore"):
            return float(np.sum(a * np.expm1(k * w)))

    if not math.isfinite(budget) or used(w0) <= budget:
        return w0

    def point(log_lam):
        arg = log_lam + np.log(a * k**2) + k * z
        return np.maximum(z - np.real(wrightomega(arg)) / k, 0.0)

    def excess(log_lam):
        return used(point(log_lam)) - budget

    lo, hi = -60.0, 60.0
    while excess(lo) <= 0:
        lo -= 60.0
    while excess(hi) > 0:
        hi += 60.0
    root = brentq(excess, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps)
    while excess(root) > 0:
        root = np.nextafter(root, np.inf)
    return point(root)


class _Problem:
    """The joint problem in solver units of ``scale`` bits."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        caps = np.array([d.cap_bits for d in cfg.devices])
        self.scale = float(caps.max()) if caps.size and caps.max() > 0 else 1.0
        S = self.scale
        links = energy.link_arrays(cfg)
        K = cfg.num_servers
        kappa = np.array([problem.load_slope(s, cfg) for s in cfg.servers])
        self.owner = np.repeat(np.arange(K), [2 * s.size for s in cfg.servers])
        self.a = links.scale
        self.k = LN2 * S / links.capacity
        self.c = cfg.gamma * links.rho * links.scale
        self.l = (cfg.gamma * links.price - kappa[self.owner] / K) * S
        ub, lb = cfg.band_caps()
        self.u = np.empty(2 * cfg.num_devices)
        self.u[0::2], self.u[1::2] = ub / S, lb / S
        self.pair_cap = caps / S
        self.lo = np.array([s.min_data_bits for s in cfg.servers]) / S
        self.hi = np.array([problem.effective_cap(s, cfg) for s in cfg.servers]) / S
        self.budget = cfg.energy_budget
        self.const = float(np.mean([s.compute_cap for s in cfg.servers]))
        self.bounds = np.cumsum([0] + [s.size for s in cfg.servers])

    def f(self, x, lam=0.0):
        return self.const + float(np.sum((self.c + lam * self.a) * np.expm1(self.k * x) + self.l * x))

    def grad(self, x, lam=0.0):
        return (self.c + lam * self.a) * self.k * np.exp(self.k * x) + self.l

    def hess(self, x, lam=0.0):
        return (self.c + lam * self.a) * self.k**2 * np.exp(self.k * x)

    def energy(self, x):
        with np.errstate(over="ignore"):
            return float(np.sum(self.a * np.expm1(self.k * x)))

    def project_local(self, z, h=None):
        """Projection onto the product of local sets in the metric ``diag(h)``."""
        z2 = np.asarray(z, dtype=float).reshape(-1, 2)
        h2 = np.ones_like(z2) if h is None else np.asarray(h, dtype=float).reshape(-1, 2)
        u2 = self.u.reshape(-1, 2)
        out = np.empty_like(z2)
        for j in range(len(self.bounds) - 1):
            sl = slice(self.bounds[j], self.bounds[j + 1])
            out[sl] = _project_server(z2[sl], h2[sl], u2[sl], self.pair_cap[sl], self.lo[j], self.hi[j])
        return out.reshape(-1)

    def stationarity(self, x, lam=0.0):
        return float(np.linalg.norm(x - self.project_local(x - self.grad(x, lam))))

    def minimize(self, lam, x0, tol=1e-12, max_iter=500):
        """Projected Newton for ``f + lam * energy`` over the local sets."""
        x = self.project_local(x0)
        fx = self.f(x, lam)
        it = 0
        for it in range(1, max_iter + 1):
            g = self.grad(x, lam)
            h = np.maximum(self.hess(x, lam), 1e-6)  # keeps z - g/h well conditioned
            d = self.project_local(x - g / h, h) - x
            slope = float(g @ d)
            if slope > -1e-300:
                break
            step = 1.0
            while True:
                trial = x + step * d
                ft = self.f(trial, lam)
                if ft <= fx + 1e-4 * step * slope or step < 1e-12:
                    break
                step *= 0.5
            x, fx = trial, ft
            if float(np.linalg.norm(step * d)) <= tol * max(1.0, float(np.linalg.norm(x))):
                break
        return x, it


def solve_centralized(cfg: ScenarioConfig, tol: float = 1e-6, max_iter: int = 100_000) -> OracleResult:
    """Minimise the joint objective with all constraints, centrally.

    Returns a feasible allocation whose KKT residual (stationarity of the
    Lagrangian over the local sets, energy violation and complementary
    slackness, in solver units) is at most ``tol``.
    """
    problem.check_instance(cfg)
    prob = _Problem(cfg)
    n = 2 * cfg.num_devices
    start = prob.project_local(np.zeros(n))
    iters = 0

    def solve(lam, x0):
        nonlocal iters
        x, it = prob.minimize(lam, x0)
        iters += it
        if iters > max_iter:
            raise OracleError(f"no convergence within {max_iter} Newton iterations")
        return x

    x = solve(0.0, start)
    lam = 0.0
    if math.isfinite(prob.budget) and prob.energy(x) > prob.budget:
        # least-energy point of the local sets decides feasibility
        x_min = solve(1e12, start)
        if prob.energy(x_min) > prob.budget * (1 + 1e-12):
            raise InfeasibleInstanceError(
                f"the data floors need {prob.energy(x_min):g} energy units, above the budget {prob.budget:g}"
            )
        warm = {"x": x}

        def excess(s):
            warm["x"] = solve(math.exp(s), warm["x"])
            return prob.energy(warm["x"]) - prob.budget

        lo, hi = -40.0, 0.0
        while excess(hi) > 0 and hi < 30:
            lo, hi = hi, hi + 10.0
        root = brentq(excess, lo, hi, xtol=1e-13, rtol=4 * np.finfo(float).eps, maxiter=200)
        lam = math.exp(root)
        x = _restore(prob, solve(lam, warm["x"]), x_min)
    res = kkt_residual(prob, x, lam)
    if res > tol:
        raise OracleError(f"KKT residual {res:.3e} above tolerance {tol:g}")
    alloc = Allocation.from_interleaved(x * prob.scale, cfg)
    return OracleResult(
        allocation=alloc,
        objective=problem.objective(alloc, cfg),
        solver="gradient",
        iterations=iters,
        kkt_residual=res,
        multiplier=lam,
    )


def _restore(prob: _Problem, x, anchor):
    if prob.energy(x) <= prob.budget:
        return x
    lo, hi = 0.0, 1.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if prob.energy(anchor + mid * (x - anchor)) <= prob.budget:
            lo = mid
        else:
            hi = mid
    return anchor + lo * (x - anchor)


def kkt_residual(prob: _Problem, x, lam) -> float:
    stat = prob.stationarity(x, lam)
    viol = max(0.0, prob.energy(x) - prob.budget)
    slack = lam * max(0.0, prob.budget - prob.energy(x)) if math.isfinite(prob.budget) else 0.0
    return stat + viol + slack


def lipschitz_bound(cfg: ScenarioConfig, step: float) -> float:
    """Upper bound on how far the lattice optimum can sit above the continuous one.

    Rounding each coordinate of the continuous optimum down to the lattice
    keeps it feasible when the data floors are zero; the objective then moves
    by at most ``sum_j max|df/dx_j| * step`` over the box.
    """
    prob = _Problem(cfg)
    top = np.minimum(prob.u, np.repeat(prob.pair_cap, 2))
    g_hi = np.abs(prob.c * prob.k * np.exp(prob.k * top) + prob.l)
    g_lo = np.abs(prob.c * prob.k + prob.l)
    return float(np.sum(np.maximum(g_hi, g_lo)) * step / prob.scale)


def _grid_chunk(args):
    prob, axes, shape, start, stop = args
    flat = np.arange(start, stop)
    idx = np.unravel_index(flat, shape)
    x = np.column_stack([axes[j][idx[j]] for j in range(len(axes))])
    S = prob.scale
    ok = (x[:, 0::2] + x[:, 1::2] <= prob.pair_cap * S * (1 + 1e-12)).all(axis=1)
    per_server = np.add.reduceat(x, 2 * prob.bounds[:-1], axis=1)
    ok &= (per_server <= prob.hi * S * (1 + 1e-12)).all(axis=1)
    ok &= (per_server >= prob.lo * S * (1 - 1e-12)).all(axis=1)
    xs = x / S
    with np.errstate(over="ignore"):
        ok &= (prob.a * np.expm1(prob.k * xs)).sum(axis=1) <= prob.budget
    if not ok.any():
        return math.inf, -1, 0
    vals = prob.const + (prob.c * np.expm1(prob.k * xs) + prob.l * xs).sum(axis=1)
    vals = np.where(ok, vals, np.inf)
    j = int(np.argmin(vals))
    return float(vals[j]), int(flat[j]), int(ok.sum())


def grid_search(cfg: ScenarioConfig, step: float, workers: int = 1, chunk: int = 1 << 20) -> OracleResult:
    """Exhaustive minimum over allocations whose volumes are multiples of ``step`` bits.

    Ties go to the lexicographically smallest interleaved allocation vector.
    """
    if step <= 0:
        raise ValueError("step must be > 0")
    prob = _Problem(cfg)
    caps = np.minimum(prob.u, np.repeat(prob.pair_cap, 2)) * prob.scale
    axes = [np.arange(0.0, math.floor(c / step + 1e-9) + 1) * step for c in caps]
    shape = tuple(len(a) for a in axes)
    total = math.prod(shape)
    if total > GRID_GUARD:
        raise ValueError(f"grid has {total} points, above the guard of {GRID_GUARD}")
    jobs = [(prob, axes, shape, s, min(s + chunk, total)) for s in range(0, total, chunk)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_grid_chunk, jobs))
    else:
        parts = [_grid_chunk(j) for j in jobs]
    best_val, best_idx, feasible = math.inf, -1, 0
    for val, idx, cnt in parts:
        feasible += cnt
        if val < best_val or (val == best_val and 0 <= idx < best_idx):
            best_val, best_idx = val, idx
    if best_idx < 0:
        raise InfeasibleInstanceError("no feasible lattice point")
    idx = np.unravel_index(best_idx, shape)
    x = np.array([axes[j][idx[j]] for j in range(len(axes))])
    alloc = Allocation.from_interleaved(x, cfg)
    return OracleResult(
        allocation=alloc,
        objective=problem.objective(alloc, cfg),
        solver="grid",
        grid_step=step,
        feasible_points=feasible,
    )
