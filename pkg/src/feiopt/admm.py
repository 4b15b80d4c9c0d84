"""Distributed ADMM for the joint upload-energy / edge-utilisation problem.

Each edge server owns the interleaved volume vector of its devices and solves
a small strictly convex subproblem per iteration; a coordinator keeps the
network-wide energy budget by projecting the stacked reports onto the energy
ball and runs the scaled dual update:

    n_k  <- argmin_{n_k in D_k} f_k(n_k) + eta/2 ||n_k - w_k + theta_k||^2
    w    <- P_energy(n + theta)
    theta <- theta + n - w

Only volume vectors cross the server/coordinator boundary.  Every message is
recorded in a trace that :func:`audit_trace` checks.

Internally volumes are measured in solver units of ``scale`` bits so that the
quadratic penalty and the objective are on comparable scales.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Sequence

import numpy as np

from . import energy, kernels, problem
from .problem import InfeasibleInstanceError
from .scenario import Allocation, ScenarioConfig

LN2 = math.log(2.0)


class NumericalError(RuntimeError):
    pass


# -- per-server subproblem -----------------------------------------------------


@dataclass(frozen=True)
class SubproblemSpec:
    """Everything server ``k`` knows about its own devices, in solver units.

    Coordinate ``j`` of the local vector costs ``c[j] * (exp(k[j] x) - 1)``
    money-weighted energy plus ``l[j] * x`` (licensed tariff minus the
    utilisation reward); ``u`` and ``device_cap`` are the band and collection
    caps and ``lo``/``hi`` the window on the server's total.
    """

    server_id: int
    num_servers: int
    compute_cap: float
    scale: float
    c: np.ndarray
    k: np.ndarray
    l: np.ndarray
    u: np.ndarray
    device_cap: np.ndarray
    lo: float
    hi: float

    @property
    def size(self) -> int:
        return self.c.shape[0]

    def objective(self, x: np.ndarray) -> float:
        """``f_k`` at ``x`` (solver units); includes the constant capacity term."""
        return self.compute_cap / self.num_servers + float(np.sum(self.c * np.expm1(self.k * x) + self.l * x))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.c * self.k * np.exp(self.k * x) + self.l


def default_scale(cfg: ScenarioConfig) -> float:
    caps = [d.cap_bits for d in cfg.devices]
    top = max(caps) if caps else 0.0
    return top if top > 0 else 1.0


def build_subproblems(cfg: ScenarioConfig, scale: float | None = None) -> list[SubproblemSpec]:
    scale = default_scale(cfg) if scale is None else float(scale)
    links = energy.link_arrays(cfg)
    ub_cap, lb_cap = cfg.band_caps()
    band = np.empty(2 * cfg.num_devices)
    band[0::2], band[1::2] = ub_cap, lb_cap
    specs = []
    K = cfg.num_servers
    for s, sl in zip(cfg.servers, cfg.offsets()):
        kappa = problem.load_slope(s, cfg)
        spec = SubproblemSpec(
            server_id=s.id,
            num_servers=K,
            compute_cap=s.compute_cap,
            scale=scale,
            c=cfg.gamma * links.rho[sl] * links.scale[sl],
            k=LN2 * scale / links.capacity[sl],
            l=(cfg.gamma * links.price[sl] - kappa / K) * scale,
            u=band[sl] / scale,
            device_cap=np.array([d.cap_bits for d in s.devices]) / scale,
            lo=s.min_data_bits / scale,
            hi=problem.effective_cap(s, cfg) / scale,
        )
        specs.append(spec)
    return specs


def project_local(spec: SubproblemSpec, z: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Euclidean projection onto the server's local feasible set."""
    zeros = np.zeros(spec.size)
    x, _ = kernels.solve_block(z, 1.0, zeros, spec.k, zeros, spec.u, spec.device_cap, spec.lo, spec.hi, backend)
    return x


def server_update(
    spec: SubproblemSpec,
    w_k: np.ndarray,
    theta_k: np.ndarray,
    eta: float,
    backend: str | None = None,
    check: bool = False,
) -> np.ndarray:
    """Minimise ``f_k + I_{D_k} + eta/2 ||n - w_k + theta_k||^2`` over the local vector."""
    if spec.hi < spec.lo:
        raise InfeasibleInstanceError(f"server {spec.server_id}: local feasible set is empty")
    v = np.asarray(w_k, dtype=float) - np.asarray(theta_k, dtype=float)
    x, _ = kernels.solve_block(v, eta, spec.c, spec.k, spec.l, spec.u, spec.device_cap, spec.lo, spec.hi, backend)
    if check:
        res = kkt_residual(spec, x, w_k, theta_k, eta, backend)
        if res > 1e-8 * max(1.0, float(np.linalg.norm(v))):
            raise NumericalError(f"server {spec.server_id}: subproblem KKT residual {res:.3e}")
    return x


def kkt_residual(spec, x, w_k, theta_k, eta, backend: str | None = None) -> float:
    """Projected-gradient residual ``||x - P_D(x - grad)||`` of the server subproblem."""
    grad = spec.gradient(x) + eta * (x - np.asarray(w_k) + np.asarray(theta_k))
    return float(np.linalg.norm(x - project_local(spec, x - grad, backend)))


# -- coordinator ---------------------------------------------------------------


@dataclass(frozen=True)
class EnergyBall:
    """The coordinator's view: per-coordinate energy curves and the budget."""

    a: np.ndarray
    k: np.ndarray
    budget: float

    @classmethod
    def from_config(cls, cfg: ScenarioConfig, scale: float) -> "EnergyBall":
        links = energy.link_arrays(cfg)
        return cls(a=links.scale, k=LN2 * scale / links.capacity, budget=cfg.energy_budget)

    def energy(self, x: np.ndarray) -> float:
        with np.errstate(over="ignore"):
            return float(np.sum(self.a * np.expm1(self.k * np.asarray(x))))


def project_energy_ball(z: np.ndarray, ball: EnergyBall | ScenarioConfig, backend: str | None = None) -> np.ndarray:
    """``argmin ||w - z||`` over ``w >= 0`` with total energy within the budget.

    ``ball`` is either an :class:`EnergyBall` (solver units) or a scenario, in
    which case ``z`` and the result are interleaved volumes in bits.
    """
    if isinstance(ball, ScenarioConfig):
        ball = EnergyBall.from_config(ball, 1.0)
    z = np.asarray(z, dtype=float)
    if z.shape != ball.a.shape:
        raise ValueError(f"expected a vector of length {ball.a.size}, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("z must be finite")
    w, _ = kernels.project_ball(z, ball.a, ball.k, ball.budget, backend)
    return w


def dual_update(theta: np.ndarray, n_new: np.ndarray, w_new: np.ndarray) -> np.ndarray:
    theta, n_new, w_new = (np.asarray(t, dtype=float) for t in (theta, n_new, w_new))
    if not (theta.shape == n_new.shape == w_new.shape):
        raise ValueError("dual_update: vectors must have equal length")
    return theta + n_new - w_new


@dataclass
class AdmmState:
    iteration: int
    n: np.ndarray
    w: np.ndarray
    theta: np.ndarray
    eta: float
    primal_residual: float = math.inf
    dual_residual: float = math.inf
    eps_primal: float = 0.0
    eps_dual: float = 0.0
    lagrangian: float = math.nan

    @property
    def converged(self) -> bool:
        return self.primal_residual <= self.eps_primal and self.dual_residual <= self.eps_dual


def residuals(
    n: np.ndarray,
    w: np.ndarray,
    w_prev: np.ndarray,
    theta: np.ndarray,
    eta: float,
    eps_abs: float = 1e-6,
    eps_rel: float = 1e-4,
) -> tuple[float, float, float, float]:
    """Primal/dual residual norms and their stopping thresholds."""
    root = math.sqrt(n.size)
    primal = float(np.linalg.norm(n - w))
    dual = float(eta * np.linalg.norm(w - w_prev))
    eps_pri = eps_abs * root + eps_rel * max(float(np.linalg.norm(n)), float(np.linalg.norm(w)))
    eps_dual = eps_abs * root + eps_rel * float(np.linalg.norm(eta * theta))
    return primal, dual, eps_pri, eps_dual


# -- trace -----------------------------------------------------------------------

KINDS = ("report_n", "feedback_w_theta", "device_alloc")


@dataclass(frozen=True)
class TraceMessage:
    iter: int
    sender: str
    receiver: str
    kind: str
    payload: dict[str, list[float]]

    def to_dict(self) -> dict[str, Any]:
        return {"iter": self.iter, "from": self.sender, "to": self.receiver, "kind": self.kind, "payload": self.payload}

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "TraceMessage":
        return cls(doc["iter"], doc["from"], doc["to"], doc["kind"], doc["payload"])


def write_trace(path, log: Iterable[TraceMessage]) -> None:
    with open(path, "w") as fh:
        for msg in log:
            fh.write(json.dumps(msg.to_dict(), separators=(",", ":")) + "\n")


def read_trace(path) -> list[TraceMessage]:
    with open(path) as fh:
        return [TraceMessage.from_dict(json.loads(line)) for line in fh if line.strip()]


def _vec(x: np.ndarray) -> list[float]:
    return [float(t) for t in x]


# -- driver ------------------------------------------------------------------------


@dataclass
class AdmmOptions:
    eta: float = 1.0
    max_iter: int = 2000
    eps_abs: float = 1e-6
    eps_rel: float = 1e-4
    adapt_eta: bool = True
    balance_ratio: float = 10.0
    balance_factor: float = 2.0
    adapt_until: int = 500
    seed: int = 42
    init: str = "random"
    record_trace: bool = True
    record_history: bool = True
    workers: int = 1
    scale: float | None = None
    backend: str | None = None
    incumbents: tuple = ()  # known feasible allocations (interleaved bits) to compare against


@dataclass
class AdmmResult:
    allocation: Allocation
    continuous: Allocation
    converged: bool
    iterations: int
    objective: float
    cost: float
    utilization_slack: float
    energy: float
    continuous_objective: float
    primal_residual: float
    dual_residual: float
    eta: float
    history: list[AdmmState] = field(default_factory=list, repr=False)
    trace: list[TraceMessage] = field(default_factory=list, repr=False)
    warnings: list[str] = field(default_factory=list)

    def summary(self) -> dict[str, Any]:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "objective": self.objective,
            "cost": self.cost,
            "utilization_slack": self.utilization_slack,
            "energy": self.energy,
            "residuals": {"primal": self.primal_residual, "dual": self.dual_residual},
        }


def _server_name(k: int) -> str:
    return f"server:{k}"


def min_energy_point(specs: Sequence[SubproblemSpec], ball: EnergyBall, backend: str | None = None) -> np.ndarray:
    """Least-energy point of the product of local sets (only the data floors force volume)."""
    parts, start = [], 0
    for spec in specs:
        sl = slice(start, start + spec.size)
        start += spec.size
        x, _ = kernels.solve_block(
            np.zeros(spec.size), 0.0, ball.a[sl], spec.k, np.zeros(spec.size), spec.u, spec.device_cap,
            spec.lo, spec.hi, backend,
        )
        parts.append(x)
    return np.concatenate(parts)


def _restore_energy(x: np.ndarray, anchor: np.ndarray, ball: EnergyBall) -> np.ndarray:
    """Largest step from ``anchor`` towards ``x`` that keeps the energy budget."""
    if ball.energy(x) <= ball.budget:
        return x
    lo, hi = 0.0, 1.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if ball.energy(anchor + mid * (x - anchor)) <= ball.budget:
            lo = mid
        else:
            hi = mid
    return anchor + lo * (x - anchor)


def round_allocation(x_bits: np.ndarray, cfg: ScenarioConfig) -> np.ndarray:
    """Floor to whole bits, then repair and greedily add single bits back.

    Servers left below their data floor are topped up with the bits that cost
    the least energy.  If that overshoots the energy budget, bits are moved
    within a server to cheaper coordinates (or, failing that, dropped from
    servers above their floor).  Finally bits go to coordinates whose extra
    bit lowers the objective most while every constraint holds.
    """
    links = energy.link_arrays(cfg)
    ub_cap, lb_cap = cfg.band_caps()
    band = np.empty_like(x_bits)
    band[0::2], band[1::2] = ub_cap, lb_cap
    band = np.floor(band)
    dev_cap = np.floor(np.array([d.cap_bits for d in cfg.devices]) + 1e-9)
    owner = np.repeat(np.arange(cfg.num_servers), [2 * s.size for s in cfg.servers])
    n_cap = np.array([math.floor(problem.effective_cap(s, cfg) + 1e-9) for s in cfg.servers], dtype=float)
    floors = np.array([math.ceil(s.min_data_bits - 1e-9) for s in cfg.servers], dtype=float)
    kappa = np.array([problem.load_slope(s, cfg) for s in cfg.servers])
    K = cfg.num_servers
    budget = cfg.energy_budget

    r = np.minimum(np.floor(np.maximum(x_bits, 0.0) + 1e-7), band)
    for p in range(cfg.num_devices):
        while r[2 * p] + r[2 * p + 1] > dev_cap[p]:
            j = 2 * p if r[2 * p] >= r[2 * p + 1] else 2 * p + 1
            r[j] -= 1
    totals = np.bincount(owner, weights=r, minlength=K)
    for kk in range(K):
        while totals[kk] > n_cap[kk]:
            idx = np.nonzero(owner == kk)[0]
            j = idx[np.argmax(r[idx])]
            r[j] -= 1
            totals[kk] -= 1

    def coord_energy(vals):
        with np.errstate(over="ignore"):
            return links.scale * np.expm1(vals / links.capacity * LN2)

    def room():
        pair = r[0::2] + r[1::2]
        return (r + 1 <= band) & (np.repeat(pair, 2) + 1 <= np.repeat(dev_cap, 2))

    e_now = float(coord_energy(r).sum())

    # data floors, cheapest energy first
    for kk in range(K):
        while totals[kk] < floors[kk]:
            up = coord_energy(r + 1) - coord_energy(r)
            up[~room() | (owner != kk)] = np.inf
            j = int(np.argmin(up))
            if not math.isfinite(up[j]):
                break
            r[j] += 1
            totals[kk] += 1
            e_now += float(up[j])

    # energy repair: shift bits to cheaper coordinates, then drop surplus bits
    guard = int(2 * r.size + np.sum(r)) + 10
    while e_now > budget and guard > 0:
        guard -= 1
        cur = coord_energy(r)
        down = np.where(r >= 1, cur - coord_energy(r - 1), -np.inf)
        up = np.where(room(), coord_energy(r + 1) - cur, np.inf)
        best, move = 0.0, None
        for kk in range(K):
            idx = np.nonzero(owner == kk)[0]
            jf, jt = idx[np.argmax(down[idx])], idx[np.argmin(up[idx])]
            if jf != jt and down[jf] - up[jt] > best:
                best, move = down[jf] - up[jt], (jf, jt)
        if move is not None:
            jf, jt = move
            r[jf] -= 1
            r[jt] += 1
            e_now -= best
            continue
        down[totals[owner] - 1 < floors[owner]] = -np.inf
        j = int(np.argmax(down))
        if not down[j] > 0:
            break
        r[j] -= 1
        totals[owner[j]] -= 1
        e_now -= float(down[j])

    # beneficial bits, best first
    def gain(j):
        lo_e = math.expm1(r[j] / links.capacity[j] * LN2)
        de = links.scale[j] * (math.expm1((r[j] + 1) / links.capacity[j] * LN2) - lo_e)
        return cfg.gamma * (links.rho[j] * de + links.price[j]) - kappa[owner[j]] / K, de

    gains = np.array([gain(j)[0] for j in range(r.size)])
    for j in np.argsort(gains, kind="stable"):
        kk = owner[j]
        g, de = gain(j)
        if g >= 0:
            continue
        p = j // 2
        if r[j] + 1 > band[j] or r[2 * p] + r[2 * p + 1] + 1 > dev_cap[p]:
            continue
        if totals[kk] + 1 > n_cap[kk] or e_now + de > budget:
            continue
        r[j] += 1
        totals[kk] += 1
        e_now += de
    return r


class _Server:
    """In-process edge server: holds private parameters, exchanges only vectors."""

    def __init__(self, spec: SubproblemSpec, backend: str | None):
        self.spec = spec
        self.backend = backend

    def update(self, w_k, theta_k, eta):
        return server_update(self.spec, w_k, theta_k, eta, self.backend)


def run(cfg: ScenarioConfig, opts: AdmmOptions | None = None) -> AdmmResult:
    """Solve the joint problem with the coordinator/server ADMM iteration."""
    opts = opts or AdmmOptions()
    if opts.eta <= 0:
        raise ValueError("eta must be > 0")
    problem.check_instance(cfg)
    scale = default_scale(cfg) if opts.scale is None else float(opts.scale)
    specs = build_subproblems(cfg, scale)
    ball = EnergyBall.from_config(cfg, scale)
    anchor = min_energy_point(specs, ball, opts.backend)
    if ball.energy(anchor) > ball.budget * (1 + 1e-12):
        raise InfeasibleInstanceError(
            f"the data floors alone need {ball.energy(anchor):g} energy units, above the budget {ball.budget:g}"
        )
    servers = [_Server(spec, opts.backend) for spec in specs]
    slices = cfg.offsets()
    dim = 2 * cfg.num_devices
    trace: list[TraceMessage] = []
    history: list[AdmmState] = []
    pool = ThreadPoolExecutor(max_workers=opts.workers) if opts.workers > 1 else None

    # initial reports: a random point of each local set (or the least-energy point)
    if opts.init == "random":
        rng = np.random.default_rng(opts.seed)
        n = np.concatenate([project_local(sp, rng.uniform(0, 1, sp.size) * sp.u, opts.backend) for sp in specs])
    elif opts.init == "anchor":
        n = anchor.copy()
    else:
        raise ValueError(f"unknown init {opts.init!r}")
    eta = float(opts.eta)
    theta = np.zeros(dim)
    w = project_energy_ball(n, ball, opts.backend)

    def emit(i, sender, receiver, kind, **payload):
        if opts.record_trace:
            trace.append(TraceMessage(i, sender, receiver, kind, {k: _vec(v) for k, v in payload.items()}))

    for k, sl in enumerate(slices):
        emit(0, _server_name(k), "coordinator", "report_n", n=n[sl] * scale)
    for k, sl in enumerate(slices):
        emit(0, "coordinator", _server_name(k), "feedback_w_theta", w=w[sl] * scale, theta=theta[sl] * scale, eta=[eta])

    best = None
    best_score = math.inf
    state = AdmmState(0, n, w, theta, eta)
    converged = False
    it = 0
    try:
        for it in range(1, opts.max_iter + 1):
            jobs = [(servers[k], w[sl], theta[sl]) for k, sl in enumerate(slices)]
            if pool is not None:
                parts = list(pool.map(lambda job: job[0].update(job[1], job[2], eta), jobs))
            else:
                parts = [srv.update(wk, tk, eta) for srv, wk, tk in jobs]
            n = np.concatenate(parts)
            for k, sl in enumerate(slices):
                emit(it, _server_name(k), "coordinator", "report_n", n=n[sl] * scale)

            w_prev = w
            w = project_energy_ball(n + theta, ball, opts.backend)
            theta = dual_update(theta, n, w)
            primal, dual, eps_pri, eps_dual = residuals(n, w, w_prev, theta, eta, opts.eps_abs, opts.eps_rel)
            lag = sum(sp.objective(n[sl]) for sp, sl in zip(specs, slices))
            lag += 0.5 * eta * float(np.sum((n - w + theta) ** 2) - np.sum(theta**2))
            state = AdmmState(it, n, w, theta, eta, primal, dual, eps_pri, eps_dual, lag)
            if opts.record_history:
                history.append(state)
            score = max(primal / eps_pri, dual / eps_dual)
            if score < best_score:
                best, best_score = state, score
            if state.converged:
                converged = True
                break

            if opts.adapt_eta and it <= opts.adapt_until:
                if primal > opts.balance_ratio * dual:
                    eta *= opts.balance_factor
                    theta = theta / opts.balance_factor
                elif dual > opts.balance_ratio * primal:
                    eta /= opts.balance_factor
                    theta = theta * opts.balance_factor
            for k, sl in enumerate(slices):
                emit(it, "coordinator", _server_name(k), "feedback_w_theta",
                     w=w[sl] * scale, theta=theta[sl] * scale, eta=[eta])
    finally:
        if pool is not None:
            pool.shutdown()

    final = state if converged else best
    x = np.concatenate([np.clip(final.n[sl], 0.0, None) for sl in slices])
    x = _restore_energy(x, anchor, ball)
    cont = Allocation.from_interleaved(x * scale, cfg)
    cont_eval = problem.evaluate(cont, cfg)
    rounded = Allocation.from_interleaved(round_allocation(x * scale, cfg), cfg)
    ev = problem.evaluate(rounded, cfg)

    warnings = []
    for vec in opts.incumbents:
        cand = Allocation.from_interleaved(np.asarray(vec, dtype=float), cfg)
        if problem.violations(cand, cfg):
            continue
        cev = problem.evaluate(cand, cfg)
        if cev.objective < ev.objective:
            rounded, ev = cand, cev
            warnings.append("a supplied incumbent beat the ADMM point; returning the incumbent")
    for s, tot in zip(cfg.servers, rounded.server_totals(cfg)):
        if tot >= math.floor(problem.effective_cap(s, cfg) + 1e-9):
            warnings.append(f"server {s.id}: optimum sits at its data/compute cap")
    if not converged:
        warnings.append(f"ADMM stopped after {opts.max_iter} iterations without meeting the residual criteria")
    bad = problem.violations(rounded, cfg)
    if bad:
        raise NumericalError(f"final allocation infeasible: {bad}")

    for k, s in enumerate(cfg.servers):
        for d in s.devices:
            emit(it, _server_name(k), f"device:{d.id}", "device_alloc",
                 ub_bits=[rounded.ub_bits[d.id]], lb_bits=[rounded.lb_bits[d.id]])

    return AdmmResult(
        allocation=rounded,
        continuous=cont,
        converged=converged,
        iterations=it,
        objective=ev.objective,
        cost=ev.cost,
        utilization_slack=ev.utilization_slack,
        energy=ev.energy,
        continuous_objective=cont_eval.objective,
        primal_residual=final.primal_residual,
        dual_residual=final.dual_residual,
        eta=final.eta,
        history=history,
        trace=trace,
        warnings=warnings,
    )


def solve_modes(cfg: ScenarioConfig, opts: AdmmOptions | None = None) -> dict[str, AdmmResult]:
    """Solve the band-restricted modes, then the joint mode with their
    allocations as incumbents, so the joint objective never exceeds theirs."""
    opts = opts or AdmmOptions()
    out = {m: run(cfg.with_mode(m), opts) for m in ("lb-only", "ub-only")}
    inc = tuple(opts.incumbents) + tuple(r.allocation.interleaved() for r in out.values())
    out["joint"] = run(cfg.with_mode("joint"), replace(opts, incumbents=inc))
    return {m: out[m] for m in ("joint", "lb-only", "ub-only")}


def refine(
    cfg: ScenarioConfig,
    result: AdmmResult,
    requirement: float,
    round_budget: int = 200,
    records=None,
    opts: AdmmOptions | None = None,
) -> tuple[ScenarioConfig, AdmmResult]:
    """Re-select each server's minibatch size and pass count at the solved data
    volume, then solve once more with the new training parameters."""

    from .loadmodel import select_params, table1_records

    records = table1_records() if records is None else records
    totals = result.allocation.server_totals(cfg)
    servers = []
    for s, bits in zip(cfg.servers, totals):
        b, e = select_params(bits / cfg.bits_per_sample, records, requirement, round_budget)
        servers.append(replace(s, batch=b, passes=e))
    new_cfg = replace(cfg, servers=tuple(servers))
    new_cfg.validate()
    return new_cfg, run(new_cfg, opts)


def lagrangian_increases(history: Sequence[AdmmState], tol: float = 1e-6) -> list[int]:
    """Iterations at which the augmented Lagrangian rose by more than ``tol`` (relative)
    while the penalty stayed fixed."""
    out = []
    for prev, cur in zip(history, history[1:]):
        if cur.eta != prev.eta:
            continue
        if cur.lagrangian > prev.lagrangian + tol * max(1.0, abs(prev.lagrangian)):
            out.append(cur.iteration)
    return out


# -- privacy audit -------------------------------------------------------------------

FORBIDDEN_TOKENS = (
    "rho", "beta", "price", "gain", "noise", "sigma", "access", "prob", "h_", "dataset", "data", "sample",
    "coord", "location", "lat", "lon", "position", "topology", "label", "feature",
)
ALLOWED_KEYS = {
    "report_n": ({"n"}, set()),
    "feedback_w_theta": ({"w", "theta"}, {"eta"}),
    "device_alloc": ({"ub_bits", "lb_bits"}, set()),
}


@dataclass
class AuditReport:
    passed: bool
    checked: int
    failures: list[tuple[int, TraceMessage, str]] = field(default_factory=list)

    def __str__(self) -> str:
        if self.passed:
            return f"audit passed ({self.checked} messages)"
        idx, msg, why = self.failures[0]
        return f"audit failed on message {idx} ({msg.sender} -> {msg.receiver}, {msg.kind}): {why}"


def _parse_party(name: str) -> tuple[str, int | None]:
    if name == "coordinator":
        return "coordinator", None
    kind, _, idx = name.partition(":")
    if kind in ("server", "device") and idx.isdigit():
        return kind, int(idx)
    return "invalid", None


def _private_values(cfg: ScenarioConfig) -> set[float]:
    vals = set()
    for d in cfg.devices:
        for v in (d.rho, d.beta_bit, d.gain_ub, d.gain_lb, d.noise_ub, d.noise_lb, d.access_prob):
            if not float(v).is_integer():
                vals.add(float(v))
    return vals


def _check_message(msg: TraceMessage, cfg: ScenarioConfig | None, private: set[float]) -> str | None:
    if not isinstance(msg.iter, int) or isinstance(msg.iter, bool) or msg.iter < 0:
        return f"bad iteration field {msg.iter!r}"
    if msg.kind not in KINDS:
        return f"unknown message kind {msg.kind!r}"
    if not isinstance(msg.payload, dict):
        return "payload is not a mapping of numeric vectors"
    for key in msg.payload:
        low = str(key).lower()
        for tok in FORBIDDEN_TOKENS:
            if tok in low:
                return f"payload field {key!r} names private information"
    required, optional = ALLOWED_KEYS[msg.kind]
    keys = set(msg.payload)
    if not required <= keys or not keys <= required | optional:
        return f"payload fields {sorted(keys)} do not match {msg.kind} schema {sorted(required | optional)}"
    for key, val in msg.payload.items():
        if not isinstance(val, list) or not all(
            isinstance(t, (int, float)) and not isinstance(t, bool) and math.isfinite(t) for t in val
        ):
            return f"payload field {key!r} is not a finite numeric vector"
        hit = [t for t in val if float(t) in private]
        if hit:
            return f"payload field {key!r} carries a private device parameter value {hit[0]!r}"
    src, si = _parse_party(msg.sender)
    dst, di = _parse_party(msg.receiver)
    if msg.kind == "report_n":
        if src != "server" or dst != "coordinator":
            return "report_n must go from a server to the coordinator"
        k, vec_len = si, len(msg.payload["n"])
    elif msg.kind == "feedback_w_theta":
        if src != "coordinator" or dst != "server":
            return "feedback_w_theta must go from the coordinator to a server"
        k, vec_len = di, len(msg.payload["w"])
        if len(msg.payload["theta"]) != vec_len:
            return "w and theta lengths differ"
        if "eta" in msg.payload and len(msg.payload["eta"]) != 1:
            return "eta must be a single number"
    else:
        if src != "server" or dst != "device":
            return "device_alloc must go from a server to a device"
        if len(msg.payload["ub_bits"]) != 1 or len(msg.payload["lb_bits"]) != 1:
            return "device_alloc must carry exactly that device's two volumes"
        k, vec_len = si, None
    if cfg is not None:
        if k is None or k >= cfg.num_servers:
            return f"unknown server index {k}"
        server = cfg.servers[k]
        if vec_len is not None and vec_len != 2 * server.size:
            return f"vector of length {vec_len} does not match server {k}'s {2 * server.size} coordinates"
        if msg.kind == "device_alloc" and di not in {d.id for d in server.devices}:
            return f"device {di} is not served by server {k}"
    return None


def audit_trace(log: Iterable[TraceMessage | dict], cfg: ScenarioConfig | None = None) -> AuditReport:
    """Check every message against the exchange schema.

    With ``cfg`` the audit also checks that vectors sent to or from server
    ``k`` cover exactly that server's devices, and that no payload number equals
    a (non-integral) private device parameter such as a channel gain.
    """
    private = _private_values(cfg) if cfg is not None else set()
    failures = []
    count = 0
    for i, msg in enumerate(log):
        count += 1
        if isinstance(msg, dict):
            try:
                msg = TraceMessage.from_dict(msg)
            except KeyError as exc:
                failures.append((i, TraceMessage(-1, "?", "?", "?", {}), f"missing field {exc}"))
                continue
        why = _check_message(msg, cfg, private)
        if why is not None:
            failures.append((i, msg, why))
    return AuditReport(passed=not failures, checked=count, failures=failures)
