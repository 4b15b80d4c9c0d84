"""The joint resource-efficiency problem: objective, per-server limits, feasibility.

    minimise   (1/K) * sum_k (mu_cap_k - load_k(n_k)) + gamma * cost(n', n'')
    subject to total energy <= budget
               n'_m + n''_m <= cap_m                 for every device
               min_data_k <= n_k <= N_k              for every server
               n', n'' >= 0 (and zero on a band excluded by the mode)

with ``load_k(n) = kappa_k * n`` and ``N_k = min(data_cap_k, mu_cap_k / kappa_k)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import energy
from .loadmodel import LoadCoefficients, default_coefficients, per_sample_load
from .scenario import Allocation, ScenarioConfig, ServerParams


class InfeasibleInstanceError(ValueError):
    pass


def coefficients_for(server: ServerParams, cfg: ScenarioConfig) -> LoadCoefficients:
    base = default_coefficients()
    c0 = server.c0 if server.c0 is not None else (cfg.c0 if cfg.c0 is not None else base.c0)
    c1 = server.c1 if server.c1 is not None else (cfg.c1 if cfg.c1 is not None else base.c1)
    return LoadCoefficients(c0=c0, c1=c1, dataset_type=base.dataset_type)


def load_slope(server: ServerParams, cfg: ScenarioConfig) -> float:
    """Seconds of training per round per uploaded bit (kappa_k)."""
    return per_sample_load(server.batch, server.passes, coefficients_for(server, cfg)) / cfg.bits_per_sample


def effective_cap(server: ServerParams, cfg: ScenarioConfig) -> float:
    kappa = load_slope(server, cfg)
    if kappa <= 0:
        return server.data_cap_bits
    return min(server.data_cap_bits, server.compute_cap / kappa)


def check_instance(cfg: ScenarioConfig) -> None:
    """Raise :class:`InfeasibleInstanceError` if some server's local set is empty."""
    ub_cap, lb_cap = cfg.band_caps()
    owner = cfg.server_of_device()
    caps = np.array([d.cap_bits for d in cfg.devices])
    reachable = np.minimum(caps, ub_cap + lb_cap)
    for s in cfg.servers:
        n_cap = effective_cap(s, cfg)
        if n_cap < s.min_data_bits:
            raise InfeasibleInstanceError(
                f"server {s.id}: effective cap {n_cap:g} bits is below its data floor {s.min_data_bits:g}"
            )
        if reachable[owner == s.id].sum() < s.min_data_bits:
            raise InfeasibleInstanceError(
                f"server {s.id}: its devices can deliver at most {reachable[owner == s.id].sum():g} bits "
                f"under mode {cfg.mode!r}, below the floor {s.min_data_bits:g}"
            )


@dataclass(frozen=True)
class Evaluation:
    objective: float
    cost: float
    utilization_slack: float
    energy: float
    loads: np.ndarray

    def as_dict(self) -> dict:
        return {
            "objective": self.objective,
            "cost": self.cost,
            "utilization_slack": self.utilization_slack,
            "energy": self.energy,
        }


def evaluate(alloc: Allocation, cfg: ScenarioConfig) -> Evaluation:
    totals = alloc.server_totals(cfg)
    loads = np.array([load_slope(s, cfg) * n for s, n in zip(cfg.servers, totals)])
    slack = float(np.mean([s.compute_cap for s in cfg.servers]) - loads.mean())
    cost = energy.total_cost(alloc, cfg)
    return Evaluation(
        objective=slack + cfg.gamma * cost,
        cost=cost,
        utilization_slack=slack,
        energy=energy.total_energy(alloc, cfg),
        loads=loads,
    )


def objective(alloc: Allocation, cfg: ScenarioConfig) -> float:
    return evaluate(alloc, cfg).objective


def violations(alloc: Allocation, cfg: ScenarioConfig, rel_tol: float = 1e-6, atol: float = 1e-9) -> list[str]:
    """Human-readable list of violated constraints (empty when feasible)."""
    out: list[str] = []
    ub, lb = alloc.ub_bits, alloc.lb_bits
    if np.any(ub < -atol) or np.any(lb < -atol):
        out.append("negative volume")
    ub_cap, lb_cap = cfg.band_caps()
    if np.any(ub > ub_cap + atol):
        out.append(f"unlicensed volume on a band closed by mode {cfg.mode!r} or above cap")
    if np.any(lb > lb_cap + atol):
        out.append(f"licensed volume on a band closed by mode {cfg.mode!r} or above cap")
    caps = np.array([d.cap_bits for d in cfg.devices])
    for m in np.nonzero(ub + lb > caps * (1 + rel_tol) + atol)[0]:
        out.append(f"device {int(m)} above collection cap")
    totals = alloc.server_totals(cfg)
    for s, n in zip(cfg.servers, totals):
        n_cap = effective_cap(s, cfg)
        if n > n_cap * (1 + rel_tol) + atol:
            out.append(f"server {s.id} above effective cap ({n:g} > {n_cap:g})")
        if n < s.min_data_bits * (1 - rel_tol) - atol:
            out.append(f"server {s.id} below data floor ({n:g} < {s.min_data_bits:g})")
    try:
        used = energy.total_energy(alloc, cfg)
    except energy.EnergyOverflowError:
        out.append("energy overflow")
    else:
        if used > cfg.energy_budget * (1 + rel_tol):
            out.append(f"energy {used:g} above budget {cfg.energy_budget:g}")
    return out
