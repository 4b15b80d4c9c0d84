"""Upload energy and monetary cost of the unlicensed (UB) and licensed (LB) links.

Uploading ``n`` bits within a period ``tau`` over a link of bandwidth ``B``
needs transmit energy ``(sigma / h) * (2 ** (n / (tau * B * P)) - 1)``, with
``P`` the channel-access probability on the unlicensed band and ``P = 1`` on
the licensed one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scenario import Allocation, DeviceParams, ScenarioConfig, ServerParams

MAX_EXPONENT = 60.0


class EnergyOverflowError(OverflowError):
    """Raised when a volume is so large its energy is astronomically infeasible."""


def _link_energy(scale: float, bits: float, capacity: float) -> float:
    if bits < 0:
        raise ValueError(f"bits must be >= 0 (got {bits})")
    expo = bits / capacity
    if not expo <= MAX_EXPONENT:
        raise EnergyOverflowError(
            f"{bits:g} bits over a {capacity:g} bit-per-period link needs 2**{expo:.3g}; "
            "volume is infeasible for any sane energy budget"
        )
    return scale * math.expm1(expo * math.log(2.0))


def ub_capacity(device: DeviceParams, tau: float, bw_ub: float) -> float:
    """Bits per unit exponent on the unlicensed link, ``tau * B_u * P_u``."""
    return tau * bw_ub * device.access_prob


def lb_capacity(tau: float, bw_lb: float) -> float:
    return tau * bw_lb


def energy_ub(device: DeviceParams, bits: float, tau: float, bw_ub: float) -> float:
    return _link_energy(device.noise_ub / device.gain_ub, bits, ub_capacity(device, tau, bw_ub))


def energy_lb(device: DeviceParams, bits: float, tau: float, bw_lb: float) -> float:
    return _link_energy(device.noise_lb / device.gain_lb, bits, lb_capacity(tau, bw_lb))


def denergy_ub(device: DeviceParams, bits: float, tau: float, bw_ub: float) -> float:
    """Derivative of :func:`energy_ub` with respect to ``bits``."""
    cap = ub_capacity(device, tau, bw_ub)
    return device.noise_ub / device.gain_ub * math.log(2.0) / cap * 2.0 ** (bits / cap)


def denergy_lb(device: DeviceParams, bits: float, tau: float, bw_lb: float) -> float:
    cap = lb_capacity(tau, bw_lb)
    return device.noise_lb / device.gain_lb * math.log(2.0) / cap * 2.0 ** (bits / cap)


def _server_devices(server: ServerParams, alloc: Allocation, cfg: ScenarioConfig):
    index = {d.id: i for i, d in enumerate(cfg.devices)}
    for dev in server.devices:
        i = index[dev.id]
        yield dev, float(alloc.ub_bits[i]), float(alloc.lb_bits[i])


def cost_ub(server: ServerParams, alloc: Allocation, cfg: ScenarioConfig) -> float:
    return sum(
        dev.rho * energy_ub(dev, ub, cfg.tau, cfg.bw_ub) for dev, ub, _ in _server_devices(server, alloc, cfg)
    )


def cost_lb(server: ServerParams, alloc: Allocation, cfg: ScenarioConfig) -> float:
    return sum(
        dev.rho * energy_lb(dev, lb, cfg.tau, cfg.bw_lb) + dev.beta_bit * lb
        for dev, _, lb in _server_devices(server, alloc, cfg)
    )


def total_energy(alloc: Allocation, cfg: ScenarioConfig) -> float:
    total = 0.0
    for i, dev in enumerate(cfg.devices):
        total += energy_ub(dev, float(alloc.ub_bits[i]), cfg.tau, cfg.bw_ub)
        total += energy_lb(dev, float(alloc.lb_bits[i]), cfg.tau, cfg.bw_lb)
    return total


def total_cost(alloc: Allocation, cfg: ScenarioConfig) -> float:
    return sum(cost_ub(s, alloc, cfg) + cost_lb(s, alloc, cfg) for s in cfg.servers)


@dataclass
class EnergyBreakdown:
    energy_ub: np.ndarray
    energy_lb: np.ndarray
    money_ub: np.ndarray
    money_lb: np.ndarray
    cost_ub: np.ndarray
    cost_lb: np.ndarray
    total_energy: float
    total_cost: float


def breakdown(alloc: Allocation, cfg: ScenarioConfig) -> EnergyBreakdown:
    devs = cfg.devices
    e_ub = np.array([energy_ub(d, float(alloc.ub_bits[i]), cfg.tau, cfg.bw_ub) for i, d in enumerate(devs)])
    e_lb = np.array([energy_lb(d, float(alloc.lb_bits[i]), cfg.tau, cfg.bw_lb) for i, d in enumerate(devs)])
    rho = np.array([d.rho for d in devs])
    beta = np.array([d.beta_bit for d in devs])
    m_ub = rho * e_ub
    m_lb = rho * e_lb + beta * alloc.lb_bits
    owner = alloc.server_of
    c_ub = np.array([m_ub[owner == s.id].sum() for s in cfg.servers])
    c_lb = np.array([m_lb[owner == s.id].sum() for s in cfg.servers])
    return EnergyBreakdown(
        energy_ub=e_ub,
        energy_lb=e_lb,
        money_ub=m_ub,
        money_lb=m_lb,
        cost_ub=c_ub,
        cost_lb=c_lb,
        total_energy=float(e_ub.sum() + e_lb.sum()),
        total_cost=float(c_ub.sum() + c_lb.sum()),
    )


@dataclass(frozen=True)
class LinkArrays:
    """Per-coordinate energy parameters for the interleaved ``2M`` vector.

    Coordinate ``j`` costs ``scale[j] * (2 ** (x / capacity[j]) - 1)`` energy
    units; ``rho`` and ``price`` are the money per energy unit and per bit.
    """

    scale: np.ndarray
    capacity: np.ndarray
    rho: np.ndarray
    price: np.ndarray


def link_arrays(cfg: ScenarioConfig) -> LinkArrays:
    devs = cfg.devices
    m = len(devs)
    scale = np.empty(2 * m)
    capacity = np.empty(2 * m)
    rho = np.empty(2 * m)
    price = np.zeros(2 * m)
    for i, d in enumerate(devs):
        scale[2 * i] = d.noise_ub / d.gain_ub
        scale[2 * i + 1] = d.noise_lb / d.gain_lb
        capacity[2 * i] = ub_capacity(d, cfg.tau, cfg.bw_ub)
        capacity[2 * i + 1] = lb_capacity(cfg.tau, cfg.bw_lb)
        rho[2 * i] = rho[2 * i + 1] = d.rho
        price[2 * i + 1] = d.beta_bit
    return LinkArrays(scale, capacity, rho, price)


def energy_vector(bits: np.ndarray, links: LinkArrays) -> np.ndarray:
    """Vectorised per-coordinate energy; no overflow guard (callers clip)."""
    return links.scale * np.expm1(np.asarray(bits) / links.capacity * math.log(2.0))
