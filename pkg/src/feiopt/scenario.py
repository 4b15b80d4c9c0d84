"""Problem instance data model: devices, edge servers and the scenario config.

All data volumes are carried in bits.  Configuration files may give any volume
field in samples instead (``cap_samples`` rather than ``cap_bits``); those are
converted with ``bits_per_sample`` when the file is loaded.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

MODES = ("joint", "lb-only", "ub-only")
DEFAULT_BITS_PER_SAMPLE = 5360.0  # 0.67 KB


class ScenarioError(ValueError):
    """Base class for configuration problems."""


class ConfigParseError(ScenarioError):
    """The document does not match the config schema."""


class ValidationError(ScenarioError):
    """The document parses but violates an instance invariant."""


@dataclass(frozen=True)
class DeviceParams:
    id: int
    rho: float
    beta_bit: float
    gain_ub: float
    gain_lb: float
    noise_ub: float
    noise_lb: float
    access_prob: float
    cap_bits: float

    def validate(self) -> None:
        where = f"device {self.id}"
        for name in ("gain_ub", "gain_lb", "noise_ub", "noise_lb"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val > 0):
                raise ValidationError(f"{where}: {name} must be finite and > 0 (got {val})")
        if not (0.0 < self.access_prob <= 1.0):
            raise ValidationError(f"{where}: access_prob must lie in (0, 1] (got {self.access_prob})")
        for name in ("rho", "beta_bit", "cap_bits"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val >= 0):
                raise ValidationError(f"{where}: {name} must be finite and >= 0 (got {val})")


@dataclass(frozen=True)
class ServerParams:
    """One edge server and the devices that upload to it.

    ``c0``/``c1`` override the scenario-wide load coefficients for this server
    when given (seconds per minibatch step, seconds per sample pass).
    """

    id: int
    devices: tuple[DeviceParams, ...]
    compute_cap: float
    data_cap_bits: float
    batch: int
    passes: int
    min_data_bits: float = 0.0
    c0: float | None = None
    c1: float | None = None

    def validate(self) -> None:
        where = f"server {self.id}"
        if not self.devices:
            raise ValidationError(f"{where}: needs at least one device")
        if not (self.compute_cap > 0):
            raise ValidationError(f"{where}: compute_cap must be > 0 (got {self.compute_cap})")
        if not (self.data_cap_bits > 0):
            raise ValidationError(f"{where}: data_cap_bits must be > 0 (got {self.data_cap_bits})")
        if self.batch < 1:
            raise ValidationError(f"{where}: batch must be >= 1 (got {self.batch})")
        if self.passes < 1:
            raise ValidationError(f"{where}: passes must be >= 1 (got {self.passes})")
        if not (0 <= self.min_data_bits <= self.data_cap_bits):
            raise ValidationError(
                f"{where}: min_data_bits must satisfy 0 <= min_data_bits <= data_cap_bits "
                f"(got {self.min_data_bits} vs {self.data_cap_bits})"
            )
        for name in ("c0", "c1"):
            val = getattr(self, name)
            if val is not None and not (math.isfinite(val) and val >= 0):
                raise ValidationError(f"{where}: {name} must be finite and >= 0 (got {val})")
        for dev in self.devices:
            dev.validate()

    @property
    def size(self) -> int:
        return len(self.devices)


@dataclass(frozen=True)
class ScenarioConfig:
    servers: tuple[ServerParams, ...]
    tau: float
    bw_ub: float
    bw_lb: float
    energy_budget: float
    gamma: float
    bits_per_sample: float = DEFAULT_BITS_PER_SAMPLE
    mode: str = "joint"
    c0: float | None = None
    c1: float | None = None

    def validate(self) -> None:
        for name in ("tau", "bw_ub", "bw_lb", "gamma"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val > 0):
                raise ValidationError(f"scenario: {name} must be finite and > 0 (got {val})")
        if not (self.energy_budget > 0):
            raise ValidationError(f"scenario: energy_budget must be > 0 (got {self.energy_budget})")
        if not (self.bits_per_sample >= 1):
            raise ValidationError(f"scenario: bits_per_sample must be >= 1 (got {self.bits_per_sample})")
        if self.mode not in MODES:
            raise ValidationError(f"scenario: mode must be one of {MODES} (got {self.mode!r})")
        if not self.servers:
            raise ValidationError("scenario: needs at least one server")
        seen: dict[int, int] = {}
        for srv in self.servers:
            for dev in srv.devices:
                if dev.id in seen:
                    raise ValidationError(
                        f"device sets not disjoint: device {dev.id} belongs to servers "
                        f"{seen[dev.id]} and {srv.id}"
                    )
                seen[dev.id] = srv.id
        server_ids = [s.id for s in self.servers]
        if len(set(server_ids)) != len(server_ids):
            raise ValidationError(f"scenario: duplicate server ids {server_ids}")
        for srv in self.servers:
            srv.validate()

    # -- convenience views ------------------------------------------------

    @property
    def num_servers(self) -> int:
        return len(self.servers)

    @property
    def num_devices(self) -> int:
        return sum(s.size for s in self.servers)

    @property
    def devices(self) -> list[DeviceParams]:
        return [d for s in self.servers for d in s.devices]

    def server_of_device(self) -> np.ndarray:
        return np.array([s.id for s in self.servers for _ in s.devices], dtype=int)

    def offsets(self) -> list[slice]:
        """Slices into the interleaved ``2M`` decision vector, one per server."""
        out, start = [], 0
        for s in self.servers:
            out.append(slice(start, start + 2 * s.size))
            start += 2 * s.size
        return out

    def band_caps(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-device upper bounds on the unlicensed and licensed volumes under ``mode``."""
        caps = np.array([d.cap_bits for d in self.devices], dtype=float)
        ub = caps if self.mode != "lb-only" else np.zeros_like(caps)
        lb = caps if self.mode != "ub-only" else np.zeros_like(caps)
        return ub.copy(), lb.copy()

    def with_mode(self, mode: str) -> "ScenarioConfig":
        cfg = replace(self, mode=mode)
        cfg.validate()
        return cfg

    def with_compute_cap(self, value: float) -> "ScenarioConfig":
        servers = tuple(replace(s, compute_cap=float(value)) for s in self.servers)
        cfg = replace(self, servers=servers)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict[str, Any]:
        doc = {
            "tau": self.tau,
            "bw_ub": self.bw_ub,
            "bw_lb": self.bw_lb,
            "energy_budget": self.energy_budget,
            "gamma": self.gamma,
            "bits_per_sample": self.bits_per_sample,
            "mode": self.mode,
        }
        if self.c0 is not None or self.c1 is not None:
            doc["load"] = {"c0": self.c0, "c1": self.c1}
        servers = []
        for s in self.servers:
            sd = {
                "id": s.id,
                "compute_cap": s.compute_cap,
                "data_cap_bits": s.data_cap_bits,
                "batch": s.batch,
                "passes": s.passes,
                "min_data_bits": s.min_data_bits,
            }
            if s.c0 is not None:
                sd["c0"] = s.c0
            if s.c1 is not None:
                sd["c1"] = s.c1
            sd["devices"] = [asdict(d) for d in s.devices]
            servers.append(sd)
        doc["servers"] = servers
        return doc

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


@dataclass
class Allocation:
    """Per-device upload volumes in bits, in the scenario's device order."""

    ub_bits: np.ndarray
    lb_bits: np.ndarray
    server_of: np.ndarray = field(repr=False)

    @classmethod
    def zeros(cls, cfg: ScenarioConfig) -> "Allocation":
        m = cfg.num_devices
        return cls(np.zeros(m), np.zeros(m), cfg.server_of_device())

    @classmethod
    def from_interleaved(cls, vec: np.ndarray, cfg: ScenarioConfig) -> "Allocation":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (2 * cfg.num_devices,):
            raise ValueError(f"expected interleaved vector of length {2 * cfg.num_devices}, got {vec.shape}")
        return cls(vec[0::2].copy(), vec[1::2].copy(), cfg.server_of_device())

    def interleaved(self) -> np.ndarray:
        out = np.empty(2 * len(self.ub_bits))
        out[0::2] = self.ub_bits
        out[1::2] = self.lb_bits
        return out

    def server_totals(self, cfg: ScenarioConfig) -> np.ndarray:
        tot = self.ub_bits + self.lb_bits
        return np.array([tot[self.server_of == s.id].sum() for s in cfg.servers])

    def validate(self, cfg: ScenarioConfig, atol: float = 1e-9) -> None:
        if np.any(self.ub_bits < -atol) or np.any(self.lb_bits < -atol):
            raise ValidationError("allocation: volumes must be nonnegative")
        caps = np.array([d.cap_bits for d in cfg.devices])
        bad = np.nonzero(self.ub_bits + self.lb_bits > caps * (1 + 1e-12) + atol)[0]
        if bad.size:
            raise ValidationError(f"allocation: device {int(bad[0])} exceeds its collection cap")


# -- selector matrices -------------------------------------------------------


def selector_matrices(server: ServerParams) -> tuple[np.ndarray, np.ndarray]:
    """Coordinate selectors ``(A, B)`` for the interleaved server vector.

    ``A @ n`` extracts the unlicensed volumes (positions 1, 3, 5, ... in
    one-based indexing) and ``B @ n`` the licensed ones (positions 2, 4, ...).
    """
    mk = server.size
    if mk < 1:
        raise ValueError("server has no devices")
    a = np.zeros((mk, 2 * mk))
    b = np.zeros((mk, 2 * mk))
    rows = np.arange(mk)
    a[rows, 2 * rows] = 1.0
    b[rows, 2 * rows + 1] = 1.0
    return a, b


# -- loading -----------------------------------------------------------------

_DEVICE_KEYS = ("id", "rho", "beta_bit", "gain_ub", "gain_lb", "noise_ub", "noise_lb", "access_prob", "cap_bits")
_SERVER_KEYS = ("id", "compute_cap", "data_cap_bits", "batch", "passes")
_TOP_KEYS = ("tau", "bw_ub", "bw_lb", "energy_budget", "gamma")
_VOLUME_KEYS = {"cap_bits", "data_cap_bits", "min_data_bits"}


def _number(obj: dict, key: str, where: str, bps: float, required: bool = True, default=None):
    if key in _VOLUME_KEYS:
        skey = key[: -len("_bits")] + "_samples"
        if skey in obj:
            if key in obj:
                raise ConfigParseError(f"{where}: give either {key!r} or {skey!r}, not both")
            return _number(obj, skey, where, bps) * bps
    if key not in obj:
        if required:
            raise ConfigParseError(f"{where}: missing required field {key!r}")
        return default
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigParseError(f"{where}: field {key!r} must be a number (got {val!r})")
    return float(val)


def _integer(obj: dict, key: str, where: str) -> int:
    val = _number(obj, key, where, 1.0)
    if not float(val).is_integer():
        raise ConfigParseError(f"{where}: field {key!r} must be an integer (got {val!r})")
    return int(val)


def config_from_dict(doc: dict[str, Any]) -> ScenarioConfig:
    """Build and validate a :class:`ScenarioConfig` from a parsed JSON document.

    Servers are ordered by their ``id`` and then relabelled ``0..K-1``; devices
    are relabelled ``0..M-1`` in server order.
    """
    if not isinstance(doc, dict):
        raise ConfigParseError("config: top level must be an object")
    bps = _number(doc, "bits_per_sample", "config", 1.0, required=False, default=DEFAULT_BITS_PER_SAMPLE)
    top = {k: _number(doc, k, "config", bps) for k in _TOP_KEYS}
    mode = doc.get("mode", "joint")
    if not isinstance(mode, str):
        raise ConfigParseError(f"config: field 'mode' must be a string (got {mode!r})")
    load = doc.get("load", {}) or {}
    if not isinstance(load, dict):
        raise ConfigParseError("config: field 'load' must be an object")
    c0 = _number(load, "c0", "config.load", bps, required=False)
    c1 = _number(load, "c1", "config.load", bps, required=False)

    raw_servers = doc.get("servers")
    if not isinstance(raw_servers, list) or not raw_servers:
        raise ConfigParseError("config: field 'servers' must be a non-empty list")

    parsed = []
    for i, sd in enumerate(raw_servers):
        where = f"servers[{i}]"
        if not isinstance(sd, dict):
            raise ConfigParseError(f"{where}: must be an object")
        sid = _integer(sd, "id", where)
        raw_devices = sd.get("devices")
        if not isinstance(raw_devices, list):
            raise ConfigParseError(f"{where}: field 'devices' must be a list")
        devs = []
        for j, dd in enumerate(raw_devices):
            dwhere = f"{where}.devices[{j}]"
            if not isinstance(dd, dict):
                raise ConfigParseError(f"{dwhere}: must be an object")
            vals = {k: _number(dd, k, dwhere, bps) for k in _DEVICE_KEYS}
            vals["id"] = _integer(dd, "id", dwhere)
            devs.append(vals)
        parsed.append(
            dict(
                id=sid,
                devices=devs,
                compute_cap=_number(sd, "compute_cap", where, bps),
                data_cap_bits=_number(sd, "data_cap_bits", where, bps),
                batch=_integer(sd, "batch", where),
                passes=_integer(sd, "passes", where),
                min_data_bits=_number(sd, "min_data_bits", where, bps, required=False, default=0.0),
                c0=_number(sd, "c0", where, bps, required=False),
                c1=_number(sd, "c1", where, bps, required=False),
            )
        )

    # Check disjointness on the original labels before relabelling.
    owner: dict[int, int] = {}
    for sd in parsed:
        for dd in sd["devices"]:
            if dd["id"] in owner:
                raise ValidationError(
                    f"device sets not disjoint: device {dd['id']} belongs to servers "
                    f"{owner[dd['id']]} and {sd['id']}"
                )
            owner[dd["id"]] = sd["id"]
    ids = [sd["id"] for sd in parsed]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"scenario: duplicate server ids {ids}")

    parsed.sort(key=lambda sd: sd["id"])
    servers, next_dev = [], 0
    for k, sd in enumerate(parsed):
        devices = []
        for dd in sd["devices"]:
            devices.append(DeviceParams(**{**dd, "id": next_dev}))
            next_dev += 1
        servers.append(ServerParams(**{**sd, "id": k, "devices": tuple(devices)}))

    cfg = ScenarioConfig(servers=tuple(servers), mode=mode, bits_per_sample=bps, c0=c0, c1=c1, **top)
    cfg.validate()
    return cfg


def load_config(source: str | Path | dict) -> ScenarioConfig:
    """Load a scenario from a JSON string, a path to a JSON file, or a parsed dict."""
    if isinstance(source, dict):
        return config_from_dict(source)
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        text = Path(source).read_text()
    else:
        text = source
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"config: not valid JSON ({exc})") from exc
    return config_from_dict(doc)


# -- instance generators -------------------------------------------------------


def paper_analog(seed: int = 42, compute_cap: float = 0.5) -> ScenarioConfig:
    """Four edge servers with ten IoT devices each, ZigBee/NB-IoT-like links.

    Unlicensed links share a 2 MHz channel with contention-limited access
    probabilities; licensed links get a 180 kHz NB-IoT carrier and a per-bit
    tariff.  Device caps are 30-80 samples per period.
    """
    rng = np.random.default_rng(seed)
    bps = DEFAULT_BITS_PER_SAMPLE
    servers, dev_id = [], 0
    for k in range(4):
        devices = []
        for _ in range(10):
            devices.append(
                DeviceParams(
                    id=dev_id,
                    rho=float(np.round(rng.uniform(0.8, 1.2), 4)),
                    beta_bit=float(np.round(rng.uniform(1.5e-7, 3.0e-7), 10)),
                    gain_ub=float(np.round(rng.uniform(0.5, 1.5), 4)),
                    gain_lb=float(np.round(rng.uniform(0.8, 1.6), 4)),
                    noise_ub=0.063,
                    noise_lb=0.1,
                    access_prob=float(np.round(rng.uniform(0.03, 0.12), 4)),
                    cap_bits=float(rng.integers(30, 81)) * bps,
                )
            )
            dev_id += 1
        servers.append(
            ServerParams(
                id=k,
                devices=tuple(devices),
                compute_cap=compute_cap,
                data_cap_bits=600 * bps,
                batch=10,
                passes=5,
                min_data_bits=100 * bps,
            )
        )
    cfg = ScenarioConfig(
        servers=tuple(servers),
        tau=1.0,
        bw_ub=2.0e6,
        bw_lb=1.8e5,
        energy_budget=5.0,
        gamma=0.05,
        bits_per_sample=bps,
        mode="joint",
    )
    cfg.validate()
    return cfg


def random_instance(
    seed: int,
    num_servers: int | None = None,
    sizes: Sequence[int] | None = None,
    cap_range: tuple[float, float] = (2.0e3, 2.0e4),
    min_data_frac: float = 0.0,
) -> ScenarioConfig:
    """Small seeded instance used by tests and the oracle comparison.

    Channel scales are tied to the device caps so the exponential energy
    terms are neither negligible nor overwhelming at the caps.
    """
    rng = np.random.default_rng(seed)
    if sizes is None:
        k = num_servers if num_servers is not None else int(rng.integers(1, 5))
        sizes = [int(rng.integers(1, 6)) for _ in range(k)]
    tau, bw_ub, bw_lb = 1.0, 1.0e4, 5.0e3
    servers, dev_id = [], 0
    for k, mk in enumerate(sizes):
        devices = []
        for _ in range(mk):
            devices.append(
                DeviceParams(
                    id=dev_id,
                    rho=float(rng.uniform(0.5, 2.0)),
                    beta_bit=float(rng.uniform(0.5e-5, 3e-5)),
                    gain_ub=float(rng.uniform(0.5, 2.0)),
                    gain_lb=float(rng.uniform(0.5, 2.0)),
                    noise_ub=float(rng.uniform(0.02, 0.1)),
                    noise_lb=float(rng.uniform(0.02, 0.1)),
                    access_prob=float(rng.uniform(0.2, 0.9)),
                    cap_bits=float(np.round(rng.uniform(*cap_range))),
                )
            )
            dev_id += 1
        total_cap = sum(d.cap_bits for d in devices)
        servers.append(
            ServerParams(
                id=k,
                devices=tuple(devices),
                compute_cap=float(rng.uniform(0.05, 0.4)),
                data_cap_bits=float(np.round(total_cap * rng.uniform(0.5, 1.0))),
                batch=int(rng.choice([10, 20, 50])),
                passes=int(rng.choice([5, 20])),
                min_data_bits=float(np.round(min_data_frac * total_cap * 0.2)),
            )
        )
    cfg = ScenarioConfig(
        servers=tuple(servers),
        tau=tau,
        bw_ub=bw_ub,
        bw_lb=bw_lb,
        energy_budget=float(rng.uniform(0.005, 0.1)) * len(sizes),
        gamma=float(rng.uniform(0.02, 0.2)),
        bits_per_sample=100.0,
        mode="joint",
    )
    cfg.validate()
    return cfg


def iter_devices(cfg: ScenarioConfig) -> Iterable[tuple[ServerParams, DeviceParams]]:
    for s in cfg.servers:
        for d in s.devices:
            yield s, d
