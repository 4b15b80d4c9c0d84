import numpy as np
import pytest

from feiopt.scenario import load_config


def device_doc(i, **kw):
    doc = dict(
        id=i,
        rho=1.0,
        beta_bit=1e-5,
        gain_ub=1.0,
        gain_lb=1.0,
        noise_ub=0.05,
        noise_lb=0.05,
        access_prob=0.5,
        cap_bits=5000.0,
    )
    doc.update(kw)
    return doc


def server_doc(i, devices, **kw):
    doc = dict(id=i, compute_cap=0.2, data_cap_bits=8000.0, batch=10, passes=5, devices=devices)
    doc.update(kw)
    return doc


def scenario_doc(servers, **kw):
    doc = dict(tau=1.0, bw_ub=1e4, bw_lb=5e3, energy_budget=0.05, gamma=0.1, bits_per_sample=100.0, servers=servers)
    doc.update(kw)
    return doc


@pytest.fixture
def minimal_doc():
    return scenario_doc([server_doc(0, [device_doc(0)])])


@pytest.fixture
def tiny_cfg(minimal_doc):
    return load_config(minimal_doc)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(number: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
