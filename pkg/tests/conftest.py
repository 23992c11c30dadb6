import math
import os

os.environ.setdefault("GRIDGUARD_LP_BACKEND", "simplex")
os.environ["GRIDGUARD_LOG_TO_FILE"] = "0"

import numpy as np
import pytest

from app.core.config import get_settings
from app.models import database
from app.schema.RawCase import BranchRow, BusRow, GeneratorRow, RawCase
from app.service.grid_service import build_grid, get_matrices, load_grid

INF = math.inf
TRIANGLE = ((1, 2), (2, 3), (1, 3))


def make_grid(demand_mw, generators, branches, name="test", base_mva=1.0):
    """
    Grid from plain tuples. generators: (bus, p_min, p_max, cost); branches:
    (from, to, x, rate) with rate inf for unlimited. Bus ids are 1..n.
    """
    raw = RawCase(
        name=name, base_mva=base_mva,
        buses=[BusRow(id=i + 1, pd_mw=d, bus_type=3 if i == 0 else 1) for i, d in enumerate(demand_mw)],
        generators=[GeneratorRow(bus=b, p_min_mw=lo, p_max_mw=hi, cost=list(cost)) for b, lo, hi, cost in generators],
        branches=[BranchRow(from_bus=f, to_bus=t, x_pu=x, rate_mw=rate) for f, t, x, rate in branches],
    )
    return build_grid(raw, [br[3] for br in branches])


def make_triangle(caps=(INF, INF, INF), demand=(0.0, 0.0, 1.0), generators=None, name="triangle"):
    """Unit-reactance triangle with lines (1,2), (2,3), (1,3)."""
    generators = generators or [(1, 0.0, 1.0, (1.0, 0.0)), (2, 0.0, 0.5, (2.0, 0.0))]
    branches = [(f, t, 1.0, c) for (f, t), c in zip(TRIANGLE, caps)]
    return make_grid(demand, generators, branches, name=name)


def random_grid(rng, n=6, extra_lines=3, name="random", capped=False, n_gen=None):
    """
    Connected random grid: a spanning tree plus extra lines, generators at
    half the buses (or n_gen of them). capped draws finite line capacities.
    """
    branches = []
    for i in range(1, n):
        branches.append((int(rng.integers(0, i)) + 1, i + 1, float(rng.uniform(0.5, 2.0)), INF))
    pairs = {(min(f, t), max(f, t)) for f, t, _, _ in branches}
    extra_lines = min(extra_lines, n * (n - 1) // 2 - (n - 1))
    while len(branches) < n - 1 + extra_lines:
        f, t = sorted(int(v) + 1 for v in rng.choice(n, size=2, replace=False))
        if (f, t) in pairs:
            continue
        pairs.add((f, t))
        branches.append((f, t, float(rng.uniform(0.5, 2.0)), INF))
    demand = rng.uniform(0.2, 1.0, size=n).round(3)
    gen_buses = sorted(int(b) + 1 for b in rng.choice(n, size=n_gen or max(n // 2, 1), replace=False))
    generators = [(b, 0.0, float(rng.uniform(1.0, 3.0)), (0.0, float(rng.uniform(1, 5)), 0.0)) for b in gen_buses]
    if capped:
        branches = [(f, t, x, float(rng.uniform(0.4, 2.0))) for f, t, x, _ in branches]
    return make_grid(demand, generators, branches, name=name)


@pytest.fixture
def triangle():
    return make_triangle()


@pytest.fixture
def tri3():
    return load_grid("tri3")


@pytest.fixture
def five_bus():
    return load_grid("five_bus")


@pytest.fixture
def mixed_extreme_grid():
    """
    Single generator at bus 1, demand 1 at buses 2 and 3 and a 0.2 cap on
    line (2,3). Servable when both demands move together, not when they
    move apart by the full envelope (flow (d3 - d2)/3).
    """
    return make_triangle(caps=(INF, 0.2, INF), demand=(0.0, 1.0, 1.0),
                         generators=[(1, 0.0, 10.0, (1.0, 0.0))], name="mixed")


@pytest.fixture
def matrices():
    return get_matrices


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def ledger(tmp_path, monkeypatch):
    """Run ledger on a throwaway sqlite file."""
    monkeypatch.setenv("GRIDGUARD_DATABASE_URL", f"sqlite:///{tmp_path / 'runs.db'}")
    get_settings.cache_clear()
    database._session_factory.cache_clear()
    yield tmp_path
    get_settings.cache_clear()
    database._session_factory.cache_clear()


@pytest.fixture
def highs_backend(monkeypatch):
    monkeypatch.setenv("GRIDGUARD_LP_BACKEND", "highs")
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()
