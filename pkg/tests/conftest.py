import math

import pytest

from mcastsim.scenario import from_dict
from mcastsim.sim import Simulation


def make_sim(**overrides):
    """Simulation from scenario overrides (dict merge happens in from_dict)."""
    base = {
        "node_count": 2,
        "duration_s": 10.0,
        "seed": 1,
        "area": {"width_m": 1000.0, "height_m": 1000.0},
    }
    base.update(overrides)
    return Simulation(from_dict(base))


def line_positions(n, spacing, y=10.0, x0=10.0):
    return [[x0 + i * spacing, y] for i in range(n)]


def grid_positions(n, area_w, area_h, jitter_rng=None):
    side = math.ceil(math.sqrt(n))
    out = []
    for i in range(n):
        gx = (i % side + 0.5) * area_w / side
        gy = (i // side + 0.5) * area_h / side
        if jitter_rng is not None:
            gx += jitter_rng.uniform(-0.2, 0.2) * area_w / side
            gy += jitter_rng.uniform(-0.2, 0.2) * area_h / side
        out.append([min(area_w, max(0.0, gx)), min(area_h, max(0.0, gy))])
    return out


def run_s(sim, seconds):
    sim.kernel.run_until(sim.kernel.now_us + int(seconds * 1_000_000))


@pytest.fixture
def static_line():
    """9-node line, unit spacing 100 m, range 120 m, R=2, settled."""
    sim = make_sim(node_count=9,
                   nodes=line_positions(9, 100.0),
                   radio={"range_m": 120.0},
                   zone={"radius_R": 2},
                   area={"width_m": 1000.0, "height_m": 100.0})
    run_s(sim, 3.0)
    return sim
