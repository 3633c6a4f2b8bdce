import random
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from tcsap.scenario import parse_scenario, parse_sweep

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


class FixedChoice:
    """Stands in for random.Random when a test needs to force a choice."""

    def __init__(self, *picks):
        self.picks = list(picks)

    def randrange(self, n):
        return self.picks.pop(0) % n


@pytest.fixture
def rng():
    return random.Random(1234)


def load_scenario(name: str):
    return parse_scenario((SCENARIOS / name).read_text())


def load_sweep(name: str):
    return parse_sweep((SCENARIOS / name).read_text())
