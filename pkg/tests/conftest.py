import pytest

from borinot.mission import load_mission, solve_offline
from borinot.model import load_reference


class RailCache:
    """Offline rails solved once per session, keyed by mission name."""

    def __init__(self):
        self._rails = {}

    def __call__(self, name: str):
        if name not in self._rails:
            mission = load_mission(name)
            self._rails[name] = solve_offline(mission, load_reference(mission.model))
        return self._rails[name]


@pytest.fixture(scope="session")
def rails():
    return RailCache()


class FlightCache:
    """Closed-loop runs shared between test modules, keyed by their arguments."""

    def __init__(self, rails: RailCache):
        self.rails = rails
        self._runs = {}

    def __call__(self, mission: str, seed: int = 0, **plant):
        from borinot.sim import PlantConfig, ee_hold_mission, run_closed_loop, run_ee_hold

        key = (mission, seed, tuple(sorted(plant.items())))
        if key not in self._runs:
            cfg = PlantConfig(**plant)
            if mission.startswith("ee_hold"):
                pitch = {"ee_hold": 45.0, "ee_hold_pitch0": 0.0}[mission]
                spec = ee_hold_mission(pitch)
                rail = self.rails(mission) if pitch == 45.0 else None
                self._runs[key] = run_ee_hold(spec, plant=cfg, rail=rail, seed=seed)
            else:
                self._runs[key] = run_closed_loop(mission, plant=cfg, rail=self.rails(mission), seed=seed)
        return self._runs[key]


@pytest.fixture(scope="session")
def flights(rails):
    return FlightCache(rails)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
