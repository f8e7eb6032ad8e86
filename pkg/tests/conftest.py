import numpy as np
import pytest

from fdmeit.forward import ConductivityField, assemble_cem_system, hinged_protocol
from fdmeit.mesh import (
    ElectrodeSpec,
    FingerChamberParams,
    generate_box_mesh,
    generate_finger_chamber_mesh,
    generate_hinged_actuator_mesh,
    refine_near_electrodes,
)

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion, then assert it."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            line += f"  ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def bar_mesh(h: float = 1.0, z: float = 0.0, electrode_size=None):
    """100 x 10 x 1 mm bar with electrodes on its two end faces."""
    kw = {} if electrode_size is None else {"center": (5.0, 0.5), "size": electrode_size}
    specs = [ElectrodeSpec(1, axis=0, side="min", z=z, **kw), ElectrodeSpec(2, axis=0, side="max", z=z, **kw)]
    return generate_box_mesh((100.0, 10.0, 1.0), h, electrodes=specs)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def hinged_coarse():
    return generate_hinged_actuator_mesh()


@pytest.fixture(scope="session")
def hinged_refined(hinged_coarse):
    return refine_near_electrodes(hinged_coarse, 6.0, 2.0)


@pytest.fixture(scope="session")
def hinged_system(hinged_refined):
    return assemble_cem_system(hinged_refined, ConductivityField.uniform(hinged_refined, 0.2))


@pytest.fixture(scope="session")
def finger_chamber():
    return generate_finger_chamber_mesh(FingerChamberParams())


@pytest.fixture(scope="session")
def protocol():
    return hinged_protocol()


@pytest.fixture(scope="session")
def hinged_actuator(hinged_refined):
    from fdmeit.scenarios import hinged_model

    return hinged_model(mesh=hinged_refined)


@pytest.fixture(scope="session")
def finger_actuator():
    from fdmeit.scenarios import finger_model

    return finger_model()


@pytest.fixture(scope="session")
def configs_dir():
    from pathlib import Path

    return Path(__file__).resolve().parent.parent / "configs"
