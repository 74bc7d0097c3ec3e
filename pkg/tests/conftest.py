import pytest
import torch

from flashdistill.egnn import EpsNet, NetSpec, init_params
from flashdistill.schedule import BaseSchedule
from flashdistill.toymol import ToyChemSpec, generate_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def base():
    return BaseSchedule()


@pytest.fixture(scope="session")
def small_spec():
    return NetSpec(layers=4, hidden=8)


@pytest.fixture(scope="session")
def small_net(small_spec, base):
    return EpsNet(small_spec, init_params(small_spec, 3, head_scale=0.3), base)


@pytest.fixture(scope="session")
def toy_data():
    return generate_dataset(ToyChemSpec(), 64, (3, 7), 0)


def random_points(rng, n, d=2):
    from flashdistill.geom import PointSet, project_zero_com

    return project_zero_com(PointSet(rng.standard_normal((n, 3)) * 1.5, rng.standard_normal((n, d))))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
