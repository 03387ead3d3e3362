import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from shapedelta.shape import Part, ShapeTree, load_taxonomy
from shapedelta.synth import CATEGORY, build_group

torch.set_num_threads(1)

settings.register_profile(
    "default", deadline=None, max_examples=int(os.environ.get("HYPOTHESIS_EXAMPLES", 40)),
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def taxonomy():
    return load_taxonomy(CATEGORY)


@pytest.fixture(scope="session")
def chair_group():
    return build_group("chair", 0, 0)


@pytest.fixture(scope="session")
def groups():
    return {st: build_group(st, g, 0) for st, g in (("chair", 1), ("sofa", 0), ("stool", 0))}


def random_part(rng: np.random.Generator, label: str = "seat", children=()) -> Part:
    q = rng.normal(size=4)
    return Part.from_params(rng.uniform(-1, 1, 3), q / np.linalg.norm(q), rng.uniform(0.05, 0.5, 3),
                            label, children)


def make_shape(root: Part) -> ShapeTree:
    return ShapeTree(CATEGORY, load_taxonomy(CATEGORY), root)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
