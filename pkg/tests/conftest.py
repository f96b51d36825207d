from __future__ import annotations

import pytest

from protoerase import guidance, protolab, erasure, evalkit
from protoerase.semworld import WorldConfig, build_world


@pytest.fixture(scope="session")
def world0():
    return build_world(WorldConfig(seed=0))


@pytest.fixture(scope="session")
def hazard(world0):
    return world0.concepts["hazard"]


@pytest.fixture(scope="session")
def cfg_default():
    return guidance.GuidanceConfig()


@pytest.fixture(scope="session")
def bank3(world0, hazard, cfg_default):
    return protolab.build_concept_bank(
        world0, hazard, protolab.PipelineConfig(seed=0), cfg_default
    )


@pytest.fixture(scope="session")
def bank1(world0, hazard, cfg_default):
    return protolab.build_concept_bank(
        world0, hazard, protolab.PipelineConfig(K=1, seed=0), cfg_default
    )


@pytest.fixture(scope="session")
def tau0(world0, hazard, bank3):
    return erasure.calibrate_tau(world0, bank3, [hazard], n=200, seed=123)


@pytest.fixture(scope="session")
def det0(world0, hazard):
    return evalkit.calibrate_detector(world0, hazard, n=200, seed=7)


@pytest.fixture(scope="session")
def multi_world():
    world = build_world(WorldConfig(seed=0), extra_concepts=[("toxin", 2)])
    return world
