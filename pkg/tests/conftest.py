from types import SimpleNamespace

import pytest

from gatepilot.harness import ExperimentConfig, ExperimentData, run_experiment_on
from gatepilot.synth import SynthConfig, SynthWorld, generate_world

from worlds import small_world_config


@pytest.fixture(scope="session")
def default_world_dir(tmp_path_factory):
    """The default synthetic world (T=4, seed 10), saved once per session."""
    d = tmp_path_factory.mktemp("default_world")
    generate_world(SynthConfig()).save(d)
    return d


@pytest.fixture(scope="session")
def default_world(default_world_dir):
    return SynthWorld.load(default_world_dir)


@pytest.fixture(scope="session")
def default_experiment(default_world_dir, tmp_path_factory):
    """Full router-comparison run on the default world, with outputs on disk."""
    out = tmp_path_factory.mktemp("default_results")
    config = ExperimentConfig.for_world_dir(default_world_dir)
    data = ExperimentData(config)
    result = run_experiment_on(data, out_dir=out)
    return SimpleNamespace(config=config, data=data, result=result, out=out)


@pytest.fixture()
def small_world_dir(tmp_path):
    d = tmp_path / "world"
    generate_world(small_world_config()).save(d)
    return d
