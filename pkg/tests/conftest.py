"""Shared fixtures: the default seed-42 dataset and one full pipeline run."""

from pathlib import Path

import pytest

from xappconflict import dataset as ds
from xappconflict import regressor, simkernel
from xappconflict.config import PipelineConfig
from xappconflict.pipeline import cmd_pipeline


@pytest.fixture(scope="session")
def default_config():
    return PipelineConfig()


@pytest.fixture(scope="session")
def default_data(default_config):
    return simkernel.generate_dataset(default_config.sim)


@pytest.fixture(scope="session")
def default_split(default_config, default_data):
    return ds.split(default_data, default_config.model.train_fraction, default_config.split_seed)


@pytest.fixture(scope="session")
def default_models(default_config, default_split):
    train, _ = default_split
    return {k: regressor.fit(train, k, default_config.model.params) for k in simkernel.KPI_NAMES}


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory, default_config) -> Path:
    out = tmp_path_factory.mktemp("run")
    cmd_pipeline(default_config, out)
    return out


# one verdict line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
