import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_scene_dict():
    from gridsdf.ingest.synthetic import sphere_box_scene_dict

    d = sphere_box_scene_dict()
    d["camera"] = {"width": 20, "height": 20, "fov_deg": 50.0}
    d["views"]["orbit"]["count"] = 8
    d["train"], d["test"] = [0, 2, 4, 6], [1, 5]
    d["sparse_points"] = 60
    return d


@pytest.fixture(scope="session")
def tiny_dataset(tiny_scene_dict):
    from gridsdf.ingest.dataset import synthetic_dataset
    from gridsdf.ingest.synthetic import SyntheticScene

    return synthetic_dataset(SyntheticScene.from_dict(tiny_scene_dict), tiny_scene_dict)


@pytest.fixture
def tiny_config():
    from gridsdf.field import FieldConfig
    from gridsdf.trainer import TrainConfig

    return TrainConfig(iterations=6, rays_per_batch=32, samples_per_ray=16, log_every=1,
                       field=FieldConfig(resolutions=(4, 8), channels=2, hidden=16, pe_freqs=2))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("acceptance_runs")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in mod.LINES:
            terminalreporter.write_line(line)
