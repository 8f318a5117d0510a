import numpy as np
import pytest

from dyncoef.appearance import AppearanceConfig
from dyncoef.model import FieldConfig, RadianceField
from dyncoef.render import RenderConfig
from dyncoef.synthetic import generate_scene, glossy_sphere_spec


def tiny_field_config(**kw) -> FieldConfig:
    app = dict(n_basis=4, film_width=4, illum_dim=4, trunk_depth=2, trunk_width=8, integrator_width=8)
    app.update(kw.pop("appearance", {}))
    base = dict(resolution=(8, 8, 8), bounds=((-1,) * 3, (1,) * 3), density_ranks=(2, 2, 2),
                appearance_ranks=(3, 3, 3), appearance=AppearanceConfig(**app),
                render=RenderConfig(samples_per_ray=12))
    base.update(kw)
    return FieldConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_model():
    def make(seed=0, **kw):
        return RadianceField(tiny_field_config(**kw), seed=seed)

    return make


@pytest.fixture(scope="session")
def tiny_scene():
    spec = glossy_sphere_spec()
    return generate_scene(spec, 3, 12, "train"), generate_scene(spec, 2, 12, "test")


@pytest.fixture(scope="session")
def tiny_scene_two_lights():
    spec = glossy_sphere_spec(n_lights=2)
    return generate_scene(spec, 4, 12, "train"), generate_scene(spec, 2, 12, "test")


# acceptance criteria report one line each; the summary prints them after the run
CRITERIA: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    def report(label: str, passed: bool, detail: str) -> bool:
        CRITERIA.append((label, bool(passed), detail))
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in CRITERIA:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {label}: {detail}")
