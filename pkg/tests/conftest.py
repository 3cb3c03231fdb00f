import numpy as np
import pytest
from hypothesis import settings

from kalmanfield.model import ModelConfig

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

TINY = ModelConfig(
    plane_resolutions=(4, 8),
    proposal_resolution=4,
    plane_features=4,
    observation_hidden=16,
    sigma_hidden=16,
    color_hidden=16,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture(scope="session")
def small_scene(tmp_path_factory):
    """A 16x16, 4-frame blob scene written to disk (cheap enough for unit tests)."""
    from kalmanfield.scenes import SceneConfig, generate_blob_scene

    out = tmp_path_factory.mktemp("scene")
    cfg = SceneConfig(n_frames=4, width=16, height=16, n_train=8, n_test=2, quadrature=128)
    (train, test), scene = generate_blob_scene(cfg, out)
    return out, train, test, scene


_ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = {}


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    results = request.config.stash[_ACCEPTANCE_KEY]

    def record(number: int, ok: bool, detail: str) -> None:
        results[number] = (ok, detail)
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_ACCEPTANCE_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
