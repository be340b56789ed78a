import numpy as np
import pytest

from affmap.geometry import CameraIntrinsics, Pose, quaternion_to_matrix


def random_pose(rng: np.random.Generator, spread: float = 5.0) -> Pose:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return Pose(quaternion_to_matrix(*q), rng.uniform(-spread, spread, 3))


def random_camera(rng: np.random.Generator) -> CameraIntrinsics:
    w, h = int(rng.integers(64, 1920)), int(rng.integers(48, 1080))
    f = rng.uniform(100, 2000)
    return CameraIntrinsics(f, f * rng.uniform(0.9, 1.1), w / 2 + rng.uniform(-5, 5),
                            h / 2 + rng.uniform(-5, 5), w, h)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def bundle_dir(tmp_path_factory):
    """A zero-noise synthetic bundle on disk, shared by the slower tests."""
    from affmap.synth import default_scene, render, write_bundle

    out = tmp_path_factory.mktemp("bundle")
    write_bundle(render(default_scene()), out)
    return out


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
