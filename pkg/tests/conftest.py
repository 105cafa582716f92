import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from maskseg3d.geometry import PointCloud

settings.register_profile("repo", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_cloud(rng, n=50, labelled=True, classes=3, instances=3):
    pos = rng.uniform(0, 3, size=(n, 3))
    col = rng.uniform(size=(n, 3))
    if not labelled:
        return PointCloud(pos, col)
    inst = rng.integers(-1, instances, size=n)
    sem_of = rng.integers(0, classes, size=instances)
    sem = np.where(inst >= 0, sem_of[np.maximum(inst, 0)], classes)
    return PointCloud(pos, col, sem, inst)


TINY_SPEC = dict(extent=3.2, palette=("box", "cylinder", "sphere"), instance_count=(2, 2),
                 points_per_instance=(60, 90), floor_density=10.0, min_gap=0.4)
TINY_MODEL = dict(widths=(8, 8, 8), dim=16, heads=4, ffn_dim=32, levels_attended=2, iterations=1, num_queries=4,
                  num_classes=3, batch_size=1, steps=3, train_query_counts=None, voxel_sample_limit=64)


@pytest.fixture(scope="session")
def tiny_clouds():
    from maskseg3d.scenegen import SceneSpec, generate_scene

    return [generate_scene(SceneSpec(**TINY_SPEC), s) for s in range(2)]


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def record(number, ok, detail=""):
        ACCEPTANCE_LINES.append(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip())
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
