"""Shared fixtures: camera, toy object, a trained toy model and seeded scenes."""

from __future__ import annotations

import numpy as np
import pytest

from pcofmod.geometry import PoseRange, build_pose_lattice
from pcofmod.meshes import toy_object
from pcofmod.render import CameraIntrinsics
from pcofmod.templates import TrainingConfig, build_bpt

# Desk-scale configuration used across the suite.  The range is narrow enough
# to train in well under a minute while still spanning 248 leaves.
TOY_K = CameraIntrinsics(572.4, 572.4, 325.26, 242.05, 640, 480)
TOY_RANGE = PoseRange(cap_deg=25.0, roll_min=-12.0, roll_max=12.0, dist_min=565.0, dist_max=635.0)
TOY_CONFIG = TrainingConfig(n_renders=50, th_grad=5.0, th_norm=10.0, jitter_tilt_deg=5.0, jitter_roll_deg=3.75,
                            jitter_dist_mm=40.0)
TOY_THRESHOLD = 0.4
SCENE_NORMAL_WINDOW = 7

# Four leaves (pole viewpoint, two rolls, two distances): trains in about a second.
TINY_RANGE = PoseRange(cap_deg=3.0, roll_min=-3.0, roll_max=3.0, dist_min=565.0, dist_max=635.0)
TINY_CONFIG = TrainingConfig(n_renders=12, th_grad=2.0, th_norm=3.0, jitter_tilt_deg=5.0, jitter_roll_deg=3.75,
                             jitter_dist_mm=40.0)


@pytest.fixture(scope="session")
def K():
    return TOY_K


@pytest.fixture(scope="session")
def toy_mesh():
    return toy_object()


@pytest.fixture(scope="session")
def toy_tree(toy_mesh):
    return build_bpt(toy_mesh, build_pose_lattice(TOY_RANGE), TOY_K, TOY_CONFIG)


@pytest.fixture(scope="session")
def tiny_tree(toy_mesh):
    return build_bpt(toy_mesh, build_pose_lattice(TINY_RANGE), TOY_K, TINY_CONFIG)


@pytest.fixture(scope="session")
def toy_model_path(toy_tree, tmp_path_factory):
    from pcofmod.modelfile import write_model

    path = tmp_path_factory.mktemp("model") / "toy.pcof"
    write_model(toy_tree, path)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run

ACCEPTANCE = {}


def pytest_runtest_makereport(item, call):
    crit = item.get_closest_marker("criterion")
    if crit is None or call.when != "call":
        return
    number, title = crit.args
    ok = call.excinfo is None
    prev = ACCEPTANCE.get(number, (title, True))
    ACCEPTANCE[number] = (title, prev[1] and ok)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title}")
