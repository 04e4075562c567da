import numpy as np
import pytest
import torch

from pkgnet.data import SyntheticConfig, generate_synthetic_dataset
from pkgnet.model import StudentConfig, TeacherSpec, build_student, build_teacher, make_tap_spec


@pytest.fixture(scope="session")
def small_synth():
    cfg = SyntheticConfig(n_train_videos=2, n_test_videos=2, frames_per_video=40, image_size=64, seed=3)
    return generate_synthetic_dataset(cfg)


@pytest.fixture(scope="session")
def teacher18():
    return build_teacher(TeacherSpec("resnet18", "random:0", [1, 2]))


@pytest.fixture
def pkg_pair(teacher18):
    torch.manual_seed(0)
    tap = make_tap_spec(teacher18, 2)
    return teacher18, build_student(StudentConfig(width=8), tap)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion(request):
    """Record ``PASS``/``FAIL`` for the calling acceptance test."""
    def record(name: str, ok: bool, detail: str = ""):
        ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip())
        assert ok, f"{name}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
