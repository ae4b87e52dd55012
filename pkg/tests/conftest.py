import numpy as np
import pytest

from maam.data import RECORDS_PER_FILE, TEST_FILES, TRAIN_FILES, write_cifar10_file


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _records(seed: int, count: int):
    """Balanced labels and random pixels, laid out like one CIFAR-10 file."""
    g = np.random.default_rng(seed)
    labels = g.permutation(np.arange(count) % 10).astype(np.uint8)
    images = g.integers(0, 256, size=(count, 32, 32, 3), dtype=np.uint8)
    return images, labels


@pytest.fixture(scope="session")
def cifar_dir(tmp_path_factory):
    """A format-exact CIFAR-10 binary directory (5 train files, 1 test file)."""
    root = tmp_path_factory.mktemp("cifar-10-batches-bin")
    for k, name in enumerate((*TRAIN_FILES, *TEST_FILES)):
        write_cifar10_file(root / name, *_records(k, RECORDS_PER_FILE))
    return root


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run
# ---------------------------------------------------------------------------

_ACCEPTANCE: dict = {}


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        passed = exc_type is None
        if not passed and not self.detail:
            self.detail = f"{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {self.number}: {self.title}"
        if self.detail:
            line += f" ({self.detail})"
        _ACCEPTANCE[self.number] = line
        print(line)
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
