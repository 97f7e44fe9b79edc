import random

import pytest

from blockoffload.cluster import Cluster
from blockoffload.extentfs import ExtentFS
from blockoffload.volume import MemoryVolume, VolumeGeometry


def make_fs(blocks: int = 4096, block_size: int = 4096) -> ExtentFS:
    return ExtentFS.mkfs(MemoryVolume(VolumeGeometry(block_size, blocks)))


@pytest.fixture
def fs():
    return make_fs()


@pytest.fixture
def cluster():
    c = Cluster.build()
    yield c
    c.close()


@pytest.fixture
def rng():
    return random.Random(1234)


# criterion number -> (title, passed, detail); printed once at the end of the run
_VERDICTS: dict[int, tuple[str, bool, str]] = {}


class Verdict:
    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title

    def check(self, ok: bool, detail: str = "") -> None:
        _VERDICTS[self.number] = (self.title, bool(ok), detail)
        print(_line(self.number, self.title, ok, detail))
        assert ok, f"criterion {self.number} failed: {detail}"


def _line(number: int, title: str, ok: bool, detail: str) -> str:
    return f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}"


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    number, title = marker.args
    yield Verdict(number, title)
    if number not in _VERDICTS:
        _VERDICTS[number] = (title, False, "raised before reaching a verdict")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_VERDICTS):
        title, ok, detail = _VERDICTS[number]
        terminalreporter.write_line(_line(number, title, ok, detail))
