import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from vitalstream.broker import Broker  # noqa: E402
from vitalstream.ingest import DeadLetterStore, Dispatcher, IngestService  # noqa: E402
from vitalstream.store import TimeSeriesStore  # noqa: E402


settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")


class FakeClock:
    def __init__(self, now=0):
        self.now = now

    def __call__(self):
        return self.now


@pytest.fixture
def clock():
    return FakeClock()


@pytest.fixture
def broker(tmp_path, clock):
    b = Broker(tmp_path / "broker", fsync=False, clock=clock)
    yield b
    b.close()


@pytest.fixture
def store(tmp_path, clock):
    s = TimeSeriesStore(tmp_path / "store", fsync=False, clock=clock)
    yield s
    s.close()


@pytest.fixture
def cloud(tmp_path, broker, store):
    """Ingest service plus Dispatcher over shared broker and store."""
    dl = DeadLetterStore(tmp_path / "dead", fsync=False)
    svc = IngestService(broker)
    disp = Dispatcher(broker, store, dl)
    yield svc, disp
    disp.close()
    dl.close()


# acceptance verdicts, printed once at the end of the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
