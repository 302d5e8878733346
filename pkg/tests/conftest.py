import heapq
import random
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mofsteer.domain import WorkerClass
from mofsteer.telemetry import Recorder


class FakeBackend:
    """Backend that only records what the engine asks of it."""

    def __init__(self, time=0.0, reassign_ok=True):
        self.time = time
        self.submitted = []
        self.later = []
        self.reassigned = []
        self.reassign_ok = reassign_ok

    def now(self):
        return self.time

    def submit(self, request):
        self.submitted.append(request)

    def call_later(self, delay, fn, *args):
        heapq.heappush(self.later, (self.time + delay, len(self.later), fn, args))

    def run_later(self):
        while self.later:
            t, _, fn, args = heapq.heappop(self.later)
            self.time = max(self.time, t)
            fn(*args)

    def reassign(self, src, dst):
        self.reassigned.append((src, dst))
        return self.reassign_ok


@pytest.fixture
def backend():
    return FakeBackend()


@pytest.fixture
def attach(backend):
    def _attach(engine):
        recorder = Recorder()
        engine.attach(backend, recorder)
        return backend, recorder
    return _attach


@pytest.fixture
def rng():
    return random.Random(12345)


# acceptance summary --------------------------------------------------------------

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
