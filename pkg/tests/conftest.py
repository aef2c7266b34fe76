"""Shared toy-training runs; each is executed once per session."""

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest

from gdgt.data import FixedPatchSampler, toy_patch_pool
from gdgt.model import GDGT, ModelConfig
from gdgt.training import TrainConfig, train_loop

TOY_DROP = 0.8


@dataclass
class ToyRun:
    trace: list
    final: bytes
    seconds: float
    model: GDGT
    names: set = field(default_factory=set)


def toy_run(out_dir: Path, iters: int | None = None, **model_kw) -> ToyRun:
    """Toy overfit: 1 DAB x 2 DAL, C=32, s=2, 8 patches (HR 64x64).

    With ``iters`` unset the run stops once WS-l1 has fallen by 80% from its
    iteration-0 value, capped at the 2000-iteration schedule.
    """
    model = GDGT(ModelConfig.toy(**model_kw))
    pool = toy_patch_pool(n=8, patch=32, scale=2)
    cfg = TrainConfig(batch=8, patch=32, total_iters=2000, seed=0, log_every=0)

    def early(it, loss, trace):
        return loss <= (1 - TOY_DROP) * trace[0][2]

    t0 = time.perf_counter()
    res = train_loop(model, FixedPatchSampler(pool), cfg, out_dir, stop_after=iters, early_stop=None if iters else early)
    return ToyRun(res.trace, res.final_path.read_bytes(), time.perf_counter() - t0, model, {n for n, _ in model.named_parameters()})


class _Cache:
    def __init__(self, root: Path):
        self.root, self.runs = root, {}

    def get(self, key: str, iters=None, **model_kw) -> ToyRun:
        if key not in self.runs:
            self.runs[key] = toy_run(self.root / key, iters, **model_kw)
        return self.runs[key]


@pytest.fixture(scope="session")
def toy_runs(tmp_path_factory):
    return _Cache(tmp_path_factory.mktemp("toy"))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ------------------------------------------------------- acceptance summary
_ACCEPTANCE: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    prev = _ACCEPTANCE.get(n, (title, True, 0.0))
    passed = prev[1] and not rep.failed and not (rep.when == "call" and rep.skipped)
    _ACCEPTANCE[n] = (title, passed, prev[2] + rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, passed, secs = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if passed else 'FAIL'}  {title}  ({secs:.2f} s)")
