"""Shared fixtures: a lazily trained desk-scale model and the acceptance summary."""
import time
from functools import cached_property

import pytest

from pcomplete import data, train
from pcomplete.model import ModelConfig
from pcomplete.train import TrainConfig

DESK_LR = 1e-3
DESK_SHAPES = 128  # four categories x 32
DESK_POINTS = 256


class Desk:
    """Desk-scale training runs, each built on first use and shared by the session.

    Stage 1 fits the complete-shape auto-encoder once. Stage 2 then runs twice
    from that checkpoint: on partials seen at a fixed 50% visible ratio, and on
    partials whose ratio is drawn per pair from [0.2, 0.8]. Stage 3 continues
    from the mixed-ratio run.
    """

    def __init__(self, root):
        self.root = root
        self.seconds = {}

    def _timed(self, name, fn):
        start = time.perf_counter()
        out = fn()
        self.seconds[name] = time.perf_counter() - start
        return out

    def dataset(self, ratio):
        return data.make_dataset(data.DatasetConfig(shapes=DESK_SHAPES, n_points=DESK_POINTS,
                                                    visible_ratio=ratio, seed=0))

    @cached_property
    def fixed(self):
        return self.dataset(0.5)

    @cached_property
    def mixed(self):
        return self.dataset((0.2, 0.8))

    @cached_property
    def stage1(self):
        cfg = TrainConfig(stage=1, lr=DESK_LR)
        return self._timed("stage1", lambda: train.train_stage1(cfg, self.fixed, ModelConfig.desk(),
                                                                self.root / "s1"))

    @cached_property
    def stage2_fixed(self):
        cfg = TrainConfig(stage=2, lr=DESK_LR, eval_every=500)
        return self._timed("stage2_fixed", lambda: train.train_stage2(cfg, self.fixed, self.stage1.checkpoint,
                                                                      self.root / "s2_fixed"))

    @cached_property
    def stage2_mixed(self):
        cfg = TrainConfig(stage=2, lr=DESK_LR)
        return self._timed("stage2_mixed", lambda: train.train_stage2(cfg, self.mixed, self.stage1.checkpoint,
                                                                      self.root / "s2_mixed"))

    @cached_property
    def stage3(self):
        cfg = TrainConfig(stage=3, lr=DESK_LR)
        return self._timed("stage3", lambda: train.train_stage3(cfg, self.mixed, self.stage2_mixed.checkpoint,
                                                                out_dir=self.root / "s3"))


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    return Desk(tmp_path_factory.mktemp("desk"))


def pytest_configure(config):
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and not report.failed):
        return
    n, title = marker.args
    entry = item.config._criteria.setdefault(n, {"title": title, "failed": [], "ran": 0})
    if report.when == "call":
        entry["ran"] += 1
    if report.failed:
        entry["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter, config):
    criteria = getattr(config, "_criteria", {})
    if not criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(criteria):
        e = criteria[n]
        status = "FAIL" if e["failed"] or not e["ran"] else "PASS"
        extra = f" ({', '.join(e['failed'])})" if e["failed"] else ""
        terminalreporter.write_line(f"criterion {n:2d} {status}  {e['title']}{extra}")
