"""Shared fixtures: scenario bundles and closed-loop runs are built once
per session because synthesis takes tens of seconds."""

from __future__ import annotations

import time
from pathlib import Path

import pytest

from ellipsoidal_rhc.harness import RunOptions, build_scenario_1, build_scenario_2, run, synthesize

SCENARIO_DIR = Path(__file__).resolve().parents[1] / "scenarios"


class Built:
    """A synthesized bundle with its wall time."""

    def __init__(self, scn, fp, seconds):
        self.scn = scn
        self.fp = fp
        self.seconds = seconds


def _build(scn):
    t0 = time.perf_counter()
    fp = synthesize(scn)
    return Built(scn, fp, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def scenario_dir():
    return SCENARIO_DIR


@pytest.fixture(scope="session")
def s1():
    return _build(build_scenario_1())


@pytest.fixture(scope="session")
def s2():
    return _build(build_scenario_2())


@pytest.fixture(scope="session")
def s1_bundle_file(s1, tmp_path_factory):
    path = tmp_path_factory.mktemp("bundles") / "scenario1.json"
    s1.fp.save(path)
    return path


@pytest.fixture(scope="session")
def s2_bundle_file(s2, tmp_path_factory):
    path = tmp_path_factory.mktemp("bundles") / "scenario2.json"
    s2.fp.save(path)
    return path


@pytest.fixture(scope="session")
def s1_run(s1):
    t0 = time.perf_counter()
    trace = run(s1.scn, s1.fp, RunOptions())
    return trace, time.perf_counter() - t0


@pytest.fixture(scope="session")
def s2_run(s2):
    t0 = time.perf_counter()
    trace = run(s2.scn, s2.fp, RunOptions())
    return trace, time.perf_counter() - t0
