import numpy as np
import pytest

from fpfuse.benchmark import run_seed
from fpfuse.crowdsourcing import Anchor
from fpfuse.simulation import PathSpec, TraceConfig, WorldConfig, generate_world, synthesize_trace

BENCHMARK_SEEDS = range(10)


@pytest.fixture(scope="session")
def small_world():
    return generate_world(WorldConfig(width=40.0, height=24.0, ap_region=(0.0, 1.0, 0.0, 1.0), n_dipoles=12, seed=7))


@pytest.fixture(scope="session")
def walk_60s(small_world):
    """Noise-free ~60 s rectangle walk with the true start pose."""
    spec = PathSpec(np.array([[5.0, 5.0], [30.0, 5.0], [30.0, 18.0], [8.0, 18.0]]), static_start=5.0,
                    static_end=3.0)
    return synthesize_trace(small_world, spec, cfg=TraceConfig(with_noise=False, anchors=True), seed=11,
                            trace_id="walk60")


@pytest.fixture(scope="session")
def benchmark_run():
    """Full synthetic benchmark over ten seeds with its wall time; shared by the slow checks."""
    import time

    t0 = time.perf_counter()
    results = [run_seed(s) for s in BENCHMARK_SEEDS]
    return results, time.perf_counter() - t0


@pytest.fixture(scope="session")
def benchmark_results(benchmark_run):
    return benchmark_run[0]


def rng(seed=0):
    return np.random.default_rng(seed)


__all__ = ["Anchor", "rng"]


SMALL_CONFIG = '{"simulation": {"n_survey": 10, "survey_length": 120.0, "n_test": 1, "test_length": 80.0}}\n'


def run_cli_pipeline(out, config, strategies=("ct", "mcm"), mode="dwm"):
    """Every CLI stage in order; returns the list of exit codes."""
    import os

    from fpfuse.cli import main

    out = os.fspath(out)
    base = ["--config", os.fspath(config), "--out", out, "--seed", "1"]
    codes = [main(["simulate", *base])]
    codes.append(main(["build-db", *base, "--traces", f"{out}/survey"]))
    codes.append(main(["fit-aps", *base, "--db", f"{out}/db_wifi.json", "--samples", f"{out}/samples_wifi.jsonl"]))
    codes.append(main(["train-mc", *base, "--db-wifi", f"{out}/db_wifi.json", "--tracks", f"{out}/tracks.csv",
                       "--traces", f"{out}/survey"]))
    for s in strategies:
        codes.append(main(["run", *base, "--strategy", s, "--mode", mode, "--traces", f"{out}/test",
                           "--db-wifi", f"{out}/db_wifi.json", "--db-mag", f"{out}/db_mag.json"]))
    codes.append(main(["eval", *base, "--mode", mode]))
    return codes


def tree_digest(root):
    """Relative path -> file bytes for every file under ``root``."""
    import pathlib

    root = pathlib.Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
