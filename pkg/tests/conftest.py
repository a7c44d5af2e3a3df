import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from g2d.datagen import DatasetSpec, ModalitySpec, generate  # noqa: E402
from g2d.trainer import RunConfig, build_teacher_cache, train_teachers  # noqa: E402

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# acceptance verdicts, printed in the terminal summary even when output is captured
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_spec(seed=0, num_classes=3, n_train=48, **kw):
    return DatasetSpec(modalities=(ModalitySpec("a", 5, 0.9, 0.5), ModalitySpec("v", 4, 0.4, 0.5)),
                       num_classes=num_classes, n_train=n_train, n_val=24, n_test=30, seed=seed, **kw)


def tiny_config(**kw):
    base = dict(tau=(2, 2), epochs=4, hidden=8, feature_dim=4, fused_dim=4, batch_size=8, lr=0.01,
                teacher_epochs=6, seed=3)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def tiny_setup():
    """Tiny classification dataset with trained teachers and their cache."""
    ds = generate(tiny_spec())
    cfg = tiny_config()
    teachers = train_teachers(ds, cfg)
    return ds, cfg, teachers, build_teacher_cache(teachers, ds)


# -- benchmark sweeps shared by the acceptance criteria --------------------------

BENCH_SEEDS = (0, 1, 2, 3, 4)


class Timed:
    def __init__(self, outcomes, seconds):
        self.outcomes = outcomes
        self.seconds = seconds

    def by_label(self, label):
        return [o for o in self.outcomes if o.label == label]


def _timed_sweep(source, base, variants, keep_results=False):
    import time

    from g2d.experiment import sweep

    start = time.perf_counter()
    out = sweep(source, base, variants, BENCH_SEEDS, keep_results=keep_results)
    return Timed(out, time.perf_counter() - start)


@pytest.fixture(scope="session")
def classify_main():
    """Joint-train and default G2D on the 0.9/0.4 classification benchmark, 5 seeds."""
    from g2d.experiment import SpecSource, Variant, benchmark_config, benchmark_spec

    return _timed_sweep(SpecSource(benchmark_spec()), benchmark_config(),
                        [Variant("joint", "joint"), Variant("g2d")], keep_results=True)


@pytest.fixture(scope="session")
def classify_ablations():
    """Suppression modes and shorter first phases on the same benchmark."""
    from g2d.experiment import SpecSource, Variant, benchmark_config, benchmark_spec

    variants = [Variant("none", overrides={"suppression": "none"}),
                Variant("partial", overrides={"suppression": "partial"}),
                Variant("tau1=0", overrides={"tau": (0, 30)}),
                Variant("tau1=15", overrides={"tau": (15, 30)})]
    return _timed_sweep(SpecSource(benchmark_spec()), benchmark_config(), variants, keep_results=True)
