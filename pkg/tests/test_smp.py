import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from g2d.errors import ConfigError, ContractError
from g2d.scoring import ConfidenceScore, ModalityRanking
from g2d.smp import Schedule, modulation_mask, partial_mask, prioritized_set
from oracles import phase_literal, prioritized_literal

schedules = st.integers(1, 4).flatmap(
    lambda k: st.tuples(st.lists(st.integers(0, 6), min_size=k - 1, max_size=k - 1), st.integers(1, 6))
).map(lambda p: tuple(p[0]) + (p[1],))


def test_two_phase_example():
    sched, ranking = Schedule((150, 150)), ModalityRanking((1, 0))
    for e in (1, 75, 150):
        assert prioritized_set(e, sched, ranking) == {1}
    for e in (151, 300):
        assert prioritized_set(e, sched, ranking) == {0, 1}


def test_three_phase_example():
    ranking = ModalityRanking((2, 0, 1))
    assert prioritized_set(100, Schedule((75, 75, 150)), ranking) == {ranking[1]}


def test_empty_first_phase_starts_in_next():
    sched = Schedule((0, 150))
    assert sched.phase(1) == 2
    assert prioritized_set(1, sched, ModalityRanking((1, 0))) == {0, 1}


def test_epoch_out_of_range():
    sched = Schedule((2, 2))
    for e in (0, 5):
        with pytest.raises(ContractError):
            sched.phase(e)


def test_schedule_validation():
    for tau in ((), (3, -1, 2), (3, 0)):
        with pytest.raises(ConfigError):
            Schedule(tau)


def test_ranking_length_must_match():
    with pytest.raises(ContractError):
        prioritized_set(1, Schedule((1, 1)), ModalityRanking((0, 1, 2)))


@given(schedules, st.randoms())
def test_phases_partition_epochs(tau, rnd):
    sched = Schedule(tau)
    phases = [sched.phase(e) for e in range(1, sched.total + 1)]
    assert phases == sorted(phases)
    for j in range(1, len(tau) + 1):
        assert phases.count(j) == tau[j - 1]
    assert sched.boundaries == list(np.cumsum(tau))
    ranking = ModalityRanking(tuple(rnd.sample(range(len(tau)), len(tau))))
    for e in range(1, sched.total + 1):
        assert sched.phase(e) == phase_literal(e, tau)
        assert set(prioritized_set(e, sched, ranking)) == prioritized_literal(e, tau, ranking.order)


# -- masks ------------------------------------------------------------------

def test_modulation_mask_examples():
    assert modulation_mask({0, 1}, [0, 1]).kappa == (1.0, 1.0)
    assert modulation_mask({1}, [0, 1]).kappa == (0.0, 1.0)


def test_modulation_mask_errors():
    with pytest.raises(ContractError):
        modulation_mask(set(), [0, 1])
    with pytest.raises(ContractError):
        modulation_mask({2}, [0, 1])


@given(schedules, st.randoms())
def test_complete_masks_never_all_zero(tau, rnd):
    sched = Schedule(tau)
    k = len(tau)
    ranking = ModalityRanking(tuple(rnd.sample(range(k), k)))
    for e in range(1, sched.total + 1):
        kappa = modulation_mask(prioritized_set(e, sched, ranking), list(range(k))).kappa
        assert max(kappa) == 1.0
        if sched.phase(e) == k:
            assert kappa == (1.0,) * k


def test_partial_equal_scores():
    mask = partial_mask([ConfidenceScore(0, 0.5), ConfidenceScore(1, 0.5)])
    assert mask.kappa[0] == 1.0
    assert mask.kappa[1] == pytest.approx(1 - math.tanh(1.0))
    assert 1 - math.tanh(1.0) == pytest.approx(0.238406, abs=1e-6)


def test_partial_limit_goes_to_zero():
    mask = partial_mask([ConfidenceScore(0, 0.99), ConfidenceScore(1, 1e-6)])
    assert mask.kappa == (pytest.approx(0.0, abs=1e-12), 1.0)


def test_partial_zero_weak_score():
    with pytest.raises(ContractError):
        partial_mask([ConfidenceScore(0, 0.0), ConfidenceScore(1, 0.4)])


@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=4))
def test_partial_mask_range(rhos):
    sc = [ConfidenceScore(m, r) for m, r in enumerate(rhos)]
    kappa = partial_mask(sc).kappa
    weakest = min(range(len(rhos)), key=lambda m: (rhos[m], m))
    assert kappa[weakest] == 1.0
    assert all(0.0 < kap <= 1.0 for kap in kappa)
    for m, r in enumerate(rhos):
        if m != weakest:
            assert kappa[m] == pytest.approx(1 - math.tanh(r / rhos[weakest]))
