"""Sequential modality prioritization: phase schedule and modulation coefficients."""
from __future__ import annotations

import math
import sys
from dataclasses import dataclass
from itertools import accumulate
from typing import Iterable, Sequence

from .errors import ConfigError, ContractError
from .scoring import ConfidenceScore, ModalityRanking, rank_modalities


@dataclass(frozen=True)
class Schedule:
    """Epoch budget per phase: ``tau[j]`` epochs for the j-th weakest modality alone,
    the last entry for the joint phase."""

    tau: tuple[int, ...]

    def __post_init__(self):
        tau = tuple(int(t) for t in self.tau)
        object.__setattr__(self, "tau", tau)
        if len(tau) < 1:
            raise ConfigError("schedule needs at least one phase")
        if any(t < 0 for t in tau):
            raise ConfigError(f"phase lengths must be nonnegative: {tau}")
        if tau[-1] < 1:
            raise ConfigError("the joint phase needs at least one epoch")

    @property
    def k(self) -> int:
        return len(self.tau)

    @property
    def total(self) -> int:
        return sum(self.tau)

    @property
    def boundaries(self) -> list[int]:
        return list(accumulate(self.tau))

    def phase(self, epoch: int) -> int:
        """1-based phase index containing the 1-based ``epoch``."""
        if not 1 <= epoch <= self.total:
            raise ContractError(f"epoch {epoch} outside 1..{self.total}")
        for j, bound in enumerate(self.boundaries, start=1):
            if epoch <= bound:
                return j
        raise AssertionError("unreachable")


@dataclass(frozen=True)
class ModulationMask:
    kappa: tuple[float, ...]
    phase: int | None = None

    def __getitem__(self, m: int) -> float:
        return self.kappa[m]


def prioritized_set(epoch: int, schedule: Schedule, ranking: ModalityRanking) -> frozenset[int]:
    """Modalities allowed to update during ``epoch``."""
    if len(ranking) != schedule.k:
        raise ContractError(f"ranking has {len(ranking)} modalities, schedule has {schedule.k} phases")
    j = schedule.phase(epoch)
    if j == schedule.k:
        return frozenset(ranking.order)
    return frozenset({ranking[j - 1]})


def modulation_mask(prioritized: Iterable[int], all_modalities: Sequence[int],
                    phase: int | None = None) -> ModulationMask:
    """1 for prioritized modalities, 0 for the rest."""
    prioritized = set(prioritized)
    if not prioritized:
        raise ContractError("empty prioritized set would freeze every encoder")
    if not prioritized <= set(all_modalities):
        raise ContractError(f"prioritized {sorted(prioritized)} not within {list(all_modalities)}")
    return ModulationMask(tuple(1.0 if m in prioritized else 0.0 for m in all_modalities), phase)


def _one_minus_tanh(x: float) -> float:
    # 1 - tanh(x) = 2 e^{-2x} / (1 + e^{-2x}) for x >= 0; the naive form rounds to 0
    # once x > ~19, and the floor keeps kappa strictly positive when e^{-2x} underflows
    e = math.exp(-2.0 * x)
    return max(2.0 * e / (1.0 + e), sys.float_info.min)


def partial_mask(scores: Sequence[ConfidenceScore]) -> ModulationMask:
    """Soft suppression: every modality but the weakest gets ``1 - tanh(rho_m / rho_weak)``."""
    ranking = rank_modalities(scores)
    rho = {s.modality: s.rho for s in scores}
    weak = rho[ranking.weakest]
    if weak <= 0:
        raise ContractError("weakest modality has zero confidence")
    kappa = {m: 1.0 if m == ranking.weakest else _one_minus_tanh(r / weak) for m, r in rho.items()}
    return ModulationMask(tuple(kappa[m] for m in sorted(kappa)))
