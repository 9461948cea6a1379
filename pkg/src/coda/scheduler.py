"""Chained-domain curriculum: which target-side pool feeds each iteration.

The chain alternates an easy-pool segment and a longer hard-pool segment,
cycling until the chain budget runs out (hard truncation mid-cycle), after
which sampling mixes the whole target union. The stage is a pure function of
the iteration and the budgets, so any run's stage trace can be replayed from
its config alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

M1 = "M1"
M2 = "M2"
MIXED = "Mixed"
STRATEGIES = ("tradition", "cod", "cod_tra")

_MIXED_DOMAINS = ("M1", "M2", "target")


class SchedulerError(ValueError):
    pass


@dataclass(frozen=True)
class StageBudgets:
    m1_iters: int = 60
    m2_iters: int = 200
    chain_end: int = 600
    total_iters: int = 2000

    def __post_init__(self):
        if self.m1_iters <= 0 or self.m2_iters <= 0:
            raise SchedulerError("stage budgets must be positive")
        if self.chain_end > self.total_iters:
            raise SchedulerError("chain_end cannot exceed total_iters")

    @classmethod
    def reference_scaled(cls, scale: float, total_iters: int) -> "StageBudgets":
        """The 1.2k/4k/12k pattern shrunk by a uniform factor."""
        return cls(
            m1_iters=int(round(1200 * scale)),
            m2_iters=int(round(4000 * scale)),
            chain_end=int(round(12000 * scale)),
            total_iters=total_iters,
        )


def stage_at(t: int, budgets: StageBudgets) -> str:
    """Chain stage for iteration t: cycle easy/hard until chain_end, then mix."""
    if t < 0:
        raise SchedulerError(f"iteration must be non-negative, got {t}")
    if t >= budgets.chain_end:
        return MIXED
    offset = t % (budgets.m1_iters + budgets.m2_iters)
    return M1 if offset < budgets.m1_iters else M2


def strategy_stage(strategy: str, t: int, budgets: StageBudgets) -> str:
    """Stage under a named sampling strategy.

    tradition ignores the chain entirely; cod runs the cycle for the whole
    training; cod_tra chains first and mixes after chain_end.
    """
    if strategy == "tradition":
        if t < 0:
            raise SchedulerError(f"iteration must be non-negative, got {t}")
        return MIXED
    if strategy == "cod":
        full = StageBudgets(
            m1_iters=budgets.m1_iters,
            m2_iters=budgets.m2_iters,
            chain_end=budgets.total_iters,
            total_iters=budgets.total_iters,
        )
        return stage_at(t, full)
    if strategy == "cod_tra":
        return stage_at(t, budgets)
    raise SchedulerError(f"unknown strategy {strategy!r}")


def stage_domains(stage: str) -> tuple[str, ...]:
    if stage == M1:
        return ("M1",)
    if stage == M2:
        return ("M2",)
    if stage == MIXED:
        return _MIXED_DOMAINS
    raise SchedulerError(f"unknown stage {stage!r}")


def sample_target_batch(stage: str, samples, gen: np.random.Generator, batch_size: int):
    """Uniform draw (with replacement) over the stage's pooled samples."""
    domains = stage_domains(stage)
    pool = [s for s in samples if s.domain in domains]
    if not pool:
        raise SchedulerError(f"no samples available for stage {stage}")
    idx = gen.integers(0, len(pool), size=batch_size)
    return [pool[i] for i in idx]


def sample_source_batch(samples, gen: np.random.Generator, batch_size: int):
    """Source pool is sampled uniformly regardless of the chain stage."""
    pool = [s for s in samples if s.domain == "source"]
    if not pool:
        raise SchedulerError("no samples available for stage source")
    idx = gen.integers(0, len(pool), size=batch_size)
    return [pool[i] for i in idx]
