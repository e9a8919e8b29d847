"""Training objectives composing final-layer CTC with intermediate CTC terms.

The deterministic variants mix the two losses as
(1 - w) * final + w * intermediate, where the intermediate term averages the
CTC losses read off one or more inner layers of the same forward pass.  The
stochastic variant instead picks one of the two losses per step with
probability w, which matches the deterministic mix in expectation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ctc import CTCHead, ctc_loss, greedy_decode
from .encoder import LayerTrace
from .tensor import Tensor, add, scale

VARIANTS = ("none", "middle", "lower", "multiple", "random", "stochastic")


@dataclass(frozen=True)
class IntermediateLossSpec:
    """Which intermediate representations get a CTC loss, and its weight."""

    variant: str = "middle"
    weight: float = 0.3
    count: int = 1          # number of sub-models for the multiple variant
    position: int | None = None  # explicit layer for the lower variant

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError(f"weight must be in [0, 1], got {self.weight}")
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")


@dataclass(frozen=True)
class ObjectivePlan:
    """Per-step resolution of the spec: concrete layer positions plus the
    stochastic branch draw (shared across a batch)."""

    positions: tuple[int, ...]
    branch: int | None = None  # stochastic variant: 1 = intermediate, 0 = final


@dataclass
class LossBreakdown:
    total: Tensor
    ctc_final: float
    ctc_intermediate: list[tuple[int, float]]  # (layer position, loss)
    chosen_branch: int | None = None


def resolve_positions(spec: IntermediateLossSpec, num_layers: int,
                      rng: np.random.Generator | None = None) -> list[int]:
    """Layer indices (1-based) whose representations receive a CTC loss.

    middle -> floor(L/2); lower -> the configured position (default
    floor(L/4)); multiple -> floor(k*L/(count+1)) for k=1..count; random ->
    one index drawn uniformly from [floor(L/2), L-1], fresh per step;
    stochastic -> floor(L/2).
    """
    if spec.variant == "none":
        return []
    if num_layers < 2:
        raise ValueError("intermediate losses need at least 2 layers")
    if spec.variant in ("middle", "stochastic"):
        positions = [num_layers // 2]
    elif spec.variant == "lower":
        positions = [spec.position if spec.position is not None else num_layers // 4]
    elif spec.variant == "multiple":
        positions = [(k * num_layers) // (spec.count + 1)
                     for k in range(1, spec.count + 1)]
    else:  # random
        if rng is None:
            raise ValueError("random variant needs an rng")
        positions = [int(rng.integers(num_layers // 2, num_layers))]
    bad = [p for p in positions if not 1 <= p <= num_layers - 1]
    if bad:
        raise ValueError(
            f"intermediate positions {bad} outside [1, {num_layers - 1}]")
    return positions


def plan_step(spec: IntermediateLossSpec, num_layers: int,
              rng: np.random.Generator | None = None) -> ObjectivePlan:
    """Draw the per-step randomness once so a whole batch shares it."""
    positions = tuple(resolve_positions(spec, num_layers, rng))
    branch = None
    if spec.variant == "stochastic":
        if rng is None:
            raise ValueError("stochastic variant needs an rng")
        branch = int(rng.random() < spec.weight)
    return ObjectivePlan(positions, branch)


@dataclass
class CTCHeads:
    """Output heads for the final and intermediate representations; by
    default one shared projection serves both."""

    final: CTCHead
    intermediate: CTCHead

    @classmethod
    def shared(cls, head: CTCHead) -> "CTCHeads":
        return cls(head, head)

    @property
    def is_shared(self) -> bool:
        return self.intermediate is self.final

    def parameters(self) -> dict[str, Tensor]:
        if self.is_shared:
            return {f"head.{k}": v for k, v in self.final.parameters().items()}
        named = {f"head_final.{k}": v for k, v in self.final.parameters().items()}
        named.update({f"head_inter.{k}": v
                      for k, v in self.intermediate.parameters().items()})
        return named


def total_loss(trace: LayerTrace, labels: Sequence[int],
               spec: IntermediateLossSpec, heads: CTCHeads,
               rng: np.random.Generator | None = None,
               plan: ObjectivePlan | None = None) -> LossBreakdown:
    """Compose the training loss for one utterance from an encoder trace.

    With variant none (or weight 0 and no stochastic draw) the result is
    bit-identical to the plain final-layer CTC loss.  Pass a precomputed
    `plan` to share one step's draws across a batch; otherwise the rng is
    consumed here.
    """
    if plan is None:
        plan = plan_step(spec, trace.num_layers, rng)
    final = ctc_loss(heads.final(trace.final), labels)
    if spec.variant == "none":
        return LossBreakdown(final, final.item(), [])

    inter_losses = [(pos, ctc_loss(heads.intermediate(trace.states[pos - 1]), labels))
                    for pos in plan.positions]
    breakdown = [(pos, loss.item()) for pos, loss in inter_losses]

    if spec.variant == "stochastic":
        total = inter_losses[0][1] if plan.branch else final
        return LossBreakdown(total, final.item(), breakdown, plan.branch)

    intermediate = inter_losses[0][1]
    for _, loss in inter_losses[1:]:
        intermediate = add(intermediate, loss)
    if len(inter_losses) > 1:
        intermediate = scale(intermediate, 1.0 / len(inter_losses))
    if spec.weight == 0.0:
        return LossBreakdown(final, final.item(), breakdown)
    total = add(scale(final, 1.0 - spec.weight), scale(intermediate, spec.weight))
    return LossBreakdown(total, final.item(), breakdown)


def eval_decode(trace: LayerTrace, heads: CTCHeads) -> tuple[int, ...]:
    """Greedy decode from the final representation only; intermediate heads
    play no part at test time."""
    return greedy_decode(heads.final(trace.final).data)
