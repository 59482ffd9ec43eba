"""Block-feature caching across denoising steps.

The sampler walks timesteps from T-1 down to 0. After any fully computed
step, the outputs of all N blocks are kept as the cache. On the next computed
step, each block's fresh output is compared to its cached counterpart with a
relative L1 distance

    l1_rel(cur, prev) = sum |cur - prev| / sum |prev|

and the per-block distances are aggregated into their sum (arl1) and mean.
The mean is the reuse indicator: once it drops strictly below the threshold
delta, consecutive step outputs are similar enough that whole steps can be
skipped by substituting the cached features and re-running only the readout.

Reuse is bounded in two ways. A reuse run may grow to at most the reuse
interval R, after which one step is recomputed (a refresh) and the indicator
is re-evaluated against the refreshed features before reuse may resume. And
once reuse first triggers at step k, a protected tail of the remaining steps
(a fixed fraction of k + 1, or a fixed count) is always recomputed, because
late steps decide fine detail and are the wrong place to save work. The
trigger step is frozen at its first value so the tail boundary never moves.

Two baselines share the same decision interface: ``none`` computes every
step (and still records distances, which is how full heatmaps are made), and
``static`` recomputes on a fixed stride regardless of the indicator.

``decide`` is a pure function from (state, indicator, position) to (action,
new state); ``run_policy`` drives it against the real model, and
``replay_trace`` drives it against a recorded distance table with no model
at all, which makes policy questions cheap to answer offline.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from typing import Sequence

import numpy as np

from bwcache import tensor as _tensor
from bwcache.model import (
    ModelConfig,
    NoiseSchedule,
    denoiser_forward,
    init_weights,
    readout_matrix,
    reverse_step,
    sample_initial_latent,
)
from bwcache.tensor import DimensionError, Tensor, matmul


class PolicyKind(str, Enum):
    NONE = "none"
    BWCACHE = "bwcache"
    STATIC = "static"


class Action(str, Enum):
    COMPUTED = "computed"
    REUSED = "reused"


class Mode(str, Enum):
    COMPUTING = "computing"
    CACHING = "caching"


class ZeroDenominatorError(ValueError):
    """Raised when the reference features have zero L1 mass."""


class ProtocolError(RuntimeError):
    """Raised when decide() is driven without an indicator it needs."""


_FRACTION_NAMES = {
    Fraction(1, 3): "third",
    Fraction(1, 2): "half",
    Fraction(2, 3): "twothirds",
}


@dataclass(frozen=True)
class TailRule:
    """Size of the always-recomputed tail once reuse has triggered at step k.

    Either a fraction of the k + 1 remaining steps (ceil, exact integer
    arithmetic) or a fixed count. Only the fractions 1/3, 1/2 and 2/3 are
    meaningful here; anything else is a config error.
    """

    fraction: Fraction | None = None
    fixed_count: int | None = None

    def __post_init__(self):
        if (self.fraction is None) == (self.fixed_count is None):
            raise ValueError("tail rule needs exactly one of fraction or fixed_count")
        if self.fraction is not None and self.fraction not in _FRACTION_NAMES:
            raise ValueError(f"unsupported tail fraction {self.fraction}")
        if self.fixed_count is not None and self.fixed_count < 0:
            raise ValueError("fixed tail count must be nonnegative")

    @classmethod
    def third(cls) -> "TailRule":
        return cls(fraction=Fraction(1, 3))

    @classmethod
    def half(cls) -> "TailRule":
        return cls(fraction=Fraction(1, 2))

    @classmethod
    def twothirds(cls) -> "TailRule":
        return cls(fraction=Fraction(2, 3))

    @classmethod
    def fixed(cls, count: int) -> "TailRule":
        return cls(fixed_count=count)

    @classmethod
    def parse(cls, text: str) -> "TailRule":
        """Parse 'third' | 'half' | 'twothirds' | 'fixed:<m>'."""
        names = {v: k for k, v in _FRACTION_NAMES.items()}
        if text in names:
            return cls(fraction=names[text])
        if text.startswith("fixed:"):
            try:
                return cls.fixed(int(text.split(":", 1)[1]))
            except ValueError as exc:
                raise ValueError(f"bad fixed tail count in {text!r}") from exc
        raise ValueError(f"unknown tail rule {text!r}")

    def canonical(self) -> str:
        if self.fraction is not None:
            return _FRACTION_NAMES[self.fraction]
        return f"fixed:{self.fixed_count}"

    def size(self, trigger_step: int) -> int:
        """Number of final steps (step < size) protected after a trigger at k."""
        if self.fixed_count is not None:
            return self.fixed_count
        remaining = trigger_step + 1  # steps k, k-1, ..., 0 inclusive
        num = remaining * self.fraction.numerator
        return -(-num // self.fraction.denominator)


@dataclass(frozen=True)
class CachePolicyConfig:
    kind: PolicyKind = PolicyKind.BWCACHE
    delta: float = 0.15
    reuse_interval: int = 3
    tail: TailRule = field(default_factory=TailRule.half)
    static_stride: int = 3

    def __post_init__(self):
        if self.delta < 0.0:
            raise ValueError("delta must be nonnegative")
        if self.reuse_interval < 1:
            raise ValueError("reuse_interval must be at least 1")
        if self.static_stride < 1:
            raise ValueError("static_stride must be at least 1")

    @classmethod
    def recommended(cls, total_steps: int) -> "CachePolicyConfig":
        """delta 0.15, reuse interval ceil(T / 10), half tail."""
        return cls(
            kind=PolicyKind.BWCACHE,
            delta=0.15,
            reuse_interval=-(-total_steps // 10),
            tail=TailRule.half(),
        )


@dataclass
class BlockCacheState:
    """Mutable per-run cache state.

    ``decide`` only transitions the policy fields (mode, trigger_step,
    reuse_run_length); the runner owns the cached feature arrays.
    """

    mode: Mode = Mode.COMPUTING
    trigger_step: int | None = None
    reuse_run_length: int = 0
    cached_outputs: list[Tensor] | None = None
    cached_at_step: int | None = None


@dataclass(frozen=True)
class StepDecision:
    """What happened at one step, in execution order T-1 .. 0."""

    step: int
    action: Action
    per_block_l1: tuple[float, ...] | None
    mean_l1: float | None
    arl1: float | None


def relative_l1(current: Tensor, previous: Tensor) -> float:
    """sum |current - previous| / sum |previous|, accumulated in float64."""
    if current.shape != previous.shape:
        raise DimensionError(
            f"relative_l1 shapes differ: {current.shape} vs {previous.shape}"
        )
    prev64 = previous.astype(np.float64, copy=False)
    denom = float(np.abs(prev64).sum())
    if denom == 0.0:
        raise ZeroDenominatorError("reference features have zero L1 norm")
    num = float(np.abs(current.astype(np.float64, copy=False) - prev64).sum())
    return num / denom


def aggregate_distances(per_block: Sequence[float]) -> tuple[float, float]:
    """(arl1, mean): sum of the per-block distances and their mean."""
    if len(per_block) == 0:
        raise ValueError("aggregate_distances needs at least one distance")
    arl1 = float(sum(per_block))
    return arl1, arl1 / len(per_block)


def decide(
    state: BlockCacheState,
    mean_l1: float | None,
    step: int,
    total_steps: int,
    policy: CachePolicyConfig,
) -> tuple[Action, BlockCacheState]:
    """Choose compute vs reuse for ``step`` and return the successor state.

    ``mean_l1`` is the indicator measured at the most recent computed step,
    or None if that step had nothing to compare against (or the previous
    step was reused). Pure: the input state is not mutated.
    """
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside run of {total_steps} steps")
    exec_idx = total_steps - 1 - step

    if policy.kind is PolicyKind.NONE:
        return Action.COMPUTED, replace(state, mode=Mode.COMPUTING, reuse_run_length=0)

    if policy.kind is PolicyKind.STATIC:
        if exec_idx % policy.static_stride == 0:
            return Action.COMPUTED, replace(state, mode=Mode.COMPUTING, reuse_run_length=0)
        return Action.REUSED, replace(
            state, mode=Mode.CACHING, reuse_run_length=state.reuse_run_length + 1
        )

    # bwcache
    if exec_idx < 2:
        # Warmup: the first two executed steps establish cache and indicator.
        return Action.COMPUTED, replace(state, mode=Mode.COMPUTING, reuse_run_length=0)

    if state.trigger_step is not None and step < policy.tail.size(state.trigger_step):
        # Frozen protected tail: always recompute, trigger_step stays put.
        return Action.COMPUTED, replace(state, mode=Mode.COMPUTING, reuse_run_length=0)

    if state.mode is Mode.COMPUTING:
        if mean_l1 is None:
            raise ProtocolError(
                f"decide at step {step} needs an indicator but none was measured"
            )
        if mean_l1 < policy.delta:
            if state.trigger_step is None and step < policy.tail.size(step):
                # The candidate trigger would land inside its own tail: refuse.
                return Action.COMPUTED, replace(state, reuse_run_length=0)
            trigger = state.trigger_step if state.trigger_step is not None else step
            return Action.REUSED, replace(
                state, mode=Mode.CACHING, trigger_step=trigger, reuse_run_length=1
            )
        return Action.COMPUTED, replace(state, reuse_run_length=0)

    # caching mode
    if state.reuse_run_length >= policy.reuse_interval:
        # Mandatory refresh; next call re-evaluates against the fresh features.
        return Action.COMPUTED, replace(state, reuse_run_length=0)
    if state.reuse_run_length == 0:
        # Immediately after a refresh: the indicator decides whether to resume.
        if mean_l1 is None:
            raise ProtocolError(
                f"decide at step {step} follows a refresh but has no indicator"
            )
        if mean_l1 < policy.delta:
            return Action.REUSED, replace(state, reuse_run_length=1)
        return Action.COMPUTED, replace(state, mode=Mode.COMPUTING, reuse_run_length=0)
    return Action.REUSED, replace(state, reuse_run_length=state.reuse_run_length + 1)


def _require_valid_tail(policy: CachePolicyConfig, total_steps: int) -> None:
    if (
        policy.kind is PolicyKind.BWCACHE
        and policy.tail.fixed_count is not None
        and policy.tail.fixed_count >= total_steps
    ):
        raise ValueError(
            f"fixed tail of {policy.tail.fixed_count} covers the whole run "
            f"of {total_steps} steps"
        )


def _feature_digest(x: Tensor) -> str:
    import hashlib

    return hashlib.blake2b(x.tobytes(), digest_size=16).hexdigest()


def run_policy(
    config: ModelConfig,
    policy: CachePolicyConfig,
    cond: Tensor | None = None,
    initial_latent: Tensor | None = None,
    collect_digests: bool = False,
):
    """Sample under ``policy`` and return (final_latent, RunTrace).

    Computed steps run the full block stack, measure per-block distances
    against the previous cache when one exists, and replace the cache.
    Reused steps substitute the cached block features unchanged and re-run
    only the readout. In deterministic tensor mode the recorded timings are
    zeroed so exports are byte-stable.
    """
    from bwcache.traceio import RunTrace, config_fingerprint

    _require_valid_tail(policy, config.steps)
    total = config.steps
    weights = init_weights(config)
    schedule = NoiseSchedule.linear(total)
    readout = readout_matrix(config)
    x = sample_initial_latent(config) if initial_latent is None else initial_latent
    if x.shape != (config.tokens, config.hidden_dim):
        raise DimensionError(
            f"initial latent shape {x.shape} != ({config.tokens}, {config.hidden_dim})"
        )

    state = BlockCacheState()
    mean_l1: float | None = None
    decisions: list[StepDecision] = []
    timings: list[float] = []
    digests: list[tuple[str, ...]] = []

    for step in range(total - 1, -1, -1):
        t0 = time.perf_counter()
        action, state = decide(state, mean_l1, step, total, policy)
        if action is Action.COMPUTED:
            eps_pred, outputs = denoiser_forward(x, step, weights, config, cond)
            if state.cached_outputs is not None:
                per_block = tuple(
                    relative_l1(outputs[i], state.cached_outputs[i])
                    for i in range(config.n_blocks)
                )
                arl1, mean_l1 = aggregate_distances(per_block)
                decisions.append(StepDecision(step, action, per_block, mean_l1, arl1))
            else:
                mean_l1 = None
                decisions.append(StepDecision(step, action, None, None, None))
            state.cached_outputs = outputs
            state.cached_at_step = step
        else:
            outputs = state.cached_outputs
            if outputs is None:
                raise ProtocolError(f"reuse decided at step {step} with an empty cache")
            eps_pred = matmul(outputs[-1], readout)
            mean_l1 = None
            decisions.append(StepDecision(step, action, None, None, None))
        if collect_digests:
            digests.append(tuple(_feature_digest(o) for o in outputs))
        x = reverse_step(x, eps_pred, step, schedule)
        timings.append(time.perf_counter() - t0)

    if _tensor.is_deterministic():
        timings = [0.0] * total
    trace = RunTrace(
        decisions=decisions,
        timings=timings,
        config_fingerprint=config_fingerprint(config, policy),
        final_latent=x,
        feature_digests=digests if collect_digests else None,
    )
    return x, trace


def replay_trace(
    rows: Sequence[Sequence[float | None]],
    policy: CachePolicyConfig,
) -> list[StepDecision]:
    """Re-run the decision machine over a recorded distance table.

    ``rows`` is execution-ordered (step T-1 first), one sequence of N
    per-block distances per step. A distance may be None only where the
    policy never reads it: the first executed step (which has no previous
    cache even live) and steps the replayed policy reuses. Distances at
    reused steps are ignored, matching live behavior where nothing is
    measured there.
    """
    total = len(rows)
    if total < 2:
        raise ValueError("replay needs at least two steps")
    n_blocks = len(rows[0])
    if n_blocks == 0:
        raise ValueError("replay needs at least one block per step")
    for i, row in enumerate(rows):
        if len(row) != n_blocks:
            raise ValueError(
                f"ragged trace: execution index {i} has {len(row)} values, expected {n_blocks}"
            )
    _require_valid_tail(policy, total)

    state = BlockCacheState()
    mean_l1: float | None = None
    decisions: list[StepDecision] = []
    for exec_idx, step in enumerate(range(total - 1, -1, -1)):
        action, state = decide(state, mean_l1, step, total, policy)
        if action is Action.COMPUTED:
            if exec_idx == 0:
                # Live, the first computed step has nothing to compare against.
                mean_l1 = None
                decisions.append(StepDecision(step, action, None, None, None))
            else:
                row = rows[exec_idx]
                if any(v is None for v in row):
                    raise ValueError(
                        f"trace is missing distances at step {step} "
                        f"(execution index {exec_idx}), needed for a computed step"
                    )
                per_block = tuple(float(v) for v in row)
                arl1, mean_l1 = aggregate_distances(per_block)
                decisions.append(StepDecision(step, action, per_block, mean_l1, arl1))
        else:
            mean_l1 = None
            decisions.append(StepDecision(step, action, None, None, None))
    return decisions
