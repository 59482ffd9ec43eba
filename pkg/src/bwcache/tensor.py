"""Dense numeric primitives shared by the sampler, the denoiser and the metrics.

Arrays are plain numpy ndarrays in C (row-major) order. The working precision
of the pipeline is float32; distances and quality metrics accumulate in
float64 on top of these primitives. Every op validates shapes up front and
checks its output for NaN/Inf, so failures surface at the op that produced
them instead of three modules later.

Determinism has two tiers:

* Default mode dispatches matmuls to BLAS. On a given machine and build this
  is bit-reproducible run to run, which is what the reproducibility tests
  rely on, but the exact bits may differ across machines or BLAS builds.
* Deterministic mode (``set_deterministic(True)``) routes matmuls through a
  fixed-order einsum contraction that never changes its accumulation order
  with thread count or kernel selection. It is several times slower and only
  worth it when byte-stable exports matter more than speed.

The random stream is a SplitMix64 counter generator (golden-gamma increment,
two xor-multiply finalizer rounds) mapped to normals with Box-Muller. It is
specified to the bit so that a fixed seed pins every weight and latent in the
package, independent of numpy's own Generator machinery.
"""

from __future__ import annotations

import math

import numpy as np

Tensor = np.ndarray

LAYER_NORM_EPS = 1e-5

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class DimensionError(ValueError):
    """Raised when operand shapes do not match an op's contract."""


class NonFiniteError(ArithmeticError):
    """Raised when an op produces NaN or Inf."""


_deterministic = False


def set_deterministic(enabled: bool) -> None:
    """Toggle fixed-order accumulation for all subsequent matmuls."""
    global _deterministic
    _deterministic = bool(enabled)


def is_deterministic() -> bool:
    return _deterministic


def _check_finite(out: Tensor, op: str) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Product of a [m, k] and b [k, n] in the operands' dtype."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if _deterministic:
        out = np.einsum("ik,kj->ij", a, b)
    else:
        out = a @ b
    return _check_finite(out, "matmul")


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    """Stacked product of a [g, m, k] and b [g, k, n], one matmul per leading index."""
    if a.ndim != 3 or b.ndim != 3:
        raise DimensionError(f"batched_matmul expects 3-d operands, got {a.shape} @ {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"batched_matmul shapes incompatible: {a.shape} @ {b.shape}")
    if _deterministic:
        out = np.einsum("gik,gkj->gij", a, b)
    else:
        out = a @ b
    return _check_finite(out, "batched_matmul")


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Row-wise normalization followed by the modulation x_hat * (1 + scale) + shift.

    Uses the population variance stabilized by LAYER_NORM_EPS. ``scale`` and
    ``shift`` are 1-d over the feature axis; scale == shift == 0 is plain
    layer norm.
    """
    if x.ndim != 2:
        raise DimensionError(f"layer_norm expects a 2-d input, got {x.shape}")
    if scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise DimensionError(
            f"layer_norm modulation shapes {scale.shape}/{shift.shape} "
            f"do not match feature width {x.shape[1]}"
        )
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)  # population variance, not sample
    normed = (x - mean) / np.sqrt(var + LAYER_NORM_EPS)
    out = normed * (1.0 + scale) + shift
    return _check_finite(out, "layer_norm")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, max-subtracted so large scores stay finite."""
    if x.ndim < 1 or x.shape[-1] == 0:
        raise DimensionError(f"softmax_rows needs a non-empty last axis, got {x.shape}")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    return _check_finite(out, "softmax_rows")


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    c = math.sqrt(2.0 / math.pi)
    out = 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x * x * x)))
    return _check_finite(out, "gelu")


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def mix_seed(seed: int, salt: int) -> int:
    """Derive an independent stream seed from (seed, salt) with one finalizer pass."""
    return _mix64((seed ^ ((salt + 1) * _GAMMA)) & _MASK64)


class Rng:
    """SplitMix64 stream. Same seed, same sequence, on every platform."""

    __slots__ = ("_state",)

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    @property
    def state(self) -> int:
        return self._state

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        return _mix64(self._state)

    def _bulk_u64(self, n: int) -> Tensor:
        # Counter form of the scalar loop: output i is mix64(state + i * gamma),
        # so the vectorized path emits exactly the scalar sequence.
        idx = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self._state) + idx * np.uint64(_GAMMA)
        self._state = (self._state + n * _GAMMA) & _MASK64
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))


def rand_normal(rng: Rng, shape: tuple[int, ...] | int, dtype=np.float32) -> Tensor:
    """Standard normals via Box-Muller over the (0, 1] uniforms of ``rng``.

    Draws are consumed in pairs; an odd-sized request still advances the
    stream by the rounded-up even count, so requests of n and n+1 values
    agree on their common prefix.
    """
    if isinstance(shape, int):
        shape = (shape,)
    n = 1
    for s in shape:
        if s < 0:
            raise DimensionError(f"negative dimension in {shape}")
        n *= s
    m = n + (n & 1)
    bits = rng._bulk_u64(m)
    # Top 53 bits, shifted into (0, 1] so log() below never sees zero.
    u = ((bits >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u1, u2 = u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = (2.0 * math.pi) * u2
    out = np.empty(m, dtype=np.float64)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n].reshape(shape).astype(dtype)
