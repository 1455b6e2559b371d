"""Seeded random streams and quasi-random sequences.

Every stochastic routine in the package draws from a :class:`SeededStream`,
a counter-based Philox generator keyed by ``(seed, stream_id)``. Distinct
stream ids give disjoint streams by construction, so per-customer and
per-route substreams can run on parallel workers or be replayed exactly
across counterfactual runs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

__all__ = [
    "SeededStream",
    "HaltonGrid",
    "derive_stream_id",
    "normal_draw",
    "normal_array",
    "inverse_gamma_draw",
    "gamma_array",
    "multinomial_draw",
    "halton_sequence",
    "normal_quantile",
    "normal_cdf",
    "first_primes",
]

_MASK64 = (1 << 64) - 1


def derive_stream_id(*parts: int | str) -> int:
    """Hash a tuple of ints/strings into a stable 64-bit substream selector.

    Uses blake2b rather than ``hash()`` so ids are identical across runs
    and platforms.
    """
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, (int, np.integer)):
            h.update(b"i" + int(part).to_bytes(16, "little", signed=True))
        elif isinstance(part, str):
            raw = part.encode("utf-8")
            h.update(b"s" + len(raw).to_bytes(4, "little") + raw)
        else:
            raise TypeError(f"stream id parts must be int or str, got {type(part)!r}")
    return int.from_bytes(h.digest(), "little")


@dataclass
class SeededStream:
    """A reproducible, independently advanceable random stream.

    Identical ``(seed, stream_id)`` pairs yield bit-identical draw
    sequences; distinct ids key disjoint Philox counter streams. One
    stream must never be shared by concurrent consumers; hand each worker
    its own :meth:`child`.
    """

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator | None = field(
        default=None, repr=False, compare=False
    )

    def generator(self) -> np.random.Generator:
        if self._gen is None:
            key = np.array(
                [self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64
            )
            self._gen = np.random.Generator(np.random.Philox(key=key))
        return self._gen

    def child(self, *parts: int | str) -> "SeededStream":
        """Derive an independent substream keyed by ``parts``."""
        return SeededStream(self.seed, derive_stream_id(self.stream_id, *parts))


@dataclass(frozen=True)
class HaltonGrid:
    """Specification of a Halton point set: first ``dimension`` primes as
    bases, ``count`` points, the leading ``skip`` points discarded."""

    dimension: int
    count: int
    skip: int = 0

    def __post_init__(self) -> None:
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.skip < 0:
            raise ValueError("skip must be >= 0")


def first_primes(n: int) -> list[int]:
    """First ``n`` primes by trial division (n is always small here)."""
    primes: list[int] = []
    candidate = 2
    while len(primes) < n:
        if all(candidate % p for p in primes):
            primes.append(candidate)
        candidate += 1
    return primes


def _radical_inverse(indices: np.ndarray, base: int) -> np.ndarray:
    out = np.zeros(indices.shape, dtype=np.float64)
    denom = np.ones(indices.shape, dtype=np.float64)
    rest = indices.astype(np.int64)
    while np.any(rest > 0):
        denom *= base
        rest, digit = np.divmod(rest, base)
        out += digit / denom
    return out


def halton_sequence(grid: HaltonGrid) -> np.ndarray:
    """Deterministic Halton points, shape ``(count, dimension)``.

    Row ``k``, column ``d`` is the radical inverse of ``skip + k + 1`` in
    the ``d``-th prime base, so every point lies strictly inside (0, 1).
    """
    bases = first_primes(grid.dimension)
    indices = np.arange(grid.skip + 1, grid.skip + grid.count + 1, dtype=np.int64)
    points = np.empty((grid.count, grid.dimension), dtype=np.float64)
    for d, base in enumerate(bases):
        points[:, d] = _radical_inverse(indices, base)
    return points


def normal_quantile(p: float) -> float:
    """Standard normal quantile function."""
    if not (0.0 < p < 1.0):
        raise ValueError(f"quantile argument must be in (0, 1), got {p}")
    return float(ndtri(p))


def normal_cdf(x: float) -> float:
    return float(ndtr(x))


def normal_draw(stream: SeededStream, mean: float, sd: float) -> float:
    """One draw from N(mean, sd^2); sd == 0 returns mean exactly."""
    if not (np.isfinite(mean) and np.isfinite(sd)):
        raise ValueError("normal_draw requires finite mean and sd")
    if sd < 0:
        raise ValueError(f"sd must be non-negative, got {sd}")
    if sd == 0:
        return float(mean)
    return float(mean + sd * stream.generator().standard_normal())


def normal_array(stream: SeededStream, shape: int | tuple[int, ...]) -> np.ndarray:
    """Standard normal draws in bulk (pre-draws for the chain kernels)."""
    return stream.generator().standard_normal(shape)


def inverse_gamma_draw(stream: SeededStream, shape: float, scale: float) -> float:
    """One inverse-gamma draw, as the reciprocal of a Gamma(shape, 1) draw
    times the scale."""
    if not (shape > 0 and scale > 0) or not (np.isfinite(shape) and np.isfinite(scale)):
        raise ValueError(f"inverse-gamma needs shape > 0, scale > 0; got ({shape}, {scale})")
    gen = stream.generator()
    g = gen.standard_gamma(shape)
    while g == 0.0:  # zero-probability guard for tiny shapes
        g = gen.standard_gamma(shape)
    return float(scale / g)


def gamma_array(stream: SeededStream, shape: float, n: int) -> np.ndarray:
    """Gamma(shape, 1) draws in bulk; zero draws bumped to the smallest
    normal double so inverse-gamma transforms stay finite."""
    if not shape > 0:
        raise ValueError(f"gamma shape must be positive, got {shape}")
    out = stream.generator().standard_gamma(shape, n)
    tiny = np.finfo(np.float64).tiny
    np.maximum(out, tiny, out=out)
    return out


def multinomial_draw(stream: SeededStream, probs: np.ndarray) -> int:
    """Index draw from a probability vector, via a single uniform."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size == 0:
        raise ValueError("probs must be a non-empty vector")
    if np.any(probs < 0) or not np.isclose(probs.sum(), 1.0, atol=1e-8):
        raise ValueError("probs must be non-negative and sum to 1")
    u = stream.generator().random()
    return int(np.searchsorted(np.cumsum(probs), u, side="right").clip(0, probs.size - 1))
