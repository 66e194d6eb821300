"""Orthonormal 2D DCT-II on N x N blocks and multi-spectral channel pooling."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import DTYPE, DimensionError, Tensor, adaptive_avg_pool, record

SUPPORTED_SIZES = (2, 4, 8, 16, 32)


class InvalidSizeError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class DctBasis:
    """``basis1d[u, x] = c(u) * cos((2x + 1) u pi / 2N)``."""

    N: int
    basis1d: np.ndarray

    def pattern(self, u: int, v: int) -> np.ndarray:
        """The N x N basis image for frequency (u, v), compensation factors included."""
        return np.outer(self.basis1d[u], self.basis1d[v])


@dataclass(frozen=True)
class FrequencyAssignment:
    N: int
    order: tuple[tuple[int, int], ...]

    @property
    def n(self) -> int:
        return len(self.order)


@dataclass(frozen=True)
class MultiSpectralVector:
    """Per-channel DCT responses, shape (C,) or (B, C), in ``groups`` consecutive groups."""

    values: Tensor
    groups: int

    @property
    def channels(self) -> int:
        return self.values.shape[-1]

    @property
    def group_size(self) -> int:
        return self.channels // self.groups

    def group_of(self, k: int) -> int:
        return k // self.group_size


def compensation(u: int, N: int) -> float:
    return np.sqrt(1.0 / N) if u == 0 else np.sqrt(2.0 / N)


def make_basis(N: int) -> DctBasis:
    if N < 1:
        raise InvalidSizeError(f"DCT block size must be >= 1, got {N}")
    return _make_basis_cached(int(N))


@lru_cache(maxsize=None)
def _make_basis_cached(N: int) -> DctBasis:
    u = np.arange(N)[:, None]
    x = np.arange(N)[None, :]
    b = np.cos((2 * x + 1) * u * np.pi / (2 * N))
    b[0, :] *= np.sqrt(1.0 / N)
    b[1:, :] *= np.sqrt(2.0 / N)
    b.setflags(write=False)
    return DctBasis(N, b)


def _check_block(x, basis: DctBasis, what: str) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)
    if arr.shape[-2:] != (basis.N, basis.N):
        raise DimensionError(f"{what} expects trailing {basis.N}x{basis.N}, got {arr.shape}")
    return arr


def dct2(block, basis: DctBasis) -> Tensor:
    """Separable forward transform ``B f B^T``; leading axes are batched."""
    f = _check_block(block, basis, "dct2")
    b = basis.basis1d
    return Tensor(np.matmul(np.matmul(b, f), b.T))


def idct2(spectrum, basis: DctBasis) -> Tensor:
    F = _check_block(spectrum, basis, "idct2")
    b = basis.basis1d
    return Tensor(np.matmul(np.matmul(b.T, F), b))


def zigzag_order(N: int) -> FrequencyAssignment:
    """JPEG zigzag traversal of the N x N grid as (u, v) = (row, col) pairs."""
    if N < 1:
        raise InvalidSizeError(f"zigzag needs N >= 1, got {N}")
    order = []
    for s in range(2 * N - 1):
        diag = [(i, s - i) for i in range(N) if 0 <= s - i < N]
        # odd anti-diagonals run top-right to bottom-left
        order.extend(diag if s % 2 else diag[::-1])
    return FrequencyAssignment(N, tuple(order))


def channel_filters(channels: int, assignment: FrequencyAssignment, basis: DctBasis) -> np.ndarray:
    """(C, N, N) stack: channel k carries the basis image of its group's frequency."""
    n = assignment.n
    if channels % n:
        raise ConfigurationError(f"channel count C={channels} is not divisible by n={n}")
    if assignment.N != basis.N:
        raise ConfigurationError(f"assignment N={assignment.N} does not match basis N={basis.N}")
    size = channels // n
    filt = np.empty((channels, basis.N, basis.N), dtype=DTYPE)
    for i, (u, v) in enumerate(assignment.order):
        filt[i * size:(i + 1) * size] = basis.pattern(u, v)
    return filt


def multispectral_extract(
    f_spatial: Tensor, assignment: FrequencyAssignment, basis: DctBasis
) -> MultiSpectralVector:
    """Pool a (C, H, W) or (B, C, H, W) map to N x N and take one DCT coefficient per channel.

    Channels are split into ``assignment.n`` consecutive groups; group i keeps
    coefficient ``assignment.order[i]`` of each of its channels.
    """
    C = f_spatial.shape[-3]
    filt = channel_filters(C, assignment, basis)
    pooled = adaptive_avg_pool(f_spatial, basis.N)
    out = (pooled.data * filt).sum(axis=(-2, -1))
    vec = record(out, (pooled,), lambda g: (g[..., None, None] * filt,), "dct_project")
    return MultiSpectralVector(vec, assignment.n)


def dct2_direct(block) -> np.ndarray:
    """Reference transform: the defining quadruple sum, O(N^4). For verification only."""
    f = np.asarray(block.data if isinstance(block, Tensor) else block, dtype=DTYPE)
    N = f.shape[0]
    out = np.zeros((N, N), dtype=DTYPE)
    for u in range(N):
        for v in range(N):
            acc = 0.0
            for x in range(N):
                for y in range(N):
                    acc += f[x, y] * np.cos((2 * x + 1) * u * np.pi / (2 * N)) * np.cos((2 * y + 1) * v * np.pi / (2 * N))
            out[u, v] = compensation(u, N) * compensation(v, N) * acc
    return out
