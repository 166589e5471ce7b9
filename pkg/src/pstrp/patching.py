"""Slicing cubes into patch sequences, shuffling them, and aligning predictions.

A cube of shape (L, C, 64, 64) is cut two ways: into an ``n_s`` x ``n_s``
grid of full-depth spatial patches, and into L single-frame temporal
patches. Shuffled sequences carry a :class:`Permutation` that maps each
sequence slot back to the patch's true position; :func:`align_matrix`
uses it to bring predicted order matrices back into canonical order so
that the diagonal holds the probability of the correct position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ValidationError

SPATIAL = "spatial"
TEMPORAL = "temporal"


@dataclass
class PatchSet:
    """An ordered stack of patches cut from one cube.

    ``patches`` has shape (n, L, C, h, w) for the spatial stream (row-major
    grid order) and (n, 1, C, 64, 64) for the temporal stream (patch k is
    frame k).
    """

    stream: str
    patches: np.ndarray
    grid: int | None = None

    @property
    def n(self) -> int:
        return self.patches.shape[0]

    def flattened(self) -> np.ndarray:
        """Patches as (n, patch_input_dim) row vectors, C-order."""
        return self.patches.reshape(self.n, -1)


@dataclass
class Permutation:
    """A bijection on slots: ``pi[slot]`` is the true position of the patch
    placed in that slot."""

    pi: np.ndarray
    seed: int | str | None = None

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=np.int64)
        if pi.ndim != 1 or not np.array_equal(np.sort(pi), np.arange(pi.size)):
            raise ValidationError(f"not a bijection on 0..{pi.size - 1}: {self.pi}")
        self.pi = pi

    @property
    def n(self) -> int:
        return self.pi.size

    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.pi)
        inv[self.pi] = np.arange(self.pi.size)
        return inv

    def inverted(self) -> "Permutation":
        return Permutation(self.inverse(), seed=self.seed)

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(np.arange(n))


@dataclass
class OrderPredictionMatrix:
    """Row-stochastic n x n matrix of position-label probabilities.

    Rows index slots; after :func:`align_matrix` they index true positions,
    so entry [k][k] is the predicted probability that the patch whose true
    position is k sits at position k.
    """

    m: np.ndarray
    aligned: bool = False

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValidationError(f"order matrix must be square, got {m.shape}")
        if m.min() < 0.0 or m.max() > 1.0 + 1e-6:
            raise ValidationError("order matrix entries must lie in [0, 1]")
        if not np.allclose(m.sum(axis=1), 1.0, atol=1e-6):
            raise ValidationError("order matrix rows must sum to 1")
        self.m = m

    @property
    def n(self) -> int:
        return self.m.shape[0]


def grid_geometry(cube_size: int, n_s: int) -> tuple[int, int]:
    """Patch side and crop offset for an n_s x n_s grid over a square cube.

    When the side is not divisible by n_s the grid covers a centered
    ``n_s * (cube_size // n_s)`` region so all patches stay equally sized.
    """
    if n_s < 1 or n_s > cube_size:
        raise ConfigError(f"spatial grid must be in 1..{cube_size}, got {n_s}")
    side = cube_size // n_s
    offset = (cube_size - side * n_s) // 2
    return side, offset


def slice_spatial(cube, n_s: int) -> PatchSet:
    """Cut a cube into n_s**2 full-depth patches in row-major grid order.

    Accepts a SpatioTemporalCube or a raw (L, C, H, W) array.
    """
    data = np.asarray(getattr(cube, "data", cube))
    if data.ndim != 4 or data.shape[2] != data.shape[3]:
        raise ValidationError(f"expected a (L, C, S, S) cube, got {data.shape}")
    length, channels, size, _ = data.shape
    side, off = grid_geometry(size, n_s)
    region = data[:, :, off : off + side * n_s, off : off + side * n_s]
    patches = (
        region.reshape(length, channels, n_s, side, n_s, side)
        .transpose(2, 4, 0, 1, 3, 5)
        .reshape(n_s * n_s, length, channels, side, side)
    )
    return PatchSet(stream=SPATIAL, patches=np.ascontiguousarray(patches), grid=n_s)


def slice_temporal(cube) -> PatchSet:
    """Cut a cube into L single-frame patches; patch k is frame k."""
    data = np.asarray(getattr(cube, "data", cube))
    if data.ndim != 4:
        raise ValidationError(f"expected a (L, C, H, W) cube, got {data.shape}")
    return PatchSet(stream=TEMPORAL, patches=data[:, np.newaxis].copy())


def shuffle(ps: PatchSet, rng: np.random.Generator) -> tuple[PatchSet, Permutation]:
    """Reorder patches by a permutation drawn uniformly from ``rng``.

    ``shuffled.patches[slot] == ps.patches[perm.pi[slot]]``.
    """
    pi = rng.permutation(ps.n)
    shuffled = PatchSet(stream=ps.stream, patches=ps.patches[pi], grid=ps.grid)
    return shuffled, Permutation(pi, seed="training-random")


def align_matrix(m: OrderPredictionMatrix, perm: Permutation) -> OrderPredictionMatrix:
    """Reorder rows from slot order to true-position order.

    Output row ``perm.pi[slot]`` is input row ``slot``.
    """
    if m.n != perm.n:
        raise ValidationError(f"matrix is {m.n}x{m.n} but permutation has n={perm.n}")
    return OrderPredictionMatrix(m.m[perm.inverse()], aligned=True)


def align_relation(d, perm: Permutation):
    """Conjugate a pairwise matrix (rows and columns) back to canonical order.

    Works on numpy arrays and torch tensors alike; differentiable for the
    latter. ``out[pi[i], pi[j]] == d[i, j]``.
    """
    inv = perm.inverse()
    return d[inv][:, inv]
