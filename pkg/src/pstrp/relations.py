"""Ground-truth inter-patch relation matrices.

Spatial patches are compared by the Canberra distance between opposing
1-pixel edge strips (each strip concatenated across all L frames and
channels, four direction pairs per patch pair). Temporal patches are
compared by cosine distance over their flattened pixels. Both matrices
are normalized into [0, 1], symmetric, and zero on the diagonal, so the
two regression targets share a magnitude scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .patching import SPATIAL, TEMPORAL, PatchSet

CANBERRA_SPATIAL = "canberra_spatial"
COSINE_TEMPORAL = "cosine_temporal"

# direction -> (row/col axis slice of this patch, opposing slice of the other)
_EDGE_PAIRS = (
    ("up", "down"),
    ("down", "up"),
    ("left", "right"),
    ("right", "left"),
)


@dataclass
class RelationMatrix:
    """Symmetric zero-diagonal n x n matrix of pairwise patch distances in [0,1]."""

    d: np.ndarray
    kind: str

    def __post_init__(self):
        d = np.asarray(self.d, dtype=np.float64)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ValidationError(f"relation matrix must be square, got {d.shape}")
        if not np.array_equal(d, d.T):
            raise ValidationError("relation matrix must be exactly symmetric")
        if np.any(np.diag(d) != 0.0):
            raise ValidationError("relation matrix diagonal must be zero")
        if d.size and (d.min() < 0.0 or d.max() > 1.0):
            raise ValidationError("relation matrix entries must lie in [0, 1]")
        self.d = d

    @property
    def n(self) -> int:
        return self.d.shape[0]


def edge_strip(patches: np.ndarray, direction: str) -> np.ndarray:
    """1-pixel border strips of a (n, L, C, h, w) patch stack.

    Returns (n, L*C*edge_len) with the temporal axis folded into the vector,
    matching the edge-vector definition used for the Canberra targets.
    """
    if direction == "up":
        strip = patches[:, :, :, 0, :]
    elif direction == "down":
        strip = patches[:, :, :, -1, :]
    elif direction == "left":
        strip = patches[:, :, :, :, 0]
    elif direction == "right":
        strip = patches[:, :, :, :, -1]
    else:
        raise ValidationError(f"unknown edge direction {direction!r}")
    return strip.reshape(patches.shape[0], -1)


def canberra_matrix(ps: PatchSet) -> RelationMatrix:
    """Mean elementwise Canberra distance between opposing edge strips.

    For each unordered patch pair the four direction pairs (up/down,
    down/up, left/right, right/left) contribute |a_k - b_k| / (|a_k| + |b_k|)
    terms, with 0/0 counted as 0; the grand total is divided by the number
    of accumulated terms so every entry lands in [0, 1].
    """
    if ps.stream != SPATIAL:
        raise ValidationError("canberra_matrix expects the spatial stream")
    n = ps.n
    patches = ps.patches.astype(np.float64, copy=False)
    strips = {side: edge_strip(patches, side) for side in ("up", "down", "left", "right")}
    iu, ju = np.triu_indices(n, k=1)

    totals = np.zeros(iu.size, dtype=np.float64)
    terms = 0
    for side, opposite in _EDGE_PAIRS:
        a = strips[side][iu]
        b = strips[opposite][ju]
        num = np.abs(a - b)
        den = np.abs(a) + np.abs(b)
        ratio = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
        totals += ratio.sum(axis=1)
        terms += a.shape[1]

    d = np.zeros((n, n), dtype=np.float64)
    d[iu, ju] = totals / terms
    d[ju, iu] = d[iu, ju]
    return RelationMatrix(d, kind=CANBERRA_SPATIAL)


def cosine_matrix(ps: PatchSet) -> RelationMatrix:
    """Cosine distance (1 - similarity) / 2 between flattened frame patches.

    A zero-norm patch is treated as similarity 0 against anything, giving
    distance 0.5; the diagonal stays 0.
    """
    if ps.stream != TEMPORAL:
        raise ValidationError("cosine_matrix expects the temporal stream")
    n = ps.n
    vectors = ps.patches.reshape(n, -1).astype(np.float64, copy=False)
    norms = np.sqrt(np.einsum("ij,ij->i", vectors, vectors))

    d = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            if norms[i] > 0.0 and norms[j] > 0.0:
                sim = float(vectors[i] @ vectors[j]) / (norms[i] * norms[j])
            else:
                sim = 0.0
            d[i, j] = d[j, i] = (1.0 - sim) / 2.0
    return RelationMatrix(d, kind=COSINE_TEMPORAL)
