"""Unified multimodal embedding construction and distance geometry.

A paired sample carries one image-side and one text-side vector.  Both
halves are L2-normalized and concatenated into a single vector of fixed
norm sqrt(2); all curation distances are Euclidean in that space.  With
fixed-norm vectors, squared Euclidean distance is an affine function of
the dot product, so distance ranking coincides with reversed cosine
ranking and the metric choice is behaviorally neutral for selection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateVectorError, UsageError

CURATION_SPACES = ("concat", "image_only", "text_only")

# Rows of a pairwise-distance computation are chunked to bound peak memory;
# results are independent per row so chunking never changes the output.
_CHUNK_ROWS = 1024


@dataclass(frozen=True)
class EmbeddingPair:
    """One sample: stable id, image-side vector, text-side vector, optional labels.

    ``labels`` is a boolean vector over the corpus label classes (one-hot or
    multi-hot), or None for label-free corpora.
    """

    id: int
    img: np.ndarray
    txt: np.ndarray
    labels: np.ndarray | None = None


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm, preserving direction.

    Raises DegenerateVectorError for all-zero or non-finite input: a vector
    without a direction cannot participate in the curation geometry.
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise DegenerateVectorError("vector has non-finite entries")
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise DegenerateVectorError("cannot normalize an all-zero vector")
    return v / norm


def normalize_rows(mat: np.ndarray) -> np.ndarray:
    """Row-wise l2_normalize for a 2-D batch, with the same degeneracy checks."""
    mat = np.asarray(mat, dtype=np.float64)
    if not np.all(np.isfinite(mat)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(mat), axis=1))[0])
        raise DegenerateVectorError(f"row {bad} has non-finite entries")
    norms = np.linalg.norm(mat, axis=1)
    if np.any(norms == 0.0):
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise DegenerateVectorError(f"row {bad} is all-zero")
    return mat / norms[:, None]


def unify(pair: EmbeddingPair, mode: str = "concat") -> np.ndarray:
    """Build the curation-space vector for one sample.

    ``concat`` concatenates the two normalized halves (total norm sqrt(2));
    ``image_only`` / ``text_only`` are the ablation modes returning a single
    normalized half (total norm 1).
    """
    return unify_batch(
        np.asarray(pair.img, dtype=np.float64)[None, :],
        np.asarray(pair.txt, dtype=np.float64)[None, :],
        mode,
    )[0]


def unify_batch(img: np.ndarray, txt: np.ndarray, mode: str = "concat") -> np.ndarray:
    """Vectorized `unify` over matching (n, d_img) and (n, d_txt) batches."""
    if mode not in CURATION_SPACES:
        raise UsageError(f"unknown curation space {mode!r}; expected one of {CURATION_SPACES}")
    if mode == "image_only":
        return normalize_rows(img)
    if mode == "text_only":
        return normalize_rows(txt)
    return np.hstack([normalize_rows(img), normalize_rows(txt)])


def pairwise_distance(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Euclidean distance matrix between the rows of ``a`` and ``b``.

    Pass ``b=None`` for the self-distance case, which guarantees an exactly
    symmetric result with an exactly zero diagonal.  Computed blockwise via
    the Gram expansion ||x-y||^2 = ||x||^2 + ||y||^2 - 2<x,y>, clamped at
    zero before the square root.
    """
    a = np.asarray(a, dtype=np.float64)
    self_mode = b is None
    b = a if self_mode else np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise UsageError("pairwise_distance expects 2-D arrays of row vectors")
    if a.shape[1] != b.shape[1]:
        raise UsageError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")

    sq = pairwise_sq_distance(a, None if self_mode else b)
    return np.sqrt(sq)


def pairwise_sq_distance(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Squared-distance variant of `pairwise_distance` (same conventions)."""
    a = np.asarray(a, dtype=np.float64)
    self_mode = b is None
    b = a if self_mode else np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise UsageError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")

    if self_mode:
        # One Gram product, symmetrized, with norms read off its own diagonal
        # so that (i,j) and (j,i) share bits and the diagonal cancels to
        # exactly zero.
        gram = a @ a.T
        gram = 0.5 * (gram + gram.T)
        d_sq = np.diagonal(gram)
        sq = d_sq[:, None] + d_sq[None, :] - 2.0 * gram
        return np.maximum(sq, 0.0)

    b_sq = np.einsum("ij,ij->i", b, b)
    a_sq = np.einsum("ij,ij->i", a, a)
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.float64)
    for start in range(0, a.shape[0], _CHUNK_ROWS):
        stop = min(start + _CHUNK_ROWS, a.shape[0])
        block = a_sq[start:stop, None] + b_sq[None, :] - 2.0 * (a[start:stop] @ b.T)
        out[start:stop] = np.maximum(block, 0.0)
    return out
