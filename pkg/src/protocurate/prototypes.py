"""Evolving prototype bank: k-means warm-up, Sinkhorn assignment, EMA updates.

The bank holds K centroid vectors in the unified embedding space.  They are
seeded by Lloyd's k-means on a warm-up sample, then tracked online: each
curated mini-batch is transported onto the prototypes under an equipartition
constraint (every prototype receives mass 1/K), the plan's columns give
proximity weights for a fresh centroid estimate, and the bank blends that
estimate in with an exponential moving average.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .embedding import pairwise_sq_distance
from .errors import (
    FormatError,
    InsufficientWarmupError,
    StateError,
    UsageError,
)

PROTO_MAGIC = b"XFICPRO1"


@dataclass
class TransportPlan:
    """Entropic transport plan between samples (rows) and prototypes (columns).

    ``residual`` is the achieved max marginal error; ``converged`` records
    whether it dropped below the requested tolerance within the iteration
    budget.  Callers decide what a non-converged plan means.
    """

    plan: np.ndarray
    residual: float
    converged: bool
    iterations: int

    def hard_assignment(self) -> np.ndarray:
        """Unique cluster per row: argmax of plan mass, ties to smallest column."""
        return np.argmax(self.plan, axis=1)


@dataclass
class PrototypeBank:
    protos: np.ndarray
    ema_alpha: float = 0.1
    warmup_done: bool = False
    update_count: int = 0

    def __post_init__(self) -> None:
        self.protos = np.ascontiguousarray(self.protos, dtype=np.float64)
        if self.protos.ndim != 2:
            raise UsageError("prototypes must form a (K, dim) matrix")
        if not np.all(np.isfinite(self.protos)):
            raise UsageError("prototype vectors must be finite")
        if not (0.0 <= self.ema_alpha <= 1.0):
            raise UsageError("ema_alpha must be in [0, 1]")

    @property
    def k(self) -> int:
        return self.protos.shape[0]

    @property
    def dim(self) -> int:
        return self.protos.shape[1]


def init_kmeans(
    samples: np.ndarray, k: int, max_iters: int = 100, seed: int = 0, ema_alpha: float = 0.1
) -> PrototypeBank:
    """Lloyd's k-means from K distinct seeded starting samples.

    Stops when assignments stabilize or after max_iters sweeps.  A cluster
    that loses all members is re-seeded to the sample farthest from every
    current centroid (ties to smallest row index), so K centroids always
    survive.
    """
    samples = np.ascontiguousarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise UsageError("warm-up samples must form a (n, dim) matrix")
    n = samples.shape[0]
    if k < 1:
        raise UsageError("K must be >= 1")
    if n < k:
        raise InsufficientWarmupError(
            f"k-means warm-up needs at least K={k} samples, got {n}"
        )

    rng = np.random.default_rng(seed)
    centers = samples[rng.choice(n, size=k, replace=False)].copy()

    assign = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iters):
        sq = pairwise_sq_distance(samples, centers)
        new_assign = np.argmin(sq, axis=1)

        # Re-seed empty clusters from the globally farthest unassigned sample.
        counts = np.bincount(new_assign, minlength=k)
        if np.any(counts == 0):
            nearest_sq = sq[np.arange(n), new_assign].copy()
            for empty in np.flatnonzero(counts == 0):
                far = int(np.argmax(nearest_sq))
                centers[empty] = samples[far]
                new_assign[far] = empty
                nearest_sq[far] = -np.inf  # not eligible to re-seed twice
            sq = pairwise_sq_distance(samples, centers)
            new_assign = np.argmin(sq, axis=1)

        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = samples[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)

    return PrototypeBank(protos=centers, ema_alpha=ema_alpha, warmup_done=True)


def sinkhorn_plan(
    embeddings: np.ndarray,
    bank: PrototypeBank,
    epsilon: float = 0.05,
    max_iters: int = 50000,
    tol: float = 1e-6,
) -> TransportPlan:
    """Equipartition transport of n samples onto K prototypes.

    Cost is squared Euclidean distance; marginals are uniform (rows 1/n,
    columns 1/K).  Runs log-domain scaling iterations, so tiny epsilon does
    not underflow.  Never raises on non-convergence; the plan carries a
    converged flag and the achieved residual.
    """
    _require_ready(bank)
    cost = pairwise_sq_distance(np.asarray(embeddings, dtype=np.float64), bank.protos)
    return sinkhorn_from_cost(cost, epsilon=epsilon, max_iters=max_iters, tol=tol)


def sinkhorn_from_cost(
    cost: np.ndarray, epsilon: float = 0.05, max_iters: int = 50000, tol: float = 1e-6
) -> TransportPlan:
    """Sinkhorn on an explicit cost matrix (uniform marginals 1/n and 1/K)."""
    if epsilon <= 0.0:
        raise UsageError("epsilon must be > 0")
    if max_iters < 1:
        raise UsageError("max_iters must be >= 1")
    cost = np.asarray(cost, dtype=np.float64)
    n, k = cost.shape
    if n < 1 or k < 1:
        raise UsageError("cost matrix must be nonempty")

    log_r = -np.log(n)  # log target row sum
    log_c = -np.log(k)  # log target column sum
    log_kernel = -cost / epsilon
    f = np.zeros(n)  # log row scalings
    g = np.zeros(k)  # log column scalings

    def residual_of(log_plan: np.ndarray) -> float:
        plan = np.exp(log_plan)
        row_err = np.max(np.abs(plan.sum(axis=1) - 1.0 / n))
        col_err = np.max(np.abs(plan.sum(axis=0) - 1.0 / k))
        return float(max(row_err, col_err))

    converged = False
    iterations = 0
    for it in range(1, max_iters + 1):
        iterations = it
        # Row scaling makes row sums exact; then column scaling makes column
        # sums exact, perturbing rows, so the row residual after both is the
        # convergence measure.
        f = log_r - _logsumexp(log_kernel + g[None, :], axis=1)
        g = log_c - _logsumexp(log_kernel + f[:, None], axis=0)
        log_plan = log_kernel + f[:, None] + g[None, :]
        res = residual_of(log_plan)
        if res < tol:
            converged = True
            break

    log_plan = log_kernel + f[:, None] + g[None, :]
    return TransportPlan(
        plan=np.exp(log_plan),
        residual=residual_of(log_plan),
        converged=converged,
        iterations=iterations,
    )


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    peak = np.max(a, axis=axis, keepdims=True)
    out = peak + np.log(np.sum(np.exp(a - peak), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def update_prototypes(
    plan: TransportPlan, embeddings: np.ndarray, bank: PrototypeBank
) -> list[int]:
    """EMA-blend each prototype toward its plan-weighted embedding average.

    Candidate p_hat_k is the column-k-normalized weighted mean of the
    embeddings; p_k <- (1-alpha) p_k + alpha p_hat_k.  A column carrying no
    mass leaves its prototype untouched; the list of skipped indices is
    returned.  Mutates the bank in place.
    """
    _require_ready(bank)
    z = np.asarray(embeddings, dtype=np.float64)
    p = np.asarray(plan.plan, dtype=np.float64)
    if p.shape != (z.shape[0], bank.k):
        raise UsageError(
            f"plan shape {p.shape} does not match {z.shape[0]} samples x K={bank.k}"
        )

    mass = p.sum(axis=0)
    skipped: list[int] = []
    alpha = bank.ema_alpha
    for j in range(bank.k):
        if mass[j] <= 0.0:
            skipped.append(j)
            continue
        candidate = (p[:, j] @ z) / mass[j]
        bank.protos[j] = (1.0 - alpha) * bank.protos[j] + alpha * candidate
    bank.update_count += 1
    return skipped


def nearest_prototype(z: np.ndarray, bank: PrototypeBank) -> tuple[int, float]:
    """Index and Euclidean distance of the closest prototype (ties: smallest index)."""
    _require_ready(bank)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (bank.dim,):
        raise UsageError(f"expected a vector of dimension {bank.dim}, got {z.shape}")
    d = np.linalg.norm(bank.protos - z[None, :], axis=1)
    idx = int(np.argmin(d))
    return idx, float(d[idx])


def nearest_prototype_batch(z: np.ndarray, bank: PrototypeBank) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized nearest_prototype over rows; same tie rule (argmin is first min)."""
    _require_ready(bank)
    sq = pairwise_sq_distance(np.asarray(z, dtype=np.float64), bank.protos)
    idx = np.argmin(sq, axis=1)
    return idx, np.sqrt(sq[np.arange(sq.shape[0]), idx])


def _require_ready(bank: PrototypeBank) -> None:
    if not bank.warmup_done:
        raise StateError("prototype bank not initialized: run the k-means warm-up first")


def save_bank(path, bank: PrototypeBank) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_bank(bank))


def load_bank(path) -> PrototypeBank:
    with open(path, "rb") as fh:
        return decode_bank(fh.read())


def encode_bank(bank: PrototypeBank) -> bytes:
    head = PROTO_MAGIC + struct.pack("<2I", bank.k, bank.dim)
    body = bank.protos.astype("<f8").tobytes()
    tail = struct.pack("<dQ", bank.ema_alpha, bank.update_count)
    return head + body + tail


def decode_bank(data: bytes) -> PrototypeBank:
    if len(data) < 16:
        raise FormatError(f"file too short for prototype header: {len(data)} bytes", offset=0)
    if data[:8] != PROTO_MAGIC:
        raise FormatError(f"bad magic {data[:8]!r}, expected {PROTO_MAGIC!r}", offset=0)
    k, dim = struct.unpack_from("<2I", data, 8)
    expected = 16 + 8 * k * dim + 16
    if len(data) != expected:
        raise FormatError(
            f"K={k}, dim={dim} implies {expected} bytes, file has {len(data)}",
            offset=min(len(data), expected),
        )
    protos = (
        np.frombuffer(data, dtype="<f8", count=k * dim, offset=16)
        .reshape(k, dim)
        .astype(np.float64)
    )
    ema_alpha, update_count = struct.unpack_from("<dQ", data, 16 + 8 * k * dim)
    return PrototypeBank(
        protos=protos,
        ema_alpha=float(ema_alpha),
        warmup_done=True,
        update_count=int(update_count),
    )
